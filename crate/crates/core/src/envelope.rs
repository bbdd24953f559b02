//! Parametric envelope of a single arriving phase.
//!
//! The envelope is a linear onset followed by a poly-exponential decay:
//!
//! ```text
//! g(t) = 0                                   t <= tau
//!        alpha (t-tau)/rho                   tau < t <= tau+rho
//!        alpha (t-tau+1)^-gamma e^-beta(t-tau)   otherwise
//! ```
//!
//! The form is implemented literally, including its discontinuity at
//! `t = tau+rho`: the onset branch ends at `alpha` while the decay branch
//! starts at `alpha (rho+1)^-gamma e^(-beta rho)`. See the regression test
//! `peak_discontinuity_is_preserved`.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Envelope description of one arrival: onset time, rise time, amplitude,
/// and the two decay rates (peak and coda).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalParams {
    /// Arrival (onset) time, seconds since epoch.
    pub tau: f64,
    /// Rise time, seconds; strictly positive.
    pub rho: f64,
    /// Peak amplitude; strictly positive.
    pub alpha: f64,
    /// Polynomial peak decay rate; nonnegative.
    pub gamma: f64,
    /// Exponential coda decay rate; nonnegative.
    pub beta: f64,
}

impl ArrivalParams {
    pub fn new(tau: f64, rho: f64, alpha: f64, gamma: f64, beta: f64) -> Result<Self> {
        let p = ArrivalParams {
            tau,
            rho,
            alpha,
            gamma,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::domain("tau must be finite"));
        }
        if !(self.rho > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::domain("rho and alpha must be strictly positive"));
        }
        if self.gamma < 0.0 || self.beta < 0.0 {
            return Err(Error::domain("gamma and beta must be nonnegative"));
        }
        Ok(())
    }

    /// Shape parameters in the log space used by the GP models.
    pub fn log_shape(&self) -> [f64; 4] {
        [
            self.rho.ln(),
            self.alpha.ln(),
            self.gamma.ln(),
            self.beta.ln(),
        ]
    }

    /// Rebuild from onset time plus log-space shape parameters.
    pub fn from_log_shape(tau: f64, log_shape: [f64; 4]) -> Result<Self> {
        ArrivalParams::new(
            tau,
            log_shape[0].exp(),
            log_shape[1].exp(),
            log_shape[2].exp(),
            log_shape[3].exp(),
        )
    }
}

/// Envelope value at time `t`.
pub fn envelope_value(t: f64, theta: &ArrivalParams) -> f64 {
    let dt = t - theta.tau;
    if dt <= 0.0 {
        0.0
    } else if dt <= theta.rho {
        theta.alpha * dt / theta.rho
    } else {
        theta.alpha * (dt + 1.0).powf(-theta.gamma) * (-theta.beta * dt).exp()
    }
}

/// Sampled envelope: element `i` is `envelope_value(start_time + i/rate_hz)`.
pub fn envelope_series(
    theta: &ArrivalParams,
    start_time: f64,
    n_samples: usize,
    rate_hz: f64,
) -> Vec<f64> {
    assert!(rate_hz > 0.0, "sample rate must be positive");
    (0..n_samples)
        .map(|i| envelope_value(start_time + i as f64 / rate_hz, theta))
        .collect()
}

/// Duration (seconds past tau) over which the envelope exceeds `floor`,
/// capped at `max_dur`. The signal model treats the envelope as zero beyond
/// this point so that likelihood evaluations stay local; `floor` is chosen
/// well below background noise.
pub fn support_duration(theta: &ArrivalParams, floor: f64, max_dur: f64) -> f64 {
    debug_assert!(floor > 0.0 && max_dur > 0.0);
    if envelope_value(theta.tau + max_dur, theta) >= floor {
        return max_dur;
    }
    // decay branch is monotone decreasing past its peak, so bisect on
    // [peak location, max_dur]
    let mut lo = theta.rho.min(max_dur);
    if theta.gamma > 0.0 {
        // with gamma > 0 the decay branch peaks at its start
        lo = lo.min(theta.rho);
    }
    if envelope_value(theta.tau + lo, theta) < floor {
        return lo;
    }
    let mut hi = max_dur;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if envelope_value(theta.tau + mid, theta) >= floor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onset_branch() {
        let th = ArrivalParams::new(0.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(envelope_value(0.5, &th), 1.0);
        assert_eq!(envelope_value(0.0, &th), 0.0);
        assert_eq!(envelope_value(-3.0, &th), 0.0);
    }

    #[test]
    fn zero_at_tau_for_any_params() {
        let th = ArrivalParams::new(123.4, 0.7, 9.0, 2.0, 0.3).unwrap();
        assert_eq!(envelope_value(th.tau, &th), 0.0);
    }

    #[test]
    fn decay_branch_value() {
        let th = ArrivalParams::new(0.0, 1.0, 1.0, 1.0, 0.5).unwrap();
        let v = envelope_value(2.0, &th);
        let expect = (3.0f64).powf(-1.0) * (-1.0f64).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.12263).abs() < 1e-5);
    }

    #[test]
    fn peak_discontinuity_is_preserved() {
        // Eq. form is discontinuous at tau+rho when gamma or beta is nonzero.
        let th = ArrivalParams::new(0.0, 2.0, 1.0, 1.0, 0.2).unwrap();
        let before = envelope_value(2.0, &th);
        let after = envelope_value(2.0 + 1e-12, &th);
        assert_eq!(before, 1.0);
        let decay_start = (3.0f64).powf(-1.0) * (-0.4f64).exp();
        assert!((after - decay_start).abs() < 1e-9);
        assert!((before - after).abs() > 0.5);
    }

    #[test]
    fn series_matches_pointwise_bitwise() {
        let th = ArrivalParams::new(3.2, 0.8, 4.0, 1.5, 0.1).unwrap();
        let s = envelope_series(&th, 1.0, 200, 10.0);
        for (i, v) in s.iter().enumerate() {
            let direct = envelope_value(1.0 + i as f64 / 10.0, &th);
            assert_eq!(*v, direct);
        }
    }

    #[test]
    fn series_empty_and_pre_onset() {
        let th = ArrivalParams::new(100.0, 1.0, 1.0, 0.0, 0.1).unwrap();
        assert!(envelope_series(&th, 0.0, 0, 10.0).is_empty());
        let s = envelope_series(&th, 0.0, 50, 10.0);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn onset_ramp_values() {
        let th = ArrivalParams::new(0.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        let s = envelope_series(&th, 0.0, 11, 10.0);
        for (i, v) in s.iter().enumerate() {
            // recompute each sample by hand: ramp slope alpha/rho = 2
            let t = i as f64 / 10.0;
            let expect = if t <= 0.0 {
                0.0
            } else if t <= 1.0 {
                2.0 * t
            } else {
                2.0
            };
            assert!((v - expect).abs() < 1e-12, "sample {i}");
        }
        assert!((s[10] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grids_agree_at_shared_points() {
        let th = ArrivalParams::new(0.33, 0.9, 3.0, 0.7, 0.25).unwrap();
        let coarse = envelope_series(&th, 0.0, 100, 10.0);
        let fine = envelope_series(&th, 0.0, 200, 20.0);
        for i in 0..100 {
            assert_eq!(coarse[i], fine[2 * i]);
        }
    }

    #[test]
    fn strictly_decreasing_past_peak_when_beta_positive() {
        let th = ArrivalParams::new(0.0, 0.5, 2.0, 0.3, 0.4).unwrap();
        let s = envelope_series(&th, 0.6, 500, 25.0);
        for w in s.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn decays_to_zero() {
        let th = ArrivalParams::new(0.0, 1.0, 5.0, 0.0, 0.05).unwrap();
        assert!(envelope_value(1e4, &th) < 1e-200);
        let th2 = ArrivalParams::new(0.0, 1.0, 5.0, 3.0, 0.0).unwrap();
        assert!(envelope_value(1e6, &th2) < 1e-12);
    }

    #[test]
    fn support_duration_brackets_floor() {
        let th = ArrivalParams::new(0.0, 1.0, 2.0, 0.5, 0.1).unwrap();
        let dur = support_duration(&th, 1e-4, 600.0);
        assert!(dur < 600.0);
        assert!(envelope_value(th.tau + dur - 1e-6, &th) >= 1e-4 * 0.99);
        assert!(envelope_value(th.tau + dur + 1e-6, &th) <= 1e-4 * 1.01);
        // non-decaying envelope saturates the cap
        let flat = ArrivalParams::new(0.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(support_duration(&flat, 1e-4, 600.0), 600.0);
    }

    #[test]
    fn log_shape_roundtrip() {
        let th = ArrivalParams::new(5.0, 0.8, 4.0, 1.5, 0.1).unwrap();
        let back = ArrivalParams::from_log_shape(th.tau, th.log_shape()).unwrap();
        assert!((back.rho - th.rho).abs() < 1e-12);
        assert!((back.alpha - th.alpha).abs() < 1e-12);
        assert!((back.gamma - th.gamma).abs() < 1e-12);
        assert!((back.beta - th.beta).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ArrivalParams::new(0.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(ArrivalParams::new(0.0, 1.0, -1.0, 0.0, 0.0).is_err());
        assert!(ArrivalParams::new(0.0, 1.0, 1.0, -0.1, 0.0).is_err());
        assert!(ArrivalParams::new(f64::NAN, 1.0, 1.0, 0.0, 0.0).is_err());
    }
}
