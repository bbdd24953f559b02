//! Reversible-jump MCMC over world states given observed signals.
//!
//! A chain owns one mutable [`WorldState`] plus per-station likelihood
//! caches. A sweep cycles single-site random-walk Metropolis-Hastings moves
//! over envelope parameters, noise parameters, and event attributes;
//! dimension-changing moves create and destroy unassociated arrivals and
//! events (with Hough-transform and waveform-correlation birth proposals),
//! and composed birth/death chains implement split, merge, and repropose.

mod custom;
mod driver;
mod hough;
mod jump;
mod likelihood;
mod propose;
mod scoring;
pub mod sweep;

pub use custom::custom_moves;
pub use driver::{init_noise, run_chain, run_chain_from, ChainRunResult};
pub use hough::{hough_propose, HoughGeom, HoughGrid};
pub use jump::{
    event_birth_death, split_merge_repropose, unassociated_birth_death, CompositeKind,
    OnsetProposal,
};
#[doc(hidden)]
pub use jump::testing as jump_testing;
pub use likelihood::Chain;
pub use propose::{correlation_propose, max_normalized_xcorr, CorrelationProposal};
pub use scoring::{merge_chains, score_events, ScoredEvent};
pub use sweep::{mh_sweep, SweepStats};

use serde::{Deserialize, Serialize};

use crate::envelope::ArrivalParams;
use crate::geophys::{
    great_circle_km, predict_log_amplitude, predict_travel_time, AmplitudeModel, PhaseId,
    PhaseSet, Station, VelocityModel,
};
use crate::gp::GpInput;
use crate::numeric::normal_log_pdf;
use crate::signalmodel::SignalConfig;
use crate::training::{GpSet, StationNoisePrior, Template};
use crate::wavelet::WaveletBasis;
use crate::worldmodel::{Event, EventPrior};
use crate::Result;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Fixed Gaussian prior over unassociated-arrival envelope parameters, in
/// the (tau, log-shape) parameterization. Onset times are uniform over the
/// signal window; arrival counts per station follow a Poisson process with
/// rate `rate_per_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnassocPrior {
    pub rate_per_s: f64,
    pub log_rho_mean: f64,
    pub log_rho_sd: f64,
    pub log_alpha_mean: f64,
    pub log_alpha_sd: f64,
    pub log_gamma_mean: f64,
    pub log_gamma_sd: f64,
    pub log_beta_mean: f64,
    pub log_beta_sd: f64,
}

impl Default for UnassocPrior {
    fn default() -> Self {
        UnassocPrior {
            rate_per_s: 1.0 / 600.0,
            log_rho_mean: 0.0,
            log_rho_sd: 0.7,
            log_alpha_mean: 0.0,
            log_alpha_sd: 1.5,
            log_gamma_mean: -0.7,
            log_gamma_sd: 0.7,
            log_beta_mean: -2.3,
            log_beta_sd: 0.7,
        }
    }
}

impl UnassocPrior {
    /// Log prior density of one arrival's parameters in the
    /// (tau, log rho, log alpha, log gamma, log beta) measure, including the
    /// uniform 1/T onset-time factor.
    pub fn log_density(&self, theta: &ArrivalParams, window: (f64, f64)) -> f64 {
        if theta.tau < window.0 || theta.tau > window.1 {
            return f64::NEG_INFINITY;
        }
        let [lr, la, lg, lb] = theta.log_shape();
        -((window.1 - window.0).ln())
            + normal_log_pdf(lr, self.log_rho_mean, self.log_rho_sd * self.log_rho_sd)
            + normal_log_pdf(la, self.log_alpha_mean, self.log_alpha_sd * self.log_alpha_sd)
            + normal_log_pdf(lg, self.log_gamma_mean, self.log_gamma_sd * self.log_gamma_sd)
            + normal_log_pdf(lb, self.log_beta_mean, self.log_beta_sd * self.log_beta_sd)
    }

    pub fn sample_shape(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        let z = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        [
            self.log_rho_mean + self.log_rho_sd * z(rng),
            self.log_alpha_mean + self.log_alpha_sd * z(rng),
            self.log_gamma_mean + self.log_gamma_sd * z(rng),
            self.log_beta_mean + self.log_beta_sd * z(rng),
        ]
    }

    pub fn sample(&self, window: (f64, f64), rng: &mut ChaCha8Rng) -> ArrivalParams {
        let tau = rng.random_range(window.0..window.1);
        let shape = self.sample_shape(rng);
        ArrivalParams::from_log_shape(tau, shape).expect("log-space sample is valid")
    }
}

/// Hough birth-proposal grid resolution and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughConfig {
    pub lon_bin_deg: f64,
    pub lat_bin_deg: f64,
    pub depth_bins: usize,
    pub time_bin_s: f64,
    /// Softmax temperature over bin scores.
    pub temperature: f64,
    /// Per-associated-arrival score bonus.
    pub hit_bonus: f64,
    /// Magnitude proposal spread around the per-bin estimate.
    pub sigma_mb: f64,
}

impl Default for HoughConfig {
    fn default() -> Self {
        HoughConfig {
            lon_bin_deg: 2.0,
            lat_bin_deg: 2.0,
            depth_bins: 1,
            time_bin_s: 10.0,
            temperature: 1.0,
            hit_bonus: 4.0,
            sigma_mb: 0.5,
        }
    }
}

/// Per-move-type counts in one sweep round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoveSchedule {
    pub unassoc_birth_death: usize,
    pub event_birth_death: usize,
    pub split_merge: usize,
    pub repropose: usize,
    pub custom: usize,
}

impl Default for MoveSchedule {
    fn default() -> Self {
        MoveSchedule {
            unassoc_birth_death: 10,
            event_birth_death: 4,
            split_merge: 2,
            repropose: 1,
            custom: 2,
        }
    }
}

/// Full chain configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Sweep rounds per chain.
    pub sweeps: usize,
    pub burn_in_frac: f64,
    /// Random-walk step sizes.
    pub step_tau_s: f64,
    pub step_log_shape: f64,
    pub step_mu: f64,
    pub step_log_sigma2: f64,
    pub step_phi: f64,
    pub step_loc_km: f64,
    pub step_depth_km: f64,
    pub step_time_s: f64,
    pub step_mb: f64,
    pub unassoc: UnassocPrior,
    pub hough: HoughConfig,
    /// Mixture weight of the Hough proposal (vs correlation) in births.
    pub hough_weight: f64,
    /// Association gate around predicted arrival times, seconds.
    pub assoc_gate_s: f64,
    /// Spread of the association choice weights.
    pub assoc_sigma_s: f64,
    /// Relative weight of creating a fresh arrival in the birth plan.
    pub new_arrival_weight: f64,
    /// Death-plan probability of keeping an arrival as unassociated.
    pub p_keep: f64,
    /// Auxiliary MH steps adapting parent-sampled envelopes in births.
    pub n_aux: usize,
    pub moves: MoveSchedule,
    /// Correlation-proposal spreads.
    pub corr_sigma_loc_km: f64,
    pub corr_sigma_depth_km: f64,
    pub corr_sigma_t_s: f64,
    pub corr_sigma_mb: f64,
    /// Correlation softmax sharpness.
    pub corr_scale: f64,
    /// Number of chains per block.
    pub chains: usize,
    /// Block length for parallel inference, seconds.
    pub block_s: f64,
    /// Posterior-sample clustering gate for scoring.
    pub score_gate_deg: f64,
    pub score_gate_s: f64,
    /// Replace wavelet-coefficient GP predictions with the standard-normal
    /// prior (diagnostic ablation).
    pub ablate_wavelet_gp: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            sweeps: 2000,
            burn_in_frac: 0.2,
            step_tau_s: 0.25,
            step_log_shape: 0.25,
            step_mu: 0.02,
            step_log_sigma2: 0.2,
            step_phi: 0.05,
            step_loc_km: 20.0,
            step_depth_km: 40.0,
            step_time_s: 2.0,
            step_mb: 0.2,
            unassoc: UnassocPrior::default(),
            hough: HoughConfig::default(),
            hough_weight: 0.5,
            assoc_gate_s: 15.0,
            assoc_sigma_s: 5.0,
            new_arrival_weight: 0.25,
            p_keep: 0.5,
            n_aux: 20,
            moves: MoveSchedule::default(),
            corr_sigma_loc_km: 10.0,
            corr_sigma_depth_km: 30.0,
            corr_sigma_t_s: 2.0,
            corr_sigma_mb: 0.3,
            corr_scale: 10.0,
            chains: 3,
            block_s: 7200.0,
            score_gate_deg: 2.0,
            score_gate_s: 50.0,
            ablate_wavelet_gp: false,
        }
    }
}

/// Immutable model context shared by all moves of a chain.
pub struct ModelContext<'a> {
    pub stations: &'a [Station],
    pub phases: &'a PhaseSet,
    pub vm: &'a VelocityModel,
    pub am: &'a AmplitudeModel,
    /// Event prior over the inference window; times are relative to
    /// `window_start`.
    pub prior: &'a EventPrior,
    /// Epoch time of the window origin.
    pub window_start: f64,
    pub basis: &'a WaveletBasis,
    pub sig_cfg: &'a SignalConfig,
    pub gp: Option<&'a GpSet>,
    pub noise_priors: &'a [StationNoisePrior],
    pub templates: &'a [Template],
    pub ablate_wavelet_gp: bool,
}

/// Fallback deviations around the physics means when no GP is trained.
const FALLBACK_TAU_SD: f64 = 2.0;
const FALLBACK_SHAPE_SD: f64 = 0.7;

impl<'a> ModelContext<'a> {
    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    /// Event prior density in window-relative time.
    pub fn event_log_prior(&self, e: &Event) -> f64 {
        let mut rel = *e;
        rel.time -= self.window_start;
        self.prior.log_density_event(&rel)
    }

    pub fn sample_event(&self, rng: &mut ChaCha8Rng) -> Event {
        let mut e = self.prior.sample_event(rng);
        e.time += self.window_start;
        e
    }

    pub fn gp_input(&self, event: &Event, station: usize) -> GpInput {
        let st = &self.stations[station];
        GpInput {
            lon: event.lon,
            lat: event.lat,
            mb: event.mb,
            dist_km: great_circle_km(event.lon, event.lat, st.lon, st.lat).max(1.0),
        }
    }

    /// Prior (mean, var) per theta output of an associated arrival:
    /// (tau, log rho, log alpha, log gamma, log beta).
    pub fn theta_prior_moments(
        &self,
        event: &Event,
        station: usize,
        phase: PhaseId,
    ) -> Result<[(f64, f64); 5]> {
        let st = &self.stations[station];
        let tau_bar = predict_travel_time(event, st, phase, self.vm)?;
        let input = self.gp_input(event, station);
        let log_amp_bar = {
            // clamp the event-station distance away from zero for the mean
            let mut ev = *event;
            if great_circle_km(ev.lon, ev.lat, st.lon, st.lat) < 1.0 {
                ev.lat = (ev.lat + 0.01).clamp(-90.0, 90.0);
            }
            predict_log_amplitude(&ev, st, phase, self.am)?
        };
        if let Some(gp) = self.gp {
            let models = gp.models(station, phase);
            Ok([
                models.tau.predict(&input, tau_bar),
                models.log_rho.predict(&input, 0.0),
                models.log_alpha.predict(&input, log_amp_bar),
                models.log_gamma.predict(&input, 0.0),
                models.log_beta.predict(&input, 0.0),
            ])
        } else {
            let ua = UnassocPrior::default();
            Ok([
                (tau_bar, FALLBACK_TAU_SD * FALLBACK_TAU_SD),
                (ua.log_rho_mean, FALLBACK_SHAPE_SD * FALLBACK_SHAPE_SD),
                (log_amp_bar, FALLBACK_SHAPE_SD * FALLBACK_SHAPE_SD),
                (ua.log_gamma_mean, FALLBACK_SHAPE_SD * FALLBACK_SHAPE_SD),
                (ua.log_beta_mean, FALLBACK_SHAPE_SD * FALLBACK_SHAPE_SD),
            ])
        }
    }

    /// Log prior of an associated arrival's theta under the GP prediction,
    /// in the (tau, log-shape) measure.
    pub fn assoc_theta_log_prior(
        &self,
        theta: &ArrivalParams,
        event: &Event,
        station: usize,
        phase: PhaseId,
    ) -> Result<f64> {
        let m = self.theta_prior_moments(event, station, phase)?;
        let [lr, la, lg, lb] = theta.log_shape();
        Ok(normal_log_pdf(theta.tau, m[0].0, m[0].1)
            + normal_log_pdf(lr, m[1].0, m[1].1)
            + normal_log_pdf(la, m[2].0, m[2].1)
            + normal_log_pdf(lg, m[3].0, m[3].1)
            + normal_log_pdf(lb, m[4].0, m[4].1))
    }

    /// Parent-sample theta from the associated prior.
    pub fn sample_assoc_theta(
        &self,
        event: &Event,
        station: usize,
        phase: PhaseId,
        rng: &mut ChaCha8Rng,
    ) -> Result<ArrivalParams> {
        let m = self.theta_prior_moments(event, station, phase)?;
        let draw = |rng: &mut ChaCha8Rng, (mean, var): (f64, f64)| -> f64 {
            mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        };
        let tau = draw(rng, m[0]);
        let shape = [draw(rng, m[1]), draw(rng, m[2]), draw(rng, m[3]), draw(rng, m[4])];
        Ok(ArrivalParams::from_log_shape(tau, shape).expect("log-space sample is valid"))
    }

    /// Coefficient prior (means, vars) for an associated arrival; the
    /// standard normal when no GP is available or wavelet GPs are ablated.
    pub fn coeff_prior(
        &self,
        event: &Event,
        station: usize,
        phase: PhaseId,
    ) -> (Vec<f64>, Vec<f64>) {
        let c = self.basis.coeff_len();
        if self.ablate_wavelet_gp {
            return (vec![0.0; c], vec![1.0; c]);
        }
        match self.gp {
            Some(gp) => {
                let input = self.gp_input(event, station);
                let models = gp.models(station, phase);
                let mut mean = vec![0.0; c];
                let mut var = vec![1.0; c];
                for (i, m) in models.coeffs.iter().enumerate() {
                    let (mu, v) = m.predict(&input, 0.0);
                    mean[i] = mu;
                    var[i] = v.max(1e-9);
                }
                (mean, var)
            }
            None => (vec![0.0; c], vec![1.0; c]),
        }
    }
}
