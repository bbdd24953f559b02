//! Shared test oracles: dense multivariate-Gaussian likelihood of the
//! signal model (independent of the Kalman path), plus simple statistical
//! test helpers.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seismon::envelope::{envelope_value, support_duration, ArrivalParams};
use seismon::linalg::{mvn_log_pdf, Mat};
use seismon::signalmodel::{Arrival, NoiseParams, SignalConfig, StationSignal};
use seismon::wavelet::{dwt_inverse, WaveletBasis};

/// Dense synthesis matrix of the basis, built column-by-column from
/// unit-vector inverse transforms.
pub fn dense_synthesis(basis: &WaveletBasis) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(basis.coeff_len());
    for c in 0..basis.coeff_len() {
        let mut e = vec![0.0; basis.coeff_len()];
        e[c] = 1.0;
        cols.push(dwt_inverse(&e, basis).unwrap());
    }
    cols
}

/// AR(R) covariance with zero pre-history: solve the unit-lower-triangular
/// recursion A z = e and form sigma2 * A^-1 A^-T directly.
pub fn ar_covariance(n: usize, noise: &NoiseParams) -> Mat {
    // columns of A^-1 by forward substitution
    let r = noise.phi.len();
    let mut inv = Mat::zeros(n, n);
    for col in 0..n {
        for row in col..n {
            let mut v = if row == col { 1.0 } else { 0.0 };
            for (k, &p) in noise.phi.iter().enumerate() {
                if row >= k + 1 && row - k - 1 >= col {
                    v += p * inv[(row - k - 1, col)];
                }
            }
            inv[(row, col)] = v;
        }
        let _ = r;
    }
    let mut cov = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..=j.min(i) {
                s += inv[(i, k)] * inv[(j, k)];
            }
            cov[(i, j)] = noise.sigma2 * s;
            cov[(j, i)] = noise.sigma2 * s;
        }
    }
    cov
}

/// Modulation-sample index of signal sample `i` for an arrival: the count
/// of samples strictly past the onset, minus one.
pub fn modulation_index(signal: &StationSignal, tau: f64, i: usize) -> isize {
    let rel = (tau - signal.start_time) * signal.rate_hz;
    let i0 = rel.floor() as isize + 1;
    i as isize - i0
}

/// Dense mean and covariance of the signal under the collapsed model.
pub fn dense_mean_cov(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
) -> (Vec<f64>, Mat) {
    let n = signal.len();
    let w = basis.signal_len() as isize;
    let d = dense_synthesis(basis);
    let mut mean = vec![noise.mu; n];
    let mut cov = ar_covariance(n, noise);
    for arrival in arrivals {
        let dur = support_duration(&arrival.theta, cfg.env_floor, cfg.env_max_dur_s);
        // rows of the scaled synthesis operator for this arrival
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new(); // (sample, dense D row * env)
        for i in 0..n {
            let t = signal.time_of(i);
            if t - arrival.theta.tau > dur {
                continue;
            }
            let env = envelope_value(t, &arrival.theta);
            if env == 0.0 {
                continue;
            }
            let p = modulation_index(signal, arrival.theta.tau, i);
            if p < 0 {
                continue;
            }
            if p < w {
                let mut row = vec![0.0; basis.coeff_len()];
                for (c, col) in d.iter().enumerate() {
                    row[c] = env * col[p as usize];
                }
                for (c, v) in row.iter().enumerate() {
                    mean[i] += v * arrival.coeff_mean[c];
                }
                rows.push((i, row));
            } else {
                // white modulation: envelope-scaled unit variance
                cov[(i, i)] += env * env;
            }
        }
        // cov += G D Xi D^T G^T
        for (ai, (i, row_i)) in rows.iter().enumerate() {
            for (j, row_j) in rows.iter().take(ai + 1).map(|(j, r)| (*j, r)) {
                let mut s = 0.0;
                for c in 0..basis.coeff_len() {
                    s += row_i[c] * arrival.coeff_var[c] * row_j[c];
                }
                cov[(*i, j)] += s;
                if *i != j {
                    cov[(j, *i)] += s;
                }
            }
        }
    }
    (mean, cov)
}

/// Dense-oracle collapsed log-likelihood.
pub fn dense_log_likelihood(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
) -> f64 {
    let (mean, cov) = dense_mean_cov(signal, arrivals, noise, basis, cfg);
    mvn_log_pdf(&signal.samples, &mean, &cov).expect("dense covariance PSD")
}

/// Random stable AR coefficients of the given order.
pub fn random_stable_phi(order: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let phi: Vec<f64> = (0..order).map(|_| rng.random_range(-0.7..0.7)).collect();
        if seismon::signalmodel::ar_stable(&phi) {
            return phi;
        }
    }
}

/// Random arrival parameters with onset in `[tau_lo, tau_hi]`.
pub fn random_theta(tau_lo: f64, tau_hi: f64, rng: &mut ChaCha8Rng) -> ArrivalParams {
    ArrivalParams::new(
        rng.random_range(tau_lo..tau_hi),
        rng.random_range(0.3..2.0),
        rng.random_range(0.5..4.0),
        rng.random_range(0.0..1.5),
        rng.random_range(0.02..0.5),
    )
    .unwrap()
}

/// Random arrival with independent coefficient priors.
pub fn random_arrival(
    station: usize,
    phase: usize,
    tau_lo: f64,
    tau_hi: f64,
    basis: &WaveletBasis,
    rng: &mut ChaCha8Rng,
) -> Arrival {
    let c = basis.coeff_len();
    Arrival {
        station,
        phase: seismon::geophys::PhaseId(phase),
        theta: random_theta(tau_lo, tau_hi, rng),
        association: None,
        coeff_mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        coeff_var: (0..c).map(|_| rng.random_range(0.05..2.0)).collect(),
    }
}

/// Gaussian white-ish random signal for likelihood comparisons.
pub fn random_signal(n: usize, rate: f64, start: f64, scale: f64, rng: &mut ChaCha8Rng) -> StationSignal {
    StationSignal {
        station: 0,
        start_time: start,
        rate_hz: rate,
        samples: (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Statistical test helpers
// ---------------------------------------------------------------------------

/// Two-sided Kolmogorov-Smirnov p-value of `samples` against the uniform
/// CDF on [lo, hi].
pub fn ks_uniform_p(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut xs: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        d = d
            .max((cdf - i as f64 / n as f64).abs())
            .max(((i + 1) as f64 / n as f64 - cdf).abs());
    }
    ks_p_value(d, n)
}

pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let lambda = (n as f64).sqrt() * d;
    let p: f64 = 2.0
        * (1..=100)
            .map(|k| {
                let k = k as f64;
                (-1.0f64).powi(k as i32 + 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>();
    p.clamp(0.0, 1.0)
}

/// Chi-square goodness-of-fit p-value for observed counts against expected.
pub fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut stat = 0.0_f64;
    let mut dof = 0.0_f64;
    for (o, e) in observed.iter().zip(expected) {
        if *e > 1e-9 {
            stat += (o - e) * (o - e) / e;
            dof += 1.0;
        }
    }
    seismon::numeric::chi_square_sf(stat, (dof - 1.0).max(1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean accounting for autocorrelation, by batch
/// means with sqrt(n) batches.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    let b = (n as f64).sqrt() as usize;
    let nb = n / b;
    if nb < 2 {
        return (variance(xs) / n as f64).sqrt();
    }
    let batch_avgs: Vec<f64> = (0..nb).map(|k| mean(&xs[k * b..(k + 1) * b])).collect();
    (variance(&batch_avgs) / nb as f64).sqrt()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

