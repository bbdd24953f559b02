//! EM fitting of the full model from a ground-truth bulletin plus
//! waveforms.
//!
//! The E step runs MCMC over envelope parameters (events fixed) and over
//! noise parameters on arrival-free stretches, fits univariate Gaussians to
//! the posterior samples, and extracts wavelet-coefficient messages at the
//! posterior-mean envelopes. The M step fits GP hyperparameters per
//! (station, phase, output, region) and station noise priors, selecting the
//! noise-variance prior family by likelihood.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envelope::ArrivalParams;
use crate::error::Error;
use crate::geophys::{AmplitudeModel, PhaseId, PhaseSet, Station, VelocityModel};
use crate::gp::{partition_regions, FeatureKind, GpFitConfig, GpHyper, GpInput, OutputModel};
use crate::inference::{ChainConfig, ModelContext, UnassocPrior};
use crate::numeric::{ln_gamma, normal_log_pdf};
use crate::seedtree;
use crate::signalmodel::{
    coefficient_messages, ar_log_density, Arrival, NoiseParams, SignalConfig, StationSignal,
};
use crate::wavelet::WaveletBasis;
use crate::worldmodel::{Event, EventPrior, WorldState};
use crate::Result;

pub const MODEL_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Noise priors
// ---------------------------------------------------------------------------

/// Prior family over the AR innovation variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarPrior {
    LogNormal { mu: f64, sd: f64 },
    InverseGamma { alpha: f64, beta: f64 },
    TruncGaussian { mu: f64, sd: f64 },
}

impl VarPrior {
    pub fn log_density(&self, sigma2: f64) -> f64 {
        if sigma2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            VarPrior::LogNormal { mu, sd } => {
                normal_log_pdf(sigma2.ln(), mu, sd * sd) - sigma2.ln()
            }
            VarPrior::InverseGamma { alpha, beta } => {
                alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * sigma2.ln() - beta / sigma2
            }
            VarPrior::TruncGaussian { mu, sd } => {
                let z = 1.0 - crate::numeric::normal_cdf((0.0 - mu) / sd);
                normal_log_pdf(sigma2, mu, sd * sd) - z.max(1e-300).ln()
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            VarPrior::LogNormal { mu, sd } => {
                (mu + sd * rng.sample::<f64, _>(StandardNormal)).exp()
            }
            VarPrior::InverseGamma { alpha, beta } => {
                let gamma = rand_distr::Gamma::new(alpha, 1.0).expect("valid gamma");
                let g: f64 = rng.sample(gamma);
                (beta / g.max(1e-300)).max(1e-12)
            }
            VarPrior::TruncGaussian { mu, sd } => loop {
                let x = mu + sd * rng.sample::<f64, _>(StandardNormal);
                if x > 0.0 {
                    return x;
                }
            },
        }
    }
}

/// Per-station priors on the background-noise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationNoisePrior {
    pub mu_mean: f64,
    pub mu_sd: f64,
    /// Independent Gaussian prior per AR coefficient (diagonal of the
    /// multivariate Gaussian fit).
    pub phi_mean: Vec<f64>,
    pub phi_sd: Vec<f64>,
    pub var_prior: VarPrior,
}

impl StationNoisePrior {
    pub fn broad(ar_order: usize) -> StationNoisePrior {
        StationNoisePrior {
            mu_mean: 0.0,
            mu_sd: 10.0,
            phi_mean: vec![0.0; ar_order],
            phi_sd: vec![0.5; ar_order],
            var_prior: VarPrior::LogNormal { mu: -4.6, sd: 3.0 },
        }
    }

    /// Log prior density in the (mu, log sigma2, phi) measure.
    pub fn log_density(&self, noise: &NoiseParams) -> f64 {
        let mut acc = normal_log_pdf(noise.mu, self.mu_mean, self.mu_sd * self.mu_sd);
        // variance prior is a density over sigma2; the chain moves in
        // log-sigma2, so include the Jacobian sigma2
        acc += self.var_prior.log_density(noise.sigma2) + noise.sigma2.ln();
        for (i, &p) in noise.phi.iter().enumerate() {
            acc += normal_log_pdf(p, self.phi_mean[i], self.phi_sd[i] * self.phi_sd[i]);
        }
        acc
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> NoiseParams {
        loop {
            let mu = self.mu_mean + self.mu_sd * rng.sample::<f64, _>(StandardNormal);
            let sigma2 = self.var_prior.sample(rng);
            let phi: Vec<f64> = self
                .phi_mean
                .iter()
                .zip(&self.phi_sd)
                .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if let Ok(p) = NoiseParams::new(mu, sigma2, phi) {
                return p;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trained model
// ---------------------------------------------------------------------------

/// Fitted GP models for every output of one (station, phase).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationPhaseModels {
    pub tau: OutputModel,
    pub log_rho: OutputModel,
    pub log_alpha: OutputModel,
    pub log_gamma: OutputModel,
    pub log_beta: OutputModel,
    pub coeffs: Vec<OutputModel>,
}

/// All GP models, indexed by station then phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpSet {
    pub sets: Vec<Vec<StationPhaseModels>>,
}

impl GpSet {
    pub fn models(&self, station: usize, phase: PhaseId) -> &StationPhaseModels {
        &self.sets[station][phase.0]
    }

    pub fn refresh(&mut self) -> Result<()> {
        for st in &mut self.sets {
            for ph in st {
                ph.tau.refresh()?;
                ph.log_rho.refresh()?;
                ph.log_alpha.refresh()?;
                ph.log_gamma.refresh()?;
                ph.log_beta.refresh()?;
                for c in &mut ph.coeffs {
                    c.refresh()?;
                }
            }
        }
        Ok(())
    }
}

/// Stored training waveform for the correlation proposal: the signal slice
/// around one training event's first arrival at one station.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub event_index: usize,
    pub event: Event,
    pub station: usize,
    /// Template sample 0 sits at `first_arrival_s + offset_s`.
    pub offset_s: f64,
    /// Predicted epoch time of the first phase arrival at this station.
    pub first_arrival_s: f64,
    pub samples: Vec<f64>,
}

/// The full trained model: everything inference needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub band_label: String,
    pub rate_hz: f64,
    pub stations: Vec<Station>,
    pub phases: PhaseSet,
    pub vm: VelocityModel,
    pub am: AmplitudeModel,
    pub prior: EventPrior,
    pub basis: WaveletBasis,
    pub sig_cfg: SignalConfig,
    pub unassoc: UnassocPrior,
    pub gp: Option<GpSet>,
    pub noise_priors: Vec<StationNoisePrior>,
    pub templates: Vec<Template>,
    /// Realized coefficient count of the wavelet basis.
    pub realized_c: usize,
    /// Training diagnostics: EM objective per iteration.
    pub em_objective: Vec<f64>,
}

impl TrainedModel {
    /// Rebuild caches dropped by serialization.
    pub fn refresh(&mut self) -> Result<()> {
        self.basis.rebuild_rows();
        if let Some(gp) = &mut self.gp {
            gp.refresh()?;
        }
        Ok(())
    }

    pub fn context<'a>(&'a self, prior: &'a EventPrior, window_start: f64) -> ModelContext<'a> {
        ModelContext {
            stations: &self.stations,
            phases: &self.phases,
            vm: &self.vm,
            am: &self.am,
            prior,
            window_start,
            basis: &self.basis,
            sig_cfg: &self.sig_cfg,
            gp: self.gp.as_ref(),
            noise_priors: &self.noise_priors,
            templates: &self.templates,
            ablate_wavelet_gp: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// EM iterations.
    pub n_em: usize,
    /// E-step MCMC sweeps per (event, station) window.
    pub e_sweeps: usize,
    pub e_burn_in_frac: f64,
    /// Window padding around the predicted arrival, seconds.
    pub window_pre_s: f64,
    pub window_post_s: f64,
    /// Noise-estimation sweeps per station.
    pub noise_sweeps: usize,
    /// Regions per training-point count (k = max(1, n/region_divisor)).
    pub region_divisor: usize,
    /// Template extent around the first arrival, seconds.
    pub template_pre_s: f64,
    pub template_len_s: f64,
    /// Retry factor applied to step sizes when acceptance collapses.
    pub retry_step_factor: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_em: 3,
            e_sweeps: 600,
            e_burn_in_frac: 0.3,
            window_pre_s: 10.0,
            window_post_s: 45.0,
            noise_sweeps: 400,
            region_divisor: 20,
            template_pre_s: 2.0,
            template_len_s: 22.0,
            retry_step_factor: 3.0,
        }
    }
}

// ---------------------------------------------------------------------------
// E step
// ---------------------------------------------------------------------------

/// Gaussian moment fits plus coefficient messages for one
/// (event, station, phase) arrival.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalPosterior {
    pub event_index: usize,
    pub station: usize,
    pub phase: PhaseId,
    /// Posterior (mean, var) per theta output in
    /// (tau, log rho, log alpha, log gamma, log beta) order.
    pub theta_moments: [(f64, f64); 5],
    /// Coefficient message means and variances.
    pub nu: Vec<f64>,
    pub xi: Vec<f64>,
    /// Message log-normalizer.
    pub log_z: f64,
}

/// Posterior summaries of one station's noise parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoisePosterior {
    pub station: usize,
    pub mu_samples: Vec<f64>,
    pub sigma2_samples: Vec<f64>,
    pub phi_samples: Vec<Vec<f64>>,
    pub point: NoiseParams,
}

/// Output of the E step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EStepResult {
    pub arrivals: Vec<ArrivalPosterior>,
    pub noise: Vec<NoisePosterior>,
    /// Monte Carlo estimate of the joint objective (sum of window posteriors).
    pub objective: f64,
}

/// Context bundling the fixed ingredients of training.
pub struct TrainingInputs<'a> {
    pub stations: &'a [Station],
    pub phases: &'a PhaseSet,
    pub vm: &'a VelocityModel,
    pub am: &'a AmplitudeModel,
    pub prior: &'a EventPrior,
    pub basis: &'a WaveletBasis,
    pub sig_cfg: &'a SignalConfig,
    pub unassoc: UnassocPrior,
    pub bulletin: &'a [Event],
    pub signals: &'a [StationSignal],
    pub chain_cfg: &'a ChainConfig,
    pub gp_cfg: &'a GpFitConfig,
    pub cfg: &'a TrainingConfig,
    /// AR order of the station noise model.
    pub ar_order: usize,
}

/// MH noise-parameter sampling on arrival-free stretches of one station.
fn sample_noise_posterior(
    inputs: &TrainingInputs,
    station: usize,
    prior: &StationNoisePrior,
    rng: &mut ChaCha8Rng,
) -> Result<NoisePosterior> {
    let signal = &inputs.signals[station];
    // arrival-free stretches: drop +-window around every predicted arrival
    let mut masked = vec![false; signal.len()];
    for event in inputs.bulletin {
        for phase in inputs.phases.ids() {
            let tau =
                crate::geophys::predict_travel_time(event, &inputs.stations[station], phase, inputs.vm)?;
            let lo = ((tau - inputs.cfg.window_pre_s - signal.start_time) * signal.rate_hz)
                .floor()
                .max(0.0) as usize;
            let hi = ((tau + inputs.cfg.window_post_s + inputs.sig_cfg.env_max_dur_s
                - signal.start_time)
                * signal.rate_hz)
                .ceil()
                .min(signal.len() as f64 - 1.0) as usize;
            if lo < signal.len() {
                for m in &mut masked[lo..=hi.min(signal.len() - 1)] {
                    *m = true;
                }
            }
        }
    }
    // contiguous quiet stretches of at least 5 s
    let min_len = (5.0 * signal.rate_hz) as usize;
    let mut stretches: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for i in 0..signal.len() {
        if !masked[i] {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            if i - s >= min_len {
                stretches.push((s, i));
            }
        }
    }
    if let Some(s) = start {
        if signal.len() - s >= min_len {
            stretches.push((s, signal.len()));
        }
    }
    if stretches.is_empty() {
        // no quiet data: fall back to the full signal
        stretches.push((0, signal.len()));
    }
    let segments: Vec<&[f64]> = stretches
        .iter()
        .map(|&(a, b)| &signal.samples[a..b])
        .collect();

    // initialize from moments of the quiet data
    let flat: Vec<f64> = segments.iter().flat_map(|s| s.iter().copied()).collect();
    let mean = flat.iter().sum::<f64>() / flat.len().max(1) as f64;
    let var = flat.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / flat.len().max(2) as f64;
    let r = prior.phi_mean.len();
    let mut current = NoiseParams::new(mean, var.max(1e-10), vec![0.0; r])?;
    let loglik = |noise: &NoiseParams| -> f64 {
        segments
            .iter()
            .map(|seg| {
                let z: Vec<f64> = seg.iter().map(|s| s - noise.mu).collect();
                ar_log_density(&z, noise)
            })
            .sum::<f64>()
    };
    let mut cur_ll = loglik(&current) + prior.log_density(&current);
    let mut samples = NoisePosterior {
        station,
        mu_samples: Vec::new(),
        sigma2_samples: Vec::new(),
        phi_samples: Vec::new(),
        point: current.clone(),
    };
    let burn = (inputs.cfg.noise_sweeps as f64 * inputs.cfg.e_burn_in_frac) as usize;
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut scale = 1.0;
    for sweep in 0..inputs.cfg.noise_sweeps {
        for comp in 0..(2 + r) {
            let mut cand = current.clone();
            let z: f64 = rng.sample(StandardNormal);
            match comp {
                0 => cand.mu += scale * inputs.chain_cfg.step_mu * z,
                1 => {
                    cand.sigma2 =
                        (cand.sigma2.ln() + scale * inputs.chain_cfg.step_log_sigma2 * z).exp()
                }
                k => cand.phi[k - 2] += scale * inputs.chain_cfg.step_phi * z,
            }
            proposed += 1;
            if cand.validate().is_err() {
                continue;
            }
            let cand_ll = loglik(&cand) + prior.log_density(&cand);
            if cand_ll - cur_ll >= 0.0 || rng.random::<f64>() < (cand_ll - cur_ll).exp() {
                current = cand;
                cur_ll = cand_ll;
                accepted += 1;
            }
        }
        // non-mixing detector: widen proposals and keep going
        if sweep == inputs.cfg.noise_sweeps / 4
            && (accepted as f64) < 0.01 * proposed as f64
        {
            scale *= inputs.cfg.retry_step_factor;
        }
        if sweep >= burn {
            samples.mu_samples.push(current.mu);
            samples.sigma2_samples.push(current.sigma2);
            samples.phi_samples.push(current.phi.clone());
        }
    }
    samples.point = NoiseParams::new(
        mean_of(&samples.mu_samples),
        mean_of(&samples.sigma2_samples).max(1e-10),
        (0..r)
            .map(|i| mean_of(&samples.phi_samples.iter().map(|p| p[i]).collect::<Vec<_>>()))
            .collect(),
    )
    .unwrap_or(current);
    Ok(samples)
}

/// Onset initialization: the first threshold crossing of the smoothed
/// deviation |s - mu| within `gate_s` of the predicted arrival. Falls back
/// to the prediction when nothing in the gate stands out.
fn peak_aligned_onset(
    signal: &StationSignal,
    mu: f64,
    tau_bar: f64,
    rho: f64,
    gate_s: f64,
) -> f64 {
    let lo = (((tau_bar - gate_s - signal.start_time) * signal.rate_hz).floor()).max(0.0) as usize;
    let hi = ((((tau_bar + gate_s + rho) - signal.start_time) * signal.rate_hz).ceil() as usize)
        .min(signal.len().saturating_sub(1));
    if lo >= signal.len() || hi <= lo + 4 {
        return tau_bar;
    }
    // half-second moving average of the deviation
    let half = (0.25 * signal.rate_hz).ceil() as usize;
    let smooth: Vec<f64> = (lo..=hi)
        .map(|i| {
            let a = i.saturating_sub(half).max(lo);
            let b = (i + half).min(hi);
            signal.samples[a..=b]
                .iter()
                .map(|s| (s - mu).abs())
                .sum::<f64>()
                / (b - a + 1) as f64
        })
        .collect();
    let base = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak < 3.0 * base.max(1e-12) {
        return tau_bar;
    }
    let threshold = base + 0.25 * (peak - base);
    for (k, v) in smooth.iter().enumerate() {
        if *v >= threshold {
            return signal.time_of(lo + k);
        }
    }
    tau_bar
}

fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn var_of(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean_of(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// E-step MCMC for one (event, station): instantiate arrivals for each
/// phase pre-aligned at the current model predictions, run theta moves in a
/// window around the event, and summarize the posterior.
#[allow(clippy::too_many_arguments)]
fn e_step_window(
    inputs: &TrainingInputs,
    gp: Option<&GpSet>,
    event_index: usize,
    station: usize,
    noise: &NoiseParams,
    other_arrivals: &[Arrival],
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Vec<ArrivalPosterior>, f64)>> {
    let event = inputs.bulletin[event_index];
    let signal = &inputs.signals[station];

    // window around the predicted phase arrivals
    let mut tau_min = f64::INFINITY;
    let mut tau_max = f64::NEG_INFINITY;
    for phase in inputs.phases.ids() {
        let tau = crate::geophys::predict_travel_time(
            &event,
            &inputs.stations[station],
            phase,
            inputs.vm,
        )?;
        tau_min = tau_min.min(tau);
        tau_max = tau_max.max(tau);
    }
    let w_lo = tau_min - inputs.cfg.window_pre_s;
    let w_hi = tau_max + inputs.cfg.window_post_s;
    let i_lo = (((w_lo - signal.start_time) * signal.rate_hz).floor()).max(0.0) as usize;
    let i_hi =
        (((w_hi - signal.start_time) * signal.rate_hz).ceil()).min(signal.len() as f64 - 1.0)
            as usize;
    // require the first predicted arrival to sit inside the signal; events
    // whose windows fall off the recording are skipped by the caller
    let first_idx = (tau_min - signal.start_time) * signal.rate_hz;
    if i_lo >= signal.len() || i_hi <= i_lo || first_idx < 0.0 || first_idx >= signal.len() as f64
    {
        return Ok(None);
    }
    let window = StationSignal {
        station,
        start_time: signal.time_of(i_lo),
        rate_hz: signal.rate_hz,
        samples: signal.samples[i_lo..=i_hi].to_vec(),
    };

    // a one-station world with this event's arrivals plus fixed context
    let prior = EventPrior {
        window_s: window.samples.len() as f64 / window.rate_hz,
        ..inputs.prior.clone()
    };
    let ctx = ModelContext {
        stations: inputs.stations,
        phases: inputs.phases,
        vm: inputs.vm,
        am: inputs.am,
        prior: &prior,
        window_start: window.start_time,
        basis: inputs.basis,
        sig_cfg: inputs.sig_cfg,
        gp,
        noise_priors: std::slice::from_ref(&PLACEHOLDER_NOISE_PRIOR),
        templates: &[],
        ablate_wavelet_gp: false,
    };
    // station-local world: station index 0
    let mut world = WorldState::new(1, vec![noise.clone()]);
    let ev_id = world.insert_event(event);
    let mut tracked = Vec::new();
    for phase in inputs.phases.ids() {
        let m = ctx.theta_prior_moments(&event, station, phase)?;
        // start the onset at the strongest local excursion near the
        // predicted arrival; random-walk refinement does the rest
        let tau_init = peak_aligned_onset(&window, noise.mu, m[0].0, m[1].0.exp(), 5.0);
        let theta = ArrivalParams::from_log_shape(tau_init, [m[1].0, m[2].0, m[3].0, m[4].0])
            .map_err(|e| Error::Numerical(format!("prior mean envelope invalid: {e}")))?;
        let (cm, cv) = ctx.coeff_prior(&event, station, phase);
        let arrival = Arrival {
            station: 0,
            phase,
            theta,
            association: Some(ev_id),
            coeff_mean: cm,
            coeff_var: cv,
        };
        let id = world.insert_arrival(0, arrival);
        tracked.push((phase, id));
    }
    for other in other_arrivals {
        let mut a = other.clone();
        a.station = 0;
        a.association = None;
        world.insert_arrival(0, a);
    }

    // remap: the local context must see the true station's geometry; build
    // single-station slices
    let local_station = [inputs.stations[station].clone()];
    let noise_prior = StationNoisePrior::broad(noise.ar_order());
    let local_ctx = ModelContext {
        stations: &local_station,
        phases: inputs.phases,
        vm: inputs.vm,
        am: inputs.am,
        prior: &prior,
        window_start: window.start_time,
        basis: inputs.basis,
        sig_cfg: inputs.sig_cfg,
        gp,
        noise_priors: std::slice::from_ref(&noise_prior),
        templates: &[],
        ablate_wavelet_gp: false,
    };
    // GP inputs reference the true station; predictions inside the chain
    // use station index 0, so the GP set must be sliced accordingly
    let sliced_gp = gp.map(|g| GpSet {
        sets: vec![g.sets[station].clone()],
    });
    let local_ctx = ModelContext {
        gp: sliced_gp.as_ref(),
        ..local_ctx
    };

    let signals = [window];
    let mut chain = crate::inference::Chain::new(local_ctx, inputs.chain_cfg, &signals, world)?;

    let sweeps = inputs.cfg.e_sweeps;
    let burn = (sweeps as f64 * inputs.cfg.e_burn_in_frac) as usize;
    let mut theta_samples: BTreeMap<PhaseId, Vec<[f64; 5]>> = BTreeMap::new();
    let mut stats = crate::inference::SweepStats::default();
    for sweep in 0..sweeps {
        let subset: Vec<(usize, crate::worldmodel::ArrivalId)> =
            tracked.iter().map(|(_, id)| (0, *id)).collect();
        crate::inference::sweep::theta_moves(&mut chain, rng, &mut stats, Some(&subset))?;
        if sweep >= burn {
            for (phase, id) in &tracked {
                let a = &chain.state.arrivals[0][id];
                let [lr, la, lg, lb] = a.theta.log_shape();
                theta_samples
                    .entry(*phase)
                    .or_default()
                    .push([a.theta.tau, lr, la, lg, lb]);
            }
        }
    }
    let objective = chain.loglik[0];

    let mut out = Vec::new();
    for (phase, id) in &tracked {
        let samples = &theta_samples[phase];
        let mut moments = [(0.0, 0.0); 5];
        for d in 0..5 {
            let vals: Vec<f64> = samples.iter().map(|s| s[d]).collect();
            moments[d] = (mean_of(&vals), var_of(&vals).max(1e-8));
        }
        // coefficient messages at the posterior-mean theta
        let mut arrival = chain.state.arrivals[0][id].clone();
        arrival.theta = ArrivalParams::from_log_shape(
            moments[0].0,
            [moments[1].0, moments[2].0, moments[3].0, moments[4].0],
        )
        .map_err(|e| Error::Numerical(format!("posterior mean envelope invalid: {e}")))?;
        // messages for this arrival alone, others at their current values
        let mut arrs: Vec<&Arrival> = Vec::new();
        arrs.push(&arrival);
        let others: Vec<Arrival> = chain.state.arrivals[0]
            .iter()
            .filter(|(aid, _)| *aid != id)
            .map(|(_, a)| a.clone())
            .collect();
        for o in &others {
            arrs.push(o);
        }
        let msgs = coefficient_messages(
            &signals[0],
            &arrs,
            &chain.state.noise[0],
            inputs.basis,
            inputs.sig_cfg,
        )?;
        out.push(ArrivalPosterior {
            event_index,
            station,
            phase: *phase,
            theta_moments: moments,
            nu: msgs.nu[0].clone(),
            xi: msgs.xi[0].clone(),
            log_z: msgs.log_z,
        });
    }
    Ok(Some((out, objective)))
}

static PLACEHOLDER_NOISE_PRIOR: StationNoisePrior = StationNoisePrior {
    mu_mean: 0.0,
    mu_sd: 10.0,
    phi_mean: Vec::new(),
    phi_sd: Vec::new(),
    var_prior: VarPrior::LogNormal { mu: -4.6, sd: 3.0 },
};

/// The E step: noise posteriors per station, then per (event, station)
/// envelope posteriors and coefficient messages. Deterministic given seed.
pub fn e_step(
    inputs: &TrainingInputs,
    gp: Option<&GpSet>,
    noise_priors: &[StationNoisePrior],
    seed: u64,
) -> Result<EStepResult> {
    // noise first (parallel over stations)
    let noise: Vec<NoisePosterior> = (0..inputs.stations.len())
        .into_par_iter()
        .map(|st| {
            let mut rng = seedtree::rng_for_idx(seed, "estep-noise", st as u64);
            sample_noise_posterior(inputs, st, &noise_priors[st], &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    // per (event, station) windows in parallel, deterministic order
    let mut tasks = Vec::new();
    for ev in 0..inputs.bulletin.len() {
        for st in 0..inputs.stations.len() {
            tasks.push((ev, st));
        }
    }
    let results: Vec<Result<Option<(Vec<ArrivalPosterior>, f64)>>> = tasks
        .par_iter()
        .map(|&(ev, st)| {
            let mut rng =
                seedtree::rng_for_idx(seed, "estep-window", (ev * inputs.stations.len() + st) as u64);
            e_step_window(inputs, gp, ev, st, &noise[st].point, &[], &mut rng)
        })
        .collect();
    let mut arrivals = Vec::new();
    let mut objective = 0.0;
    let mut skipped = 0usize;
    for r in results {
        match r? {
            Some((mut a, obj)) => {
                arrivals.append(&mut a);
                objective += obj;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} (event, station) windows fall outside the recordings and were skipped");
    }
    Ok(EStepResult {
        arrivals,
        noise,
        objective,
    })
}

// ---------------------------------------------------------------------------
// M step
// ---------------------------------------------------------------------------

/// Fit of all GP models plus noise priors from E-step messages.
pub struct MStepResult {
    pub gp: GpSet,
    pub noise_priors: Vec<StationNoisePrior>,
}

/// Select the variance-prior family with the highest total log-likelihood of
/// the E-step sigma2 samples; ML fits per family.
pub fn select_var_prior(samples: &[f64]) -> VarPrior {
    let default = VarPrior::LogNormal { mu: -4.6, sd: 3.0 };
    if samples.len() < 2 || samples.iter().any(|&s| !(s > 0.0)) {
        return default;
    }
    let logs: Vec<f64> = samples.iter().map(|s| s.ln()).collect();
    let ln_mu = mean_of(&logs);
    let ln_sd = var_of(&logs).sqrt().max(1e-6);
    let lognormal = VarPrior::LogNormal {
        mu: ln_mu,
        sd: ln_sd,
    };
    let invgamma = fit_inverse_gamma(samples);
    let truncnorm = fit_trunc_gaussian(samples);
    let mut best = lognormal;
    let mut best_ll = total_ll(&lognormal, samples);
    for cand in [invgamma, truncnorm] {
        let ll = total_ll(&cand, samples);
        if ll > best_ll {
            best_ll = ll;
            best = cand;
        }
    }
    best
}

fn total_ll(prior: &VarPrior, samples: &[f64]) -> f64 {
    samples.iter().map(|&s| prior.log_density(s)).sum()
}

/// Profile ML fit of the inverse-gamma: golden-section over log alpha.
fn fit_inverse_gamma(samples: &[f64]) -> VarPrior {
    let n = samples.len() as f64;
    let sum_inv = samples.iter().map(|s| 1.0 / s).sum::<f64>();
    let sum_log = samples.iter().map(|s| s.ln()).sum::<f64>();
    let profile = |log_alpha: f64| -> f64 {
        let alpha = log_alpha.exp();
        let beta = alpha * n / sum_inv;
        n * (alpha * beta.ln() - ln_gamma(alpha)) - (alpha + 1.0) * sum_log - beta * sum_inv
    };
    let (mut lo, mut hi) = (-3.0f64, 6.0f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = profile(x1);
    let mut f2 = profile(x2);
    for _ in 0..60 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = profile(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = profile(x1);
        }
    }
    let alpha = (0.5 * (lo + hi)).exp();
    let beta = alpha * n / sum_inv;
    VarPrior::InverseGamma { alpha, beta }
}

/// Nelder-Mead-free truncated-Gaussian fit: coordinate search over
/// (mu, log sd) on the truncated log-likelihood.
fn fit_trunc_gaussian(samples: &[f64]) -> VarPrior {
    let m0 = mean_of(samples);
    let s0 = var_of(samples).sqrt().max(1e-9);
    let ll = |mu: f64, sd: f64| -> f64 {
        let p = VarPrior::TruncGaussian { mu, sd };
        total_ll(&p, samples)
    };
    let mut mu = m0;
    let mut log_sd = s0.ln();
    let mut best = ll(mu, log_sd.exp());
    let mut step = 0.5;
    for _ in 0..80 {
        let mut improved = false;
        for (dm, ds) in [
            (step * s0, 0.0),
            (-step * s0, 0.0),
            (0.0, step),
            (0.0, -step),
        ] {
            let cand = ll(mu + dm, (log_sd + ds).exp());
            if cand > best {
                best = cand;
                mu += dm;
                log_sd += ds;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    VarPrior::TruncGaussian {
        mu,
        sd: log_sd.exp().max(1e-9),
    }
}

/// The M step: GP hyperparameter fits per (station, phase, output, region)
/// and noise priors per station.
pub fn m_step(
    inputs: &TrainingInputs,
    estep: &EStepResult,
    seed: u64,
) -> Result<MStepResult> {
    let n_events = inputs.bulletin.len();
    // regions from training-event locations (shared by all outputs)
    let locs: Vec<(f64, f64)> = inputs.bulletin.iter().map(|e| (e.lon, e.lat)).collect();
    let k = (n_events / inputs.cfg.region_divisor.max(1)).max(1).min(n_events.max(1));
    let (assignment, centroids) = if n_events == 0 {
        (Vec::new(), vec![(0.0, 0.0)])
    } else {
        let mut rng = seedtree::rng_for(seed, "regions");
        partition_regions(&locs, k, &mut rng)?
    };

    // group messages by (station, phase)
    let mut grouped: BTreeMap<(usize, usize), Vec<&ArrivalPosterior>> = BTreeMap::new();
    for a in &estep.arrivals {
        grouped.entry((a.station, a.phase.0)).or_default().push(a);
    }

    let c_len = inputs.basis.coeff_len();
    let fit_tasks: Vec<(usize, usize)> = (0..inputs.stations.len())
        .flat_map(|st| inputs.phases.ids().map(move |p| (st, p.0)))
        .collect();
    let sets: Vec<Vec<StationPhaseModels>> = {
        let fitted: Vec<Result<StationPhaseModels>> = fit_tasks
            .par_iter()
            .map(|&(st, ph)| {
                let mut rng =
                    seedtree::rng_for_idx(seed, "mstep-fit", (st * inputs.phases.len() + ph) as u64);
                fit_station_phase(
                    inputs,
                    &grouped,
                    st,
                    PhaseId(ph),
                    &assignment,
                    &centroids,
                    c_len,
                    &mut rng,
                )
            })
            .collect();
        let mut by_station: Vec<Vec<StationPhaseModels>> = Vec::new();
        let mut it = fitted.into_iter();
        for _ in 0..inputs.stations.len() {
            let mut phases = Vec::new();
            for _ in 0..inputs.phases.len() {
                phases.push(it.next().unwrap()?);
            }
            by_station.push(phases);
        }
        by_station
    };

    // noise priors by moment matching + family selection
    let mut noise_priors = Vec::new();
    for st in 0..inputs.stations.len() {
        let post = &estep.noise[st];
        let r = post.point.ar_order();
        let mu_sd = var_of(&post.mu_samples).sqrt().max(1e-3);
        let phi_mean: Vec<f64> = (0..r)
            .map(|i| mean_of(&post.phi_samples.iter().map(|p| p[i]).collect::<Vec<_>>()))
            .collect();
        let phi_sd: Vec<f64> = (0..r)
            .map(|i| {
                var_of(&post.phi_samples.iter().map(|p| p[i]).collect::<Vec<_>>())
                    .sqrt()
                    .max(1e-3)
            })
            .collect();
        noise_priors.push(StationNoisePrior {
            mu_mean: mean_of(&post.mu_samples),
            mu_sd,
            phi_mean,
            phi_sd,
            var_prior: select_var_prior(&post.sigma2_samples),
        });
    }
    Ok(MStepResult {
        gp: GpSet { sets },
        noise_priors,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_station_phase(
    inputs: &TrainingInputs,
    grouped: &BTreeMap<(usize, usize), Vec<&ArrivalPosterior>>,
    st: usize,
    phase: PhaseId,
    assignment: &[usize],
    centroids: &[(f64, f64)],
    c_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StationPhaseModels> {
    let empty = Vec::new();
    let posts = grouped.get(&(st, phase.0)).unwrap_or(&empty);
    let default_hyper = GpHyper::default();
    let prior_only = |feature: FeatureKind| -> OutputModel {
        OutputModel::prior_default(feature, default_hyper, inputs.gp_cfg)
    };
    if posts.is_empty() {
        return Ok(StationPhaseModels {
            tau: prior_only(FeatureKind::None),
            log_rho: prior_only(FeatureKind::Onset),
            log_alpha: prior_only(FeatureKind::Amplitude),
            log_gamma: prior_only(FeatureKind::Decay),
            log_beta: prior_only(FeatureKind::Decay),
            coeffs: (0..c_len).map(|_| prior_only(FeatureKind::None)).collect(),
        });
    }
    // aligned inputs per training event present in the posts
    let station = &inputs.stations[st];
    let mut gp_inputs = Vec::new();
    let mut means = [const { Vec::new() }; 5];
    let mut assign = Vec::new();
    for p in posts.iter() {
        let event = inputs.bulletin[p.event_index];
        gp_inputs.push(GpInput {
            lon: event.lon,
            lat: event.lat,
            mb: event.mb,
            dist_km: crate::geophys::great_circle_km(event.lon, event.lat, station.lon, station.lat)
                .max(1.0),
        });
        assign.push(assignment[p.event_index]);
        let tau_bar = crate::geophys::predict_travel_time(&event, station, phase, inputs.vm)?;
        let log_amp_bar = crate::geophys::predict_log_amplitude(&event, station, phase, inputs.am)
            .unwrap_or(0.0);
        means[0].push(tau_bar);
        means[1].push(0.0);
        means[2].push(log_amp_bar);
        means[3].push(0.0);
        means[4].push(0.0);
    }
    let features = [
        FeatureKind::None,
        FeatureKind::Onset,
        FeatureKind::Amplitude,
        FeatureKind::Decay,
        FeatureKind::Decay,
    ];
    let mut theta_models = Vec::new();
    for output in 0..5 {
        let nu: Vec<f64> = posts.iter().map(|p| p.theta_moments[output].0).collect();
        let xi: Vec<f64> = posts.iter().map(|p| p.theta_moments[output].1).collect();
        theta_models.push(OutputModel::fit(
            features[output],
            &gp_inputs,
            &means[output],
            &nu,
            &xi,
            &assign,
            centroids,
            inputs.gp_cfg,
            rng,
        )?);
    }
    let zero_mean = vec![0.0; posts.len()];
    let mut coeffs = Vec::with_capacity(c_len);
    for c in 0..c_len {
        let nu: Vec<f64> = posts.iter().map(|p| p.nu[c]).collect();
        let xi: Vec<f64> = posts.iter().map(|p| p.xi[c]).collect();
        coeffs.push(OutputModel::fit(
            FeatureKind::None,
            &gp_inputs,
            &zero_mean,
            &nu,
            &xi,
            &assign,
            centroids,
            inputs.gp_cfg,
            rng,
        )?);
    }
    let mut it = theta_models.into_iter();
    Ok(StationPhaseModels {
        tau: it.next().unwrap(),
        log_rho: it.next().unwrap(),
        log_alpha: it.next().unwrap(),
        log_gamma: it.next().unwrap(),
        log_beta: it.next().unwrap(),
        coeffs,
    })
}

// ---------------------------------------------------------------------------
// EM driver
// ---------------------------------------------------------------------------

/// Extract correlation templates from the training signals.
fn extract_templates(inputs: &TrainingInputs) -> Result<Vec<Template>> {
    let mut out = Vec::new();
    for (ev_idx, event) in inputs.bulletin.iter().enumerate() {
        for (st_idx, station) in inputs.stations.iter().enumerate() {
            let signal = &inputs.signals[st_idx];
            let mut first = f64::INFINITY;
            for phase in inputs.phases.ids() {
                first = first.min(crate::geophys::predict_travel_time(
                    event, station, phase, inputs.vm,
                )?);
            }
            let t0 = first - inputs.cfg.template_pre_s;
            let i0 = ((t0 - signal.start_time) * signal.rate_hz).floor() as isize;
            let n = (inputs.cfg.template_len_s * signal.rate_hz) as isize;
            if i0 < 0 || (i0 + n) as usize > signal.len() {
                continue;
            }
            out.push(Template {
                event_index: ev_idx,
                event: *event,
                station: st_idx,
                offset_s: -inputs.cfg.template_pre_s,
                first_arrival_s: first,
                samples: signal.samples[i0 as usize..(i0 + n) as usize].to_vec(),
            });
        }
    }
    Ok(out)
}

/// EM training: alternate E and M steps, tracking the joint objective.
pub fn em_fit(inputs: &TrainingInputs, band_label: &str, seed: u64) -> Result<TrainedModel> {
    let r = inputs.ar_order;
    let mut noise_priors: Vec<StationNoisePrior> = (0..inputs.stations.len())
        .map(|_| StationNoisePrior::broad(r))
        .collect();
    let mut gp: Option<GpSet> = None;
    let mut objectives = Vec::new();
    let mut last_estep: Option<EStepResult> = None;
    if !inputs.bulletin.is_empty() {
        for em_iter in 0..inputs.cfg.n_em.max(1) {
            let estep = e_step(
                inputs,
                gp.as_ref(),
                &noise_priors,
                seedtree::derive_idx(seed, "em", em_iter as u64),
            )?;
            objectives.push(estep.objective);
            let mstep = m_step(inputs, &estep, seedtree::derive_idx(seed, "em-m", em_iter as u64))?;
            gp = Some(mstep.gp);
            noise_priors = mstep.noise_priors;
            last_estep = Some(estep);
        }
    } else {
        // degenerate input: prior-default GPs, noise priors from raw signals
        let estep = e_step(inputs, None, &noise_priors, seedtree::derive(seed, "em-empty"))?;
        let mstep = m_step(inputs, &estep, seedtree::derive(seed, "em-empty-m"))?;
        gp = Some(mstep.gp);
        noise_priors = mstep.noise_priors;
        last_estep = Some(estep);
    }
    let _ = last_estep;
    let templates = extract_templates(inputs)?;
    Ok(TrainedModel {
        version: MODEL_VERSION,
        band_label: band_label.to_string(),
        rate_hz: inputs
            .signals
            .first()
            .map(|s| s.rate_hz)
            .unwrap_or(10.0),
        stations: inputs.stations.to_vec(),
        phases: inputs.phases.clone(),
        vm: inputs.vm.clone(),
        am: inputs.am.clone(),
        prior: inputs.prior.clone(),
        basis: inputs.basis.clone(),
        sig_cfg: *inputs.sig_cfg,
        unassoc: inputs.unassoc,
        gp,
        noise_priors,
        templates,
        realized_c: inputs.basis.coeff_len(),
        em_objective: objectives,
    })
}
