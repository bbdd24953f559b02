//! Geweke joint-distribution test on a reduced model: forward prior/data
//! draws against successive-conditional (sample data, then posterior-sweep
//! the parameters) draws. Any inconsistency between the generative model
//! and the Metropolis-Hastings targets shows up as diverging moments.

mod common;

use common::*;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use seismon::envelope::ArrivalParams;
use seismon::geophys::PhaseId;
use seismon::inference::{mh_sweep, Chain, ModelContext, UnassocPrior};
use seismon::signalmodel::{synthesize, Arrival, NoiseParams, SignalConfig, SignalWindow};
use seismon::training::{StationNoisePrior, VarPrior};
use seismon::wavelet::WaveletBasis;
use seismon::worldmodel::WorldState;

const SPAN_S: f64 = 12.8;
const RATE: f64 = 10.0;
const N_SAMPLES: usize = 128;

struct Reduced {
    scenario: Scenario,
    noise_prior: StationNoisePrior,
    ua: UnassocPrior,
}

impl Reduced {
    fn new() -> Reduced {
        let mut scenario = Scenario::new(1, SPAN_S);
        // moderate priors keep both streams in a well-conditioned regime
        // moderate amplitudes: strong enough that likelihood bugs shift
        // the moments, weak enough that the successive chain mixes across
        // the onset window inside the round budget
        scenario.cfg.unassoc = UnassocPrior {
            rate_per_s: 1.0 / SPAN_S,
            log_rho_mean: -0.5,
            log_rho_sd: 0.4,
            log_alpha_mean: -0.7,
            log_alpha_sd: 0.6,
            log_gamma_mean: -0.7,
            log_gamma_sd: 0.4,
            log_beta_mean: -1.2,
            log_beta_sd: 0.4,
        };
        scenario.sig_cfg = SignalConfig {
            env_max_dur_s: 30.0,
            ..SignalConfig::default()
        };
        // step sizes sized to the per-round conditional posterior (the data
        // carries ~70 effective samples), so the successive chain traverses
        // the priors in a few hundred rounds
        scenario.cfg.step_tau_s = 0.4;
        scenario.cfg.step_mu = 0.03;
        scenario.cfg.step_log_sigma2 = 0.2;
        scenario.cfg.step_phi = 0.08;
        let noise_prior = StationNoisePrior {
            mu_mean: 0.0,
            mu_sd: 0.5,
            phi_mean: vec![0.3],
            phi_sd: vec![0.2],
            var_prior: VarPrior::LogNormal {
                mu: (0.04f64).ln(),
                sd: 0.3,
            },
        };
        scenario.noise_priors = vec![noise_prior.clone()];
        let ua = scenario.cfg.unassoc;
        Reduced {
            scenario,
            noise_prior,
            ua,
        }
    }

    fn ctx(&self) -> ModelContext<'_> {
        self.scenario.ctx()
    }

    fn sample_params(&self, rng: &mut ChaCha8Rng) -> (ArrivalParams, NoiseParams) {
        let theta = self.ua.sample((0.0, SPAN_S), rng);
        let noise = self.noise_prior.sample(rng);
        (theta, noise)
    }

    fn synth(
        &self,
        theta: &ArrivalParams,
        noise: &NoiseParams,
        basis: &WaveletBasis,
        rng: &mut ChaCha8Rng,
    ) -> seismon::signalmodel::StationSignal {
        let arrival = Arrival::unassociated(0, PhaseId(0), *theta, basis);
        let window = SignalWindow {
            start_time: 0.0,
            n_samples: N_SAMPLES,
            rate_hz: RATE,
        };
        synthesize(
            0,
            &[&arrival],
            noise,
            &window,
            basis,
            &self.scenario.sig_cfg,
            rng,
        )
        .unwrap()
    }
}

fn track(theta: &ArrivalParams, noise: &NoiseParams) -> [f64; 4] {
    [theta.tau, theta.alpha, noise.mu, noise.sigma2]
}

#[test]
fn geweke_forward_vs_successive_conditional() {
    let reduced = Reduced::new();
    let rounds = 3000usize;
    let names = ["tau", "alpha", "mu", "sigma2"];

    // marginal-conditional stream: iid draws from the prior
    let mut r1 = rng(101);
    let mut forward: Vec<[f64; 4]> = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (theta, noise) = reduced.sample_params(&mut r1);
        // data does not affect the tracked moments in this stream
        forward.push(track(&theta, &noise));
    }

    // successive-conditional stream: resample data, then posterior sweeps
    // (the peak-shift move is part of the production kernel and speeds up
    // onset mixing across data regimes)
    let mut r2 = rng(202);
    let (mut theta, mut noise) = reduced.sample_params(&mut r2);
    let mut successive: Vec<[f64; 4]> = Vec::with_capacity(rounds);
    let warmup = 500;
    for round in 0..rounds + warmup {
        let signal = reduced.synth(&theta, &noise, &reduced.scenario.basis, &mut r2);
        let signals = vec![signal];
        let mut state = WorldState::new(1, vec![noise.clone()]);
        let arrival = Arrival::unassociated(0, PhaseId(0), theta, &reduced.scenario.basis);
        let id = state.insert_arrival(0, arrival);
        let mut chain = Chain::new(
            reduced.ctx(),
            &reduced.scenario.cfg,
            &signals,
            state,
        )
        .unwrap();
        for _ in 0..8 {
            mh_sweep(&mut chain, &mut r2).unwrap();
            seismon::inference::custom_moves(&mut chain, &mut r2).unwrap();
        }
        theta = chain.state.arrivals[0][&id].theta;
        noise = chain.state.noise[0].clone();
        if round >= warmup {
            successive.push(track(&theta, &noise));
        }
    }

    for d in 0..4 {
        let f: Vec<f64> = forward.iter().map(|t| t[d]).collect();
        let s: Vec<f64> = successive.iter().map(|t| t[d]).collect();
        let se_f = (variance(&f) / f.len() as f64).sqrt();
        let se_s = batch_means_se(&s);
        let z = (mean(&f) - mean(&s)) / (se_f * se_f + se_s * se_s).sqrt();
        println!(
            "geweke {}: forward {:.4} (se {:.4}) vs successive {:.4} (se {:.4}) z = {:.2}",
            names[d],
            mean(&f),
            se_f,
            mean(&s),
            se_s,
            z
        );
        assert!(
            z.abs() < 4.0,
            "{}: |z| = {:.2} exceeds 4 (forward {:.4} vs successive {:.4})",
            names[d],
            z.abs(),
            mean(&f),
            mean(&s)
        );
    }
}
