//! EM training on synthetic data: posterior extraction, GP recovery
//! against a mean-function-only baseline, and seeded determinism.

mod common;

use common::*;
use rand::RngExt;
use rand_distr::StandardNormal;
use seismon::envelope::ArrivalParams;
use seismon::geophys::{predict_log_amplitude, predict_travel_time};
use seismon::gp::{GpFitConfig, GpHyper, GpInput};
use seismon::inference::ChainConfig;
use seismon::linalg::{Cholesky, Mat};
use seismon::signalmodel::{synthesize, Arrival, NoiseParams, SignalWindow, StationSignal};
use seismon::training::{e_step, em_fit, StationNoisePrior, TrainingConfig, TrainingInputs};
use seismon::worldmodel::Event;

include!("common/training_helpers.rs");

#[test]
fn em_beats_mean_function_baseline_on_held_out_events() {
    // train on the first 40 events, hold out the last 10; the GP must
    // predict held-out arrival-time residuals better than the physics mean
    // alone
    let s = build_scenario(50, 4, 12345);
    let train_events = &s.events[..40];
    let model = em_fit(&inputs(&s, train_events), "test-band", 99).unwrap();
    let gp = model.gp.as_ref().expect("trained GP set");

    let mut err_gp = 0.0;
    let mut err_baseline = 0.0;
    let mut n = 0.0;
    for st in 0..s.scenario.stations.len() {
        for phase in s.scenario.phases.ids() {
            let models = gp.models(st, phase);
            for ev_idx in 40..50 {
                let event = s.events[ev_idx];
                let tau_bar = predict_travel_time(
                    &event,
                    &s.scenario.stations[st],
                    phase,
                    &s.scenario.vm,
                )
                .unwrap();
                let input = GpInput {
                    lon: event.lon,
                    lat: event.lat,
                    mb: event.mb,
                    dist_km: seismon::geophys::great_circle_km(
                        event.lon,
                        event.lat,
                        s.scenario.stations[st].lon,
                        s.scenario.stations[st].lat,
                    ),
                };
                let (pred, _) = models.tau.predict(&input, tau_bar);
                let truth = tau_bar + s.residuals[st][phase.0][ev_idx];
                err_gp += (pred - truth).powi(2);
                err_baseline += (tau_bar - truth).powi(2);
                n += 1.0;
            }
        }
    }
    let rmse_gp = (err_gp / n).sqrt();
    let rmse_baseline = (err_baseline / n).sqrt();
    println!("held-out tau RMSE: GP {rmse_gp:.4} vs mean-function {rmse_baseline:.4}");
    assert!(
        rmse_gp < rmse_baseline,
        "GP RMSE {rmse_gp} not better than baseline {rmse_baseline}"
    );
}

#[test]
fn em_handles_degenerate_inputs() {
    let s = build_scenario(1, 1, 3);
    // zero events: prior-default GPs plus noise priors from raw signals
    let model_empty = em_fit(&inputs(&s, &[]), "band", 1).unwrap();
    assert!(model_empty.gp.is_some());
    assert_eq!(model_empty.noise_priors.len(), 1);
    assert!(model_empty.templates.is_empty());

    // one event, one station: messages exist; GP fits fall back to defaults
    // under the n < 2 rule
    let model_one = em_fit(&inputs(&s, &s.events), "band", 2).unwrap();
    let gp = model_one.gp.as_ref().unwrap();
    let m = gp.models(0, seismon::geophys::PhaseId(0));
    assert_eq!(m.tau.regions.iter().map(|r| r.inputs.len()).sum::<usize>(), 1);
}

#[test]
fn e_step_is_deterministic_under_seed() {
    let s = build_scenario(3, 2, 77);
    let noise_priors: Vec<StationNoisePrior> =
        (0..2).map(|_| StationNoisePrior::broad(1)).collect();
    let a = e_step(&inputs(&s, &s.events), None, &noise_priors, 42).unwrap();
    let b = e_step(&inputs(&s, &s.events), None, &noise_priors, 42).unwrap();
    assert_eq!(a.arrivals.len(), b.arrivals.len());
    for (x, y) in a.arrivals.iter().zip(&b.arrivals) {
        assert_eq!(x.theta_moments, y.theta_moments);
        assert_eq!(x.nu, y.nu);
        assert_eq!(x.log_z.to_bits(), y.log_z.to_bits());
    }
    for (x, y) in a.noise.iter().zip(&b.noise) {
        assert_eq!(x.mu_samples, y.mu_samples);
    }
}

#[test]
fn e_step_recovers_onset_at_high_snr() {
    let s = build_scenario(2, 2, 31);
    let noise_priors: Vec<StationNoisePrior> =
        (0..2).map(|_| StationNoisePrior::broad(1)).collect();
    let result = e_step(&inputs(&s, &s.events), None, &noise_priors, 5).unwrap();
    for post in &result.arrivals {
        let truth_tau = predict_travel_time(
            &s.events[post.event_index],
            &s.scenario.stations[post.station],
            post.phase,
            &s.scenario.vm,
        )
        .unwrap()
            + s.residuals[post.station][post.phase.0][post.event_index];
        let err = (post.theta_moments[0].0 - truth_tau).abs();
        assert!(
            err < 0.5,
            "event {} station {} phase {:?}: tau posterior {:.3} vs truth {:.3}",
            post.event_index,
            post.station,
            post.phase,
            post.theta_moments[0].0,
            truth_tau
        );
    }
    // EM objective bookkeeping exists and is finite
    assert!(result.objective.is_finite());
}

#[test]
fn trained_model_roundtrips_bitwise() {
    let s = build_scenario(2, 1, 9);
    let model = em_fit(&inputs(&s, &s.events), "band", 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    seismon::io::write_model(&path, &model).unwrap();
    let back = seismon::io::read_model(&path).unwrap();
    // serialize both and compare bytes (cached fields regenerate identically)
    let a = bincode_bytes(&model);
    let b = bincode_bytes(&back);
    assert_eq!(a, b);
}

fn bincode_bytes(model: &seismon::training::TrainedModel) -> Vec<u8> {
    serde_json::to_vec(model).unwrap()
}
