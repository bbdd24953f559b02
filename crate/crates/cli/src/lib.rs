//! Command implementations behind the `seismon` binary: scenario synthesis,
//! model training, block-parallel inference with chain merging, bulletin
//! evaluation, and plot-data emission. Every command is a pure function of
//! its inputs, the seed, and the configuration; outputs embed both.

use std::path::{Path, PathBuf};

use rand::RngExt;
use rayon::prelude::*;
use serde::Serialize;

use seismon::config::RunConfig;
use seismon::envelope::ArrivalParams;
use seismon::evaluation::{
    de_novo_subset, match_bulletins, mean_location_error, pr_curve, precision_recall, Gating,
};
use seismon::geophys::{predict_log_amplitude, predict_travel_time, Station};
use seismon::gp::{matern32, GpHyper};
use seismon::inference::{merge_chains, run_chain, ScoredEvent};
use seismon::io;
use seismon::linalg::{Cholesky, Mat};
use seismon::seedtree;
use seismon::signalmodel::{synthesize, Arrival, NoiseParams, SignalWindow, StationSignal};
use seismon::training::{em_fit, TrainingInputs};
use seismon::wavelet::WaveletBasis;
use seismon::worldmodel::{sample_world, Event, EventPrior, LocationPrior};
use seismon::{Error, Result};

fn out_path(cfg: &RunConfig, configured: &str, default_name: &str) -> PathBuf {
    if configured.is_empty() {
        Path::new(&cfg.paths.output_dir).join(default_name)
    } else {
        PathBuf::from(configured)
    }
}

fn write_manifest(cfg: &RunConfig, command: &str, seed: u64) -> Result<()> {
    let dir = PathBuf::from(&cfg.paths.output_dir);
    std::fs::create_dir_all(&dir)?;
    io::write_manifest(
        &dir,
        &io::RunManifest {
            command: command.to_string(),
            seed,
            config_hash: cfg.config_hash(),
        },
    )
}

/// Event prior from configuration plus (optionally) a training bulletin:
/// the rate defaults to the maximum-likelihood n/T and the location prior
/// to a KDE over the bulletin locations.
pub fn build_prior(cfg: &RunConfig, bulletin: Option<&[Event]>, window_s: f64) -> Result<EventPrior> {
    let p = &cfg.prior;
    let rate = if p.rate_per_s > 0.0 {
        p.rate_per_s
    } else if let Some(events) = bulletin {
        (events.len().max(1) as f64) / window_s
    } else {
        return Err(Error::config(
            "prior.rate_per_s must be set when no training bulletin is available",
        ));
    };
    let mut kde: Vec<(f64, f64)> = p.kde_points.iter().map(|q| (q[0], q[1])).collect();
    if kde.is_empty() {
        if let Some(events) = bulletin {
            kde = events.iter().map(|e| (e.lon, e.lat)).collect();
        }
    }
    let location = if kde.is_empty() {
        LocationPrior::uniform()
    } else {
        LocationPrior::new(kde, p.kde_bandwidth_km, p.uniform_weight)?
    };
    Ok(EventPrior {
        rate_per_s: rate,
        window_s,
        location,
        depth_max: p.depth_max_km,
        mb_min: p.mb_min,
        mb_max: p.mb_max,
        gr_b: p.gr_b,
    })
}

fn basis_from(cfg: &RunConfig) -> Result<WaveletBasis> {
    WaveletBasis::for_window(
        cfg.signal.modulation_window_s,
        cfg.signal.rate_hz,
        cfg.signal.wavelet_levels,
    )
}

/// Deterministic per-station waveform stem.
fn waveform_stem(station: &Station) -> String {
    format!("waveform_{}", station.id)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Sample a scenario from the generative model and write waveforms, the
/// ground-truth bulletin, and a manifest.
pub fn cmd_synth(cfg: &RunConfig, seed: u64) -> Result<()> {
    let stations = io::read_stations(Path::new(&cfg.paths.stations))?;
    if stations.is_empty() {
        return Err(Error::config("synthesis needs at least one station"));
    }
    let phases = cfg.phase_set()?;
    let vm = cfg.velocity_model()?;
    let am = cfg.amplitude_model()?;
    let basis = basis_from(cfg)?;
    let window_s = cfg.synth.window_s;
    let prior = build_prior(cfg, None, window_s)?;

    let mut rng = seedtree::rng_for(seed, "synth-events");
    let events: Vec<Event> = if cfg.synth.events.is_empty() {
        sample_world(&prior, &mut rng)?
    } else {
        cfg.synth
            .events
            .iter()
            .map(|q| Event {
                lon: q[0],
                lat: q[1],
                depth: q[2],
                time: q[3],
                mb: q[4],
            })
            .collect()
    };

    // correlated wavelet-coefficient draws per (station, phase): nearby
    // events share modulation structure under the generator GP
    let gen_hyper = GpHyper {
        sigma_f2: cfg.synth.gen_sigma_f2,
        lengthscale_km: cfg.synth.gen_lengthscale_km,
        sigma_n2: cfg.synth.gen_sigma_n2,
    };
    let n_ev = events.len();
    let coeff_chol = if n_ev > 0 {
        let mut k = Mat::zeros(n_ev, n_ev);
        for i in 0..n_ev {
            for j in 0..=i {
                let d = events[i].surface_distance_km(&events[j]);
                let v = gen_hyper.sigma_f2 * matern32(d, gen_hyper.lengthscale_km);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += gen_hyper.sigma_n2;
        }
        Some(Cholesky::with_jitter(&k, 1e-6)?.0)
    } else {
        None
    };

    let out_dir = PathBuf::from(&cfg.paths.waveform_dir);
    std::fs::create_dir_all(&out_dir)?;
    let noise = NoiseParams::new(
        cfg.synth.noise_mu,
        cfg.synth.noise_sd * cfg.synth.noise_sd,
        cfg.synth.noise_phi.clone(),
    )?;
    for (st_idx, station) in stations.iter().enumerate() {
        let mut st_rng = seedtree::rng_for(seed, &format!("synth-station-{}", station.id));
        // per-(event, phase) arrivals with correlated coefficients
        let mut arrivals: Vec<Arrival> = Vec::new();
        let mut coeffs: Vec<Vec<f64>> = vec![vec![0.0; basis.coeff_len()]; n_ev];
        if let Some(chol) = &coeff_chol {
            for c in 0..basis.coeff_len() {
                let z: Vec<f64> = (0..n_ev)
                    .map(|_| st_rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                for i in 0..n_ev {
                    let mut v = 0.0;
                    for j in 0..=i {
                        v += chol.l[(i, j)] * z[j];
                    }
                    coeffs[i][c] = v;
                }
            }
        }
        for (ev_idx, event) in events.iter().enumerate() {
            for phase in phases.ids() {
                let tau_bar = predict_travel_time(event, station, phase, &vm)?;
                let log_amp = predict_log_amplitude(event, station, phase, &am)?;
                let jitter = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                    cfg.synth.gen_shape_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
                };
                let tau = tau_bar
                    + cfg.synth.gen_tau_sd * st_rng.sample::<f64, _>(rand_distr::StandardNormal);
                let theta = ArrivalParams::from_log_shape(
                    tau,
                    [
                        -0.3 + jitter(&mut st_rng),
                        log_amp + jitter(&mut st_rng),
                        -0.7 + jitter(&mut st_rng),
                        -1.6 + jitter(&mut st_rng),
                    ],
                )
                .map_err(|e| Error::Numerical(format!("generated envelope invalid: {e}")))?;
                // coefficients shared per event across phases, scaled to the
                // unit-variance modulation convention
                let scale = (gen_hyper.sigma_f2 + gen_hyper.sigma_n2).sqrt().max(1e-9);
                let mean: Vec<f64> = coeffs[ev_idx].iter().map(|w| w / scale).collect();
                arrivals.push(Arrival {
                    station: st_idx,
                    phase,
                    theta,
                    association: None,
                    coeff_mean: mean,
                    coeff_var: vec![1e-12; basis.coeff_len()],
                });
            }
        }
        let window = SignalWindow {
            start_time: 0.0,
            n_samples: (window_s * cfg.signal.rate_hz).round() as usize,
            rate_hz: cfg.signal.rate_hz,
        };
        let refs: Vec<&Arrival> = arrivals.iter().collect();
        let signal = synthesize(
            st_idx,
            &refs,
            &noise,
            &window,
            &basis,
            &cfg.model,
            &mut st_rng,
        )?;
        io::write_waveform(
            &out_dir,
            &waveform_stem(station),
            &signal,
            &station.id,
            &cfg.signal.band_label,
        )?;
    }
    io::write_truth_bulletin(
        &out_path(cfg, &cfg.paths.training_bulletin, "truth.csv"),
        &events,
    )?;
    write_manifest(cfg, "synth", seed)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_signals(cfg: &RunConfig, stations: &[Station]) -> Result<Vec<StationSignal>> {
    let dir = Path::new(&cfg.paths.waveform_dir);
    stations
        .iter()
        .enumerate()
        .map(|(idx, st)| {
            let bin = dir.join(format!("{}.w32", waveform_stem(st)));
            let csv = dir.join(format!("{}.csv", waveform_stem(st)));
            let path = if bin.exists() { bin } else { csv };
            let (signal, _meta) = io::read_waveform(&path, idx)?;
            Ok(signal)
        })
        .collect()
}

/// Train the model from the bulletin and waveforms; writes the model file.
pub fn cmd_train(cfg: &RunConfig, seed: u64) -> Result<()> {
    let stations = io::read_stations(Path::new(&cfg.paths.stations))?;
    let bulletin: Vec<Event> = io::read_bulletin(Path::new(&out_path(
        cfg,
        &cfg.paths.training_bulletin,
        "truth.csv",
    )))?
    .into_iter()
    .map(|(e, _)| e)
    .collect();
    let signals = load_signals(cfg, &stations)?;
    let span = signals
        .iter()
        .map(|s| s.len() as f64 / s.rate_hz)
        .fold(0.0, f64::max);
    let prior = build_prior(cfg, Some(&bulletin), span.max(1.0))?;
    let phases = cfg.phase_set()?;
    let vm = cfg.velocity_model()?;
    let am = cfg.amplitude_model()?;
    let basis = basis_from(cfg)?;
    let inputs = TrainingInputs {
        stations: &stations,
        phases: &phases,
        vm: &vm,
        am: &am,
        prior: &prior,
        basis: &basis,
        sig_cfg: &cfg.model,
        unassoc: cfg.inference.unassoc,
        bulletin: &bulletin,
        signals: &signals,
        chain_cfg: &cfg.inference,
        gp_cfg: &cfg.gp,
        cfg: &cfg.training,
        ar_order: cfg.signal.ar_order,
    };
    let model = em_fit(&inputs, &cfg.signal.band_label, seedtree::derive(seed, "train"))?;
    io::write_model(Path::new(&cfg.paths.model_file), &model)?;
    write_manifest(cfg, "train", seed)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

/// Inference block: a slice of every station's signal.
struct Block {
    start: f64,
    signals: Vec<StationSignal>,
}

fn split_blocks(signals: &[StationSignal], block_s: f64, pad_s: f64) -> Vec<Block> {
    let t0 = signals
        .iter()
        .map(|s| s.start_time)
        .fold(f64::INFINITY, f64::min);
    let t1 = signals
        .iter()
        .map(|s| s.start_time + s.len() as f64 / s.rate_hz)
        .fold(f64::NEG_INFINITY, f64::max);
    if !t0.is_finite() || t1 <= t0 {
        return Vec::new();
    }
    let n_blocks = ((t1 - t0) / block_s).ceil().max(1.0) as usize;
    (0..n_blocks)
        .map(|b| {
            let start = t0 + b as f64 * block_s;
            let end = (start + block_s + pad_s).min(t1);
            let sliced = signals
                .iter()
                .map(|s| {
                    let i0 = (((start - s.start_time) * s.rate_hz).floor().max(0.0)) as usize;
                    let i1 = ((((end - s.start_time) * s.rate_hz).ceil()) as usize).min(s.len());
                    StationSignal {
                        station: s.station,
                        start_time: s.time_of(i0.min(s.len())),
                        rate_hz: s.rate_hz,
                        samples: s.samples[i0.min(s.len())..i1.max(i0.min(s.len()))].to_vec(),
                    }
                })
                .collect();
            Block {
                start,
                signals: sliced,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct TraceRecord {
    block: usize,
    chain: usize,
    sweep: usize,
    events: Vec<Event>,
}

/// Run block-parallel multi-chain inference under a trained model and write
/// the merged bulletin (plus an optional sample trace).
pub fn cmd_infer(cfg: &RunConfig, seed: u64, jobs: usize) -> Result<()> {
    let mut model = io::read_model(Path::new(&cfg.paths.model_file))?;
    model.refresh()?;
    let stations = model.stations.clone();
    let signals = load_signals_for_model(cfg, &stations)?;
    let blocks = split_blocks(&signals, cfg.inference.block_s, 60.0);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(if jobs == 0 { rayon::current_num_threads() } else { jobs })
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;

    let tasks: Vec<(usize, usize)> = (0..blocks.len())
        .flat_map(|b| (0..cfg.inference.chains.max(1)).map(move |c| (b, c)))
        .collect();
    let results: Vec<Result<(usize, usize, Vec<ScoredEvent>, Vec<Vec<Event>>)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(b, c)| {
                let block = &blocks[b];
                let span = block
                    .signals
                    .iter()
                    .map(|s| s.len() as f64 / s.rate_hz)
                    .fold(0.0, f64::max)
                    .max(1.0);
                let prior = EventPrior {
                    window_s: span,
                    ..model.prior.clone()
                };
                let mut ctx = model.context(&prior, block.start);
                ctx.ablate_wavelet_gp = cfg.inference.ablate_wavelet_gp;
                let mut rng =
                    seedtree::rng_for_idx(seed, "infer-chain", (b * 1000 + c) as u64);
                let run = run_chain(ctx, &cfg.inference, &block.signals, &mut rng)?;
                Ok((b, c, run.scored, run.samples))
            })
            .collect()
    });

    let mut bulletins: Vec<Vec<ScoredEvent>> = Vec::new();
    let mut trace_records: Vec<TraceRecord> = Vec::new();
    for r in results {
        let (b, c, scored, samples) = r?;
        bulletins.push(scored);
        if !cfg.paths.trace_file.is_empty() {
            for (sweep, events) in samples.iter().enumerate() {
                trace_records.push(TraceRecord {
                    block: b,
                    chain: c,
                    sweep,
                    events: events.clone(),
                });
            }
        }
    }
    let gating = Gating {
        max_deg: cfg.inference.score_gate_deg,
        max_s: cfg.inference.score_gate_s,
    };
    let merged = merge_chains(&bulletins, &gating);
    io::write_inferred_bulletin(
        &out_path(cfg, &cfg.paths.inferred_bulletin, "bulletin.csv"),
        &merged,
    )?;
    if !cfg.paths.trace_file.is_empty() {
        let mut text = String::new();
        for rec in &trace_records {
            text.push_str(&serde_json::to_string(rec).map_err(|e| {
                Error::config(format!("trace serialization: {e}"))
            })?);
            text.push('\n');
        }
        io::write_atomic(Path::new(&cfg.paths.trace_file), text.as_bytes())?;
    }
    write_manifest(cfg, "infer", seed)?;
    Ok(())
}

fn load_signals_for_model(cfg: &RunConfig, stations: &[Station]) -> Result<Vec<StationSignal>> {
    load_signals(cfg, stations)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub n_inferred: usize,
    pub n_reference: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub mean_location_error_km: Option<f64>,
    pub de_novo_reference: usize,
    pub de_novo_matched: usize,
}

/// Match the inferred bulletin against the reference and compute metrics.
pub fn evaluate(
    inferred: &[(Event, Option<f64>)],
    reference: &[Event],
    training: &[Event],
    gating: &Gating,
    de_novo_radius_km: f64,
) -> Metrics {
    let inf_events: Vec<Event> = inferred.iter().map(|(e, _)| *e).collect();
    let matching = match_bulletins(&inf_events, reference, gating);
    let (precision, recall) = precision_recall(&matching, inf_events.len(), reference.len());
    let de_novo = de_novo_subset(reference, training, de_novo_radius_km);
    let de_novo_matching = match_bulletins(&inf_events, &de_novo, gating);
    Metrics {
        n_inferred: inf_events.len(),
        n_reference: reference.len(),
        matched: matching.cardinality(),
        precision,
        recall,
        mean_location_error_km: mean_location_error(&matching),
        de_novo_reference: de_novo.len(),
        de_novo_matched: de_novo_matching.cardinality(),
    }
}

/// Evaluate the inferred bulletin against the reference; writes a metrics
/// report.
pub fn cmd_eval(cfg: &RunConfig, seed: u64) -> Result<Metrics> {
    let inferred = io::read_bulletin(Path::new(&out_path(
        cfg,
        &cfg.paths.inferred_bulletin,
        "bulletin.csv",
    )))?;
    let reference: Vec<Event> = io::read_bulletin(Path::new(&cfg.paths.reference_bulletin))?
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    let training: Vec<Event> = if cfg.paths.training_bulletin.is_empty() {
        Vec::new()
    } else {
        io::read_bulletin(Path::new(&cfg.paths.training_bulletin))
            .map(|v| v.into_iter().map(|(e, _)| e).collect())
            .unwrap_or_default()
    };
    let gating = Gating::default();
    let metrics = evaluate(&inferred, &reference, &training, &gating, 50.0);
    let text = toml::to_string(&metrics)
        .map_err(|e| Error::config(format!("metrics serialization: {e}")))?;
    io::write_atomic(
        &Path::new(&cfg.paths.output_dir).join("metrics.toml"),
        text.as_bytes(),
    )?;
    write_manifest(cfg, "eval", seed)?;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// emit-plots
// ---------------------------------------------------------------------------

/// Write plot data: precision-recall curve, location-error histogram, and
/// recall by magnitude band. CSV outputs, one file each.
pub fn cmd_emit_plots(cfg: &RunConfig, seed: u64) -> Result<()> {
    let inferred = io::read_bulletin(Path::new(&out_path(
        cfg,
        &cfg.paths.inferred_bulletin,
        "bulletin.csv",
    )))?;
    let reference: Vec<Event> = io::read_bulletin(Path::new(&cfg.paths.reference_bulletin))?
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    let gating = Gating::default();
    let dir = PathBuf::from(&cfg.paths.output_dir);
    std::fs::create_dir_all(&dir)?;

    // PR curve over confidence thresholds
    let scored: Vec<(Event, f64)> = inferred
        .iter()
        .map(|(e, c)| (*e, c.unwrap_or(1.0)))
        .collect();
    let curve = pr_curve(&scored, &reference, &gating);
    let mut text = String::from("threshold,precision,recall,n_kept\n");
    for p in &curve {
        text.push_str(&format!(
            "{:.4},{:.6},{:.6},{}\n",
            p.threshold, p.precision, p.recall, p.n_kept
        ));
    }
    io::write_atomic(&dir.join("pr_curve.csv"), text.as_bytes())?;

    // location-error histogram of matched pairs (10 km bins)
    let inf_events: Vec<Event> = inferred.iter().map(|(e, _)| *e).collect();
    let matching = match_bulletins(&inf_events, &reference, &gating);
    let mut hist = vec![0usize; 25];
    for (_, _, d) in &matching.pairs {
        let bin = ((d / 10.0) as usize).min(24);
        hist[bin] += 1;
    }
    let mut text = String::from("error_km_lo,error_km_hi,count\n");
    for (b, count) in hist.iter().enumerate() {
        text.push_str(&format!("{},{},{}\n", b * 10, (b + 1) * 10, count));
    }
    io::write_atomic(&dir.join("location_error_hist.csv"), text.as_bytes())?;

    // recall by magnitude band
    let mut text = String::from("mb_lo,mb_hi,n_reference,n_matched,recall\n");
    for b in 0..12 {
        let lo = 2.0 + 0.5 * b as f64;
        let hi = lo + 0.5;
        let in_band: Vec<usize> = (0..reference.len())
            .filter(|&i| reference[i].mb >= lo && reference[i].mb < hi)
            .collect();
        let matched = matching
            .pairs
            .iter()
            .filter(|(_, r, _)| reference[*r].mb >= lo && reference[*r].mb < hi)
            .count();
        let recall = if in_band.is_empty() {
            1.0
        } else {
            matched as f64 / in_band.len() as f64
        };
        text.push_str(&format!(
            "{:.1},{:.1},{},{},{:.6}\n",
            lo,
            hi,
            in_band.len(),
            matched,
            recall
        ));
    }
    io::write_atomic(&dir.join("recall_by_mb.csv"), text.as_bytes())?;
    write_manifest(cfg, "emit-plots", seed)?;
    Ok(())
}
