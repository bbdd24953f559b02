/// Draw one GP realization over the events for each (station, phase):
/// arrival-time residuals correlated across nearby events.
fn sample_tau_residuals(
    events: &[Event],
    hyper: &GpHyper,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let n = events.len();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = events[i].surface_distance_km(&events[j]);
            let v = hyper.sigma_f2 * seismon::gp::matern32(d, hyper.lengthscale_km);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hyper.sigma_n2;
    }
    let (chol, _) = Cholesky::with_jitter(&k, 1e-6).unwrap();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| (0..=i).map(|j| chol.l[(i, j)] * z[j]).sum())
        .collect()
}

struct SynthScenario {
    scenario: Scenario,
    events: Vec<Event>,
    signals: Vec<StationSignal>,
    /// true arrival-time residuals per (station, phase, event)
    residuals: Vec<Vec<Vec<f64>>>,
    chain_cfg: ChainConfig,
    gp_cfg: GpFitConfig,
    train_cfg: TrainingConfig,
}

fn build_scenario(n_events: usize, n_stations: usize, seed: u64) -> SynthScenario {
    let mut r = rng(seed);
    // extra tail so every phase of the last event arrives inside the window
    let span = 400.0 * (n_events as f64 + 1.0);
    let scenario = Scenario::new(n_stations, span);
    // events clustered in a ~300 km region so GP residuals correlate
    let events: Vec<Event> = (0..n_events)
        .map(|i| Event {
            lon: 20.0 + r.random_range(-1.5..1.5),
            lat: 20.0 + r.random_range(-1.5..1.5),
            depth: r.random_range(0.0..50.0),
            time: (i as f64 + 0.3) * 400.0,
            mb: r.random_range(3.5..4.5),
        })
        .collect();
    let truth_hyper = GpHyper {
        sigma_f2: 1.0,
        lengthscale_km: 100.0,
        sigma_n2: 0.05,
    };
    let noise = NoiseParams::new(0.0, 0.0025, vec![0.4]).unwrap();
    let mut signals = Vec::new();
    let mut residuals = vec![vec![vec![0.0; n_events]; 2]; n_stations];
    for st in 0..n_stations {
        let mut arrivals = Vec::new();
        for phase in scenario.phases.ids() {
            let res = sample_tau_residuals(&events, &truth_hyper, &mut r);
            residuals[st][phase.0] = res.clone();
            for (ev_idx, event) in events.iter().enumerate() {
                let tau_bar = predict_travel_time(
                    event,
                    &scenario.stations[st],
                    phase,
                    &scenario.vm,
                )
                .unwrap();
                let log_amp = predict_log_amplitude(
                    event,
                    &scenario.stations[st],
                    phase,
                    &scenario.am,
                )
                .unwrap();
                let theta = ArrivalParams::from_log_shape(
                    tau_bar + res[ev_idx],
                    [-0.3, log_amp, -0.7, -1.6],
                )
                .unwrap();
                arrivals.push(Arrival {
                    station: st,
                    phase,
                    theta,
                    association: None,
                    coeff_mean: vec![0.0; scenario.basis.coeff_len()],
                    coeff_var: vec![1.0; scenario.basis.coeff_len()],
                });
            }
        }
        let window = SignalWindow {
            start_time: 0.0,
            n_samples: (span * 10.0) as usize,
            rate_hz: 10.0,
        };
        let refs: Vec<&Arrival> = arrivals.iter().collect();
        signals.push(
            synthesize(
                st,
                &refs,
                &noise,
                &window,
                &scenario.basis,
                &scenario.sig_cfg,
                &mut r,
            )
            .unwrap(),
        );
    }
    let chain_cfg = ChainConfig::default();
    let gp_cfg = GpFitConfig {
        restarts: 3,
        max_iters: 80,
        ..GpFitConfig::default()
    };
    let train_cfg = TrainingConfig {
        n_em: 2,
        e_sweeps: 250,
        noise_sweeps: 200,
        ..TrainingConfig::default()
    };
    SynthScenario {
        scenario,
        events,
        signals,
        residuals,
        chain_cfg,
        gp_cfg,
        train_cfg,
    }
}

fn inputs<'a>(s: &'a SynthScenario, bulletin: &'a [Event]) -> TrainingInputs<'a> {
    TrainingInputs {
        stations: &s.scenario.stations,
        phases: &s.scenario.phases,
        vm: &s.scenario.vm,
        am: &s.scenario.am,
        prior: &s.scenario.prior,
        basis: &s.scenario.basis,
        sig_cfg: &s.scenario.sig_cfg,
        unassoc: s.chain_cfg.unassoc,
        bulletin,
        signals: &s.signals,
        chain_cfg: &s.chain_cfg,
        gp_cfg: &s.gp_cfg,
        cfg: &s.train_cfg,
        ar_order: 1,
    }
}

