//! Single-chain inference driver: sweep rounds interleaved with jump moves,
//! posterior-sample collection, and scoring.

use rand_chacha::ChaCha8Rng;

use crate::evaluation::Gating;
use crate::signalmodel::{NoiseParams, StationSignal};
use crate::worldmodel::{Event, WorldState};
use crate::Result;

use super::jump::CompositeKind;
use super::{
    custom_moves, event_birth_death, mh_sweep, score_events, split_merge_repropose,
    unassociated_birth_death, Chain, ChainConfig, ModelContext, ScoredEvent, SweepStats,
};

/// Result of one chain run.
#[derive(Debug, Clone)]
pub struct ChainRunResult {
    /// Post-burn-in event snapshots, one per sweep round.
    pub samples: Vec<Vec<Event>>,
    pub scored: Vec<ScoredEvent>,
    pub stats: SweepStats,
    pub accepted_jumps: usize,
}

/// Moment-based initial noise parameters for a station signal.
pub fn init_noise(signal: &StationSignal, ar_order: usize) -> NoiseParams {
    let n = signal.len().max(2);
    let mean = signal.samples.iter().sum::<f64>() / n as f64;
    let var = signal
        .samples
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    let mut phi = vec![0.0; ar_order];
    if ar_order >= 1 && var > 0.0 {
        let mut lag1 = 0.0;
        for i in 1..signal.len() {
            lag1 += (signal.samples[i] - mean) * (signal.samples[i - 1] - mean);
        }
        lag1 /= (n - 1) as f64;
        phi[0] = (lag1 / var).clamp(-0.9, 0.9);
    }
    let innov = (var * (1.0 - phi[0].powi(2).min(0.99))).max(1e-10);
    let _ = &phi;
    NoiseParams::new(mean, innov, phi).unwrap_or_else(|_| {
        NoiseParams::white(mean, var.max(1e-10)).expect("white noise params valid")
    })
}

/// Run one chain from an empty world state.
pub fn run_chain(
    ctx: ModelContext,
    cfg: &ChainConfig,
    signals: &[StationSignal],
    rng: &mut ChaCha8Rng,
) -> Result<ChainRunResult> {
    let ar_order = ctx
        .noise_priors
        .first()
        .map(|p| p.phi_mean.len())
        .unwrap_or(1);
    let noise: Vec<NoiseParams> = signals.iter().map(|s| init_noise(s, ar_order)).collect();
    let state = WorldState::new(signals.len(), noise);
    let mut chain = Chain::new(ctx, cfg, signals, state)?;
    run_chain_from(&mut chain, rng)
}

/// Run the configured schedule on an existing chain.
pub fn run_chain_from(chain: &mut Chain, rng: &mut ChaCha8Rng) -> Result<ChainRunResult> {
    let cfg = chain.cfg;
    let burn = (cfg.sweeps as f64 * cfg.burn_in_frac).floor() as usize;
    let mut samples = Vec::new();
    let mut stats = SweepStats::default();
    let mut accepted_jumps = 0usize;
    for sweep in 0..cfg.sweeps {
        let s = mh_sweep(chain, rng)?;
        stats.merge(&s);
        for _ in 0..cfg.moves.unassoc_birth_death {
            if unassociated_birth_death(chain, rng)? {
                accepted_jumps += 1;
            }
        }
        for _ in 0..cfg.moves.event_birth_death {
            if event_birth_death(chain, rng)? {
                accepted_jumps += 1;
            }
        }
        for _ in 0..cfg.moves.split_merge {
            if split_merge_repropose(chain, CompositeKind::Split, rng)? {
                accepted_jumps += 1;
            }
            if split_merge_repropose(chain, CompositeKind::Merge, rng)? {
                accepted_jumps += 1;
            }
        }
        for _ in 0..cfg.moves.repropose {
            if split_merge_repropose(chain, CompositeKind::Repropose, rng)? {
                accepted_jumps += 1;
            }
        }
        for _ in 0..cfg.moves.custom {
            custom_moves(chain, rng)?;
        }
        if sweep >= burn {
            samples.push(chain.state.events.values().copied().collect());
        }
    }
    let gating = Gating {
        max_deg: cfg.score_gate_deg,
        max_s: cfg.score_gate_s,
    };
    let scored = score_events(&samples, &gating);
    Ok(ChainRunResult {
        samples,
        scored,
        stats,
        accepted_jumps,
    })
}
