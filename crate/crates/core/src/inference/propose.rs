//! Waveform-correlation birth proposal: a mixture of Gaussians centered at
//! the training events, weighted by normalized cross-correlation between
//! each event's stored templates and the observed signals.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geophys::{great_circle_km, EARTH_RADIUS_KM};
use crate::numeric::{log_sum_exp, normal_log_pdf};
use crate::signalmodel::StationSignal;
use crate::worldmodel::{destination, Event};
use crate::Result;

use super::{ChainConfig, ModelContext};

/// Normalized cross-correlation of `template` against `signal` at every lag
/// where the template fits; returns (best lag index, best value in [-1, 1]).
pub fn max_normalized_xcorr(signal: &[f64], template: &[f64]) -> Option<(usize, f64)> {
    let w = template.len();
    if w == 0 || signal.len() < w {
        return None;
    }
    let t_mean = template.iter().sum::<f64>() / w as f64;
    let t_centered: Vec<f64> = template.iter().map(|v| v - t_mean).collect();
    let t_norm = t_centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm == 0.0 {
        return None;
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for lag in 0..=(signal.len() - w) {
        let win = &signal[lag..lag + w];
        let s_mean = win.iter().sum::<f64>() / w as f64;
        let mut dot = 0.0;
        let mut s_norm2 = 0.0;
        for (s, t) in win.iter().zip(&t_centered) {
            let sc = s - s_mean;
            dot += sc * t;
            s_norm2 += sc * sc;
        }
        let denom = s_norm2.sqrt() * t_norm;
        if denom > 0.0 {
            let ncc = dot / denom;
            if ncc > best.1 {
                best = (lag, ncc);
            }
        }
    }
    if best.1 == f64::NEG_INFINITY {
        None
    } else {
        Some(best)
    }
}

/// One mixture component: a training event with its correlation evidence.
#[derive(Debug, Clone)]
struct Component {
    event: Event,
    log_weight: f64,
    /// Implied origin time from the best-correlating station and lag.
    t_implied: f64,
}

/// The assembled correlation proposal for one set of test signals.
pub struct CorrelationProposal {
    components: Vec<Component>,
    sigma_loc_km: f64,
    sigma_depth_km: f64,
    sigma_t_s: f64,
    sigma_mb: f64,
    /// Fallback: no templates, propose from the event prior.
    fallback: bool,
}

impl CorrelationProposal {
    pub fn build(
        ctx: &ModelContext,
        signals: &[StationSignal],
        cfg: &ChainConfig,
    ) -> CorrelationProposal {
        // group templates by training event (identified by index order)
        let mut components: Vec<Component> = Vec::new();
        let mut by_event: std::collections::BTreeMap<usize, Vec<&crate::training::Template>> =
            std::collections::BTreeMap::new();
        for t in ctx.templates {
            by_event.entry(t.event_index).or_default().push(t);
        }
        for (_, templates) in by_event {
            let event = templates[0].event;
            let mut score_sum = 0.0;
            let mut n_scored: f64 = 0.0;
            let mut best: Option<(f64, f64)> = None; // (ncc, implied origin)
            for t in &templates {
                let signal = &signals[t.station];
                if let Some((lag, ncc)) =
                    max_normalized_xcorr(&signal.samples, &t.samples)
                {
                    score_sum += ncc;
                    n_scored += 1.0;
                    // template sample 0 sits at (first-arrival + offset) in
                    // training time; the aligned lag implies the test
                    // first-arrival and hence the origin time
                    let t_lag = signal.time_of(lag);
                    let implied_first = t_lag - t.offset_s;
                    let travel = t.first_arrival_s - t.event.time;
                    let implied_origin = implied_first - travel;
                    if best.map(|(b, _)| ncc > b).unwrap_or(true) {
                        best = Some((ncc, implied_origin));
                    }
                }
            }
            if let Some((_, t_implied)) = best {
                components.push(Component {
                    event,
                    log_weight: cfg.corr_scale * score_sum / n_scored.max(1.0),
                    t_implied,
                });
            }
        }
        let fallback = components.is_empty();
        if !fallback {
            let z = log_sum_exp(
                &components
                    .iter()
                    .map(|c| c.log_weight)
                    .collect::<Vec<f64>>(),
            );
            for c in &mut components {
                c.log_weight -= z;
            }
        }
        CorrelationProposal {
            components,
            sigma_loc_km: cfg.corr_sigma_loc_km,
            sigma_depth_km: cfg.corr_sigma_depth_km,
            sigma_t_s: cfg.corr_sigma_t_s,
            sigma_mb: cfg.corr_sigma_mb,
            fallback,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    /// Mixture weights (for diagnostics and tests).
    pub fn weights(&self) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.log_weight.exp())
            .collect()
    }

    /// Log density of `e` in the canonical event measure; the location
    /// factor is a tangent-plane Gaussian with sphere-area correction.
    pub fn log_density(&self, ctx: &ModelContext, e: &Event) -> f64 {
        if self.fallback {
            return ctx.event_log_prior(e);
        }
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let d = great_circle_km(e.lon, e.lat, c.event.lon, c.event.lat);
            // N((east, north); 0, sigma^2 I) on the tangent plane, corrected
            // by the exp-map area ratio (d/R)/sin(d/R)
            let mut log_loc = -d * d / (2.0 * self.sigma_loc_km * self.sigma_loc_km)
                - (2.0 * std::f64::consts::PI * self.sigma_loc_km * self.sigma_loc_km).ln();
            if d > 1e-9 {
                let ang = d / EARTH_RADIUS_KM;
                log_loc += (ang / ang.sin().max(1e-12)).ln();
            }
            let log_depth = trunc_normal_log_pdf(
                e.depth,
                c.event.depth,
                self.sigma_depth_km,
                0.0,
                ctx.prior.depth_max,
            );
            let log_t = normal_log_pdf(e.time, c.t_implied, self.sigma_t_s * self.sigma_t_s);
            let log_mb = trunc_normal_log_pdf(
                e.mb,
                c.event.mb,
                self.sigma_mb,
                ctx.prior.mb_min,
                ctx.prior.mb_max,
            );
            terms.push(c.log_weight + log_loc + log_depth + log_t + log_mb);
        }
        log_sum_exp(&terms)
    }

    /// Draw an event; returns it with its exact log density.
    pub fn propose(&self, ctx: &ModelContext, rng: &mut ChaCha8Rng) -> (Event, f64) {
        if self.fallback {
            let e = ctx.sample_event(rng);
            let lq = ctx.event_log_prior(&e);
            return (e, lq);
        }
        // sample a component
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.log_weight.exp();
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.components[idx];
        // location: tangent-plane Gaussian, thinned by the exp-map area
        // ratio so that sampling matches the stated density
        let (lon, lat) = loop {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let d = self.sigma_loc_km * (dx * dx + dy * dy).sqrt();
            if d >= std::f64::consts::PI * EARTH_RADIUS_KM {
                continue;
            }
            let ang = d / EARTH_RADIUS_KM;
            let keep = if ang < 1e-9 { 1.0 } else { ang.sin() / ang };
            if rng.random::<f64>() < keep {
                let bearing = rng.random_range(0.0..std::f64::consts::TAU);
                break destination(c.event.lon, c.event.lat, bearing, d);
            }
        };
        let depth = sample_trunc_normal(
            c.event.depth,
            self.sigma_depth_km,
            0.0,
            ctx.prior.depth_max,
            rng,
        );
        let time = c.t_implied + self.sigma_t_s * rng.sample::<f64, _>(StandardNormal);
        let mb = sample_trunc_normal(
            c.event.mb,
            self.sigma_mb,
            ctx.prior.mb_min,
            ctx.prior.mb_max,
            rng,
        );
        let e = Event {
            lon,
            lat,
            depth,
            time,
            mb,
        };
        let lq = self.log_density(ctx, &e);
        (e, lq)
    }
}

fn trunc_normal_log_pdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if x < lo || x > hi {
        return f64::NEG_INFINITY;
    }
    let z = crate::numeric::normal_cdf((hi - mean) / sd) - crate::numeric::normal_cdf((lo - mean) / sd);
    normal_log_pdf(x, mean, sd * sd) - z.max(1e-300).ln()
}

fn sample_trunc_normal(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = mean + sd * rng.sample::<f64, _>(StandardNormal);
        if x >= lo && x <= hi {
            return x;
        }
    }
}

/// Spec-level entry point: build the mixture for the given signals and draw
/// one proposal.
pub fn correlation_propose(
    ctx: &ModelContext,
    signals: &[StationSignal],
    cfg: &ChainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Event, f64)> {
    let proposal = CorrelationProposal::build(ctx, signals, cfg);
    Ok(proposal.propose(ctx, rng))
}
