//! Dimension-changing moves: unassociated-arrival birth/death, event
//! birth/death with auxiliary envelope adaptation, and the composed
//! repropose/split/merge moves.
//!
//! Bookkeeping convention: acceptance ratios are assembled from total state
//! priors with the theta factors of created/deleted arrivals omitted; the
//! omitted factors cancel against the parent-sampling densities, and the
//! auxiliary Metropolis-Hastings adaptation steps cancel path-wise because
//! the adaptation kernel leaves the conditional posterior invariant. Under
//! this convention a birth and its exact reverse death have log-ratios
//! summing to zero.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::envelope::ArrivalParams;
use crate::error::Error;
use crate::geophys::{predict_travel_time, PhaseId};
use crate::signalmodel::Arrival;
use crate::worldmodel::{ArrivalId, Event, EventId, WorldState};
use crate::Result;

use super::propose::CorrelationProposal;
use super::sweep::{theta_update_one, SweepStats};
use super::Chain;
use super::HoughGrid;

fn accept(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

// ---------------------------------------------------------------------------
// Unassociated arrival birth/death
// ---------------------------------------------------------------------------

/// Piecewise-constant onset-time proposal density proportional to a
/// smoothed signal envelope (|s - mu| moving average plus a floor).
pub struct OnsetProposal {
    start: f64,
    dt: f64,
    weights: Vec<f64>,
    total: f64,
}

impl OnsetProposal {
    pub fn build(signal: &crate::signalmodel::StationSignal, mu: f64) -> OnsetProposal {
        let n = signal.len().max(1);
        let dev: Vec<f64> = signal.samples.iter().map(|s| (s - mu).abs()).collect();
        // ~2 s one-sided moving average
        let half = ((2.0 * signal.rate_hz) as usize).max(1);
        let mut smooth = vec![0.0; n];
        let mut mean_dev = 0.0;
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let m: f64 = dev[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            smooth[i] = m;
            mean_dev += m;
        }
        mean_dev /= n as f64;
        // small uniform floor so flat stretches keep proposal mass without
        // drowning out genuine envelope structure
        let floor = (0.3 * mean_dev).max(1e-12);
        for s in &mut smooth {
            *s += floor;
        }
        let dt = 1.0 / signal.rate_hz;
        let total: f64 = smooth.iter().sum::<f64>() * dt;
        OnsetProposal {
            start: signal.start_time,
            dt,
            weights: smooth,
            total,
        }
    }

    pub fn log_density(&self, tau: f64) -> f64 {
        let idx = (tau - self.start) / self.dt;
        if idx < 0.0 || idx >= self.weights.len() as f64 {
            return f64::NEG_INFINITY;
        }
        (self.weights[idx as usize] / self.total).ln()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut u = rng.random::<f64>() * self.total;
        for (i, w) in self.weights.iter().enumerate() {
            let mass = w * self.dt;
            if u < mass {
                return self.start + (i as f64 + u / mass) * self.dt;
            }
            u -= mass;
        }
        self.start + (self.weights.len() as f64 - 1e-9) * self.dt
    }
}

fn total_unassociated(state: &WorldState) -> Vec<(usize, ArrivalId)> {
    let mut out = Vec::new();
    for (st, arrs) in state.arrivals.iter().enumerate() {
        for (id, a) in arrs {
            if a.association.is_none() {
                out.push((st, *id));
            }
        }
    }
    out
}

fn p_birth(m: usize) -> f64 {
    if m == 0 {
        1.0
    } else {
        0.5
    }
}

/// Reversible-jump birth/death of unassociated arrivals. Births draw the
/// onset time proportionally to the signal envelope and the shape from the
/// fixed Gaussian prior; deaths pick uniformly among unassociated arrivals.
///
/// The unassociated-arrival prior per station is a marked Poisson process:
/// Poisson count at `rate * span`, onset uniform, shape from the fixed
/// Gaussian, phase uniform over the configured set.
pub fn unassociated_birth_death(chain: &mut Chain, rng: &mut ChaCha8Rng) -> Result<bool> {
    if chain.state.n_stations() == 0 {
        return Ok(false);
    }
    let unassoc = total_unassociated(&chain.state);
    let m = unassoc.len();
    let n_phases = chain.ctx.phases.len() as f64;
    let go_birth = rng.random::<f64>() < p_birth(m);
    if go_birth {
        let st = rng.random_range(0..chain.state.n_stations());
        let onset = OnsetProposal::build(&chain.signals[st], chain.state.noise[st].mu);
        let tau = onset.sample(rng);
        let shape = chain.cfg.unassoc.sample_shape(rng);
        let theta = match ArrivalParams::from_log_shape(tau, shape) {
            Ok(t) => t,
            Err(_) => return Ok(false),
        };
        let arrival = Arrival::unassociated(st, pick_phase(chain, rng), theta, chain.ctx.basis);

        // prior ratio for adding one unassociated arrival:
        // Poisson(m+1)(m+1)! / (Poisson(m) m!) = rate, times the arrival's
        // own density (theta plus uniform phase label)
        let window = chain.window(st);
        let rate = chain.cfg.unassoc.rate_per_s * (window.1 - window.0);
        let d_prior =
            rate.ln() + chain.cfg.unassoc.log_density(&theta, window) - n_phases.ln();
        if d_prior == f64::NEG_INFINITY {
            return Ok(false);
        }
        let affected = chain.affected_range(st, &arrival);
        let olds: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
        let mut news = olds.clone();
        news.push(&arrival);
        let d_lik = match chain.station_delta(st, &olds, &news, affected) {
            Ok(d) => d,
            Err(Error::Capacity(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        drop((olds, news));
        let lq_fwd = p_birth(m).ln() - (chain.state.n_stations() as f64).ln()
            + onset.log_density(tau)
            + shape_log_density(&chain.cfg.unassoc, &shape)
            - n_phases.ln();
        let lq_rev = (1.0 - p_birth(m + 1)).ln() - ((m + 1) as f64).ln();
        let log_ratio = d_prior + d_lik + lq_rev - lq_fwd;
        if accept(log_ratio, rng) {
            chain.insert_arrival_tracked(st, arrival)?;
            return Ok(true);
        }
        Ok(false)
    } else {
        // death: uniform among unassociated arrivals
        let (st, id) = unassoc[rng.random_range(0..m)];
        let arrival = chain.state.arrivals[st][&id].clone();
        let window = chain.window(st);
        let rate = chain.cfg.unassoc.rate_per_s * (window.1 - window.0);
        let d_prior =
            -(rate.ln() + chain.cfg.unassoc.log_density(&arrival.theta, window) - n_phases.ln());
        let affected = chain.affected_range(st, &arrival);
        let olds: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
        let news: Vec<&Arrival> = chain.state.arrivals[st]
            .iter()
            .filter(|(aid, _)| **aid != id)
            .map(|(_, a)| a)
            .collect();
        let d_lik = match chain.station_delta(st, &olds, &news, affected) {
            Ok(d) => d,
            Err(Error::Capacity(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        drop((olds, news));
        let onset = OnsetProposal::build(&chain.signals[st], chain.state.noise[st].mu);
        let lq_fwd = (1.0 - p_birth(m)).ln() - (m as f64).ln();
        let shape = arrival.theta.log_shape();
        let lq_rev = p_birth(m - 1).ln() - (chain.state.n_stations() as f64).ln()
            + onset.log_density(arrival.theta.tau)
            + shape_log_density(&chain.cfg.unassoc, &shape)
            - n_phases.ln();
        let log_ratio = d_prior + d_lik + lq_rev - lq_fwd;
        if accept(log_ratio, rng) {
            chain.remove_arrival_tracked(st, id)?;
            return Ok(true);
        }
        Ok(false)
    }
}

fn pick_phase(chain: &Chain, rng: &mut ChaCha8Rng) -> PhaseId {
    PhaseId(rng.random_range(0..chain.ctx.phases.len()))
}

fn shape_log_density(prior: &super::UnassocPrior, shape: &[f64; 4]) -> f64 {
    use crate::numeric::normal_log_pdf as nl;
    nl(shape[0], prior.log_rho_mean, prior.log_rho_sd * prior.log_rho_sd)
        + nl(shape[1], prior.log_alpha_mean, prior.log_alpha_sd * prior.log_alpha_sd)
        + nl(shape[2], prior.log_gamma_mean, prior.log_gamma_sd * prior.log_gamma_sd)
        + nl(shape[3], prior.log_beta_mean, prior.log_beta_sd * prior.log_beta_sd)
}

// ---------------------------------------------------------------------------
// Event birth/death machinery
// ---------------------------------------------------------------------------

/// One (station, phase) slot of a birth plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanChoice {
    Associate(ArrivalId),
    Create,
}

pub type Plan = Vec<(usize, PhaseId, PlanChoice)>;

/// Candidate association weights for one (station, phase) given an event:
/// gated unassociated arrivals, softly preferring small onset residuals.
fn plan_candidates(
    chain: &Chain,
    state: &WorldState,
    event: &Event,
    st: usize,
    phase: PhaseId,
) -> Result<Vec<(ArrivalId, f64)>> {
    let station = &chain.ctx.stations[st];
    let tau_bar = predict_travel_time(event, station, phase, chain.ctx.vm)?;
    let mut out = Vec::new();
    for (id, a) in &state.arrivals[st] {
        if a.association.is_some() || a.phase != phase {
            continue;
        }
        let dt = a.theta.tau - tau_bar;
        if dt.abs() <= chain.cfg.assoc_gate_s {
            let w = (-0.5 * (dt / chain.cfg.assoc_sigma_s).powi(2)).exp();
            out.push((*id, w));
        }
    }
    Ok(out)
}

/// Sample an association plan for a proposed event; returns the plan and
/// its log-probability.
fn sample_plan(
    chain: &Chain,
    state: &WorldState,
    event: &Event,
    rng: &mut ChaCha8Rng,
) -> Result<(Plan, f64)> {
    let mut plan = Vec::new();
    let mut log_q = 0.0;
    for st in 0..chain.state.n_stations() {
        for phase in chain.ctx.phases.ids() {
            let cands = plan_candidates(chain, state, event, st, phase)?;
            let total: f64 = chain.cfg.new_arrival_weight + cands.iter().map(|c| c.1).sum::<f64>();
            let mut u = rng.random::<f64>() * total;
            let mut choice = PlanChoice::Create;
            let mut w_choice = chain.cfg.new_arrival_weight;
            for (id, w) in &cands {
                if u < *w {
                    choice = PlanChoice::Associate(*id);
                    w_choice = *w;
                    break;
                }
                u -= w;
            }
            log_q += (w_choice / total).ln();
            plan.push((st, phase, choice));
        }
    }
    Ok((plan, log_q))
}

/// Log-probability of a specific plan under the sampling scheme above;
/// -inf if an associated arrival is not among the gated candidates.
fn plan_log_prob(chain: &Chain, state: &WorldState, event: &Event, plan: &Plan) -> Result<f64> {
    let mut log_q = 0.0;
    for (st, phase, choice) in plan {
        let cands = plan_candidates(chain, state, event, *st, *phase)?;
        let total: f64 = chain.cfg.new_arrival_weight + cands.iter().map(|c| c.1).sum::<f64>();
        let w = match choice {
            PlanChoice::Create => chain.cfg.new_arrival_weight,
            PlanChoice::Associate(id) => match cands.iter().find(|(cid, _)| cid == id) {
                Some((_, w)) => *w,
                None => return Ok(f64::NEG_INFINITY),
            },
        };
        log_q += (w / total).ln();
    }
    Ok(log_q)
}

/// Total state log prior evaluated on an arbitrary state (same model
/// context as the chain).
fn state_log_prior_of(chain: &Chain, state: &WorldState) -> Result<f64> {
    use crate::numeric::{ln_gamma, poisson_log_pmf};
    let events: Vec<Event> = state
        .events
        .values()
        .map(|e| {
            let mut rel = *e;
            rel.time -= chain.ctx.window_start;
            rel
        })
        .collect();
    let mut acc = crate::worldmodel::log_prior_events(&events, chain.ctx.prior)?;
    let n_phases = chain.ctx.phases.len() as f64;
    for st in 0..state.n_stations() {
        let window = chain.window(st);
        let span = window.1 - window.0;
        let mut n_unassoc = 0u64;
        for a in state.arrivals[st].values() {
            match a.association {
                None => {
                    n_unassoc += 1;
                    acc += chain.cfg.unassoc.log_density(&a.theta, window) - n_phases.ln();
                }
                Some(ev) => {
                    let event = &state.events[&ev];
                    acc += chain
                        .ctx
                        .assoc_theta_log_prior(&a.theta, event, st, a.phase)?;
                }
            }
        }
        let mean = chain.cfg.unassoc.rate_per_s * span;
        acc += poisson_log_pmf(n_unassoc, mean) + ln_gamma(n_unassoc as f64 + 1.0);
    }
    Ok(acc)
}

/// Mixture birth-proposal density over events: Hough and correlation
/// branches evaluated on the same state.
fn event_proposal_log_density(
    chain: &Chain,
    grid: &HoughGrid,
    corr: &CorrelationProposal,
    event: &Event,
) -> f64 {
    let w = chain.cfg.hough_weight.clamp(0.0, 1.0);
    crate::numeric::log_add_exp(
        w.max(1e-300).ln() + grid.log_density(event),
        (1.0 - w).max(1e-300).ln() + corr.log_density(&chain.ctx, event),
    )
}

struct PendingBirth {
    new_state: WorldState,
    created_ids: Vec<(usize, ArrivalId)>,
    /// log acceptance ratio
    log_ratio: f64,
    /// per-station likelihood deltas to fold into the cache on acceptance
    lik_deltas: Vec<(usize, f64)>,
}

/// Deterministic birth-ratio core: given the proposed event, the plan, and
/// explicit envelope parameters for every Create slot, assemble the new
/// state and the full log acceptance ratio. `log_q_e` is the mixture
/// proposal density of the event on the current state.
fn birth_ratio_given(
    chain: &Chain,
    event: Event,
    plan: &Plan,
    created_thetas: &[ArrivalParams],
    log_q_e: f64,
) -> Result<Option<PendingBirth>> {
    let log_q_plan = plan_log_prob(chain, &chain.state, &event, plan)?;
    if log_q_plan == f64::NEG_INFINITY {
        return Ok(None);
    }
    let mut new_state = chain.state.clone();
    let event_id = new_state.insert_event(event);
    let mut created_ids = Vec::new();
    let mut omitted_theta_prior = 0.0;
    let mut touched: BTreeMap<usize, (isize, isize)> = BTreeMap::new();
    let mut n_assoc = 0usize;
    let mut theta_iter = created_thetas.iter();
    for (st, phase, choice) in plan {
        match choice {
            PlanChoice::Associate(id) => {
                let a = new_state.arrivals[*st].get_mut(id).expect("gated candidate");
                a.association = Some(event_id);
                let (cm, cv) = chain.ctx.coeff_prior(&event, *st, *phase);
                a.coeff_mean = cm;
                a.coeff_var = cv;
                let range = chain.affected_range(*st, &new_state.arrivals[*st][id]);
                merge_range(&mut touched, *st, range);
                n_assoc += 1;
            }
            PlanChoice::Create => {
                let theta = *theta_iter
                    .next()
                    .ok_or_else(|| Error::config("birth plan is missing an envelope"))?;
                omitted_theta_prior +=
                    chain.ctx.assoc_theta_log_prior(&theta, &event, *st, *phase)?;
                let (cm, cv) = chain.ctx.coeff_prior(&event, *st, *phase);
                let arrival = Arrival {
                    station: *st,
                    phase: *phase,
                    theta,
                    association: Some(event_id),
                    coeff_mean: cm,
                    coeff_var: cv,
                };
                let range = chain.affected_range(*st, &arrival);
                merge_range(&mut touched, *st, range);
                let id = new_state.insert_arrival(*st, arrival);
                created_ids.push((*st, id));
            }
        }
    }
    let n_created = created_ids.len();

    // priors and likelihood deltas
    let prior_new = state_log_prior_of(chain, &new_state)?;
    let prior_old = state_log_prior_of(chain, &chain.state)?;
    let d_prior_omitted = prior_new - prior_old - omitted_theta_prior;
    let mut d_lik = 0.0;
    let mut lik_deltas = Vec::new();
    for (st, range) in &touched {
        let olds: Vec<&Arrival> = chain.state.arrivals[*st].values().collect();
        let news: Vec<&Arrival> = new_state.arrivals[*st].values().collect();
        let d = match chain.station_delta(*st, &olds, &news, *range) {
            Ok(d) => d,
            Err(Error::Capacity(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        d_lik += d;
        lik_deltas.push((*st, d));
    }

    let n_events_before = chain.state.events.len();
    let log_q_fwd = p_birth_event(n_events_before).ln() + log_q_e + log_q_plan;
    let keep_rev = chain.cfg.p_keep.max(1e-300).ln() * n_assoc as f64
        + (1.0 - chain.cfg.p_keep).max(1e-300).ln() * n_created as f64;
    let log_q_rev = (1.0 - p_birth_event(n_events_before + 1)).ln()
        - ((n_events_before + 1) as f64).ln()
        + keep_rev;
    let log_ratio = d_prior_omitted + d_lik + log_q_rev - log_q_fwd;
    Ok(Some(PendingBirth {
        new_state,
        created_ids,
        log_ratio,
        lik_deltas,
    }))
}

/// Deterministic death-ratio core: delete `target`, keeping exactly the
/// arrivals in `keep` as unassociated, at the current envelope values.
fn death_ratio_given(
    chain: &Chain,
    target: EventId,
    keep: &[(usize, ArrivalId)],
) -> Result<Option<(f64, WorldState, Vec<(usize, f64)>)>> {
    let members = chain.event_arrivals(target);
    let event = chain.state.events[&target];
    let mut new_state = chain.state.clone();
    let mut omitted_theta_prior = 0.0;
    let mut touched: BTreeMap<usize, (isize, isize)> = BTreeMap::new();
    let mut plan: Plan = Vec::new();
    let mut n_kept = 0usize;
    let mut n_deleted = 0usize;
    for (st, id) in &members {
        let a = chain.state.arrivals[*st][id].clone();
        let range = chain.affected_range(*st, &a);
        if keep.contains(&(*st, *id)) {
            let b = new_state.arrivals[*st].get_mut(id).unwrap();
            b.association = None;
            b.coeff_mean = vec![0.0; chain.ctx.basis.coeff_len()];
            b.coeff_var = vec![1.0; chain.ctx.basis.coeff_len()];
            plan.push((*st, a.phase, PlanChoice::Associate(*id)));
            n_kept += 1;
        } else {
            omitted_theta_prior += chain
                .ctx
                .assoc_theta_log_prior(&a.theta, &event, *st, a.phase)?;
            new_state.remove_arrival(*st, *id);
            plan.push((*st, a.phase, PlanChoice::Create));
            n_deleted += 1;
        }
        merge_range(&mut touched, *st, range);
    }
    new_state.events.remove(&target);

    let prior_new = state_log_prior_of(chain, &new_state)?;
    let prior_old = state_log_prior_of(chain, &chain.state)?;
    let d_prior = prior_new - prior_old + omitted_theta_prior;
    let mut d_lik = 0.0;
    let mut lik_deltas = Vec::new();
    for (st, range) in &touched {
        let olds: Vec<&Arrival> = chain.state.arrivals[*st].values().collect();
        let news: Vec<&Arrival> = new_state.arrivals[*st].values().collect();
        let d = match chain.station_delta(*st, &olds, &news, *range) {
            Ok(d) => d,
            Err(Error::Capacity(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        d_lik += d;
        lik_deltas.push((*st, d));
    }

    // reverse birth density on the post-death state
    let grid = HoughGrid::build_with(&chain.ctx, &new_state, &chain.cfg.hough, &chain.hough_geom)?;
    let log_q_e = event_proposal_log_density(chain, &grid, &chain.corr, &event);
    let log_q_plan = plan_log_prob(chain, &new_state, &event, &plan)?;

    let n_before = chain.state.events.len();
    let keep_fwd = chain.cfg.p_keep.max(1e-300).ln() * n_kept as f64
        + (1.0 - chain.cfg.p_keep).max(1e-300).ln() * n_deleted as f64;
    let log_q_fwd = (1.0 - p_birth_event(n_before)).ln() - (n_before as f64).ln() + keep_fwd;
    let log_q_rev = p_birth_event(n_before - 1).ln() + log_q_e + log_q_plan;
    let log_ratio = d_prior + d_lik + log_q_rev - log_q_fwd;
    Ok(Some((log_ratio, new_state, lik_deltas)))
}

/// Assemble a birth on top of `chain.state`: propose the event from the
/// Hough/correlation mixture, sample the association plan, parent-sample
/// created arrivals.
fn propose_event_birth(chain: &Chain, rng: &mut ChaCha8Rng) -> Result<Option<PendingBirth>> {
    let grid = HoughGrid::build_with(&chain.ctx, &chain.state, &chain.cfg.hough, &chain.hough_geom)?;
    let corr = &chain.corr;
    let use_hough = rng.random::<f64>() < chain.cfg.hough_weight;
    let (event, _) = if use_hough {
        grid.propose(rng)
    } else {
        corr.propose(&chain.ctx, rng)
    };
    if chain.ctx.event_log_prior(&event) == f64::NEG_INFINITY {
        return Ok(None);
    }
    let log_q_e = event_proposal_log_density(chain, &grid, &corr, &event);
    let (plan, _) = sample_plan(chain, &chain.state, &event, rng)?;
    let mut created_thetas = Vec::new();
    for (st, phase, choice) in &plan {
        if matches!(choice, PlanChoice::Create) {
            created_thetas.push(chain.ctx.sample_assoc_theta(&event, *st, *phase, rng)?);
        }
    }
    birth_ratio_given(chain, event, &plan, &created_thetas, log_q_e)
}

fn p_birth_event(n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        0.5
    }
}

fn merge_range(
    touched: &mut BTreeMap<usize, (isize, isize)>,
    st: usize,
    range: (isize, isize),
) {
    touched
        .entry(st)
        .and_modify(|r| {
            r.0 = r.0.min(range.0);
            r.1 = r.1.max(range.1);
        })
        .or_insert(range);
}

/// Reversible-jump event birth/death with auxiliary envelope adaptation.
/// Returns whether the move was accepted.
pub fn event_birth_death(chain: &mut Chain, rng: &mut ChaCha8Rng) -> Result<bool> {
    let n = chain.state.events.len();
    let go_birth = rng.random::<f64>() < p_birth_event(n);
    if go_birth {
        let pending = match propose_event_birth(chain, rng)? {
            Some(p) => p,
            None => return Ok(false),
        };
        if accept(pending.log_ratio, rng) {
            chain.state = pending.new_state;
            for (st, d) in pending.lik_deltas {
                chain.loglik[st] += d;
            }
            // auxiliary adaptation of the parent-sampled envelopes
            let mut stats = SweepStats::default();
            for _ in 0..chain.cfg.n_aux {
                for (st, id) in &pending.created_ids {
                    theta_update_one(chain, *st, *id, rng, &mut stats)?;
                }
            }
            return Ok(true);
        }
        Ok(false)
    } else {
        // death: pick an event uniformly, adapt the to-delete arrivals,
        // then propose the deletion with the uniform keep plan
        let ids: Vec<EventId> = chain.state.events.keys().copied().collect();
        let target = ids[rng.random_range(0..ids.len())];
        let members = chain.event_arrivals(target);
        let mut kept = Vec::new();
        let mut deleted = Vec::new();
        for (st, id) in &members {
            if rng.random::<f64>() < chain.cfg.p_keep {
                kept.push((*st, *id));
            } else {
                deleted.push((*st, *id));
            }
        }
        // auxiliary reverse adaptation of the arrivals being deleted
        let mut stats = SweepStats::default();
        for _ in 0..chain.cfg.n_aux {
            for (st, id) in &deleted {
                theta_update_one(chain, *st, *id, rng, &mut stats)?;
            }
        }
        let (log_ratio, new_state, lik_deltas) =
            match death_ratio_given(chain, target, &kept)? {
                Some(parts) => parts,
                None => return Ok(false),
            };
        if accept(log_ratio, rng) {
            chain.state = new_state;
            for (st, d) in lik_deltas {
                chain.loglik[st] += d;
            }
            return Ok(true);
        }
        Ok(false)
    }
}

/// Deterministic seams for the reversibility identity tests.
#[doc(hidden)]
pub mod testing {
    use super::*;

    /// Log acceptance ratio and resulting state of a fully specified birth.
    pub fn forced_birth(
        chain: &Chain,
        event: Event,
        plan: &Plan,
        created_thetas: &[ArrivalParams],
    ) -> Result<Option<(f64, WorldState)>> {
        let grid =
            HoughGrid::build_with(&chain.ctx, &chain.state, &chain.cfg.hough, &chain.hough_geom)?;
        let log_q_e = event_proposal_log_density(chain, &grid, &chain.corr, &event);
        Ok(birth_ratio_given(chain, event, plan, created_thetas, log_q_e)?
            .map(|p| (p.log_ratio, p.new_state)))
    }

    /// Log acceptance ratio of a fully specified death.
    pub fn forced_death(
        chain: &Chain,
        target: EventId,
        keep: &[(usize, ArrivalId)],
    ) -> Result<Option<(f64, WorldState)>> {
        Ok(death_ratio_given(chain, target, keep)?.map(|(r, s, _)| (r, s)))
    }

    pub use super::{Plan, PlanChoice};
}

// ---------------------------------------------------------------------------
// Composite moves: repropose, split, merge// ---------------------------------------------------------------------------
// Composite moves: repropose, split, merge
// ---------------------------------------------------------------------------

/// Pieces of a death applied to a scratch state (no auxiliary steps).
struct DeathPieces {
    /// Sum of omitted theta-prior factors of deleted arrivals.
    omitted: f64,
    /// keep-plan log-probability
    log_q_keep: f64,
    /// the plan reconstructing this event in a reverse birth
    reverse_plan: Plan,
    event: Event,
}

fn apply_death_to(
    chain: &Chain,
    state: &mut WorldState,
    target: EventId,
    touched: &mut BTreeMap<usize, (isize, isize)>,
    rng: &mut ChaCha8Rng,
) -> Result<DeathPieces> {
    let event = state.events[&target];
    let members: Vec<(usize, ArrivalId)> = state.arrivals_of_event(target);
    let mut omitted = 0.0;
    let mut log_q_keep = 0.0;
    let mut reverse_plan = Plan::new();
    for (st, id) in members {
        let a = state.arrivals[st][&id].clone();
        merge_range(touched, st, affected_range_of(chain, st, &a));
        if rng.random::<f64>() < chain.cfg.p_keep {
            log_q_keep += chain.cfg.p_keep.max(1e-300).ln();
            let b = state.arrivals[st].get_mut(&id).unwrap();
            b.association = None;
            b.coeff_mean = vec![0.0; chain.ctx.basis.coeff_len()];
            b.coeff_var = vec![1.0; chain.ctx.basis.coeff_len()];
            reverse_plan.push((st, a.phase, PlanChoice::Associate(id)));
        } else {
            log_q_keep += (1.0 - chain.cfg.p_keep).max(1e-300).ln();
            omitted += chain
                .ctx
                .assoc_theta_log_prior(&a.theta, &event, st, a.phase)?;
            state.remove_arrival(st, id);
            reverse_plan.push((st, a.phase, PlanChoice::Create));
        }
    }
    state.events.remove(&target);
    Ok(DeathPieces {
        omitted,
        log_q_keep,
        reverse_plan,
        event,
    })
}

fn affected_range_of(chain: &Chain, st: usize, arrival: &Arrival) -> (isize, isize) {
    chain.affected_range(st, arrival)
}

/// Pieces of a birth applied to a scratch state (no auxiliary steps).
struct BirthPieces {
    event_id: EventId,
    log_q_e: f64,
    log_q_plan: f64,
    /// Sum of omitted theta-prior factors of created arrivals.
    omitted: f64,
    /// keep-plan log-probability of the exact reverse death
    log_q_keep_rev: f64,
}

fn apply_birth_to(
    chain: &Chain,
    state: &mut WorldState,
    touched: &mut BTreeMap<usize, (isize, isize)>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<BirthPieces>> {
    let grid = HoughGrid::build_with(&chain.ctx, state, &chain.cfg.hough, &chain.hough_geom)?;
    let corr = &chain.corr;
    let use_hough = rng.random::<f64>() < chain.cfg.hough_weight;
    let (event, _) = if use_hough {
        grid.propose(rng)
    } else {
        corr.propose(&chain.ctx, rng)
    };
    if chain.ctx.event_log_prior(&event) == f64::NEG_INFINITY {
        return Ok(None);
    }
    let log_q_e = event_proposal_log_density(chain, &grid, corr, &event);
    let (plan, log_q_plan) = sample_plan(chain, state, &event, rng)?;
    let event_id = state.insert_event(event);
    let mut omitted = 0.0;
    let mut n_assoc = 0;
    let mut n_created = 0;
    for (st, phase, choice) in &plan {
        match choice {
            PlanChoice::Associate(id) => {
                let a = state.arrivals[*st].get_mut(id).expect("gated candidate");
                a.association = Some(event_id);
                let (cm, cv) = chain.ctx.coeff_prior(&event, *st, *phase);
                a.coeff_mean = cm;
                a.coeff_var = cv;
                let arr = state.arrivals[*st][id].clone();
                merge_range(touched, *st, affected_range_of(chain, *st, &arr));
                n_assoc += 1;
            }
            PlanChoice::Create => {
                let theta = chain.ctx.sample_assoc_theta(&event, *st, *phase, rng)?;
                omitted += chain.ctx.assoc_theta_log_prior(&theta, &event, *st, *phase)?;
                let (cm, cv) = chain.ctx.coeff_prior(&event, *st, *phase);
                let arrival = Arrival {
                    station: *st,
                    phase: *phase,
                    theta,
                    association: Some(event_id),
                    coeff_mean: cm,
                    coeff_var: cv,
                };
                merge_range(touched, *st, affected_range_of(chain, *st, &arrival));
                state.insert_arrival(*st, arrival);
                n_created += 1;
            }
        }
    }
    let log_q_keep_rev = chain.cfg.p_keep.max(1e-300).ln() * n_assoc as f64
        + (1.0 - chain.cfg.p_keep).max(1e-300).ln() * n_created as f64;
    Ok(Some(BirthPieces {
        event_id,
        log_q_e,
        log_q_plan,
        omitted,
        log_q_keep_rev,
    }))
}

/// Which composite move to attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositeKind {
    Repropose,
    Split,
    Merge,
}

/// Composed birth/death chains: repropose an event, split one into two, or
/// merge two into one, accepted with the overall reversible-jump ratio.
/// Returns whether the move was accepted.
pub fn split_merge_repropose(
    chain: &mut Chain,
    kind: CompositeKind,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let n = chain.state.events.len();
    let mut touched: BTreeMap<usize, (isize, isize)> = BTreeMap::new();
    let mut state = chain.state.clone();
    let ids: Vec<EventId> = state.events.keys().copied().collect();

    let (log_q_fwd, log_q_rev, omitted_delta) = match kind {
        CompositeKind::Repropose => {
            if n == 0 {
                return Ok(false);
            }
            let target = ids[rng.random_range(0..n)];
            let death = apply_death_to(chain, &mut state, target, &mut touched, rng)?;
            let birth = match apply_birth_to(chain, &mut state, &mut touched, rng)? {
                Some(b) => b,
                None => return Ok(false),
            };
            // reverse: kill the new event with the mirrored keep plan, then
            // rebirth the old event with the reconstructing plan
            let mut x_int = state.clone();
            remove_event_entirely(&mut x_int, birth.event_id, chain);
            let grid_rev =
                HoughGrid::build_with(&chain.ctx, &x_int, &chain.cfg.hough, &chain.hough_geom)?;
            let lq_e_rev = event_proposal_log_density(chain, &grid_rev, &chain.corr, &death.event);
            let lq_plan_rev = plan_log_prob(chain, &x_int, &death.event, &death.reverse_plan)?;
            let fwd = -(n as f64).ln() + death.log_q_keep + birth.log_q_e + birth.log_q_plan;
            let rev = -(n as f64).ln() + birth.log_q_keep_rev + lq_e_rev + lq_plan_rev;
            (fwd, rev, birth.omitted - death.omitted)
        }
        CompositeKind::Merge => {
            if n < 2 {
                return Ok(false);
            }
            // ordered pair
            let i1 = rng.random_range(0..n);
            let mut i2 = i1;
            while i2 == i1 {
                i2 = rng.random_range(0..n);
            }
            let (e1, e2) = (ids[i1], ids[i2]);
            let death1 = apply_death_to(chain, &mut state, e1, &mut touched, rng)?;
            let death2 = apply_death_to(chain, &mut state, e2, &mut touched, rng)?;
            let x_int = state.clone();
            let birth = match apply_birth_to(chain, &mut state, &mut touched, rng)? {
                Some(b) => b,
                None => return Ok(false),
            };
            // reverse split path: pick the merged event (1/(n-1)), kill it
            // with the mirrored plan, then birth e2 and e1 in order
            let lq_e2 = {
                let grid =
                    HoughGrid::build_with(&chain.ctx, &x_int, &chain.cfg.hough, &chain.hough_geom)?;
                event_proposal_log_density(chain, &grid, &chain.corr, &death2.event)
            };
            let lq_plan_e2 = plan_log_prob(chain, &x_int, &death2.event, &death2.reverse_plan)?;
            // state with e2 restored: reverse-birth of e1 sees it
            let mut x_mid = x_int.clone();
            restore_event(&mut x_mid, &death2, chain);
            let lq_e1 = {
                let grid =
                    HoughGrid::build_with(&chain.ctx, &x_mid, &chain.cfg.hough, &chain.hough_geom)?;
                event_proposal_log_density(chain, &grid, &chain.corr, &death1.event)
            };
            let lq_plan_e1 = plan_log_prob(chain, &x_mid, &death1.event, &death1.reverse_plan)?;
            let fwd = -((n * (n - 1)) as f64).ln()
                + death1.log_q_keep
                + death2.log_q_keep
                + birth.log_q_e
                + birth.log_q_plan;
            let rev = -((n - 1) as f64).ln()
                + birth.log_q_keep_rev
                + lq_e2
                + lq_plan_e2
                + lq_e1
                + lq_plan_e1;
            (
                fwd,
                rev,
                birth.omitted - death1.omitted - death2.omitted,
            )
        }
        CompositeKind::Split => {
            if n == 0 {
                return Ok(false);
            }
            let target = ids[rng.random_range(0..n)];
            let death = apply_death_to(chain, &mut state, target, &mut touched, rng)?;
            let x_int = state.clone();
            let birth_a = match apply_birth_to(chain, &mut state, &mut touched, rng)? {
                Some(b) => b,
                None => return Ok(false),
            };
            let birth_b = match apply_birth_to(chain, &mut state, &mut touched, rng)? {
                Some(b) => b,
                None => return Ok(false),
            };
            // reverse merge path: ordered pair (b, a) out of n+1 events,
            // kill both with mirrored plans, then rebirth the original
            let lq_e_rev = {
                let grid =
                    HoughGrid::build_with(&chain.ctx, &x_int, &chain.cfg.hough, &chain.hough_geom)?;
                event_proposal_log_density(chain, &grid, &chain.corr, &death.event)
            };
            let lq_plan_rev = plan_log_prob(chain, &x_int, &death.event, &death.reverse_plan)?;
            let fwd = -(n as f64).ln()
                + death.log_q_keep
                + birth_a.log_q_e
                + birth_a.log_q_plan
                + birth_b.log_q_e
                + birth_b.log_q_plan;
            let rev = -(((n + 1) * n) as f64).ln()
                + birth_b.log_q_keep_rev
                + birth_a.log_q_keep_rev
                + lq_e_rev
                + lq_plan_rev;
            (
                fwd,
                rev,
                birth_a.omitted + birth_b.omitted - death.omitted,
            )
        }
    };

    // total prior and likelihood deltas
    let prior_new = state_log_prior_of(chain, &state)?;
    let prior_old = state_log_prior_of(chain, &chain.state)?;
    let d_prior = prior_new - prior_old - omitted_delta;
    let mut d_lik = 0.0;
    let mut lik_deltas = Vec::new();
    for (st, range) in &touched {
        let olds: Vec<&Arrival> = chain.state.arrivals[*st].values().collect();
        let news: Vec<&Arrival> = state.arrivals[*st].values().collect();
        let d = match chain.station_delta(*st, &olds, &news, *range) {
            Ok(d) => d,
            Err(Error::Capacity(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        d_lik += d;
        lik_deltas.push((*st, d));
    }
    let log_ratio = d_prior + d_lik + log_q_rev - log_q_fwd;
    if std::env::var("SEISMON_DEBUG_COMPOSITE").is_ok() {
        eprintln!(
            "composite {kind:?}: dprior {d_prior:.2} dlik {d_lik:.2} qrev {log_q_rev:.2} qfwd {log_q_fwd:.2} ratio {log_ratio:.2}"
        );
    }
    if accept(log_ratio, rng) {
        chain.state = state;
        for (st, d) in lik_deltas {
            chain.loglik[st] += d;
        }
        return Ok(true);
    }
    Ok(false)
}

/// Remove an event and all its arrivals outright (scratch-state helper for
/// reverse-path evaluation; not a probabilistic move).
fn remove_event_entirely(state: &mut WorldState, event: EventId, chain: &Chain) {
    let members = state.arrivals_of_event(event);
    for (st, id) in members {
        state.remove_arrival(st, id);
    }
    state.events.remove(&event);
    let _ = chain;
}

/// Restore a killed event and its deleted arrivals are not needed for
/// reverse-path densities; only kept arrivals must flip back to associated.
fn restore_event(state: &mut WorldState, death: &DeathPieces, chain: &Chain) {
    let id = state.insert_event(death.event);
    for (st, phase, choice) in &death.reverse_plan {
        if let PlanChoice::Associate(aid) = choice {
            if let Some(a) = state.arrivals[*st].get_mut(aid) {
                a.association = Some(id);
                let (cm, cv) = chain.ctx.coeff_prior(&death.event, *st, *phase);
                a.coeff_mean = cm;
                a.coeff_var = cv;
            }
        }
    }
}
