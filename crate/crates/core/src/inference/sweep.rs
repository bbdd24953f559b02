//! Cyclic single-site random-walk Metropolis-Hastings sweep.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envelope::ArrivalParams;
use crate::signalmodel::{ar_stable, Arrival, NoiseParams};
use crate::worldmodel::{wrap_lon, ArrivalId, Event, EventId};
use crate::Result;

use super::Chain;

/// Acceptance counters for one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub theta_proposed: usize,
    pub theta_accepted: usize,
    pub noise_proposed: usize,
    pub noise_accepted: usize,
    pub event_proposed: usize,
    pub event_accepted: usize,
}

impl SweepStats {
    pub fn merge(&mut self, other: &SweepStats) {
        self.theta_proposed += other.theta_proposed;
        self.theta_accepted += other.theta_accepted;
        self.noise_proposed += other.noise_proposed;
        self.noise_accepted += other.noise_accepted;
        self.event_proposed += other.event_proposed;
        self.event_accepted += other.event_accepted;
    }
}

fn accept(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// One cycle over all envelope parameters, station noise parameters, and
/// event attributes. Each accept/reject uses the collapsed posterior:
/// priors plus the collapsed likelihood over affected stations.
pub fn mh_sweep(chain: &mut Chain, rng: &mut ChaCha8Rng) -> Result<SweepStats> {
    let mut stats = SweepStats::default();
    theta_moves(chain, rng, &mut stats, None)?;
    noise_moves(chain, rng, &mut stats)?;
    event_moves(chain, rng, &mut stats)?;
    Ok(stats)
}

/// MH updates of a single arrival's theta components; the building block of
/// both the sweep and the auxiliary adaptation inside birth moves.
pub fn theta_update_one(
    chain: &mut Chain,
    st: usize,
    id: ArrivalId,
    rng: &mut ChaCha8Rng,
    stats: &mut SweepStats,
) -> Result<()> {
    // component order: tau, log rho, log alpha, log gamma, log beta
    for comp in 0..5 {
        let arrival = match chain.state.arrivals[st].get(&id) {
            Some(a) => a.clone(),
            None => return Ok(()),
        };
        let mut theta = arrival.theta;
        let step = if comp == 0 {
            chain.cfg.step_tau_s
        } else {
            chain.cfg.step_log_shape
        };
        let z: f64 = rng.sample(StandardNormal);
        if comp == 0 {
            theta.tau += step * z;
        } else {
            let mut shape = theta.log_shape();
            shape[comp - 1] += step * z;
            theta = match ArrivalParams::from_log_shape(theta.tau, shape) {
                Ok(t) => t,
                Err(_) => continue,
            };
        }
        stats.theta_proposed += 1;
        if step == 0.0 {
            // identity proposal: always accepted, state unchanged
            stats.theta_accepted += 1;
            continue;
        }
        let mut new_arrival = arrival.clone();
        new_arrival.theta = theta;
        let d_prior = arrival_theta_prior_delta(chain, st, &arrival, &new_arrival)?;
        if d_prior == f64::NEG_INFINITY {
            continue;
        }
        let (lo1, hi1) = chain.affected_range(st, &arrival);
        let (lo2, hi2) = chain.affected_range(st, &new_arrival);
        let olds: Vec<&Arrival> = chain.state.arrivals[st]
            .iter()
            .map(|(aid, a)| if *aid == id { &arrival } else { a })
            .collect();
        let news: Vec<&Arrival> = chain.state.arrivals[st]
            .iter()
            .map(|(aid, a)| if *aid == id { &new_arrival } else { a })
            .collect();
        let d_lik =
            match chain.station_delta(st, &olds, &news, (lo1.min(lo2), hi1.max(hi2))) {
                Ok(d) => d,
                Err(crate::error::Error::Capacity(_)) => continue,
                Err(e) => return Err(e),
            };
        drop((olds, news));
        if accept(d_prior + d_lik, rng) {
            chain.state.arrivals[st].insert(id, new_arrival);
            chain.loglik[st] += d_lik;
            stats.theta_accepted += 1;
        }
    }
    Ok(())
}

/// Prior delta of replacing one arrival's theta (association unchanged).
fn arrival_theta_prior_delta(
    chain: &Chain,
    st: usize,
    old: &Arrival,
    new: &Arrival,
) -> Result<f64> {
    let window = chain.window(st);
    match old.association {
        None => Ok(chain.cfg.unassoc.log_density(&new.theta, window)
            - chain.cfg.unassoc.log_density(&old.theta, window)),
        Some(ev) => {
            let event = chain.state.events[&ev];
            Ok(chain
                .ctx
                .assoc_theta_log_prior(&new.theta, &event, st, new.phase)?
                - chain
                    .ctx
                    .assoc_theta_log_prior(&old.theta, &event, st, old.phase)?)
        }
    }
}

/// Theta moves over all arrivals (or the given subset).
pub fn theta_moves(
    chain: &mut Chain,
    rng: &mut ChaCha8Rng,
    stats: &mut SweepStats,
    subset: Option<&[(usize, ArrivalId)]>,
) -> Result<()> {
    let targets: Vec<(usize, ArrivalId)> = match subset {
        Some(s) => s.to_vec(),
        None => {
            let mut t = Vec::new();
            for st in 0..chain.state.n_stations() {
                for id in chain.state.arrivals[st].keys() {
                    t.push((st, *id));
                }
            }
            t
        }
    };
    for (st, id) in targets {
        theta_update_one(chain, st, id, rng, stats)?;
    }
    Ok(())
}

fn noise_moves(chain: &mut Chain, rng: &mut ChaCha8Rng, stats: &mut SweepStats) -> Result<()> {
    for st in 0..chain.state.n_stations() {
        let r = chain.state.noise[st].ar_order();
        for comp in 0..(2 + r) {
            let old = chain.state.noise[st].clone();
            let z: f64 = rng.sample(StandardNormal);
            let mut new = old.clone();
            let step = match comp {
                0 => {
                    new.mu += chain.cfg.step_mu * z;
                    chain.cfg.step_mu
                }
                1 => {
                    new.sigma2 = (old.sigma2.ln() + chain.cfg.step_log_sigma2 * z).exp();
                    chain.cfg.step_log_sigma2
                }
                k => {
                    new.phi[k - 2] += chain.cfg.step_phi * z;
                    chain.cfg.step_phi
                }
            };
            stats.noise_proposed += 1;
            if step == 0.0 {
                stats.noise_accepted += 1;
                continue;
            }
            if comp >= 2 && !ar_stable(&new.phi) {
                continue;
            }
            let (d, l_new) = noise_move_delta(chain, st, &old, &new)?;
            if accept(d, rng) {
                chain.state.noise[st] = new;
                chain.loglik[st] = l_new;
                stats.noise_accepted += 1;
            }
        }
    }
    Ok(())
}

/// Posterior delta of a station noise-parameter change. Noise parameters
/// couple every sample, so the station likelihood is recomputed in full.
/// Priors are evaluated in the (mu, log sigma2, phi) measure.
fn noise_move_delta(
    chain: &Chain,
    st: usize,
    old: &NoiseParams,
    new: &NoiseParams,
) -> Result<(f64, f64)> {
    let prior = &chain.ctx.noise_priors[st];
    let d_prior = prior.log_density(new) - prior.log_density(old);
    if d_prior == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, 0.0));
    }
    let arrs: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
    let l_new = crate::signalmodel::collapsed_log_likelihood(
        &chain.signals[st],
        &arrs,
        new,
        chain.ctx.basis,
        chain.ctx.sig_cfg,
    )?;
    Ok((d_prior + l_new - chain.loglik[st], l_new))
}

fn event_moves(chain: &mut Chain, rng: &mut ChaCha8Rng, stats: &mut SweepStats) -> Result<()> {
    let ids: Vec<EventId> = chain.state.events.keys().copied().collect();
    for id in ids {
        // location (2-D), depth, time, mb
        for comp in 0..4 {
            let old = chain.state.events[&id];
            let mut new = old;
            let step = match comp {
                0 => {
                    let dz: f64 = rng.sample(StandardNormal);
                    let de: f64 = rng.sample(StandardNormal);
                    let km_per_deg =
                        crate::geophys::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
                    new.lat = old.lat + chain.cfg.step_loc_km * dz / km_per_deg;
                    let coslat = old.lat.to_radians().cos().max(1e-3);
                    new.lon =
                        wrap_lon(old.lon + chain.cfg.step_loc_km * de / (km_per_deg * coslat));
                    chain.cfg.step_loc_km
                }
                1 => {
                    let z: f64 = rng.sample(StandardNormal);
                    new.depth = old.depth + chain.cfg.step_depth_km * z;
                    chain.cfg.step_depth_km
                }
                2 => {
                    let z: f64 = rng.sample(StandardNormal);
                    new.time = old.time + chain.cfg.step_time_s * z;
                    chain.cfg.step_time_s
                }
                _ => {
                    let z: f64 = rng.sample(StandardNormal);
                    new.mb = old.mb + chain.cfg.step_mb * z;
                    chain.cfg.step_mb
                }
            };
            stats.event_proposed += 1;
            if step == 0.0 {
                stats.event_accepted += 1;
                continue;
            }
            if new.lat.abs() > 90.0 {
                continue;
            }
            match event_move_delta_and_apply(chain, id, old, new, rng)? {
                true => stats.event_accepted += 1,
                false => {}
            }
        }
    }
    Ok(())
}

/// Propose replacing an event's attributes; recomputes the priors and
/// coefficient priors of its arrivals and the likelihood over the affected
/// ranges. Applies on acceptance and returns whether it was accepted.
pub fn event_move_delta_and_apply(
    chain: &mut Chain,
    id: EventId,
    old_event: Event,
    new_event: Event,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let d_event_prior =
        chain.ctx.event_log_prior(&new_event) - chain.ctx.event_log_prior(&old_event);
    if d_event_prior == f64::NEG_INFINITY {
        return Ok(false);
    }
    let members = chain.event_arrivals(id);
    // rebuilt arrivals with refreshed coefficient priors
    let mut rebuilt: Vec<(usize, ArrivalId, Arrival)> = Vec::with_capacity(members.len());
    let mut d_theta_prior = 0.0;
    for &(st, aid) in &members {
        let a = &chain.state.arrivals[st][&aid];
        let mut b = a.clone();
        let (cm, cv) = chain.ctx.coeff_prior(&new_event, st, a.phase);
        b.coeff_mean = cm;
        b.coeff_var = cv;
        d_theta_prior += chain
            .ctx
            .assoc_theta_log_prior(&a.theta, &new_event, st, a.phase)?
            - chain
                .ctx
                .assoc_theta_log_prior(&a.theta, &old_event, st, a.phase)?;
        rebuilt.push((st, aid, b));
    }
    if d_theta_prior == f64::NEG_INFINITY {
        return Ok(false);
    }
    // likelihood deltas per affected station
    let mut d_lik = 0.0;
    let mut station_deltas: Vec<(usize, f64)> = Vec::new();
    for st in 0..chain.state.n_stations() {
        let subs: Vec<(ArrivalId, &Arrival)> = rebuilt
            .iter()
            .filter(|(s, _, _)| *s == st)
            .map(|(_, aid, b)| (*aid, b))
            .collect();
        if subs.is_empty() {
            continue;
        }
        let olds: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
        let news: Vec<&Arrival> = chain.state.arrivals[st]
            .iter()
            .map(|(aid, a)| {
                subs.iter()
                    .find(|(sid, _)| sid == aid)
                    .map(|(_, b)| *b)
                    .unwrap_or(a)
            })
            .collect();
        let mut lo = isize::MAX;
        let mut hi = isize::MIN;
        for (aid, b) in &subs {
            let a = &chain.state.arrivals[st][aid];
            let (l1, h1) = chain.affected_range(st, a);
            let (l2, h2) = chain.affected_range(st, b);
            lo = lo.min(l1).min(l2);
            hi = hi.max(h1).max(h2);
        }
        let d = match chain.station_delta(st, &olds, &news, (lo, hi)) {
            Ok(d) => d,
            Err(crate::error::Error::Capacity(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        d_lik += d;
        station_deltas.push((st, d));
    }
    if accept(d_event_prior + d_theta_prior + d_lik, rng) {
        chain.state.events.insert(id, new_event);
        for (st, aid, b) in rebuilt {
            chain.state.arrivals[st].insert(aid, b);
        }
        for (st, d) in station_deltas {
            chain.loglik[st] += d;
        }
        Ok(true)
    } else {
        Ok(false)
    }
}
