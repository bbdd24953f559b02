//! Custom mixing moves: association swaps between consecutive arrivals,
//! signal-alignment onset proposals, and envelope peak shifts.
//!
//! The alignment and peak-shift moves are independence-style proposals whose
//! centers depend only on the observed signal (never on the current onset),
//! so the reverse density is the same Gaussian and the Hastings ratio stays
//! tractable.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::envelope::envelope_series;
use crate::error::Error;
use crate::numeric::normal_log_pdf;
use crate::signalmodel::Arrival;
use crate::wavelet::dwt_inverse;
use crate::worldmodel::ArrivalId;
use crate::Result;

use super::propose::max_normalized_xcorr;
use super::Chain;

fn accept(log_ratio: f64, rng: &mut ChaCha8Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// One round of the custom moves on a random station.
pub fn custom_moves(chain: &mut Chain, rng: &mut ChaCha8Rng) -> Result<()> {
    if chain.state.n_stations() == 0 {
        return Ok(());
    }
    let st = rng.random_range(0..chain.state.n_stations());
    match rng.random_range(0..3u32) {
        0 => swap_associations(chain, st, rng).map(|_| ()),
        1 => align_move(chain, st, rng).map(|_| ()),
        _ => peak_shift(chain, st, rng).map(|_| ()),
    }
}

/// Swap the association labels of two consecutive (in onset time) arrivals
/// of the same phase; symmetric proposal.
pub fn swap_associations(chain: &mut Chain, st: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let mut by_time: Vec<(f64, ArrivalId)> = chain.state.arrivals[st]
        .iter()
        .map(|(id, a)| (a.theta.tau, *id))
        .collect();
    if by_time.len() < 2 {
        return Ok(false);
    }
    by_time.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = rng.random_range(0..by_time.len() - 1);
    let (id1, id2) = (by_time[k].1, by_time[k + 1].1);
    let a1 = chain.state.arrivals[st][&id1].clone();
    let a2 = chain.state.arrivals[st][&id2].clone();
    if a1.phase != a2.phase || a1.association == a2.association {
        return Ok(false);
    }
    // swapped arrivals: exchange association and coefficient priors
    let mut b1 = a1.clone();
    let mut b2 = a2.clone();
    b1.association = a2.association;
    b1.coeff_mean = a2.coeff_mean.clone();
    b1.coeff_var = a2.coeff_var.clone();
    b2.association = a1.association;
    b2.coeff_mean = a1.coeff_mean.clone();
    b2.coeff_var = a1.coeff_var.clone();

    let d_prior = pair_theta_prior(chain, st, &b1)? + pair_theta_prior(chain, st, &b2)?
        - pair_theta_prior(chain, st, &a1)?
        - pair_theta_prior(chain, st, &a2)?;
    if d_prior == f64::NEG_INFINITY {
        return Ok(false);
    }
    let (l1, h1) = chain.affected_range(st, &a1);
    let (l2, h2) = chain.affected_range(st, &a2);
    let olds: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
    let news: Vec<&Arrival> = chain.state.arrivals[st]
        .iter()
        .map(|(id, a)| {
            if *id == id1 {
                &b1
            } else if *id == id2 {
                &b2
            } else {
                a
            }
        })
        .collect();
    let d_lik = match chain.station_delta(st, &olds, &news, (l1.min(l2), h1.max(h2))) {
        Ok(d) => d,
        Err(Error::Capacity(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    drop((olds, news));
    if accept(d_prior + d_lik, rng) {
        chain.state.arrivals[st].insert(id1, b1);
        chain.state.arrivals[st].insert(id2, b2);
        chain.loglik[st] += d_lik;
        return Ok(true);
    }
    Ok(false)
}

fn pair_theta_prior(chain: &Chain, st: usize, a: &Arrival) -> Result<f64> {
    match a.association {
        None => Ok(chain.cfg.unassoc.log_density(&a.theta, chain.window(st))),
        Some(ev) => {
            let event = chain.state.events[&ev];
            chain.ctx.assoc_theta_log_prior(&a.theta, &event, st, a.phase)
        }
    }
}

/// Propose a new onset time centered on the best cross-correlation lag of
/// the arrival's predicted template against the observed signal.
pub fn align_move(chain: &mut Chain, st: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let ids: Vec<ArrivalId> = chain.state.arrivals[st].keys().copied().collect();
    if ids.is_empty() {
        return Ok(false);
    }
    let id = ids[rng.random_range(0..ids.len())];
    let arrival = chain.state.arrivals[st][&id].clone();
    let signal = &chain.signals[st];
    // predicted template: envelope times the prior-mean modulation, sampled
    // with the onset at template time zero; independent of the current tau
    let w = chain.ctx.basis.signal_len();
    let mut theta0 = arrival.theta;
    theta0.tau = 0.0;
    let env = envelope_series(&theta0, 1.0 / signal.rate_hz, w, signal.rate_hz);
    let modulation = dwt_inverse(&arrival.coeff_mean, chain.ctx.basis)?;
    let template: Vec<f64> = env.iter().zip(&modulation).map(|(e, m)| e * m).collect();
    // a flat template (zero-mean coefficient prior) carries no alignment
    // information, and falling back to the current onset would make the
    // proposal center state-dependent; skip instead
    if template.iter().all(|&v| v.abs() < 1e-12) {
        return Ok(false);
    }
    let center = match max_normalized_xcorr(&signal.samples, &template) {
        // lag i aligns template sample 0 with signal sample i; the onset
        // sits one sample before
        Some((lag, _)) => signal.time_of(lag) - 1.0 / signal.rate_hz,
        None => return Ok(false),
    };
    let sd = chain.cfg.step_tau_s.max(0.05);
    let tau_new = center + sd * rng.sample::<f64, _>(StandardNormal);
    let mut b = arrival.clone();
    b.theta.tau = tau_new;
    // independence proposal: q(new|old) = N(new; center, sd), q(old|new) =
    // N(old; center, sd) since the center is state-independent
    let lq_fwd = normal_log_pdf(tau_new, center, sd * sd);
    let lq_rev = normal_log_pdf(arrival.theta.tau, center, sd * sd);
    finish_tau_move(chain, st, id, arrival, b, lq_rev - lq_fwd, rng)
}

/// Shift the onset so the envelope peak lands on the strongest nearby
/// signal excursion.
pub fn peak_shift(chain: &mut Chain, st: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let ids: Vec<ArrivalId> = chain.state.arrivals[st].keys().copied().collect();
    if ids.is_empty() {
        return Ok(false);
    }
    let id = ids[rng.random_range(0..ids.len())];
    let arrival = chain.state.arrivals[st][&id].clone();
    let signal = &chain.signals[st];
    // observed peak: sample with maximum |s - mu|; depends only on data
    let mu = chain.state.noise[st].mu;
    let mut peak_idx = 0;
    let mut peak_val = f64::NEG_INFINITY;
    for (i, s) in signal.samples.iter().enumerate() {
        let v = (s - mu).abs();
        if v > peak_val {
            peak_val = v;
            peak_idx = i;
        }
    }
    // the envelope peaks at tau + rho
    let center = signal.time_of(peak_idx) - arrival.theta.rho;
    let sd = chain.cfg.step_tau_s.max(0.05);
    let tau_new = center + sd * rng.sample::<f64, _>(StandardNormal);
    let mut b = arrival.clone();
    b.theta.tau = tau_new;
    // the center depends on rho, which this move leaves unchanged
    let lq_fwd = normal_log_pdf(tau_new, center, sd * sd);
    let lq_rev = normal_log_pdf(arrival.theta.tau, center, sd * sd);
    finish_tau_move(chain, st, id, arrival, b, lq_rev - lq_fwd, rng)
}

fn finish_tau_move(
    chain: &mut Chain,
    st: usize,
    id: ArrivalId,
    old: Arrival,
    new: Arrival,
    log_q_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let d_prior = pair_theta_prior(chain, st, &new)? - pair_theta_prior(chain, st, &old)?;
    if d_prior == f64::NEG_INFINITY {
        return Ok(false);
    }
    let (l1, h1) = chain.affected_range(st, &old);
    let (l2, h2) = chain.affected_range(st, &new);
    let olds: Vec<&Arrival> = chain.state.arrivals[st].values().collect();
    let news: Vec<&Arrival> = chain.state.arrivals[st]
        .iter()
        .map(|(aid, a)| if *aid == id { &new } else { a })
        .collect();
    let d_lik = match chain.station_delta(st, &olds, &news, (l1.min(l2), h1.max(h2))) {
        Ok(d) => d,
        Err(Error::Capacity(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    drop((olds, news));
    if accept(d_prior + d_lik + log_q_ratio, rng) {
        chain.state.arrivals[st].insert(id, new);
        chain.loglik[st] += d_lik;
        return Ok(true);
    }
    Ok(false)
}
