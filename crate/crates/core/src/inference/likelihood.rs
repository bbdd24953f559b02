//! Chain state: world state plus per-station likelihood bookkeeping.

use crate::error::Error;
use crate::numeric::{ln_gamma, poisson_log_pmf};
use crate::signalmodel::{
    closed_range, collapsed_log_likelihood, log_likelihood_over, Arrival, ArrivalLayout,
    StationSignal,
};
use crate::worldmodel::{ArrivalId, EventId, WorldState};
use crate::Result;

use super::hough::HoughGeom;
use super::propose::CorrelationProposal;
use super::{ChainConfig, ModelContext};

/// One MCMC chain: mutable world state, observed signals, cached
/// per-station log-likelihood totals (diagnostic only; acceptance tests use
/// exact range deltas), and the chain-constant proposal caches.
pub struct Chain<'a> {
    pub ctx: ModelContext<'a>,
    pub cfg: &'a ChainConfig,
    pub signals: &'a [StationSignal],
    pub state: WorldState,
    pub loglik: Vec<f64>,
    /// Station-to-bin distances for Hough grid builds.
    pub(crate) hough_geom: HoughGeom,
    /// Correlation proposal; depends only on templates and signals.
    pub(crate) corr: CorrelationProposal,
}

impl<'a> Chain<'a> {
    pub fn new(
        ctx: ModelContext<'a>,
        cfg: &'a ChainConfig,
        signals: &'a [StationSignal],
        state: WorldState,
    ) -> Result<Chain<'a>> {
        if signals.len() != ctx.n_stations() || state.n_stations() != ctx.n_stations() {
            return Err(Error::dimension(
                "signals, state, and station list must align",
            ));
        }
        let hough_geom = HoughGeom::build(&ctx, &cfg.hough);
        let corr = CorrelationProposal::build(&ctx, signals, cfg);
        let mut chain = Chain {
            ctx,
            cfg,
            signals,
            state,
            loglik: vec![0.0; signals.len()],
            hough_geom,
            corr,
        };
        chain.recompute_likelihoods()?;
        Ok(chain)
    }

    pub fn recompute_likelihoods(&mut self) -> Result<()> {
        for st in 0..self.signals.len() {
            self.loglik[st] = self.station_loglik(st, None)?;
        }
        Ok(())
    }

    /// Signal time span of a station, as (start, end) epoch seconds.
    pub fn window(&self, st: usize) -> (f64, f64) {
        let s = &self.signals[st];
        (
            s.start_time,
            s.start_time + s.len() as f64 / s.rate_hz,
        )
    }

    /// Arrivals of a station in stable id order, with one optionally
    /// substituted (`Some(sub)`) or removed (`None`).
    fn arrivals_with<'b>(
        &'b self,
        st: usize,
        replace: Option<(ArrivalId, Option<&'b Arrival>)>,
    ) -> Vec<&'b Arrival> {
        let mut out: Vec<&Arrival> = Vec::with_capacity(self.state.arrivals[st].len());
        for (id, a) in &self.state.arrivals[st] {
            match replace {
                Some((rid, sub)) if rid == *id => {
                    if let Some(s) = sub {
                        out.push(s);
                    }
                }
                _ => out.push(a),
            }
        }
        out
    }

    /// Full-station collapsed log-likelihood for an arbitrary arrival set
    /// (`None` = current state's arrivals).
    pub fn station_loglik(&self, st: usize, arrivals: Option<&[&Arrival]>) -> Result<f64> {
        let current;
        let arrs: &[&Arrival] = match arrivals {
            Some(a) => a,
            None => {
                current = self.arrivals_with(st, None);
                &current
            }
        };
        collapsed_log_likelihood(
            &self.signals[st],
            arrs,
            &self.state.noise[st],
            self.ctx.basis,
            self.ctx.sig_cfg,
        )
    }

    /// Exact likelihood delta between two arrival sets of one station over
    /// the closure of `affected`; both sets see the same factor range.
    pub fn station_delta(
        &self,
        st: usize,
        old: &[&Arrival],
        new: &[&Arrival],
        affected: (isize, isize),
    ) -> Result<f64> {
        let signal = &self.signals[st];
        let noise = &self.state.noise[st];
        let (mut lo, mut hi) = affected;
        for _ in 0..32 {
            let (lo_o, hi_o) = closed_range(signal, old, noise, self.ctx.sig_cfg, lo, hi);
            let (lo_n, hi_n) = closed_range(signal, new, noise, self.ctx.sig_cfg, lo_o, hi_o);
            if (lo_n, hi_n) == (lo, hi) {
                break;
            }
            lo = lo_n;
            hi = hi_n;
        }
        if lo > hi {
            return Ok(0.0);
        }
        let l_old = log_likelihood_over(
            signal,
            old,
            noise,
            self.ctx.basis,
            self.ctx.sig_cfg,
            lo,
            hi,
        )?;
        let l_new = log_likelihood_over(
            signal,
            new,
            noise,
            self.ctx.basis,
            self.ctx.sig_cfg,
            lo,
            hi,
        )?;
        Ok(l_new - l_old)
    }

    /// Sample range influenced by an arrival's envelope, padded by the AR
    /// order.
    pub fn affected_range(&self, st: usize, arrival: &Arrival) -> (isize, isize) {
        let layout = ArrivalLayout::new(&arrival.theta, &self.signals[st], self.ctx.sig_cfg);
        let r = self.state.noise[st].ar_order() as isize;
        (layout.i0, layout.last + r)
    }

    // -- total prior -------------------------------------------------------

    /// Log prior of the whole state: event prior, unassociated-arrival
    /// process per station, associated-theta GP priors, and noise priors.
    pub fn state_log_prior(&self) -> Result<f64> {
        let mut acc = self.events_log_prior()?;
        for st in 0..self.state.n_stations() {
            acc += self.station_arrivals_log_prior(st)?;
            acc += self.ctx.noise_priors[st].log_density(&self.state.noise[st]);
        }
        Ok(acc)
    }

    pub fn events_log_prior(&self) -> Result<f64> {
        let events: Vec<_> = self.state.events.values().copied().collect();
        let mut rel = events;
        for e in &mut rel {
            e.time -= self.ctx.window_start;
        }
        crate::worldmodel::log_prior_events(&rel, self.ctx.prior)
    }

    /// Prior of one station's arrival set: Poisson-process factor over the
    /// unassociated arrivals (onset uniform, shape Gaussian, phase uniform)
    /// plus per-arrival theta densities for associated arrivals.
    pub fn station_arrivals_log_prior(&self, st: usize) -> Result<f64> {
        let window = self.window(st);
        let span = window.1 - window.0;
        let n_phases = self.ctx.phases.len() as f64;
        let mut acc = 0.0;
        let mut n_unassoc = 0u64;
        for a in self.state.arrivals[st].values() {
            match a.association {
                None => {
                    n_unassoc += 1;
                    acc += self.cfg.unassoc.log_density(&a.theta, window) - n_phases.ln();
                }
                Some(ev) => {
                    let event = self.state.events.get(&ev).ok_or_else(|| {
                        Error::config(format!("arrival references missing event {ev:?}"))
                    })?;
                    acc += self
                        .ctx
                        .assoc_theta_log_prior(&a.theta, event, st, a.phase)?;
                }
            }
        }
        let mean = self.cfg.unassoc.rate_per_s * span;
        acc += poisson_log_pmf(n_unassoc, mean) + ln_gamma(n_unassoc as f64 + 1.0);
        Ok(acc)
    }

    /// Insert an arrival and update the cached station likelihood by delta.
    pub fn insert_arrival_tracked(&mut self, st: usize, arrival: Arrival) -> Result<ArrivalId> {
        let affected = self.affected_range(st, &arrival);
        let old = self.arrivals_with(st, None);
        let mut new: Vec<&Arrival> = old.clone();
        new.push(&arrival);
        let delta = self.station_delta(st, &old, &new, affected)?;
        drop((old, new));
        let id = self.state.insert_arrival(st, arrival);
        self.loglik[st] += delta;
        Ok(id)
    }

    /// Remove an arrival and update the cached station likelihood by delta.
    pub fn remove_arrival_tracked(&mut self, st: usize, id: ArrivalId) -> Result<Arrival> {
        let arrival = self.state.arrivals[st]
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::config("removing unknown arrival"))?;
        let affected = self.affected_range(st, &arrival);
        let old = self.arrivals_with(st, None);
        let new = self.arrivals_with(st, Some((id, None)));
        let delta = self.station_delta(st, &old, &new, affected)?;
        drop((old, new));
        self.state.remove_arrival(st, id);
        self.loglik[st] += delta;
        Ok(arrival)
    }

    /// Replace an arrival in place and update the cached likelihood.
    pub fn replace_arrival_tracked(
        &mut self,
        st: usize,
        id: ArrivalId,
        new_arrival: Arrival,
    ) -> Result<()> {
        let old_arrival = self.state.arrivals[st]
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::config("replacing unknown arrival"))?;
        let (lo1, hi1) = self.affected_range(st, &old_arrival);
        let (lo2, hi2) = self.affected_range(st, &new_arrival);
        let affected = (lo1.min(lo2), hi1.max(hi2));
        let old = self.arrivals_with(st, None);
        let new = self.arrivals_with(st, Some((id, Some(&new_arrival))));
        let delta = self.station_delta(st, &old, &new, affected)?;
        drop((old, new));
        self.state.arrivals[st].insert(id, new_arrival);
        self.loglik[st] += delta;
        Ok(())
    }

    /// Arrivals associated with an event, grouped by station.
    pub fn event_arrivals(&self, event: EventId) -> Vec<(usize, ArrivalId)> {
        self.state.arrivals_of_event(event)
    }
}
