//! Forward signal model and its exact collapse.
//!
//! A station signal is the sum of arrival contributions plus autoregressive
//! background noise. Each arrival contributes its envelope times a
//! modulation process: wavelet-synthesized over the first `W` modulation
//! samples, unit white noise afterwards. Conditioned on envelope parameters,
//! wavelet coefficients enter linearly with Gaussian priors, so they can be
//! marginalized exactly by Kalman filtering a state holding the AR lags and
//! the currently active coefficients.
//!
//! Likelihood evaluations decompose over *clusters*: maximal sample ranges
//! covered by envelope support (padded by the AR order). Outside clusters
//! the noise values are observed directly and the AR factors are evaluated
//! in closed form; inside, the Kalman filter runs with the state seeded from
//! the known pre-cluster noise values. The decomposition is exact and makes
//! single-arrival updates O(cluster length) rather than O(signal length).

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envelope::{envelope_value, support_duration, ArrivalParams};
use crate::error::Error;
use crate::geophys::PhaseId;
use crate::numeric::{normal_log_pdf, LN_2PI};
use crate::wavelet::{dwt_inverse, WaveletBasis};
use crate::worldmodel::EventId;
use crate::Result;

/// Station background noise: mean, AR innovation variance, AR coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub mu: f64,
    pub sigma2: f64,
    pub phi: Vec<f64>,
}

impl NoiseParams {
    pub fn new(mu: f64, sigma2: f64, phi: Vec<f64>) -> Result<Self> {
        let p = NoiseParams { mu, sigma2, phi };
        p.validate()?;
        Ok(p)
    }

    pub fn white(mu: f64, sigma2: f64) -> Result<Self> {
        NoiseParams::new(mu, sigma2, Vec::new())
    }

    pub fn ar_order(&self) -> usize {
        self.phi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::domain("noise variance must be positive"));
        }
        if !self.mu.is_finite() {
            return Err(Error::domain("noise mean must be finite"));
        }
        if !ar_stable(&self.phi) {
            return Err(Error::domain("AR polynomial is unstable"));
        }
        Ok(())
    }
}

/// Stability of the AR recursion, checked by squaring the companion matrix:
/// the spectral radius is below one iff powers of the matrix vanish.
pub fn ar_stable(phi: &[f64]) -> bool {
    let r = phi.len();
    if r == 0 {
        return true;
    }
    if phi.iter().any(|p| !p.is_finite()) {
        return false;
    }
    let mut m = vec![0.0_f64; r * r];
    for (j, &p) in phi.iter().enumerate() {
        m[j] = p;
    }
    for i in 1..r {
        m[i * r + i - 1] = 1.0;
    }
    // 30 squarings = companion matrix to the power 2^30; a stable matrix
    // decays, an unstable one blows up, and a unit-root one stalls near 1
    let mut max = 1.0_f64;
    for _ in 0..30 {
        let mut sq = vec![0.0; r * r];
        max = 0.0;
        for i in 0..r {
            for k in 0..r {
                let a = m[i * r + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..r {
                    sq[i * r + j] += a * m[k * r + j];
                }
            }
        }
        for v in &sq {
            max = max.max(v.abs());
        }
        if max > 1e12 {
            return false;
        }
        if max < 1e-12 {
            return true;
        }
        m = sq;
    }
    max < 1.0
}

/// One phase arrival at a station: envelope parameters, optional event
/// association, and the per-coefficient Gaussian prior on its modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub station: usize,
    pub phase: PhaseId,
    pub theta: ArrivalParams,
    /// Generating event, or `None` for unassociated arrivals.
    pub association: Option<EventId>,
    /// Per-coefficient prior means, length `C`.
    pub coeff_mean: Vec<f64>,
    /// Per-coefficient prior variances, length `C`, strictly positive.
    pub coeff_var: Vec<f64>,
}

impl Arrival {
    /// Unassociated arrival with the fixed standard-normal coefficient prior.
    pub fn unassociated(
        station: usize,
        phase: PhaseId,
        theta: ArrivalParams,
        basis: &WaveletBasis,
    ) -> Self {
        Arrival {
            station,
            phase,
            theta,
            association: None,
            coeff_mean: vec![0.0; basis.coeff_len()],
            coeff_var: vec![1.0; basis.coeff_len()],
        }
    }

    pub fn validate(&self, basis: &WaveletBasis) -> Result<()> {
        self.theta.validate()?;
        if self.coeff_mean.len() != basis.coeff_len() || self.coeff_var.len() != basis.coeff_len()
        {
            return Err(Error::dimension(format!(
                "coefficient prior length {} != basis C {}",
                self.coeff_mean.len(),
                basis.coeff_len()
            )));
        }
        if self.coeff_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("coefficient prior variances must be positive"));
        }
        Ok(())
    }
}

/// A sampled station waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSignal {
    pub station: usize,
    /// Epoch time of sample 0, seconds.
    pub start_time: f64,
    pub rate_hz: f64,
    pub samples: Vec<f64>,
}

impl StationSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_of(&self, i: usize) -> f64 {
        self.start_time + i as f64 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::domain("sample rate must be positive"));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::domain("signal contains non-finite samples"));
        }
        Ok(())
    }
}

/// Sampling window for synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalWindow {
    pub start_time: f64,
    pub n_samples: usize,
    pub rate_hz: f64,
}

/// Signal-model configuration shared by synthesis and likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    /// Envelope support truncation threshold (absolute amplitude).
    pub env_floor: f64,
    /// Hard cap on envelope support duration, seconds.
    pub env_max_dur_s: f64,
    /// Maximum simultaneous overlapping arrivals in one cluster.
    pub k_max: usize,
    /// Clamp for degenerate message variances.
    pub xi_max: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            env_floor: 1e-5,
            env_max_dur_s: 240.0,
            k_max: 8,
            xi_max: 1e6,
        }
    }
}

/// Diagonal Gaussian messages from one station signal to the coefficient
/// priors: per-arrival means and variances plus a scalar log-normalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffMessages {
    /// Message means, one vector of length C per arrival.
    pub nu: Vec<Vec<f64>>,
    /// Message variances, aligned with `nu`; clamped at `xi_max`.
    pub xi: Vec<Vec<f64>>,
    /// Log-normalizer: with the standard-normal reference prior,
    /// `sum_c log N(nu_c; 0, 1 + xi_c) - log Z` equals the collapsed
    /// log-likelihood of the signal.
    pub log_z: f64,
    /// Number of coefficients whose message variance was clamped.
    pub clamped: usize,
}

/// Exact log-density of the order-R AR noise process with zero pre-history:
/// `sum_t log N(z_t; sum_r phi_r z_(t-r), sigma^2)`.
pub fn ar_log_density(z: &[f64], noise: &NoiseParams) -> f64 {
    let at = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            z[i as usize]
        }
    };
    let mut acc = 0.0;
    for t in 0..z.len() as isize {
        acc += ar_factor(&at, t, &noise.phi, noise.sigma2);
    }
    acc
}

/// Single conditional AR factor at index `t` given the lag accessor.
fn ar_factor(z: &impl Fn(isize) -> f64, t: isize, phi: &[f64], sigma2: f64) -> f64 {
    let mut mean = 0.0;
    for (r, &p) in phi.iter().enumerate() {
        mean += p * z(t - 1 - r as isize);
    }
    normal_log_pdf(z(t), mean, sigma2)
}

// ---------------------------------------------------------------------------
// Arrival layout and clusters
// ---------------------------------------------------------------------------

/// Sample-grid geometry of one arrival against one signal.
#[derive(Debug, Clone)]
pub(crate) struct ArrivalLayout {
    /// Signal sample index of modulation sample p = 0 (first sample fully
    /// past the onset time); may lie outside the signal.
    pub i0: isize,
    /// Last signal sample inside the envelope support (inclusive).
    pub last: isize,
}

impl ArrivalLayout {
    pub fn new(
        theta: &ArrivalParams,
        signal: &StationSignal,
        cfg: &SignalConfig,
    ) -> ArrivalLayout {
        let rel = (theta.tau - signal.start_time) * signal.rate_hz;
        let i0 = clamp_isize(rel.floor() + 1.0);
        let dur = support_duration(theta, cfg.env_floor, cfg.env_max_dur_s);
        let last_rel = (theta.tau + dur - signal.start_time) * signal.rate_hz;
        let last = clamp_isize(last_rel.floor());
        ArrivalLayout { i0, last }
    }

    /// Active sample range clipped to the signal, or None if disjoint.
    fn active_range(&self, n: usize) -> Option<(isize, isize)> {
        let lo = self.i0.max(0);
        let hi = self.last.min(n as isize - 1);
        if lo > hi {
            None
        } else {
            Some((lo, hi))
        }
    }
}

fn clamp_isize(x: f64) -> isize {
    x.clamp(-1e15, 1e15) as isize
}

/// Maximal disjoint sample ranges covered by arrival envelope supports,
/// each padded by the AR order and clipped to the signal.
pub(crate) fn cluster_extents(
    layouts: &[ArrivalLayout],
    ar_order: usize,
    n: usize,
) -> Vec<(isize, isize, Vec<usize>)> {
    let mut ranges: Vec<(isize, isize, usize)> = Vec::new();
    for (idx, l) in layouts.iter().enumerate() {
        if let Some((lo, hi)) = l.active_range(n) {
            let hi_pad = (hi + ar_order as isize).min(n as isize - 1);
            ranges.push((lo, hi_pad, idx));
        }
    }
    ranges.sort_unstable();
    let mut out: Vec<(isize, isize, Vec<usize>)> = Vec::new();
    for (lo, hi, idx) in ranges {
        match out.last_mut() {
            // the AR padding couples adjacent supports when they are within
            // one lag window of each other
            Some(last) if lo <= last.1 + 1 + ar_order as isize => {
                last.1 = last.1.max(hi);
                last.2.push(idx);
            }
            _ => out.push((lo, hi, vec![idx])),
        }
    }
    out
}

/// Expand `[lo, hi]` so that every cluster extent it intersects is wholly
/// contained; likelihood sums over closed ranges are exact.
pub fn closed_range(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    cfg: &SignalConfig,
    lo: isize,
    hi: isize,
) -> (isize, isize) {
    let layouts: Vec<ArrivalLayout> = arrivals
        .iter()
        .map(|a| ArrivalLayout::new(&a.theta, signal, cfg))
        .collect();
    let extents = cluster_extents(&layouts, noise.ar_order(), signal.len());
    let mut lo = lo.max(0);
    let mut hi = hi.min(signal.len() as isize - 1);
    for (elo, ehi, _) in &extents {
        if *elo <= hi && *ehi >= lo {
            lo = lo.min(*elo);
            hi = hi.max(*ehi);
        }
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Kalman filter over (AR lags, active coefficients)
// ---------------------------------------------------------------------------

/// Dense Gaussian state with a fixed AR block and dynamic coefficient slots.
struct DenseGauss {
    d: usize,
    stride: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl DenseGauss {
    fn new(stride: usize, ar_order: usize) -> DenseGauss {
        DenseGauss {
            d: ar_order,
            stride,
            mean: vec![0.0; stride],
            cov: vec![0.0; stride * stride],
        }
    }

    #[inline]
    fn c(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.stride + j]
    }

    #[inline]
    fn c_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.cov[i * self.stride + j]
    }

    fn push_slot(&mut self, mean: f64, var: f64) -> usize {
        let idx = self.d;
        assert!(idx < self.stride, "state capacity exceeded");
        self.mean[idx] = mean;
        for k in 0..self.d {
            *self.c_mut(idx, k) = 0.0;
            *self.c_mut(k, idx) = 0.0;
        }
        *self.c_mut(idx, idx) = var;
        self.d += 1;
        idx
    }

    /// Marginalize out a slot by swapping it with the last one; returns the
    /// old index of the slot that moved into `idx` (== idx if none).
    fn drop_slot(&mut self, idx: usize) -> usize {
        let last = self.d - 1;
        if idx != last {
            self.mean.swap(idx, last);
            for k in 0..self.d {
                self.cov.swap(idx * self.stride + k, last * self.stride + k);
            }
            for k in 0..self.d {
                self.cov.swap(k * self.stride + idx, k * self.stride + last);
            }
        }
        self.d = last;
        last
    }

    /// AR transition: shift the lag block, with the new head
    /// `z_i = phi . lags + e_i`, `e_i ~ N(0, sigma2)`. Coefficient slots are
    /// static.
    fn predict_ar(&mut self, phi: &[f64], sigma2: f64) {
        let r = phi.len();
        if r == 0 {
            return;
        }
        let d = self.d;
        // v[j] = sum_r phi_r P[r][j] over old indexing
        let mut v = vec![0.0; d];
        for (ri, &p) in phi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for j in 0..d {
                v[j] += p * self.c(ri, j);
            }
        }
        let s00: f64 = phi.iter().enumerate().map(|(ri, &p)| p * v[ri]).sum::<f64>() + sigma2;
        let m0: f64 = phi
            .iter()
            .enumerate()
            .map(|(ri, &p)| p * self.mean[ri])
            .sum();
        // shift AR rows/cols down by one
        for i in (1..r).rev() {
            for j in (1..r).rev() {
                *self.c_mut(i, j) = self.c(i - 1, j - 1);
            }
            for j in r..d {
                let val = self.c(i - 1, j);
                *self.c_mut(i, j) = val;
                *self.c_mut(j, i) = val;
            }
        }
        for i in (1..r).rev() {
            self.mean[i] = self.mean[i - 1];
        }
        // new head row/col
        self.mean[0] = m0;
        *self.c_mut(0, 0) = s00;
        for j in 1..r {
            // cov(z_i, z_(i-j)) = phi . P[:, j-1] = v[j-1]
            *self.c_mut(0, j) = v[j - 1];
            *self.c_mut(j, 0) = v[j - 1];
        }
        for j in r..d {
            *self.c_mut(0, j) = v[j];
            *self.c_mut(j, 0) = v[j];
        }
    }

    /// Scalar observation `y = h . x + noise(var obs_var)`; returns the
    /// predictive log-density of `y`.
    fn observe(&mut self, h: &[(usize, f64)], obs_var: f64, y: f64) -> f64 {
        let d = self.d;
        let mut ph = vec![0.0; d];
        for &(i, hv) in h {
            if hv == 0.0 {
                continue;
            }
            for j in 0..d {
                ph[j] += hv * self.c(i, j);
            }
        }
        let mut s = obs_var;
        let mut m = 0.0;
        for &(i, hv) in h {
            s += hv * ph[i];
            m += hv * self.mean[i];
        }
        let resid = y - m;
        let ll = -0.5 * (LN_2PI + s.ln() + resid * resid / s);
        let inv_s = 1.0 / s;
        for i in 0..d {
            let k = ph[i] * inv_s;
            self.mean[i] += k * resid;
            for j in 0..d {
                self.cov[i * self.stride + j] -= k * ph[j];
            }
        }
        // re-symmetrize and floor the diagonal: repeated near-noiseless
        // rank-1 downdates otherwise accumulate asymmetry
        for i in 0..d {
            for j in 0..i {
                let avg = 0.5 * (self.c(i, j) + self.c(j, i));
                *self.c_mut(i, j) = avg;
                *self.c_mut(j, i) = avg;
            }
            if self.c(i, i) < 0.0 {
                *self.c_mut(i, i) = 0.0;
            }
        }
        ll
    }
}

struct SlotMeta {
    member: usize,
    coeff: usize,
    last_sample: isize,
}

/// Kalman pass over one cluster `[lo, hi]` (inclusive, in signal samples).
///
/// `keep_all = false` drops coefficient slots after their last active
/// sample (likelihood mode); `keep_all = true` retains every touched slot
/// so its filtered marginal at the end equals the smoothed marginal
/// (message mode). Returns the cluster log-likelihood and, in message mode,
/// the posterior (mean, var) per touched (member, coefficient).
#[allow(clippy::too_many_arguments)]
fn kalman_cluster(
    signal: &StationSignal,
    members: &[(usize, &Arrival, &ArrivalLayout)],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
    lo: isize,
    hi: isize,
    keep_all: bool,
    ref_prior: bool,
) -> Result<(f64, Vec<(usize, usize, f64, f64)>)> {
    if members.len() > cfg.k_max {
        return Err(Error::Capacity(format!(
            "{} overlapping arrivals exceed k_max = {}",
            members.len(),
            cfg.k_max
        )));
    }
    let r = noise.ar_order();
    let w = basis.signal_len() as isize;
    let max_active = basis.levels().max(1) * 8 + 8;
    let stride = if keep_all {
        r + members.len() * basis.coeff_len()
    } else {
        r + members.len() * max_active.min(basis.coeff_len())
    };
    let mut state = DenseGauss::new(stride, r);
    // seed AR lags with the known pre-cluster noise values
    for lag in 0..r {
        let i = lo - 1 - lag as isize;
        state.mean[lag] = if i >= 0 {
            signal.samples[i as usize] - noise.mu
        } else {
            0.0
        };
    }
    // slot bookkeeping: (member, coeff) -> state index
    let mut slot_of: Vec<std::collections::BTreeMap<usize, usize>> =
        vec![std::collections::BTreeMap::new(); members.len()];
    let mut meta: Vec<SlotMeta> = Vec::new();

    let mut ll = 0.0;
    let mut h: Vec<(usize, f64)> = Vec::new();
    for i in lo..=hi {
        state.predict_ar(&noise.phi, noise.sigma2);
        h.clear();
        if r > 0 {
            h.push((0, 1.0));
        }
        let mut obs_var = if r == 0 { noise.sigma2 } else { 0.0 };
        for (midx, &(_, arrival, layout)) in members.iter().enumerate() {
            if i < layout.i0 || i > layout.last {
                continue;
            }
            let t = signal.time_of(i as usize);
            let env = envelope_value(t, &arrival.theta);
            let p = i - layout.i0;
            if p < w {
                for &(c, dval) in basis.row(p as usize) {
                    let slot = match slot_of[midx].get(&c) {
                        Some(&s) => s,
                        None => {
                            let (mn, vr) = if ref_prior {
                                (0.0, 1.0)
                            } else {
                                (arrival.coeff_mean[c], arrival.coeff_var[c])
                            };
                            let s = state.push_slot(mn, vr);
                            let (_, sup_last) = basis.coeff_support(c);
                            let last_sample = if keep_all {
                                hi
                            } else {
                                (layout.i0 + sup_last as isize).min(layout.last).min(hi)
                            };
                            slot_of[midx].insert(c, s);
                            meta.push(SlotMeta {
                                member: midx,
                                coeff: c,
                                last_sample,
                            });
                            s
                        }
                    };
                    h.push((slot, env * dval));
                }
            } else {
                // white modulation region: unit-variance noise scaled by the
                // envelope enters the observation variance
                obs_var += env * env;
            }
        }
        let y = signal.samples[i as usize] - noise.mu;
        ll += state.observe(&h, obs_var, y);
        if !keep_all {
            // drop slots whose basis support has passed
            let mut k = 0;
            while k < meta.len() {
                if meta[k].last_sample <= i {
                    let slot = r + k;
                    let moved_from = state.drop_slot(slot);
                    slot_of[meta[k].member].remove(&meta[k].coeff);
                    let last_meta = meta.len() - 1;
                    if moved_from != slot {
                        let moved = (moved_from - r).min(last_meta);
                        debug_assert_eq!(moved, last_meta);
                        *slot_of[meta[moved].member]
                            .get_mut(&meta[moved].coeff)
                            .unwrap() = slot;
                        meta.swap(k, last_meta);
                    }
                    meta.pop();
                } else {
                    k += 1;
                }
            }
        }
    }
    let mut posts = Vec::new();
    if keep_all {
        for (k, m) in meta.iter().enumerate() {
            let slot = r + k;
            posts.push((m.member, m.coeff, state.mean[slot], state.c(slot, slot)));
        }
    }
    Ok((ll, posts))
}

// ---------------------------------------------------------------------------
// Public likelihood operations
// ---------------------------------------------------------------------------

fn validate_inputs(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
) -> Result<()> {
    signal.validate()?;
    noise.validate()?;
    for a in arrivals {
        a.validate(basis)?;
    }
    Ok(())
}

/// Collapsed log-likelihood `log p(s | theta, E)` of a station signal with
/// the wavelet coefficients of every arrival marginalized out.
pub fn collapsed_log_likelihood(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
) -> Result<f64> {
    validate_inputs(signal, arrivals, noise, basis)?;
    log_likelihood_over(signal, arrivals, noise, basis, cfg, 0, signal.len() as isize - 1)
}

/// Log-likelihood contribution of the factor range `[lo, hi]` (inclusive).
///
/// The range must be closed under the cluster structure (see
/// [`closed_range`]); the full-signal likelihood is the sum of any closed
/// partition's contributions.
pub fn log_likelihood_over(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
    lo: isize,
    hi: isize,
) -> Result<f64> {
    let n = signal.len();
    let lo = lo.max(0);
    let hi = hi.min(n as isize - 1);
    if lo > hi {
        return Ok(0.0);
    }
    let layouts: Vec<ArrivalLayout> = arrivals
        .iter()
        .map(|a| ArrivalLayout::new(&a.theta, signal, cfg))
        .collect();
    let extents = cluster_extents(&layouts, noise.ar_order(), n);
    debug_assert!(
        extents
            .iter()
            .all(|&(elo, ehi, _)| (elo > hi || ehi < lo) || (elo >= lo && ehi <= hi)),
        "likelihood range [{lo}, {hi}] is not cluster-closed"
    );

    let z = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            signal.samples[i as usize] - noise.mu
        }
    };
    let mut ll = 0.0;
    let mut cursor = lo;
    for (elo, ehi, member_idx) in &extents {
        if *elo > hi || *ehi < lo {
            continue;
        }
        for i in cursor..*elo {
            ll += ar_factor(&z, i, &noise.phi, noise.sigma2);
        }
        let members: Vec<(usize, &Arrival, &ArrivalLayout)> = member_idx
            .iter()
            .map(|&k| (k, arrivals[k], &layouts[k]))
            .collect();
        let (cll, _) = kalman_cluster(
            signal, &members, noise, basis, cfg, *elo, *ehi, false, false,
        )?;
        ll += cll;
        cursor = ehi + 1;
    }
    for i in cursor..=hi {
        ll += ar_factor(&z, i, &noise.phi, noise.sigma2);
    }
    Ok(ll)
}

/// Diagonal coefficient messages: the Kalman smoothing posterior per
/// coefficient divided by the standard-normal reference prior, plus the
/// log-normalizer tying the messages back to the collapsed likelihood.
pub fn coefficient_messages(
    signal: &StationSignal,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
) -> Result<CoeffMessages> {
    validate_inputs(signal, arrivals, noise, basis)?;
    let n = signal.len();
    let c_len = basis.coeff_len();
    let layouts: Vec<ArrivalLayout> = arrivals
        .iter()
        .map(|a| ArrivalLayout::new(&a.theta, signal, cfg))
        .collect();
    let extents = cluster_extents(&layouts, noise.ar_order(), n);

    // posterior defaults to the prior for unobserved coefficients
    let mut post_mean: Vec<Vec<f64>> = vec![vec![0.0; c_len]; arrivals.len()];
    let mut post_var: Vec<Vec<f64>> = vec![vec![1.0; c_len]; arrivals.len()];

    let z = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            signal.samples[i as usize] - noise.mu
        }
    };
    let mut ll_ref = 0.0;
    let mut cursor: isize = 0;
    for (elo, ehi, member_idx) in &extents {
        for i in cursor..*elo {
            ll_ref += ar_factor(&z, i, &noise.phi, noise.sigma2);
        }
        let members: Vec<(usize, &Arrival, &ArrivalLayout)> = member_idx
            .iter()
            .map(|&k| (k, arrivals[k], &layouts[k]))
            .collect();
        let (cll, posts) =
            kalman_cluster(signal, &members, noise, basis, cfg, *elo, *ehi, true, true)?;
        ll_ref += cll;
        for (midx, coeff, m, v) in posts {
            let arr = member_idx[midx];
            post_mean[arr][coeff] = m;
            post_var[arr][coeff] = v;
        }
        cursor = ehi + 1;
    }
    for i in cursor..n as isize {
        ll_ref += ar_factor(&z, i, &noise.phi, noise.sigma2);
    }

    // divide posterior by the N(0,1) prior in natural parameters
    let mut nu = vec![vec![0.0; c_len]; arrivals.len()];
    let mut xi = vec![vec![0.0; c_len]; arrivals.len()];
    let mut clamped = 0;
    let mut log_z = -ll_ref;
    for a in 0..arrivals.len() {
        for c in 0..c_len {
            let v = post_var[a][c].max(1e-300);
            let m = post_mean[a][c];
            let lam_msg = 1.0 / v - 1.0;
            if lam_msg <= 1.0 / cfg.xi_max {
                nu[a][c] = m;
                xi[a][c] = cfg.xi_max;
                clamped += 1;
            } else {
                xi[a][c] = 1.0 / lam_msg;
                nu[a][c] = (m / v) * xi[a][c];
            }
            log_z += normal_log_pdf(nu[a][c], 0.0, 1.0 + xi[a][c]);
        }
    }
    Ok(CoeffMessages {
        nu,
        xi,
        log_z,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Training-time joint density
// ---------------------------------------------------------------------------

/// Observations for one GP output across training events: aligned inputs,
/// physics mean values, and message means/variances.
#[derive(Debug, Clone)]
pub struct OutputGroup<'a> {
    pub inputs: &'a [crate::gp::GpInput],
    pub mean: &'a [f64],
    pub nu: &'a [f64],
    pub xi: &'a [f64],
    pub region_of: &'a [usize],
    pub model: &'a crate::gp::OutputModel,
}

/// The approximate joint training density: message log-normalizers plus the
/// exact GP marginals of the message values,
/// `sum_j (-log Z_j) + sum_c log N(nu_c; mu_c(E), K_c(E) + diag(xi_c))`.
pub fn joint_training_density(log_zs: &[f64], groups: &[OutputGroup]) -> Result<f64> {
    let mut acc = -log_zs.iter().sum::<f64>();
    for g in groups {
        if g.inputs.len() != g.nu.len()
            || g.nu.len() != g.xi.len()
            || g.mean.len() != g.nu.len()
            || g.region_of.len() != g.nu.len()
        {
            return Err(Error::dimension("joint density group length mismatch"));
        }
        acc += g.model.log_marginal(g.inputs, g.mean, g.nu, g.xi, g.region_of)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Sample a station signal from the forward model: envelope-scaled wavelet
/// modulation (coefficients drawn from each arrival's prior), white
/// modulation past the wavelet window, plus AR noise. The `station` field of
/// every arrival must match `station`.
pub fn synthesize(
    station: usize,
    arrivals: &[&Arrival],
    noise: &NoiseParams,
    window: &SignalWindow,
    basis: &WaveletBasis,
    cfg: &SignalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StationSignal> {
    noise.validate()?;
    if !(window.rate_hz > 0.0) {
        return Err(Error::domain("sample rate must be positive"));
    }
    let n = window.n_samples;
    let mut samples = vec![0.0; n];
    let probe = StationSignal {
        station,
        start_time: window.start_time,
        rate_hz: window.rate_hz,
        samples: Vec::new(),
    };
    let w = basis.signal_len() as isize;
    for arrival in arrivals {
        if arrival.station != station {
            return Err(Error::config(format!(
                "arrival for station {} in synthesis of station {station}",
                arrival.station
            )));
        }
        arrival.validate(basis)?;
        let layout = ArrivalLayout::new(&arrival.theta, &probe, cfg);
        // draw coefficients from the arrival's prior and synthesize the
        // in-window modulation
        let coeffs: Vec<f64> = arrival
            .coeff_mean
            .iter()
            .zip(&arrival.coeff_var)
            .map(|(&m, &v)| {
                let e: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * e
            })
            .collect();
        let modulation = dwt_inverse(&coeffs, basis)?;
        let lo = layout.i0.max(0);
        let hi = layout.last.min(n as isize - 1);
        for i in lo..=hi {
            let t = window.start_time + i as f64 / window.rate_hz;
            let env = envelope_value(t, &arrival.theta);
            let p = i - layout.i0;
            let m = if p < w {
                modulation[p as usize]
            } else {
                rng.sample::<f64, _>(StandardNormal)
            };
            samples[i as usize] += env * m;
        }
    }
    // AR background noise with zero pre-history
    let r = noise.ar_order();
    let sd = noise.sigma2.sqrt();
    let mut zbuf = vec![0.0; n];
    for t in 0..n {
        let mut zt: f64 = sd * rng.sample::<f64, _>(StandardNormal);
        for (ri, &p) in noise.phi.iter().enumerate() {
            if t > ri {
                zt += p * zbuf[t - 1 - ri];
            }
        }
        let _ = r;
        zbuf[t] = zt;
        samples[t] += noise.mu + zt;
    }
    Ok(StationSignal {
        station,
        start_time: window.start_time,
        rate_hz: window.rate_hz,
        samples,
    })
}
