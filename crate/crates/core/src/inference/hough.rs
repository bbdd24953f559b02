//! Event birth proposal from a Hough transform of unassociated arrivals.
//!
//! The event space (longitude, latitude, depth, origin time) is gridded;
//! each unassociated arrival votes for the bins whose predicted travel time
//! explains it, and bins are sampled through a softmax over accumulated
//! scores. Magnitude is handled analytically within the chosen bin: a
//! deterministic per-bin estimate from amplitude consistency, with Gaussian
//! proposal noise around it.


use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geophys::EARTH_RADIUS_KM;
use crate::numeric::{normal_cdf, normal_log_pdf};
use crate::signalmodel::Arrival;
use crate::worldmodel::{Event, WorldState};
use crate::Result;

use super::{HoughConfig, ModelContext};

/// Station-to-bin geometry shared by every grid build of a chain: great-
/// circle distances from each station to each spatial bin center.
pub struct HoughGeom {
    /// `dists[station][ilat * n_lon + ilon]`
    dists: Vec<Vec<f64>>,
}

impl HoughGeom {
    pub fn build(ctx: &ModelContext, cfg: &HoughConfig) -> HoughGeom {
        let n_lon = (360.0 / cfg.lon_bin_deg).ceil() as usize;
        let n_lat = (180.0 / cfg.lat_bin_deg).ceil() as usize;
        let dists = ctx
            .stations
            .iter()
            .map(|st| {
                let mut d = Vec::with_capacity(n_lon * n_lat);
                for ilat in 0..n_lat {
                    let lat = -90.0 + (ilat as f64 + 0.5) * cfg.lat_bin_deg;
                    for ilon in 0..n_lon {
                        let lon = -180.0 + (ilon as f64 + 0.5) * cfg.lon_bin_deg;
                        d.push(crate::geophys::great_circle_km(lon, lat, st.lon, st.lat));
                    }
                }
                d
            })
            .collect();
        let _ = (n_lon, n_lat);
        HoughGeom { dists }
    }
}

/// Accumulated Hough scores over the event grid for one world state.
pub struct HoughGrid {
    n_lon: usize,
    n_lat: usize,
    n_depth: usize,
    n_time: usize,
    lon_bin: f64,
    lat_bin: f64,
    depth_bin: f64,
    time_bin: f64,
    window_start: f64,
    window_span: f64,
    depth_max: f64,
    mb_bounds: (f64, f64),
    temperature: f64,
    sigma_mb: f64,
    /// flat per-bin accumulators, indexed by
    /// `((itime * n_depth + idep) * n_lat + ilat) * n_lon + ilon`
    score: Vec<f32>,
    mb_sum: Vec<f32>,
    mb_count: Vec<u32>,
    /// first-touch order of nonzero bins
    touched: Vec<u32>,
    /// max score over touched bins (softmax stabilizer)
    score_max: f64,
    /// sum of exp((s - max)/temp) over all bins
    z_shifted: f64,
    /// log normalizer over all bins (touched + untouched at score 0)
    log_z: f64,
    mb_prior_mean: f64,
}

impl HoughGrid {
    /// Build the grid from the current unassociated arrivals.
    pub fn build(ctx: &ModelContext, state: &WorldState, cfg: &HoughConfig) -> Result<HoughGrid> {
        let geom = HoughGeom::build(ctx, cfg);
        HoughGrid::build_with(ctx, state, cfg, &geom)
    }

    /// Build against precomputed station-bin geometry.
    pub fn build_with(
        ctx: &ModelContext,
        state: &WorldState,
        cfg: &HoughConfig,
        geom: &HoughGeom,
    ) -> Result<HoughGrid> {
        let window_span = ctx.prior.window_s;
        let n_lon = (360.0 / cfg.lon_bin_deg).ceil() as usize;
        let n_lat = (180.0 / cfg.lat_bin_deg).ceil() as usize;
        let n_depth = cfg.depth_bins.max(1);
        let n_time = (window_span / cfg.time_bin_s).ceil().max(1.0) as usize;
        let depth_bin = ctx.prior.depth_max / n_depth as f64;
        let mb_mid = 0.5 * (ctx.prior.mb_min + ctx.prior.mb_max);

        let n_bins = n_lon * n_lat * n_depth * n_time;
        let mut grid = HoughGrid {
            n_lon,
            n_lat,
            n_depth,
            n_time,
            lon_bin: cfg.lon_bin_deg,
            lat_bin: cfg.lat_bin_deg,
            depth_bin,
            time_bin: cfg.time_bin_s,
            window_start: ctx.window_start,
            window_span,
            depth_max: ctx.prior.depth_max,
            mb_bounds: (ctx.prior.mb_min, ctx.prior.mb_max),
            temperature: cfg.temperature.max(1e-6),
            sigma_mb: cfg.sigma_mb,
            score: vec![0.0; n_bins],
            mb_sum: vec![0.0; n_bins],
            mb_count: vec![0; n_bins],
            touched: Vec::new(),
            score_max: 0.0,
            z_shifted: 0.0,
            log_z: 0.0,
            mb_prior_mean: mb_mid,
        };

        for st_idx in 0..ctx.stations.len() {
            for (_, arrival) in state.arrivals[st_idx].iter() {
                if arrival.association.is_some() {
                    continue;
                }
                grid.vote(ctx, &geom.dists[st_idx], arrival, cfg)?;
            }
        }
        // softmax normalizer: untouched bins sit at score zero; the shifted
        // sum is accumulated in touch order and reused verbatim by `propose`
        let mut m = 0.0_f64;
        for &idx in &grid.touched {
            m = m.max(grid.score[idx as usize] as f64 / grid.temperature);
        }
        let mut z = 0.0_f64;
        for &idx in &grid.touched {
            z += (grid.score[idx as usize] as f64 / grid.temperature - m).exp();
        }
        let n_untouched = (n_bins - grid.touched.len()) as f64;
        z += n_untouched * (-m).exp();
        grid.score_max = m;
        grid.z_shifted = z;
        grid.log_z = m + z.ln();
        Ok(grid)
    }

    fn vote(
        &mut self,
        ctx: &ModelContext,
        station_dists: &[f64],
        arrival: &Arrival,
        cfg: &HoughConfig,
    ) -> Result<()> {
        // timing slop induced by bin size: spatial half-diagonal at the
        // phase velocity plus half a time bin
        let pv = *ctx.vm.phase(arrival.phase)?;
        let v = pv.surface_velocity;
        let half_diag_km = 0.5
            * (self.lon_bin.to_radians().powi(2) + self.lat_bin.to_radians().powi(2)).sqrt()
            * EARTH_RADIUS_KM;
        let sigma_h = half_diag_km / v + 0.5 * self.time_bin;
        let amp = arrival.theta.alpha.max(1e-12).ln();
        let ap = *ctx.am.phase(arrival.phase)?;
        for ilat in 0..self.n_lat {
            for ilon in 0..self.n_lon {
                let dist = station_dists[ilat * self.n_lon + ilon];
                for idep in 0..self.n_depth {
                    let depth = (idep as f64 + 0.5) * self.depth_bin;
                    let travel = pv.fixed_delay + dist / v + pv.depth_coefficient * depth;
                    let t_origin = arrival.theta.tau - travel - self.window_start;
                    if t_origin < -2.0 * sigma_h || t_origin > self.window_span + 2.0 * sigma_h {
                        continue;
                    }
                    // magnitude implied by the arrival amplitude
                    let mb_est =
                        (amp + ap.c_dist * dist.max(1.0).ln() + ap.c_0) / ap.c_mb.max(1e-6);
                    // vote into the two nearest time bins
                    let tb = t_origin / self.time_bin - 0.5;
                    for itime in [tb.floor(), tb.ceil()] {
                        if itime < 0.0 || itime >= self.n_time as f64 {
                            continue;
                        }
                        let itime = itime as usize;
                        let t_center = (itime as f64 + 0.5) * self.time_bin;
                        let dt = t_origin - t_center;
                        let score = cfg.hit_bonus - 0.5 * (dt / sigma_h).powi(2);
                        if score <= 0.0 {
                            continue;
                        }
                        let flat = ((itime * self.n_depth + idep) * self.n_lat + ilat)
                            * self.n_lon
                            + ilon;
                        if self.score[flat] == 0.0 {
                            self.touched.push(flat as u32);
                        }
                        self.score[flat] += score as f32;
                        self.mb_sum[flat] += mb_est as f32;
                        self.mb_count[flat] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn bin_of(&self, e: &Event) -> Option<(u32, u32, u32, u32)> {
        let t = e.time - self.window_start;
        if t < 0.0 || t > self.window_span || e.depth < 0.0 || e.depth > self.depth_max {
            return None;
        }
        let ilon = (((e.lon + 180.0) / self.lon_bin) as usize).min(self.n_lon - 1);
        let ilat = (((e.lat + 90.0) / self.lat_bin) as usize).min(self.n_lat - 1);
        let idep = ((e.depth / self.depth_bin) as usize).min(self.n_depth - 1);
        let itime = ((t / self.time_bin) as usize).min(self.n_time - 1);
        Some((ilon as u32, ilat as u32, idep as u32, itime as u32))
    }

    fn flat_index(&self, bin: (u32, u32, u32, u32)) -> usize {
        let (ilon, ilat, idep, itime) = bin;
        ((itime as usize * self.n_depth + idep as usize) * self.n_lat + ilat as usize)
            * self.n_lon
            + ilon as usize
    }

    /// (score / temperature, mb estimate) of a bin.
    fn bin_score_mb(&self, bin: (u32, u32, u32, u32)) -> (f64, f64) {
        let flat = self.flat_index(bin);
        let count = self.mb_count[flat];
        if count == 0 {
            return (0.0, self.mb_prior_mean);
        }
        let mb_est = (self.mb_sum[flat] as f64 / count as f64)
            .clamp(self.mb_bounds.0, self.mb_bounds.1);
        (self.score[flat] as f64 / self.temperature, mb_est)
    }

    /// Volume of a bin in the canonical event measure
    /// (surface km^2 x depth km x time s), with the final time bin clipped
    /// to the window.
    fn bin_log_volume(&self, bin: (u32, u32, u32, u32)) -> f64 {
        let (ilon, ilat, _idep, itime) = bin;
        let _ = ilon;
        let lat_lo = (-90.0 + ilat as f64 * self.lat_bin).to_radians();
        let lat_hi = (-90.0 + (ilat as f64 + 1.0) * self.lat_bin).min(90.0).to_radians();
        let area = EARTH_RADIUS_KM
            * EARTH_RADIUS_KM
            * self.lon_bin.to_radians()
            * (lat_hi.sin() - lat_lo.sin());
        let t_lo = itime as f64 * self.time_bin;
        let t_hi = ((itime as f64 + 1.0) * self.time_bin).min(self.window_span);
        area.max(1e-300).ln() + self.depth_bin.ln() + (t_hi - t_lo).max(1e-300).ln()
    }

    /// Log proposal density of an event in the canonical measure
    /// (surface km^2, depth km, time s, mb).
    pub fn log_density(&self, e: &Event) -> f64 {
        let bin = match self.bin_of(e) {
            Some(b) => b,
            None => return f64::NEG_INFINITY,
        };
        let (score, mb_est) = self.bin_score_mb(bin);
        let log_p_bin = score - self.log_z;
        let (mb_lo, mb_hi) = self.mb_bounds;
        if e.mb < mb_lo || e.mb > mb_hi {
            return f64::NEG_INFINITY;
        }
        let trunc = normal_cdf((mb_hi - mb_est) / self.sigma_mb)
            - normal_cdf((mb_lo - mb_est) / self.sigma_mb);
        log_p_bin - self.bin_log_volume(bin)
            + normal_log_pdf(e.mb, mb_est, self.sigma_mb * self.sigma_mb)
            - trunc.max(1e-300).ln()
    }

    /// Sample an event and return it with its exact log proposal density.
    pub fn propose(&self, rng: &mut ChaCha8Rng) -> (Event, f64) {
        // sample a bin from the softmax: walk the touched list with the
        // same shifted-exponential accumulation used for the normalizer
        let u: f64 = rng.random();
        let target = u * self.z_shifted;
        let mut acc = 0.0_f64;
        let mut picked: Option<usize> = None;
        for &idx in &self.touched {
            acc += (self.score[idx as usize] as f64 / self.temperature - self.score_max).exp();
            if acc >= target {
                picked = Some(idx as usize);
                break;
            }
        }
        let flat = match picked {
            Some(f) => f,
            None => {
                // untouched bin, uniform; rejection against the touched set
                loop {
                    let f = rng.random_range(0..self.score.len());
                    if self.score[f] == 0.0 {
                        break f;
                    }
                }
            }
        };
        let per_time = self.n_depth * self.n_lat * self.n_lon;
        let itime = (flat / per_time) as u32;
        let rem = flat % per_time;
        let idep = (rem / (self.n_lat * self.n_lon)) as u32;
        let rem = rem % (self.n_lat * self.n_lon);
        let ilat = (rem / self.n_lon) as u32;
        let ilon = (rem % self.n_lon) as u32;
        let bin = (ilon, ilat, idep, itime);
        let (ilon, ilat, idep, itime) = bin;
        // uniform-in-volume within the bin (area-uniform in latitude)
        let lon = -180.0 + (ilon as f64 + rng.random::<f64>()) * self.lon_bin;
        let s_lo = (-90.0 + ilat as f64 * self.lat_bin).to_radians().sin();
        let s_hi = ((-90.0 + (ilat as f64 + 1.0) * self.lat_bin).min(90.0))
            .to_radians()
            .sin();
        let lat = (s_lo + rng.random::<f64>() * (s_hi - s_lo))
            .clamp(-1.0, 1.0)
            .asin()
            .to_degrees();
        let depth = (idep as f64 + rng.random::<f64>()) * self.depth_bin;
        let t_lo = itime as f64 * self.time_bin;
        let t_hi = ((itime as f64 + 1.0) * self.time_bin).min(self.window_span);
        let time = self.window_start + t_lo + rng.random::<f64>() * (t_hi - t_lo);
        let (_, mb_est) = self.bin_score_mb(bin);
        let (mb_lo, mb_hi) = self.mb_bounds;
        let mb = loop {
            let m = mb_est + self.sigma_mb * rng.sample::<f64, _>(StandardNormal);
            if m >= mb_lo && m <= mb_hi {
                break m;
            }
        };
        let event = Event {
            lon: crate::worldmodel::wrap_lon(lon),
            lat,
            depth,
            time,
            mb,
        };
        let lq = self.log_density(&event);
        (event, lq)
    }
}

/// Spec-level entry point: build the grid and draw one proposal.
pub fn hough_propose(
    ctx: &ModelContext,
    state: &WorldState,
    cfg: &HoughConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Event, f64)> {
    let grid = HoughGrid::build(ctx, state, cfg)?;
    Ok(grid.propose(rng))
}
