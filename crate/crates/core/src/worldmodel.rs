//! Domain types for events and world state, and the event prior.
//!
//! Events follow a time-homogeneous Poisson process over a window of length
//! `T`; each event draws location from a KDE+uniform mixture on the sphere,
//! depth uniform, origin time uniform on the window, and magnitude from a
//! truncated exponential (Gutenberg-Richter form).

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geophys::{great_circle_km, EARTH_RADIUS_KM};
use crate::numeric::{ln_gamma, log_add_exp, poisson_log_pmf};
use crate::signalmodel::{Arrival, NoiseParams};
use crate::Result;

/// Stable identifier of an event within a world state.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct EventId(pub u64);

/// Stable identifier of an arrival within a world state.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct ArrivalId(pub u64);

/// A latent seismic source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Longitude, degrees in [-180, 180).
    pub lon: f64,
    /// Latitude, degrees in [-90, 90].
    pub lat: f64,
    /// Depth, kilometers, nonnegative.
    pub depth: f64,
    /// Origin time, seconds since epoch.
    pub time: f64,
    /// Body-wave magnitude.
    pub mb: f64,
}

impl Event {
    pub fn surface_distance_km(&self, other: &Event) -> f64 {
        great_circle_km(self.lon, self.lat, other.lon, other.lat)
    }
}

/// Wrap a longitude into [-180, 180).
pub fn wrap_lon(lon: f64) -> f64 {
    let mut x = (lon + 180.0) % 360.0;
    if x < 0.0 {
        x += 360.0;
    }
    x - 180.0
}

/// KDE + uniform mixture prior over surface locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationPrior {
    kde_points: Vec<(f64, f64)>,
    bandwidth_km: f64,
    uniform_weight: f64,
    /// Integral of the great-circle Gaussian kernel over the sphere,
    /// computed numerically at construction.
    kernel_norm: f64,
}

impl LocationPrior {
    /// Mixture prior; `uniform_weight` must be strictly inside (0, 1) and
    /// `kde_points` non-empty.
    pub fn new(kde_points: Vec<(f64, f64)>, bandwidth_km: f64, uniform_weight: f64) -> Result<Self> {
        if !(uniform_weight > 0.0 && uniform_weight < 1.0) {
            return Err(Error::config("uniform_weight must be strictly in (0,1)"));
        }
        if !(bandwidth_km > 0.0) {
            return Err(Error::config("kde bandwidth must be positive"));
        }
        if kde_points.is_empty() {
            return Err(Error::config(
                "location prior with KDE weight needs at least one point",
            ));
        }
        for &(lon, lat) in &kde_points {
            if !(-180.0..180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                return Err(Error::config(format!("KDE point ({lon}, {lat}) out of range")));
            }
        }
        let kernel_norm = kernel_normalizer(bandwidth_km);
        Ok(LocationPrior {
            kde_points,
            bandwidth_km,
            uniform_weight,
            kernel_norm,
        })
    }

    /// Degenerate all-uniform prior (weight exactly 1, no KDE component).
    pub fn uniform() -> Self {
        LocationPrior {
            kde_points: Vec::new(),
            bandwidth_km: 1.0,
            uniform_weight: 1.0,
            kernel_norm: 1.0,
        }
    }

    pub fn uniform_weight(&self) -> f64 {
        self.uniform_weight
    }

    pub fn kde_points(&self) -> &[(f64, f64)] {
        &self.kde_points
    }

    /// Log density per km^2 at (lon, lat).
    pub fn log_density(&self, lon: f64, lat: f64) -> f64 {
        let sphere_area = 4.0 * std::f64::consts::PI * EARTH_RADIUS_KM * EARTH_RADIUS_KM;
        let log_uniform = self.uniform_weight.ln() - sphere_area.ln();
        if self.kde_points.is_empty() {
            return log_uniform;
        }
        let h2 = self.bandwidth_km * self.bandwidth_km;
        let mut log_kde = f64::NEG_INFINITY;
        for &(plon, plat) in &self.kde_points {
            let d = great_circle_km(lon, lat, plon, plat);
            log_kde = log_add_exp(log_kde, -0.5 * d * d / h2);
        }
        log_kde += (1.0 - self.uniform_weight).ln()
            - (self.kde_points.len() as f64).ln()
            - self.kernel_norm.ln();
        log_add_exp(log_uniform, log_kde)
    }

    /// Sample a surface location.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        if self.kde_points.is_empty() || rng.random::<f64>() < self.uniform_weight {
            sample_uniform_sphere(rng)
        } else {
            let idx = rng.random_range(0..self.kde_points.len());
            let (plon, plat) = self.kde_points[idx];
            // distance from a 2-D Gaussian radius, thinned by the sphere
            // area correction sin(d/R)/(d/R)
            let max_d = std::f64::consts::PI * EARTH_RADIUS_KM;
            let d = loop {
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                let y: f64 = rng.sample(rand_distr::StandardNormal);
                let d = self.bandwidth_km * (x * x + y * y).sqrt();
                if d >= max_d {
                    continue;
                }
                let ratio = if d == 0.0 {
                    1.0
                } else {
                    (d / EARTH_RADIUS_KM).sin() / (d / EARTH_RADIUS_KM)
                };
                if rng.random::<f64>() < ratio {
                    break d;
                }
            };
            let bearing = rng.random_range(0.0..std::f64::consts::TAU);
            destination(plon, plat, bearing, d)
        }
    }
}

/// Integral over the sphere of exp(-d^2 / 2h^2) with d the great-circle
/// distance from a fixed point: 2 pi R^2 int_0^pi exp(-(R t)^2/2h^2) sin t dt.
fn kernel_normalizer(bandwidth_km: f64) -> f64 {
    let h2 = bandwidth_km * bandwidth_km;
    let r = EARTH_RADIUS_KM;
    let n = 20_000;
    let dt = std::f64::consts::PI / n as f64;
    let f = |t: f64| (-0.5 * (r * t) * (r * t) / h2).exp() * t.sin();
    // Simpson's rule
    let mut acc = f(0.0) + f(std::f64::consts::PI);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * dt);
    }
    2.0 * std::f64::consts::PI * r * r * acc * dt / 3.0
}

/// Uniform-in-area point on the sphere.
pub fn sample_uniform_sphere(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let lon = rng.random_range(-180.0..180.0);
    let lat = rng.random_range(-1.0..1.0_f64).asin().to_degrees();
    (lon, lat)
}

/// Great-circle destination from (lon, lat) along `bearing` (radians,
/// clockwise from north) for `dist_km`.
pub fn destination(lon: f64, lat: f64, bearing: f64, dist_km: f64) -> (f64, f64) {
    let phi1 = lat.to_radians();
    let lam1 = lon.to_radians();
    let delta = dist_km / EARTH_RADIUS_KM;
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing.cos()).asin();
    let lam2 = lam1
        + (bearing.sin() * delta.sin() * phi1.cos())
            .atan2(delta.cos() - phi1.sin() * phi2.sin());
    (wrap_lon(lam2.to_degrees()), phi2.to_degrees().clamp(-90.0, 90.0))
}

/// Full event prior: Poisson count over the window plus iid per-event
/// component distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventPrior {
    /// Event rate, events per second.
    pub rate_per_s: f64,
    /// Window length T in seconds; origin times live on [0, T].
    pub window_s: f64,
    pub location: LocationPrior,
    /// Depth uniform on [0, depth_max].
    pub depth_max: f64,
    pub mb_min: f64,
    pub mb_max: f64,
    /// Gutenberg-Richter b parameter for the truncated-exponential magnitude
    /// prior.
    pub gr_b: f64,
}

impl EventPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_per_s > 0.0) {
            return Err(Error::config("event rate must be positive"));
        }
        if !(self.window_s > 0.0) {
            return Err(Error::config("window length must be positive"));
        }
        if !(self.depth_max > 0.0) {
            return Err(Error::config("depth_max must be positive"));
        }
        if !(self.mb_max > self.mb_min) {
            return Err(Error::config("mb range must be non-degenerate"));
        }
        if !(self.gr_b > 0.0) {
            return Err(Error::config("Gutenberg-Richter b must be positive"));
        }
        Ok(())
    }

    pub fn expected_count(&self) -> f64 {
        self.rate_per_s * self.window_s
    }

    fn mb_rate(&self) -> f64 {
        self.gr_b * std::f64::consts::LN_10
    }

    pub fn log_density_mb(&self, mb: f64) -> f64 {
        if mb < self.mb_min || mb > self.mb_max {
            return f64::NEG_INFINITY;
        }
        let beta = self.mb_rate();
        let z = 1.0 - (-beta * (self.mb_max - self.mb_min)).exp();
        beta.ln() - beta * (mb - self.mb_min) - z.ln()
    }

    pub fn log_density_depth(&self, depth: f64) -> f64 {
        if depth < 0.0 || depth > self.depth_max {
            f64::NEG_INFINITY
        } else {
            -self.depth_max.ln()
        }
    }

    /// Log density of a single event in the canonical event measure
    /// (surface km^2 x depth km x time s x mb). Includes the uniform 1/T
    /// origin-time factor; -inf outside the window or domain bounds.
    pub fn log_density_event(&self, e: &Event) -> f64 {
        if e.time < 0.0 || e.time > self.window_s {
            return f64::NEG_INFINITY;
        }
        if !(-180.0..180.0).contains(&e.lon) || !(-90.0..=90.0).contains(&e.lat) {
            return f64::NEG_INFINITY;
        }
        self.location.log_density(e.lon, e.lat)
            + self.log_density_depth(e.depth)
            + self.log_density_mb(e.mb)
            - self.window_s.ln()
    }

    pub fn sample_event(&self, rng: &mut ChaCha8Rng) -> Event {
        let (lon, lat) = self.location.sample(rng);
        let depth = rng.random_range(0.0..self.depth_max);
        let time = rng.random_range(0.0..self.window_s);
        let beta = self.mb_rate();
        // inverse-CDF of the truncated exponential
        let z = 1.0 - (-beta * (self.mb_max - self.mb_min)).exp();
        let u: f64 = rng.random();
        let mb = self.mb_min - (1.0 - u * z).ln() / beta;
        Event {
            lon,
            lat,
            depth,
            time,
            mb,
        }
    }
}

/// Log prior of an event list:
/// `log Poisson(n; lambda T) + log n! + sum_i log p(e_i)`.
///
/// Per-event terms are accumulated in sorted order so the result is
/// bit-identical under permutations of the list.
pub fn log_prior_events(events: &[Event], prior: &EventPrior) -> Result<f64> {
    prior.validate()?;
    let n = events.len();
    let mut terms: Vec<f64> = events.iter().map(|e| prior.log_density_event(e)).collect();
    if terms.iter().any(|t| *t == f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    terms.sort_by(|a, b| a.total_cmp(b));
    let mut acc = poisson_log_pmf(n as u64, prior.expected_count());
    acc += ln_gamma(n as f64 + 1.0);
    for t in terms {
        acc += t;
    }
    Ok(acc)
}

/// Sample a world: Poisson event count, then iid events.
pub fn sample_world(prior: &EventPrior, rng: &mut ChaCha8Rng) -> Result<Vec<Event>> {
    prior.validate()?;
    let mean = prior.expected_count();
    let n = if mean < 1e-12 {
        0
    } else {
        Poisson::new(mean)
            .map_err(|e| Error::config(format!("invalid Poisson mean: {e}")))?
            .sample(rng) as usize
    };
    Ok((0..n).map(|_| prior.sample_event(rng)).collect())
}

/// Log density per km^2 of the location prior at (lon, lat).
pub fn location_log_density(lon: f64, lat: f64, prior: &LocationPrior) -> f64 {
    prior.log_density(lon, lat)
}

/// The mutable MCMC state: events, per-station arrivals, per-station noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldState {
    pub events: BTreeMap<EventId, Event>,
    /// Arrivals per station index.
    pub arrivals: Vec<BTreeMap<ArrivalId, Arrival>>,
    /// Noise parameters per station index.
    pub noise: Vec<NoiseParams>,
    next_event_id: u64,
    next_arrival_id: u64,
}

impl WorldState {
    pub fn new(n_stations: usize, noise: Vec<NoiseParams>) -> Self {
        assert_eq!(noise.len(), n_stations);
        WorldState {
            events: BTreeMap::new(),
            arrivals: (0..n_stations).map(|_| BTreeMap::new()).collect(),
            noise,
            next_event_id: 0,
            next_arrival_id: 0,
        }
    }

    pub fn n_stations(&self) -> usize {
        self.arrivals.len()
    }

    pub fn insert_event(&mut self, e: Event) -> EventId {
        let id = EventId(self.next_event_id);
        self.next_event_id += 1;
        self.events.insert(id, e);
        id
    }

    pub fn insert_arrival(&mut self, station: usize, a: Arrival) -> ArrivalId {
        assert_eq!(a.station, station);
        let id = ArrivalId(self.next_arrival_id);
        self.next_arrival_id += 1;
        self.arrivals[station].insert(id, a);
        id
    }

    pub fn remove_arrival(&mut self, station: usize, id: ArrivalId) -> Option<Arrival> {
        self.arrivals[station].remove(&id)
    }

    pub fn n_unassociated(&self, station: usize) -> usize {
        self.arrivals[station]
            .values()
            .filter(|a| a.association.is_none())
            .count()
    }

    /// Arrivals associated with `event`, as (station, arrival id) pairs.
    pub fn arrivals_of_event(&self, event: EventId) -> Vec<(usize, ArrivalId)> {
        let mut out = Vec::new();
        for (st, arrs) in self.arrivals.iter().enumerate() {
            for (id, a) in arrs {
                if a.association == Some(event) {
                    out.push((st, *id));
                }
            }
        }
        out
    }

    /// Check structural invariants: associations reference live events, and
    /// each (event, station, phase) owns at most one arrival.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (st, arrs) in self.arrivals.iter().enumerate() {
            for a in arrs.values() {
                if a.station != st {
                    return Err(Error::config(format!(
                        "arrival stored under station {st} claims station {}",
                        a.station
                    )));
                }
                if let Some(ev) = a.association {
                    if !self.events.contains_key(&ev) {
                        return Err(Error::config(format!(
                            "arrival references missing event {ev:?}"
                        )));
                    }
                    if !seen.insert((ev, st, a.phase)) {
                        return Err(Error::config(format!(
                            "duplicate arrival for event {ev:?} station {st} phase {:?}",
                            a.phase
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
