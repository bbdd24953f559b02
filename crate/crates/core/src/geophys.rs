//! Deterministic physics mean functions.
//!
//! Travel times and source amplitudes use configurable affine stand-ins for
//! full geophysical models; the GP residual models absorb mean-function
//! misspecification, so these only need to capture first-order structure
//! (distance delay, magnitude scaling, geometric attenuation).

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::worldmodel::Event;
use crate::Result;

/// Earth radius in kilometers (spherical model).
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Index into the configured phase set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseId(pub usize);

/// The configured set of seismic phases, e.g. {P, S}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSet {
    names: Vec<String>,
}

impl PhaseSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("phase set must be non-empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::config(format!("duplicate phase name {n:?}")));
            }
        }
        Ok(PhaseSet { names })
    }

    pub fn default_ps() -> Self {
        PhaseSet {
            names: vec!["P".into(), "S".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = PhaseId> {
        (0..self.names.len()).map(PhaseId)
    }

    pub fn name(&self, id: PhaseId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Result<PhaseId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(PhaseId)
            .ok_or_else(|| Error::config(format!("unknown phase {name:?}")))
    }
}

/// A recording station (vertical channel only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Per-phase travel-time parameters: tau = delay + dist/velocity + coeff*depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseVelocity {
    /// Horizontal propagation speed, km/s.
    pub surface_velocity: f64,
    /// Additional seconds per km of source depth.
    pub depth_coefficient: f64,
    /// Fixed delay, seconds.
    pub fixed_delay: f64,
}

/// Travel-time model over the configured phase set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    phases: Vec<PhaseVelocity>,
}

impl VelocityModel {
    pub fn new(phase_set: &PhaseSet, phases: Vec<PhaseVelocity>) -> Result<Self> {
        if phases.len() != phase_set.len() {
            return Err(Error::config(format!(
                "velocity model has {} phases, phase set has {}",
                phases.len(),
                phase_set.len()
            )));
        }
        for (i, p) in phases.iter().enumerate() {
            if p.surface_velocity <= 0.0 {
                return Err(Error::config(format!(
                    "phase {} surface velocity must be positive",
                    phase_set.name(PhaseId(i))
                )));
            }
            if p.fixed_delay < 0.0 || p.depth_coefficient < 0.0 {
                return Err(Error::config("negative delay or depth coefficient"));
            }
        }
        // P must never arrive after S; with the affine form this reduces to
        // a parameter ordering check.
        if let (Ok(p), Ok(s)) = (phase_set.lookup("P"), phase_set.lookup("S")) {
            let (pp, ps) = (&phases[p.0], &phases[s.0]);
            if pp.surface_velocity < ps.surface_velocity
                || pp.fixed_delay > ps.fixed_delay
                || pp.depth_coefficient > ps.depth_coefficient
            {
                return Err(Error::config(
                    "P travel time must not exceed S travel time at any distance/depth",
                ));
            }
        }
        Ok(VelocityModel { phases })
    }

    /// Defaults: P at 7.9 km/s, S at 4.5 km/s, no delay or depth terms.
    pub fn default_ps(phase_set: &PhaseSet) -> Result<Self> {
        let mut phases = Vec::new();
        for id in phase_set.ids() {
            let v = match phase_set.name(id) {
                "P" => 7.9,
                "S" => 4.5,
                _ => 6.0,
            };
            phases.push(PhaseVelocity {
                surface_velocity: v,
                depth_coefficient: 0.0,
                fixed_delay: 0.0,
            });
        }
        VelocityModel::new(phase_set, phases)
    }

    pub fn phase(&self, id: PhaseId) -> Result<&PhaseVelocity> {
        self.phases
            .get(id.0)
            .ok_or_else(|| Error::config(format!("phase index {} out of range", id.0)))
    }

    pub fn min_velocity(&self) -> f64 {
        self.phases
            .iter()
            .map(|p| p.surface_velocity)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-phase source amplitude coefficients:
/// log_amp = c_mb * mb - c_dist * ln(dist_km) - c_0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseAmplitude {
    pub c_mb: f64,
    pub c_dist: f64,
    pub c_0: f64,
}

/// Source log-amplitude model over the configured phase set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeModel {
    phases: Vec<PhaseAmplitude>,
}

impl AmplitudeModel {
    pub fn new(phase_set: &PhaseSet, phases: Vec<PhaseAmplitude>) -> Result<Self> {
        if phases.len() != phase_set.len() {
            return Err(Error::config(format!(
                "amplitude model has {} phases, phase set has {}",
                phases.len(),
                phase_set.len()
            )));
        }
        Ok(AmplitudeModel { phases })
    }

    pub fn default_for(phase_set: &PhaseSet) -> Self {
        AmplitudeModel {
            phases: phase_set
                .ids()
                .map(|_| PhaseAmplitude {
                    c_mb: 1.0,
                    c_dist: 1.5,
                    c_0: 4.0,
                })
                .collect(),
        }
    }

    pub fn phase(&self, id: PhaseId) -> Result<&PhaseAmplitude> {
        self.phases
            .get(id.0)
            .ok_or_else(|| Error::config(format!("phase index {} out of range", id.0)))
    }
}

/// Haversine great-circle distance on a sphere of radius 6371 km.
pub fn great_circle_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (lam1, phi1) = (lon1.to_radians(), lat1.to_radians());
    let (lam2, phi2) = (lon2.to_radians(), lat2.to_radians());
    let dphi = phi2 - phi1;
    let dlam = lam2 - lam1;
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Predicted arrival time (seconds since epoch) of `phase` from `event` at
/// `station`: origin time plus the affine travel-time form.
pub fn predict_travel_time(
    event: &Event,
    station: &Station,
    phase: PhaseId,
    vm: &VelocityModel,
) -> Result<f64> {
    let p = vm.phase(phase)?;
    let dist = great_circle_km(event.lon, event.lat, station.lon, station.lat);
    Ok(event.time
        + p.fixed_delay
        + dist / p.surface_velocity
        + p.depth_coefficient * event.depth)
}

/// Predicted source log-amplitude of `phase` from `event` at `station`.
pub fn predict_log_amplitude(
    event: &Event,
    station: &Station,
    phase: PhaseId,
    am: &AmplitudeModel,
) -> Result<f64> {
    let p = am.phase(phase)?;
    let dist = great_circle_km(event.lon, event.lat, station.lon, station.lat);
    if dist == 0.0 {
        return Err(Error::domain("log-amplitude undefined at zero distance"));
    }
    Ok(p.c_mb * event.mb - p.c_dist * dist.ln() - p.c_0)
}
