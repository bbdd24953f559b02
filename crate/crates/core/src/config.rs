//! Run configuration: one structured document covering every module.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geophys::{AmplitudeModel, PhaseAmplitude, PhaseSet, PhaseVelocity, VelocityModel};
use crate::gp::GpFitConfig;
use crate::inference::ChainConfig;
use crate::signalmodel::SignalConfig;
use crate::training::TrainingConfig;
use crate::Result;

/// File paths consumed or produced by the CLI commands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub stations: String,
    pub training_bulletin: String,
    pub waveform_dir: String,
    pub model_file: String,
    pub output_dir: String,
    /// Reference bulletin for evaluation.
    pub reference_bulletin: String,
    /// Inferred bulletin for evaluation.
    pub inferred_bulletin: String,
    /// Optional sample-trace dump (JSON lines); empty disables it.
    pub trace_file: String,
}

/// Signal acquisition parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSection {
    pub rate_hz: f64,
    pub band_label: String,
    /// Modulation window length, seconds.
    pub modulation_window_s: f64,
    /// Wavelet decomposition depth.
    pub wavelet_levels: usize,
    /// AR noise order.
    pub ar_order: usize,
}

impl Default for SignalSection {
    fn default() -> Self {
        SignalSection {
            rate_hz: 10.0,
            band_label: "0.8-4.5Hz".into(),
            modulation_window_s: 20.0,
            wavelet_levels: 5,
            ar_order: 1,
        }
    }
}

/// Event prior parameters; the event rate is estimated from the training
/// bulletin unless overridden.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSection {
    /// Events per second; if zero, estimated as n_train / T_train.
    pub rate_per_s: f64,
    pub depth_max_km: f64,
    pub mb_min: f64,
    pub mb_max: f64,
    pub gr_b: f64,
    pub kde_bandwidth_km: f64,
    pub uniform_weight: f64,
    /// Explicit KDE points (lon, lat); when empty, training estimates them
    /// from the bulletin and synthesis uses a uniform location prior.
    pub kde_points: Vec<[f64; 2]>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            rate_per_s: 0.0,
            depth_max_km: 700.0,
            mb_min: 2.0,
            mb_max: 8.0,
            gr_b: 1.0,
            kde_bandwidth_km: 50.0,
            uniform_weight: 0.1,
            kde_points: Vec::new(),
        }
    }
}

/// Per-phase physics parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseSection {
    pub names: Vec<String>,
    pub surface_velocity_km_s: Vec<f64>,
    pub depth_coefficient_s_km: Vec<f64>,
    pub fixed_delay_s: Vec<f64>,
    pub amp_c_mb: Vec<f64>,
    pub amp_c_dist: Vec<f64>,
    pub amp_c_0: Vec<f64>,
}

impl Default for PhaseSection {
    fn default() -> Self {
        PhaseSection {
            names: vec!["P".into(), "S".into()],
            surface_velocity_km_s: vec![7.9, 4.5],
            depth_coefficient_s_km: vec![0.0, 0.0],
            fixed_delay_s: vec![0.0, 0.0],
            amp_c_mb: vec![1.0, 1.0],
            amp_c_dist: vec![1.5, 1.5],
            amp_c_0: vec![4.0, 4.0],
        }
    }
}

/// Synthesis scenario parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Scenario window length, seconds.
    pub window_s: f64,
    /// Station noise levels (standard deviation) cycled over stations.
    pub noise_sd: f64,
    pub noise_mu: f64,
    pub noise_phi: Vec<f64>,
    /// Wavelet-coefficient GP used when generating without a trained model.
    pub gen_sigma_f2: f64,
    pub gen_lengthscale_km: f64,
    pub gen_sigma_n2: f64,
    /// Envelope-shape jitter around physics means (log-space sd).
    pub gen_shape_sd: f64,
    /// Arrival-time jitter around predicted travel times, seconds.
    pub gen_tau_sd: f64,
    /// Fixed event list; when non-empty it overrides prior sampling.
    pub events: Vec<[f64; 5]>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            window_s: 3600.0,
            noise_sd: 0.05,
            noise_mu: 0.0,
            noise_phi: vec![0.5],
            gen_sigma_f2: 0.8,
            gen_lengthscale_km: 50.0,
            gen_sigma_n2: 0.2,
            gen_shape_sd: 0.2,
            gen_tau_sd: 0.5,
            events: Vec::new(),
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub signal: SignalSection,
    pub prior: PriorSection,
    pub phases: PhaseSection,
    pub synth: SynthSection,
    pub model: SignalConfig,
    pub gp: GpFitConfig,
    pub inference: ChainConfig,
    pub training: TrainingConfig,
    pub seed: u64,
    pub jobs: usize,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count())
                .unwrap_or(0),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn phase_set(&self) -> Result<PhaseSet> {
        PhaseSet::new(self.phases.names.clone())
    }

    pub fn velocity_model(&self) -> Result<VelocityModel> {
        let ps = self.phase_set()?;
        let n = ps.len();
        let sec = &self.phases;
        if sec.surface_velocity_km_s.len() != n
            || sec.depth_coefficient_s_km.len() != n
            || sec.fixed_delay_s.len() != n
        {
            return Err(Error::config("phase velocity arrays must match phase names"));
        }
        VelocityModel::new(
            &ps,
            (0..n)
                .map(|i| PhaseVelocity {
                    surface_velocity: sec.surface_velocity_km_s[i],
                    depth_coefficient: sec.depth_coefficient_s_km[i],
                    fixed_delay: sec.fixed_delay_s[i],
                })
                .collect(),
        )
    }

    pub fn amplitude_model(&self) -> Result<AmplitudeModel> {
        let ps = self.phase_set()?;
        let n = ps.len();
        let sec = &self.phases;
        if sec.amp_c_mb.len() != n || sec.amp_c_dist.len() != n || sec.amp_c_0.len() != n {
            return Err(Error::config("phase amplitude arrays must match phase names"));
        }
        AmplitudeModel::new(
            &ps,
            (0..n)
                .map(|i| PhaseAmplitude {
                    c_mb: sec.amp_c_mb[i],
                    c_dist: sec.amp_c_dist[i],
                    c_0: sec.amp_c_0[i],
                })
                .collect(),
        )
    }

    /// Stable hash of the serialized configuration, embedded in outputs.
    pub fn config_hash(&self) -> u64 {
        let text = toml::to_string(self).unwrap_or_default();
        crate::seedtree::hash_bytes(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text, "mem").unwrap();
        assert_eq!(back.signal.rate_hz, 10.0);
        assert_eq!(back.phases.names, vec!["P", "S"]);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn parse_error_carries_location() {
        let err = RunConfig::from_toml_str("signal = \"broken", "bad.toml").unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, "bad.toml"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn velocity_and_amplitude_models_build() {
        let cfg = RunConfig::default();
        let ps = cfg.phase_set().unwrap();
        assert_eq!(ps.len(), 2);
        cfg.velocity_model().unwrap();
        cfg.amplitude_model().unwrap();
    }
}
