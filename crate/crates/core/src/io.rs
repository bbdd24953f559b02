//! File formats: station lists, bulletins, waveforms, trained models, and
//! plot data. All writes go to a temporary name and are atomically renamed.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geophys::Station;
use crate::inference::ScoredEvent;
use crate::signalmodel::StationSignal;
use crate::training::{TrainedModel, MODEL_VERSION};
use crate::worldmodel::Event;
use crate::Result;

/// Write `bytes` to `path` via a temporary sibling and atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Station list: CSV `station_id, lon_deg, lat_deg`
// ---------------------------------------------------------------------------

pub fn read_stations(path: &Path) -> Result<Vec<Station>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 && line.starts_with("station_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(path, i + 1, "expected station_id, lon_deg, lat_deg"));
        }
        let lon: f64 = fields[1]
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("lon_deg: {e}")))?;
        let lat: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("lat_deg: {e}")))?;
        if !(-180.0..180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(parse_err(path, i + 1, "station coordinates out of range"));
        }
        out.push(Station {
            id: fields[0].to_string(),
            lon,
            lat,
        });
    }
    Ok(out)
}

pub fn write_stations(path: &Path, stations: &[Station]) -> Result<()> {
    let mut text = String::from("station_id,lon_deg,lat_deg\n");
    for s in stations {
        text.push_str(&format!("{},{:.6},{:.6}\n", s.id, s.lon, s.lat));
    }
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Bulletins
// ---------------------------------------------------------------------------

/// Training/reference bulletin CSV:
/// `lon_deg, lat_deg, depth_km, time_epoch_s, mb`.
/// Inferred bulletins prepend `event_id` and append `confidence`; the reader
/// detects the schema from the header.
pub fn read_bulletin(path: &Path) -> Result<Vec<(Event, Option<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut with_id = false;
    let mut with_conf = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("lon_deg") || line.starts_with("event_id") {
            with_id = line.starts_with("event_id");
            with_conf = line.ends_with("confidence");
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let base = usize::from(with_id);
        let expected = 5 + base + usize::from(with_conf);
        if fields.len() != expected {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            fields[base + k]
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("{name}: {e}")))
        };
        let event = Event {
            lon: num(0, "lon_deg")?,
            lat: num(1, "lat_deg")?,
            depth: num(2, "depth_km")?,
            time: num(3, "time_epoch_s")?,
            mb: num(4, "mb")?,
        };
        let conf = if with_conf { Some(num(5, "confidence")?) } else { None };
        out.push((event, conf));
    }
    Ok(out)
}

pub fn write_truth_bulletin(path: &Path, events: &[Event]) -> Result<()> {
    let mut text = String::from("lon_deg,lat_deg,depth_km,time_epoch_s,mb\n");
    for e in events {
        text.push_str(&format!(
            "{:.6},{:.6},{:.3},{:.3},{:.3}\n",
            e.lon, e.lat, e.depth, e.time, e.mb
        ));
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_inferred_bulletin(path: &Path, events: &[ScoredEvent]) -> Result<()> {
    let mut text = String::from("event_id,lon_deg,lat_deg,depth_km,time_epoch_s,mb,confidence\n");
    for (i, s) in events.iter().enumerate() {
        let e = &s.event;
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.4}\n",
            i, e.lon, e.lat, e.depth, e.time, e.mb, s.confidence
        ));
    }
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Waveforms: little-endian f32 binary + structured-text sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveformMeta {
    pub station_id: String,
    pub start_time_epoch_s: f64,
    pub rate_hz: f64,
    pub band_label: String,
}

/// Data file `<stem>.w32` plus sidecar `<stem>.meta.toml`.
pub fn write_waveform(
    dir: &Path,
    stem: &str,
    signal: &StationSignal,
    station_id: &str,
    band_label: &str,
) -> Result<PathBuf> {
    let meta = WaveformMeta {
        station_id: station_id.to_string(),
        start_time_epoch_s: signal.start_time,
        rate_hz: signal.rate_hz,
        band_label: band_label.to_string(),
    };
    let mut bytes = Vec::with_capacity(signal.len() * 4);
    for s in &signal.samples {
        bytes.extend_from_slice(&(*s as f32).to_le_bytes());
    }
    let data_path = dir.join(format!("{stem}.w32"));
    write_atomic(&data_path, &bytes)?;
    let meta_text = toml::to_string(&meta)
        .map_err(|e| Error::config(format!("waveform sidecar serialization: {e}")))?;
    write_atomic(&dir.join(format!("{stem}.meta.toml")), meta_text.as_bytes())?;
    Ok(data_path)
}

/// Read a waveform from either the binary (`.w32` + sidecar) or the CSV
/// alternative (`time_epoch_s, amplitude` columns).
pub fn read_waveform(path: &Path, station_index: usize) -> Result<(StationSignal, WaveformMeta)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("w32") => {
            let meta_path = path.with_extension("").with_extension("meta.toml");
            let meta_text = std::fs::read_to_string(&meta_path)?;
            let meta: WaveformMeta = toml::from_str(&meta_text)
                .map_err(|e| parse_err(&meta_path, 0, e.message().to_string()))?;
            let mut bytes = Vec::new();
            std::fs::File::open(path)?.read_to_end(&mut bytes)?;
            if bytes.len() % 4 != 0 {
                return Err(parse_err(path, 0, "binary waveform length not a multiple of 4"));
            }
            let samples: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((
                StationSignal {
                    station: station_index,
                    start_time: meta.start_time_epoch_s,
                    rate_hz: meta.rate_hz,
                    samples,
                },
                meta,
            ))
        }
        Some("csv") => {
            let text = std::fs::read_to_string(path)?;
            let mut times = Vec::new();
            let mut samples = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with("time_epoch_s") {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields.len() != 2 {
                    return Err(parse_err(path, i + 1, "expected time_epoch_s, amplitude"));
                }
                times.push(
                    fields[0]
                        .parse::<f64>()
                        .map_err(|e| parse_err(path, i + 1, format!("time: {e}")))?,
                );
                samples.push(
                    fields[1]
                        .parse::<f64>()
                        .map_err(|e| parse_err(path, i + 1, format!("amplitude: {e}")))?,
                );
            }
            if times.len() < 2 {
                return Err(parse_err(path, 0, "CSV waveform needs at least two samples"));
            }
            let rate = 1.0 / (times[1] - times[0]);
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("unknown")
                .to_string();
            Ok((
                StationSignal {
                    station: station_index,
                    start_time: times[0],
                    rate_hz: rate,
                    samples,
                },
                WaveformMeta {
                    station_id: stem,
                    start_time_epoch_s: times[0],
                    rate_hz: rate,
                    band_label: String::new(),
                },
            ))
        }
        _ => Err(parse_err(path, 0, "unknown waveform extension (want .w32 or .csv)")),
    }
}

// ---------------------------------------------------------------------------
// Trained-model file: versioned header + bincode body
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 8] = b"SEISMDL\0";

pub fn write_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let body = bincode::serialize(model)
        .map_err(|e| Error::config(format!("model serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(body.len() + 12);
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&body);
    write_atomic(path, &bytes)
}

pub fn read_model(path: &Path) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        return Err(parse_err(path, 0, "not a trained-model file"));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != MODEL_VERSION {
        return Err(Error::ModelVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut model: TrainedModel = bincode::deserialize(&bytes[12..])
        .map_err(|e| parse_err(path, 0, format!("model body: {e}")))?;
    model.refresh()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Run manifest: seed and config hash embedded in every output directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: u64,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = toml::to_string(manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())
}
