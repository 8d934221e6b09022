//! Dataset directory format.
//!
//! * `cameras.jsonl`: `{"id": u32, "x_m": f64, "y_m": f64}` per line
//! * `states.jsonl`: `{"state_id": u64, "camera_id": u32, "timestamp_s": f64,
//!   "vehicle_id": u64 | null, "feature": [f64; D]}` per line
//! * `meta.json`: [`DatasetMeta`]

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Camera, CameraId, Dataset, StateId, VehicleId, VstState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: CameraId,
    x_m: f64,
    y_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    state_id: StateId,
    camera_id: CameraId,
    timestamp_s: f64,
    vehicle_id: Option<VehicleId>,
    feature: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<StateId>,
    pub test: Vec<StateId>,
    #[serde(default)]
    pub query: Vec<StateId>,
}

/// Road segment between two cameras, written by the generator for reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadRecord {
    pub a: CameraId,
    pub b: CameraId,
    pub length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    /// Hex SHA-256 of the compact JSON encoding of `config`. Struct fields
    /// serialize in declaration order, so the encoding is canonical.
    pub fn hash_config<T: Serialize>(config: &T) -> Result<String> {
        let bytes = serde_json::to_vec(config)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_dim: usize,
    pub splits: SplitLists,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roads: Vec<RoadRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Schema {
            file: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cameras: Vec<CameraRecord> = read_jsonl(&dir.join("cameras.jsonl"))?;
    let states: Vec<StateRecord> = read_jsonl(&dir.join("states.jsonl"))?;
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Schema {
        file: "meta.json".into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Dataset::new(
        cameras
            .into_iter()
            .map(|c| Camera {
                id: c.id,
                location: [c.x_m, c.y_m],
            })
            .collect(),
        states
            .into_iter()
            .map(|s| VstState {
                id: s.state_id,
                camera: s.camera_id,
                timestamp: s.timestamp_s,
                appearance: s.feature,
                vehicle: s.vehicle_id,
            })
            .collect(),
        meta,
    )
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = Vec::new();
    for c in ds.cameras() {
        serde_json::to_writer(
            &mut cams,
            &CameraRecord {
                id: c.id,
                x_m: c.location[0],
                y_m: c.location[1],
            },
        )?;
        cams.push(b'\n');
    }
    write_file(&dir.join("cameras.jsonl"), &cams)?;

    let mut states = Vec::new();
    for s in ds.states() {
        serde_json::to_writer(
            &mut states,
            &StateRecord {
                state_id: s.id,
                camera_id: s.camera,
                timestamp_s: s.timestamp,
                vehicle_id: s.vehicle,
                feature: s.appearance.clone(),
            },
        )?;
        states.push(b'\n');
    }
    write_file(&dir.join("states.jsonl"), &states)?;

    let mut meta = serde_json::to_vec_pretty(ds.meta())?;
    meta.push(b'\n');
    write_file(&dir.join("meta.json"), &meta)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
