//! Files written into the output directory. Every file carries the config
//! hash and seed of the run that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::Evaluation;
use crate::error::{Error, Result};
use crate::mrf::PathProposal;
use crate::network::{CameraId, Dataset, StateId, StateIx};
use crate::numeric::{load_checkpoint, save_checkpoint, ParamStore};
use crate::potential::TrainLog;

pub const POTENTIAL_CKPT: &str = "potential.ckpt";
pub const LSTM_CKPT: &str = "lstm.ckpt";
pub const JOINT_CKPT: &str = "joint.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const CMC_CSV: &str = "cmc.csv";
pub const PROPOSALS_JSONL: &str = "proposals.jsonl";
pub const SCORES_JSONL: &str = "scores.jsonl";
pub const BENCH_JSON: &str = "bench.json";
pub const GRAD_CHECK_JSON: &str = "grad_check.json";
pub const BIAS_JSON: &str = "bias.json";

/// Identity of the run behind an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// JSON written next to a checkpoint as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Which training stage wrote the checkpoint.
    pub stage: String,
    /// Parameter names in file order.
    pub params: Vec<String>,
    pub logs: BTreeMap<String, TrainLog>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_with_sidecar(
    path: &Path,
    store: &ParamStore,
    stamp: &Stamp,
    stage: &str,
    logs: BTreeMap<String, TrainLog>,
) -> Result<()> {
    create_parent(path)?;
    save_checkpoint(path, store, stamp.seed)?;
    let sidecar = CheckpointSidecar {
        stamp: stamp.clone(),
        stage: stage.to_owned(),
        params: store.ids().map(|id| store.name(id).to_owned()).collect(),
        logs,
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Loads a checkpoint written by an earlier stage. A missing file is a data
/// error naming the subcommand that produces it.
pub fn load_stage_checkpoint(path: &Path, producer: &str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_owned(),
            message: format!("not found; run `{producer}` first"),
        });
    }
    let (store, header) = load_checkpoint(path)?;
    let side = sidecar_path(path);
    if let Ok(text) = fs::read_to_string(&side) {
        match serde_json::from_str::<CheckpointSidecar>(&text) {
            Ok(s) if s.stamp.seed != header.seed => tracing::warn!(
                path = %path.display(),
                "checkpoint seed {} differs from its sidecar seed {}",
                header.seed,
                s.stamp.seed
            ),
            Ok(_) => {}
            Err(e) => tracing::warn!(path = %side.display(), "unreadable sidecar: {e}"),
        }
    }
    Ok(store)
}

/// One line of `proposals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Earlier endpoint.
    pub from: StateId,
    /// Later endpoint.
    pub to: StateId,
    pub feasible: bool,
    /// Camera sequence of the chosen path; empty when infeasible.
    pub cameras: Vec<CameraId>,
    /// Chosen state per camera, endpoints included.
    pub state_ids: Vec<StateId>,
    pub edge_psi: Vec<f64>,
    /// Empirical average of `edge_psi`; null when infeasible.
    pub score: Option<f64>,
}

impl ProposalRecord {
    pub fn new(stamp: &Stamp, ds: &Dataset, (a, b): (StateIx, StateIx), prop: Option<&PathProposal>) -> Self {
        ProposalRecord {
            stamp: stamp.clone(),
            from: ds.state(a).id,
            to: ds.state(b).id,
            feasible: prop.is_some(),
            cameras: prop.map(|p| p.path.cameras().to_vec()).unwrap_or_default(),
            state_ids: prop.map(|p| p.state_ids(ds)).unwrap_or_default(),
            edge_psi: prop.map(|p| p.edge_psi.clone()).unwrap_or_default(),
            score: prop.map(|p| p.score),
        }
    }
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub from: StateId,
    pub to: StateId,
    /// Ground truth when both states carry a vehicle label.
    pub same_vehicle: Option<bool>,
    /// Finetuned Siamese ψ.
    pub siamese: f64,
    /// Path-LSTM score; null when no feasible proposal exists.
    pub path_score: Option<f64>,
    /// `siamese + path_score`, or `siamese` alone.
    pub final_score: f64,
}

/// `cmc.csv`: one row per scorer and rank.
pub fn cmc_table(eval: &Evaluation) -> String {
    let mut out = String::from("scorer,k,accuracy\n");
    for (name, m) in &eval.scorers {
        for (k, acc) in &m.cmc {
            out.push_str(&format!("{name},{k},{acc}\n"));
        }
    }
    out
}
