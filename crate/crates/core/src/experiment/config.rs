//! Run configuration: one TOML file with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{FinetuneConfig, LstmConfig};
use crate::network::Provenance;
use crate::potential::PotentialConfig;
use crate::synth::SynthConfig;

/// Ranking functions the evaluator knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Finetuned Siamese score plus Path-LSTM score.
    Final,
    /// Same fusion with the separately pretrained networks.
    FinalPretrained,
    Siamese,
    /// Appearance branch of the pretrained Siamese network alone.
    Visual,
    /// `1 − STR`.
    Str,
    /// Empirical average of the proposal; 0 when infeasible.
    MrfAverage,
    Oracle,
    Constant,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 8] = [
        ScorerKind::Final,
        ScorerKind::FinalPretrained,
        ScorerKind::Siamese,
        ScorerKind::Visual,
        ScorerKind::Str,
        ScorerKind::MrfAverage,
        ScorerKind::Oracle,
        ScorerKind::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Final => "final",
            ScorerKind::FinalPretrained => "final_pretrained",
            ScorerKind::Siamese => "siamese",
            ScorerKind::Visual => "visual",
            ScorerKind::Str => "str",
            ScorerKind::MrfAverage => "mrf_average",
            ScorerKind::Oracle => "oracle",
            ScorerKind::Constant => "constant",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown scorer {name:?}")))
    }

    /// True for scorers that need proposals on the test split.
    pub fn uses_proposals(self) -> bool {
        matches!(self, ScorerKind::Final | ScorerKind::FinalPretrained | ScorerKind::MrfAverage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scorers: Vec<ScorerKind>,
    /// Compute the average Jaccard similarity of test proposals. Skipped
    /// when there is neither a trained potential nor a path-based scorer.
    pub ajs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scorers: ScorerKind::ALL.to_vec(),
            ajs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Number of query pairs resolved by both strategies.
    pub pairs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { pairs: 100 }
    }
}

/// Where artifacts are read from and written to. Not part of the config
/// hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Existing dataset directory. When unset, the dataset is generated from
    /// `[synth]` into `<out_dir>/dataset`.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed of every training stream (the dataset has its own).
    pub seed: u64,
    /// Worker threads for proposals and ranking; results never depend on it.
    pub threads: usize,
    pub synth: SynthConfig,
    /// Pairwise potential used by the chain MRF.
    pub potential: PotentialConfig,
    /// Same architecture trained on pairs from any two cameras.
    pub siamese: PotentialConfig,
    pub lstm: LstmConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            synth: SynthConfig::default(),
            potential: PotentialConfig::default(),
            siamese: PotentialConfig::default(),
            lstm: LstmConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// The fields that determine results.
#[derive(Serialize)]
struct Identity<'a> {
    seed: u64,
    synth: &'a SynthConfig,
    potential: &'a PotentialConfig,
    siamese: &'a PotentialConfig,
    lstm: &'a LstmConfig,
    finetune: &'a FinetuneConfig,
    eval: &'a EvalConfig,
    bench: &'a BenchConfig,
}

impl RunConfig {
    /// Parses without validating, so that overrides can still be applied.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file without validating it.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.synth.validate()?;
        for (name, p) in [("potential", &self.potential), ("siamese", &self.siamese)] {
            if p.embed_dim == 0 || p.hidden == 0 || p.batch == 0 {
                return Err(Error::Config(format!("{name}: embed_dim, hidden and batch must be positive")));
            }
            if !(p.lr.is_finite() && p.lr > 0.0) {
                return Err(Error::Config(format!("{name}: lr must be positive")));
            }
        }
        if self.lstm.batch == 0 || !(self.lstm.adam.lr.is_finite() && self.lstm.adam.lr > 0.0) {
            return Err(Error::Config("lstm: batch and adam.lr must be positive".into()));
        }
        if self.finetune.batch == 0 || !(self.finetune.lr.is_finite() && self.finetune.lr >= 0.0) {
            return Err(Error::Config("finetune: batch must be positive and lr non-negative".into()));
        }
        if self.bench.pairs == 0 {
            return Err(Error::Config("bench: pairs must be positive".into()));
        }
        if let Some(dir) = &self.paths.dataset {
            if !dir.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    /// Hash of everything except `threads` and `paths`.
    pub fn hash(&self) -> Result<String> {
        Provenance::hash_config(&Identity {
            seed: self.seed,
            synth: &self.synth,
            potential: &self.potential,
            siamese: &self.siamese,
            lstm: &self.lstm,
            finetune: &self.finetune,
            eval: &self.eval,
            bench: &self.bench,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig {
            seed: 9,
            threads: 3,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("threads = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[synth]\nn_cameras = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[eval]\nscorers = [\"nope\"]"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[paths]\ndataset = \"/definitely/not/here\"").is_err());
    }

    #[test]
    fn hash_ignores_threads_and_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.threads = 8;
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn scorer_names_round_trip() {
        for k in ScorerKind::ALL {
            assert_eq!(ScorerKind::parse(k.name()).unwrap(), k);
        }
        assert!(ScorerKind::parse("best").is_err());
    }
}
