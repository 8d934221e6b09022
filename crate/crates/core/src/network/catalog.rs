use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CameraId, Dataset, Split};
use crate::error::{Error, Result};

/// Ordered camera sequence of length ≥ 2 with no immediate repeats.
/// Non-consecutive revisits are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpatialPath(Vec<CameraId>);

impl SpatialPath {
    pub fn new(cameras: Vec<CameraId>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "spatial path needs at least two cameras, got {}",
                cameras.len()
            )));
        }
        if cameras.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "spatial path repeats a camera consecutively".into(),
            ));
        }
        Ok(SpatialPath(cameras))
    }

    pub fn cameras(&self) -> &[CameraId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> CameraId {
        self.0[0]
    }

    pub fn last(&self) -> CameraId {
        self.0[self.0.len() - 1]
    }

    pub fn edges(&self) -> impl Iterator<Item = (CameraId, CameraId)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

impl fmt::Display for SpatialPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{}", c.0)?;
        }
        Ok(())
    }
}

/// Candidate spatial paths per ordered camera pair, mined from training
/// trajectories. Paths within a pair are sorted by length, then camera
/// sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathCatalog {
    paths: BTreeMap<(CameraId, CameraId), Vec<SpatialPath>>,
}

impl PathCatalog {
    /// Mines the catalog from the training split of `dataset`.
    pub fn build(dataset: &Dataset) -> Result<Self> {
        let trajectories = dataset.trajectories(Split::Train);
        if trajectories.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        Ok(Self::from_camera_sequences(trajectories.values().map(|states| {
            states.iter().map(|&ix| dataset.state(ix).camera).collect::<Vec<_>>()
        })))
    }

    /// Registers every contiguous subsequence of each time-ordered camera
    /// sequence, after collapsing consecutive duplicates.
    pub fn from_camera_sequences<I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = Vec<CameraId>>,
    {
        let mut found: BTreeMap<(CameraId, CameraId), BTreeSet<SpatialPath>> = BTreeMap::new();
        for mut seq in sequences {
            seq.dedup();
            for start in 0..seq.len() {
                for end in start + 1..seq.len() {
                    let path = SpatialPath(seq[start..=end].to_vec());
                    found
                        .entry((seq[start], seq[end]))
                        .or_default()
                        .insert(path);
                }
            }
        }
        let paths = found
            .into_iter()
            .map(|(k, set)| {
                let mut v: Vec<SpatialPath> = set.into_iter().collect();
                v.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
                (k, v)
            })
            .collect();
        PathCatalog { paths }
    }

    pub fn candidates(&self, from: CameraId, to: CameraId) -> &[SpatialPath] {
        self.paths.get(&(from, to)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pairs(&self) -> impl Iterator<Item = (CameraId, CameraId)> + '_ {
        self.paths.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(CameraId, CameraId), &[SpatialPath])> {
        self.paths.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_paths(&self) -> usize {
        self.paths.values().map(Vec::len).sum()
    }

    /// Directed camera adjacencies appearing on any catalog path.
    pub fn edges(&self) -> BTreeSet<(CameraId, CameraId)> {
        self.paths
            .values()
            .flatten()
            .flat_map(|p| p.edges().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}
