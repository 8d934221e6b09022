//! Cameras, sightings and the split-aware dataset index.

mod catalog;
mod io;

pub use catalog::{PathCatalog, SpatialPath};
pub use io::{load_dataset, write_dataset, DatasetMeta, Provenance, RoadRecord, SplitLists};

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Dense position of a state inside its [`Dataset`].
pub type StateIx = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    /// Planar position in meters.
    pub location: [f64; 2],
}

/// One sighting: where, when, what it looked like, and (if labelled) who.
#[derive(Debug, Clone, PartialEq)]
pub struct VstState {
    pub id: StateId,
    pub camera: CameraId,
    pub timestamp: f64,
    pub appearance: Vec<f64>,
    pub vehicle: Option<VehicleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Subset of `Test` used as probes.
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Query];

    fn slot(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Query => 2,
        }
    }
}

/// Validated in-memory dataset with per-camera, per-split orderings.
#[derive(Debug, Clone)]
pub struct Dataset {
    cameras: Vec<Camera>,
    camera_pos: HashMap<CameraId, usize>,
    states: Vec<VstState>,
    state_pos: HashMap<StateId, StateIx>,
    feature_dim: usize,
    in_train: Vec<bool>,
    is_query: Vec<bool>,
    by_camera: [BTreeMap<CameraId, Vec<StateIx>>; 3],
    rank_in_camera: [HashMap<StateIx, usize>; 3],
    max_camera_distance: f64,
    meta: DatasetMeta,
}

impl Dataset {
    /// Builds and validates a dataset. `meta.splits` must assign every state
    /// to exactly one of train/test, with queries a subset of test.
    pub fn new(cameras: Vec<Camera>, states: Vec<VstState>, meta: DatasetMeta) -> Result<Self> {
        let feature_dim = meta.feature_dim;
        let mut camera_pos = HashMap::with_capacity(cameras.len());
        for (i, c) in cameras.iter().enumerate() {
            if !c.location.iter().all(|v| v.is_finite()) {
                return Err(Error::Dataset(format!("camera {} has non-finite location", c.id.0)));
            }
            if camera_pos.insert(c.id, i).is_some() {
                return Err(Error::Dataset(format!("duplicate camera id {}", c.id.0)));
            }
        }
        let mut state_pos = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            if state_pos.insert(s.id, i).is_some() {
                return Err(Error::Dataset(format!("duplicate state id {}", s.id.0)));
            }
            validate_state(s, feature_dim, &camera_pos)?;
        }

        let mut assigned: Vec<Option<Split>> = vec![None; states.len()];
        for (split, ids) in [(Split::Train, &meta.splits.train), (Split::Test, &meta.splits.test)] {
            for id in ids {
                let &ix = state_pos.get(id).ok_or(Error::UnknownState(id.0))?;
                if let Some(prev) = assigned[ix] {
                    return Err(Error::Dataset(format!(
                        "state {} assigned to both {prev:?} and {split:?}",
                        id.0
                    )));
                }
                assigned[ix] = Some(split);
            }
        }
        if let Some(ix) = assigned.iter().position(Option::is_none) {
            return Err(Error::Dataset(format!(
                "state {} is in neither train nor test split",
                states[ix].id.0
            )));
        }
        let in_train: Vec<bool> = assigned.iter().map(|a| *a == Some(Split::Train)).collect();
        for (ix, s) in states.iter().enumerate() {
            if in_train[ix] && s.vehicle.is_none() {
                return Err(Error::Dataset(format!(
                    "training state {} has no vehicle_id",
                    s.id.0
                )));
            }
        }
        let mut is_query = vec![false; states.len()];
        for id in &meta.splits.query {
            let &ix = state_pos.get(id).ok_or(Error::UnknownState(id.0))?;
            if in_train[ix] {
                return Err(Error::Dataset(format!("query state {} is not in the test split", id.0)));
            }
            is_query[ix] = true;
        }

        let mut by_camera: [BTreeMap<CameraId, Vec<StateIx>>; 3] = Default::default();
        for split in Split::ALL {
            let map = &mut by_camera[split.slot()];
            for c in &cameras {
                map.insert(c.id, Vec::new());
            }
            for (ix, s) in states.iter().enumerate() {
                let member = match split {
                    Split::Train => in_train[ix],
                    Split::Test => !in_train[ix],
                    Split::Query => is_query[ix],
                };
                if member {
                    map.get_mut(&s.camera).unwrap().push(ix);
                }
            }
            for list in map.values_mut() {
                list.sort_by(|&a, &b| {
                    states[a]
                        .timestamp
                        .total_cmp(&states[b].timestamp)
                        .then(states[a].id.cmp(&states[b].id))
                });
            }
        }
        let rank_in_camera = std::array::from_fn(|slot| {
            by_camera[slot]
                .values()
                .flat_map(|list| list.iter().enumerate().map(|(r, &ix)| (ix, r)))
                .collect()
        });

        let mut max_camera_distance: f64 = 0.0;
        for a in &cameras {
            for b in &cameras {
                max_camera_distance = max_camera_distance.max(distance(a.location, b.location));
            }
        }

        Ok(Dataset {
            cameras,
            camera_pos,
            states,
            state_pos,
            feature_dim,
            in_train,
            is_query,
            by_camera,
            rank_in_camera,
            max_camera_distance,
            meta,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, id: CameraId) -> Result<&Camera> {
        self.camera_pos
            .get(&id)
            .map(|&i| &self.cameras[i])
            .ok_or(Error::UnknownCamera(id.0))
    }

    pub fn states(&self) -> &[VstState] {
        &self.states
    }

    pub fn state(&self, ix: StateIx) -> &VstState {
        &self.states[ix]
    }

    pub fn index_of(&self, id: StateId) -> Result<StateIx> {
        self.state_pos.get(&id).copied().ok_or(Error::UnknownState(id.0))
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn in_split(&self, ix: StateIx, split: Split) -> bool {
        match split {
            Split::Train => self.in_train[ix],
            Split::Test => !self.in_train[ix],
            Split::Query => self.is_query[ix],
        }
    }

    /// States of `split` at `camera`, ordered by `(timestamp, state_id)`.
    pub fn states_at(&self, camera: CameraId, split: Split) -> Result<&[StateIx]> {
        self.by_camera[split.slot()]
            .get(&camera)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownCamera(camera.0))
    }

    /// Position of a state inside `states_at(its camera, split)`.
    pub fn rank_at_camera(&self, ix: StateIx, split: Split) -> Option<usize> {
        self.rank_in_camera[split.slot()].get(&ix).copied()
    }

    /// All state indices of a split in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<StateIx> {
        (0..self.states.len()).filter(|&ix| self.in_split(ix, split)).collect()
    }

    /// Euclidean distance between two cameras in meters.
    pub fn camera_distance(&self, a: CameraId, b: CameraId) -> Result<f64> {
        Ok(distance(self.camera(a)?.location, self.camera(b)?.location))
    }

    pub fn max_camera_distance(&self) -> f64 {
        self.max_camera_distance
    }

    /// Labelled sightings of `split` grouped by vehicle, each sorted by
    /// `(timestamp, state_id)`.
    pub fn trajectories(&self, split: Split) -> BTreeMap<VehicleId, Vec<StateIx>> {
        let mut out: BTreeMap<VehicleId, Vec<StateIx>> = BTreeMap::new();
        for ix in 0..self.states.len() {
            if let (true, Some(v)) = (self.in_split(ix, split), self.states[ix].vehicle) {
                out.entry(v).or_default().push(ix);
            }
        }
        for list in out.values_mut() {
            list.sort_by(|&a, &b| {
                self.states[a]
                    .timestamp
                    .total_cmp(&self.states[b].timestamp)
                    .then(self.states[a].id.cmp(&self.states[b].id))
            });
        }
        out
    }
}

fn validate_state(s: &VstState, dim: usize, cameras: &HashMap<CameraId, usize>) -> Result<()> {
    if !cameras.contains_key(&s.camera) {
        return Err(Error::Dataset(format!(
            "state {} references unknown camera {}",
            s.id.0, s.camera.0
        )));
    }
    if !s.timestamp.is_finite() || s.timestamp < 0.0 {
        return Err(Error::Dataset(format!(
            "state {} has invalid timestamp {}",
            s.id.0, s.timestamp
        )));
    }
    if s.appearance.len() != dim {
        return Err(Error::Dataset(format!(
            "state {} has feature dimension {} but the dataset declares {dim}",
            s.id.0,
            s.appearance.len()
        )));
    }
    if s.appearance.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!("state {} has a non-finite feature", s.id.0)));
    }
    Ok(())
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn state(id: u64, camera: u32, t: f64, vehicle: Option<u64>) -> VstState {
        VstState {
            id: StateId(id),
            camera: CameraId(camera),
            timestamp: t,
            appearance: vec![0.0, 1.0],
            vehicle: vehicle.map(VehicleId),
        }
    }

    pub fn cameras(n: u32) -> Vec<Camera> {
        (0..n)
            .map(|i| Camera {
                id: CameraId(i),
                location: [f64::from(i) * 100.0, 0.0],
            })
            .collect()
    }

    pub fn meta(train: &[u64], test: &[u64], query: &[u64]) -> DatasetMeta {
        DatasetMeta {
            feature_dim: 2,
            splits: SplitLists {
                train: train.iter().map(|&i| StateId(i)).collect(),
                test: test.iter().map(|&i| StateId(i)).collect(),
                query: query.iter().map(|&i| StateId(i)).collect(),
            },
            roads: Vec::new(),
            provenance: None,
        }
    }
}
