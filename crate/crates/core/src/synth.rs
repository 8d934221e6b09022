//! Seeded synthetic camera networks and vehicle trajectories.
//!
//! A generated dataset is a pure function of its [`SynthConfig`]: the network,
//! the trajectories and the split each draw from their own stream derived
//! from `seed`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    distance, Camera, CameraId, Dataset, DatasetMeta, Provenance, RoadRecord, SplitLists, StateId, VehicleId, VstState,
};
use crate::numeric::{derive_seed, seeded_rng};

pub const GENERATOR_NAME: &str = "vstreid-synth";

/// Smallest gap between consecutive sightings of one vehicle, in seconds.
pub const MIN_STEP_S: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Rectangular lattice, as square as `n_cameras` allows.
    Grid,
    /// Euclidean minimum spanning tree over random points plus
    /// `extra_edges` short non-crossing chords.
    RandomPlanar,
}

/// How a vehicle moves through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Uniform non-backtracking steps for a random number of sightings.
    RandomWalk,
    /// Shortest road route from a random origin to a random destination.
    ShortestRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cameras: usize,
    pub topology: Topology,
    pub extra_edges: usize,
    /// Side of the square the cameras are placed in, meters.
    pub area_m: f64,
    pub n_vehicles: usize,
    pub feature_dim: usize,
    /// Per-dimension standard deviation added to every sighting's feature.
    pub appearance_noise: f64,
    /// Per-dimension standard deviation of a random-walk offset that moves a
    /// vehicle's appearance a little at every camera it passes.
    pub appearance_drift: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
    /// Standard deviation of the per-edge travel time perturbation, seconds.
    pub dwell_noise: f64,
    /// Share of vehicles whose prototype is a small rotation of another's.
    pub confuser_fraction: f64,
    /// Angle between a confuser prototype and its host, radians.
    pub confuser_offset: f64,
    pub sightings_min: usize,
    pub sightings_max: usize,
    pub routing: Routing,
    /// First sightings are uniform in `[0, start_window_s)`.
    pub start_window_s: f64,
    pub train_fraction: f64,
    pub queries_per_vehicle: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_cameras: 12,
            topology: Topology::RandomPlanar,
            extra_edges: 2,
            area_m: 2000.0,
            n_vehicles: 60,
            feature_dim: 16,
            appearance_noise: 0.3,
            appearance_drift: 0.0,
            speed_mean: 10.0,
            speed_sd: 2.0,
            dwell_noise: 5.0,
            confuser_fraction: 0.2,
            confuser_offset: 0.1,
            sightings_min: 3,
            sightings_max: 6,
            routing: Routing::RandomWalk,
            start_window_s: 3600.0,
            train_fraction: 0.5,
            queries_per_vehicle: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_cameras < 2 {
            return fail("n_cameras must be at least 2");
        }
        if self.n_vehicles < 2 {
            return fail("n_vehicles must be at least 2");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        for (name, v) in [
            ("appearance_noise", self.appearance_noise),
            ("appearance_drift", self.appearance_drift),
            ("speed_sd", self.speed_sd),
            ("dwell_noise", self.dwell_noise),
            ("confuser_offset", self.confuser_offset),
            ("start_window_s", self.start_window_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.speed_mean.is_finite() && self.speed_mean > 0.0) {
            return fail("speed_mean must be positive");
        }
        if !(self.area_m.is_finite() && self.area_m > 0.0) {
            return fail("area_m must be positive");
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return fail("confuser_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return fail("train_fraction must lie in [0, 1]");
        }
        if self.sightings_min < 2 || self.sightings_max < self.sightings_min {
            return fail("need 2 <= sightings_min <= sightings_max");
        }
        if self.queries_per_vehicle == 0 {
            return fail("queries_per_vehicle must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Provenance::hash_config(self)
    }
}

/// Cameras, undirected roads between them, and adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthNetwork {
    pub cameras: Vec<Camera>,
    pub roads: Vec<RoadRecord>,
    adjacency: Vec<Vec<usize>>,
}

impl SynthNetwork {
    fn from_edges(locations: Vec<[f64; 2]>, mut edges: Vec<(usize, usize)>) -> Self {
        let n = locations.len();
        for e in &mut edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let roads = edges
            .iter()
            .map(|&(a, b)| RoadRecord {
                a: CameraId(a as u32),
                b: CameraId(b as u32),
                length_m: distance(locations[a], locations[b]),
            })
            .collect();
        let cameras = locations
            .into_iter()
            .enumerate()
            .map(|(i, location)| Camera {
                id: CameraId(i as u32),
                location,
            })
            .collect();
        SynthNetwork {
            cameras,
            roads,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn neighbors(&self, camera: usize) -> &[usize] {
        &self.adjacency[camera]
    }

    pub fn road_length(&self, a: usize, b: usize) -> f64 {
        distance(self.cameras[a].location, self.cameras[b].location)
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Shortest road route from `from` to every camera, by length. Equal
    /// lengths resolve to the lexicographically smaller camera sequence.
    pub fn routes_from(&self, from: usize) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
        let mut done = vec![false; n];
        best[from] = Some((0.0, vec![from]));
        for _ in 0..n {
            let next = (0..n)
                .filter(|&v| !done[v] && best[v].is_some())
                .min_by(|&a, &b| route_order(best[a].as_ref().unwrap(), best[b].as_ref().unwrap()));
            let Some(v) = next else { break };
            done[v] = true;
            let (dv, pv) = best[v].clone().unwrap();
            for &u in &self.adjacency[v] {
                if done[u] {
                    continue;
                }
                let mut pu = pv.clone();
                pu.push(u);
                let cand = (dv + self.road_length(v, u), pu);
                if best[u].as_ref().is_none_or(|cur| route_order(&cand, cur) == Ordering::Less) {
                    best[u] = Some(cand);
                }
            }
        }
        best.into_iter().map(|b| b.map(|(_, p)| p).unwrap_or_default()).collect()
    }
}

fn route_order(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

fn grid_shape(n: usize) -> (usize, usize) {
    let rows = (1..=n).take_while(|r| r * r <= n).filter(|r| n % r == 0).max().unwrap_or(1);
    (rows, n / rows)
}

fn segments_cross(p: [[f64; 2]; 2], q: [[f64; 2]; 2]) -> bool {
    let orient = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    orient(p[0], p[1], q[0]) * orient(p[0], p[1], q[1]) < 0.0
        && orient(q[0], q[1], p[0]) * orient(q[0], q[1], p[1]) < 0.0
}

/// Connected camera graph with planar coordinates in meters.
pub fn gen_network(cfg: &SynthConfig) -> Result<SynthNetwork> {
    cfg.validate()?;
    let n = cfg.n_cameras;
    match cfg.topology {
        Topology::Grid => {
            let (rows, cols) = grid_shape(n);
            let step = cfg.area_m / (cols.max(rows).max(2) - 1) as f64;
            let locations = (0..n).map(|i| [(i % cols) as f64 * step, (i / cols) as f64 * step]).collect();
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    if c + 1 < cols {
                        edges.push((i, i + 1));
                    }
                    if r + 1 < rows {
                        edges.push((i, i + cols));
                    }
                }
            }
            Ok(SynthNetwork::from_edges(locations, edges))
        }
        Topology::RandomPlanar => {
            let mut rng = seeded_rng(derive_seed(cfg.seed, "network"));
            let min_sep = cfg.area_m / (2.0 * (n as f64).sqrt());
            let mut locations: Vec<[f64; 2]> = Vec::with_capacity(n);
            let mut attempts = 0;
            while locations.len() < n {
                attempts += 1;
                let p = [rng.random_range(0.0..cfg.area_m), rng.random_range(0.0..cfg.area_m)];
                // relax the spacing rule rather than loop forever on dense requests
                if attempts > 1000 * n || locations.iter().all(|&q| distance(p, q) >= min_sep) {
                    locations.push(p);
                }
            }
            // Prim over the complete Euclidean graph
            let mut in_tree = vec![false; n];
            let mut link: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); n];
            let mut edges = Vec::with_capacity(n - 1 + cfg.extra_edges);
            in_tree[0] = true;
            for v in 1..n {
                link[v] = (distance(locations[0], locations[v]), 0);
            }
            for _ in 1..n {
                let v = (0..n)
                    .filter(|&v| !in_tree[v])
                    .min_by(|&a, &b| link[a].0.total_cmp(&link[b].0).then(a.cmp(&b)))
                    .expect("a vertex remains outside the tree");
                in_tree[v] = true;
                edges.push((link[v].1, v));
                for u in 0..n {
                    let d = distance(locations[v], locations[u]);
                    if !in_tree[u] && d < link[u].0 {
                        link[u] = (d, v);
                    }
                }
            }
            let mut chords: Vec<(f64, usize, usize)> = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
                        chords.push((distance(locations[a], locations[b]), a, b));
                    }
                }
            }
            chords.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            let mut added = 0;
            for (_, a, b) in chords {
                if added == cfg.extra_edges {
                    break;
                }
                let seg = [locations[a], locations[b]];
                let crosses = edges
                    .iter()
                    .any(|&(c, d)| segments_cross(seg, [locations[c], locations[d]]));
                if !crosses {
                    edges.push((a, b));
                    added += 1;
                }
            }
            Ok(SynthNetwork::from_edges(locations, edges))
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `host` rotated by `angle` towards a random orthogonal direction.
fn rotate_away<R: Rng + ?Sized>(host: &[f64], angle: f64, rng: &mut R) -> Vec<f64> {
    if host.len() == 1 {
        return host.to_vec();
    }
    loop {
        let r = unit_vector(host.len(), rng);
        let along: f64 = r.iter().zip(host).map(|(a, b)| a * b).sum();
        let ortho: Vec<f64> = r.iter().zip(host).map(|(a, b)| a - along * b).collect();
        let norm = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return host
                .iter()
                .zip(&ortho)
                .map(|(h, o)| angle.cos() * h + angle.sin() * o / norm)
                .collect();
        }
    }
}

/// One appearance prototype per vehicle on the unit sphere. A
/// `confuser_fraction` share of vehicles copy another vehicle's prototype
/// rotated by `confuser_offset`.
pub fn prototypes<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let n = cfg.n_vehicles;
    let n_conf = ((cfg.confuser_fraction * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut protos = vec![Vec::new(); n];
    let hosts = &order[..n - n_conf];
    for &v in hosts {
        protos[v] = unit_vector(cfg.feature_dim, rng);
    }
    for &v in &order[n - n_conf..] {
        let host = hosts[rng.random_range(0..hosts.len())];
        protos[v] = rotate_away(&protos[host].clone(), cfg.confuser_offset, rng);
    }
    protos
}

fn walk<R: Rng + ?Sized>(cfg: &SynthConfig, net: &SynthNetwork, routes: &[Vec<Vec<usize>>], rng: &mut R) -> Vec<usize> {
    let n = net.len();
    match cfg.routing {
        Routing::RandomWalk => {
            let len = rng.random_range(cfg.sightings_min..=cfg.sightings_max);
            let mut seq = vec![rng.random_range(0..n)];
            while seq.len() < len {
                let here = *seq.last().unwrap();
                let back = (seq.len() >= 2).then(|| seq[seq.len() - 2]);
                let options: Vec<usize> = net.neighbors(here).iter().copied().filter(|&u| Some(u) != back).collect();
                let options = if options.is_empty() { net.neighbors(here).to_vec() } else { options };
                seq.push(options[rng.random_range(0..options.len())]);
            }
            seq
        }
        Routing::ShortestRoute => {
            let origin = rng.random_range(0..n);
            let from = &routes[origin];
            let long_enough: Vec<usize> = (0..n).filter(|&d| from[d].len() >= cfg.sightings_min).collect();
            let dest = if long_enough.is_empty() {
                (0..n).max_by_key(|&d| (from[d].len(), std::cmp::Reverse(d))).unwrap()
            } else {
                long_enough[rng.random_range(0..long_enough.len())]
            };
            let mut seq = from[dest].clone();
            seq.truncate(cfg.sightings_max);
            seq
        }
    }
}

/// Labelled sightings for every vehicle, with state ids assigned in
/// `(timestamp, vehicle, order along trajectory)` order.
pub fn gen_trajectories(cfg: &SynthConfig, net: &SynthNetwork) -> Result<Vec<VstState>> {
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "trajectories"));
    let protos = prototypes(cfg, &mut rng);
    let routes: Vec<Vec<Vec<usize>>> = match cfg.routing {
        Routing::ShortestRoute => (0..net.len()).map(|c| net.routes_from(c)).collect(),
        Routing::RandomWalk => Vec::new(),
    };
    let speed = Normal::new(cfg.speed_mean, cfg.speed_sd).map_err(|e| Error::Config(e.to_string()))?;
    let dwell = Normal::new(0.0, cfg.dwell_noise).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.appearance_noise).map_err(|e| Error::Config(e.to_string()))?;
    let drift = Normal::new(0.0, cfg.appearance_drift).map_err(|e| Error::Config(e.to_string()))?;

    let mut raw: Vec<(f64, u64, usize, usize, Vec<f64>)> = Vec::new();
    for (v, proto) in protos.iter().enumerate() {
        let cams = walk(cfg, net, &routes, &mut rng);
        let v_speed = speed.sample(&mut rng).max(0.1 * cfg.speed_mean);
        let mut t = if cfg.start_window_s > 0.0 {
            rng.random_range(0.0..cfg.start_window_s)
        } else {
            0.0
        };
        let mut offset = vec![0.0; cfg.feature_dim];
        for (k, &c) in cams.iter().enumerate() {
            if k > 0 {
                let travel = net.road_length(cams[k - 1], c) / v_speed + dwell.sample(&mut rng);
                t = (t + travel).max(t + MIN_STEP_S);
                if cfg.appearance_drift > 0.0 {
                    for o in &mut offset {
                        *o += drift.sample(&mut rng);
                    }
                }
            }
            let feature = proto.iter().zip(&offset).map(|(p, o)| p + o + noise.sample(&mut rng)).collect();
            raw.push((t, v as u64, k, c, feature));
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, (t, v, _, c, feature))| VstState {
            id: StateId(i as u64),
            camera: CameraId(c as u32),
            timestamp: t,
            appearance: feature,
            vehicle: Some(VehicleId(v)),
        })
        .collect())
}

/// Partitions vehicles into train and test, then marks up to
/// `queries_per_vehicle` sightings of each test vehicle seen by at least two
/// cameras as queries.
pub fn split_dataset(states: &[VstState], train_fraction: f64, queries_per_vehicle: usize, seed: u64) -> Result<SplitLists> {
    let mut by_vehicle: BTreeMap<VehicleId, Vec<&VstState>> = BTreeMap::new();
    for s in states {
        let v = s
            .vehicle
            .ok_or_else(|| Error::Dataset(format!("state {} has no vehicle label", s.id)))?;
        by_vehicle.entry(v).or_default().push(s);
    }
    let mut vehicles: Vec<VehicleId> = by_vehicle.keys().copied().collect();
    let n_train = (train_fraction * vehicles.len() as f64).round() as usize;
    if vehicles.len() < 2 || n_train == 0 || n_train >= vehicles.len() {
        return Err(Error::Dataset(format!(
            "cannot split {} vehicles with train fraction {train_fraction} into two non-empty parts",
            vehicles.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    vehicles.shuffle(&mut rng);
    let test_vehicles = vehicles.split_off(n_train);

    let mut lists = SplitLists::default();
    for v in &vehicles {
        lists.train.extend(by_vehicle[v].iter().map(|s| s.id));
    }
    for v in &test_vehicles {
        let sightings = &by_vehicle[v];
        lists.test.extend(sightings.iter().map(|s| s.id));
        let first = sightings[0].camera;
        if sightings.iter().all(|s| s.camera == first) {
            continue;
        }
        let mut ids: Vec<StateId> = sightings.iter().map(|s| s.id).collect();
        ids.shuffle(&mut rng);
        lists.query.extend(ids.into_iter().take(queries_per_vehicle));
    }
    if lists.query.is_empty() {
        return Err(Error::Dataset("no test vehicle is seen by two cameras".into()));
    }
    lists.train.sort_unstable();
    lists.test.sort_unstable();
    lists.query.sort_unstable();
    Ok(lists)
}

/// Network, trajectories and split as one validated dataset.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let net = gen_network(cfg)?;
    let states = gen_trajectories(cfg, &net)?;
    let splits = split_dataset(
        &states,
        cfg.train_fraction,
        cfg.queries_per_vehicle,
        derive_seed(cfg.seed, "split"),
    )?;
    let meta = DatasetMeta {
        feature_dim: cfg.feature_dim,
        splits,
        roads: net.roads.clone(),
        provenance: Some(Provenance {
            generator: GENERATOR_NAME.into(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
        }),
    };
    Dataset::new(net.cameras, states, meta)
}
