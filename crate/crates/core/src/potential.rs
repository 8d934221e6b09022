//! Learned pairwise potential between two sightings.
//!
//! Two branches are fused by a 2→1 layer with a sigmoid:
//!
//! * visual: `σ(⟨E a, E b⟩)` with a shared affine embedder `E`
//! * spatio-temporal: `σ(W₂ relu(W₁ [Δt, Δd] + b₁) + b₂)` on normalized
//!   time and distance differences
//!
//! The same network, trained on pairs from any two cameras instead of
//! neighboring ones, is the Siamese pair scorer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CameraId, Dataset, PathCatalog, Split, StateIx, VstState};
use crate::numeric::{
    bce_with_logit, dot, relu, seeded_rng, sgd_step, sigmoid, Affine, ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub negatives_per_positive: usize,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig {
            embed_dim: 32,
            hidden: 16,
            lr: 0.01,
            epochs: 30,
            batch: 64,
            negatives_per_positive: 3,
        }
    }
}

/// Scales that bring Δt and Δd to order one before they reach any network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Largest |Δt| over consecutive same-vehicle training sightings.
    pub time_scale: f64,
    /// Largest distance between any two cameras.
    pub distance_scale: f64,
}

impl Normalizer {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut time_scale: f64 = 0.0;
        for traj in ds.trajectories(Split::Train).values() {
            for w in traj.windows(2) {
                let (a, b) = (ds.state(w[0]), ds.state(w[1]));
                if a.camera != b.camera {
                    time_scale = time_scale.max((b.timestamp - a.timestamp).abs());
                }
            }
        }
        let d = ds.max_camera_distance();
        Normalizer {
            time_scale: if time_scale > 0.0 { time_scale } else { 1.0 },
            distance_scale: if d > 0.0 { d } else { 1.0 },
        }
    }

    pub fn apply(&self, dt: f64, dd: f64) -> [f64; 2] {
        [dt / self.time_scale, dd / self.distance_scale]
    }
}

/// Signed time difference `t_b − t_a` and camera distance between two
/// sightings.
pub fn st_features(ds: &Dataset, a: &VstState, b: &VstState) -> Result<(f64, f64)> {
    Ok((b.timestamp - a.timestamp, ds.camera_distance(a.camera, b.camera)?))
}

/// Parameter handles of one potential network inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PotentialNet {
    pub prefix: String,
    pub embed: Affine,
    pub st_hidden: Affine,
    pub st_out: Affine,
    pub fuse: Affine,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PsiTrace {
    embed_a: Vec<f64>,
    embed_b: Vec<f64>,
    st_input: [f64; 2],
    st_pre: Vec<f64>,
    st_hidden: Vec<f64>,
    pub visual: f64,
    pub st: f64,
    pub logit: f64,
    pub psi: f64,
}

impl PotentialNet {
    /// Registers `{prefix}.embed`, `{prefix}.st.hidden`, `{prefix}.st.out` and
    /// `{prefix}.fuse` in `store`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        cfg: &PotentialConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = Affine::register(
            store,
            &format!("{prefix}.embed"),
            feature_dim,
            cfg.embed_dim,
            1.0 / (cfg.embed_dim as f64).sqrt(),
            rng,
        )?;
        let st_hidden =
            Affine::register(store, &format!("{prefix}.st.hidden"), 2, cfg.hidden, 1.0, rng)?;
        let st_out = Affine::register(
            store,
            &format!("{prefix}.st.out"),
            cfg.hidden,
            1,
            1.0 / (cfg.hidden as f64).sqrt(),
            rng,
        )?;
        let fuse = Affine::register(store, &format!("{prefix}.fuse"), 2, 1, 0.0, rng)?;
        // fusion starts as an even vote of both branches
        store.value_mut(fuse.weight).data_mut().copy_from_slice(&[2.0, 2.0]);
        store.value_mut(fuse.bias).data_mut()[0] = -2.0;
        Ok(PotentialNet {
            prefix: prefix.to_owned(),
            embed,
            st_hidden,
            st_out,
            fuse,
        })
    }

    /// Binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            Ok(store.value(store.require(name)?).shape().to_vec())
        };
        let e = shape(&format!("{prefix}.embed.w"))?;
        let h = shape(&format!("{prefix}.st.hidden.w"))?;
        if e.len() != 2 || h.len() != 2 {
            return Err(Error::InvalidArgument(format!("malformed {prefix} parameters")));
        }
        Ok(PotentialNet {
            prefix: prefix.to_owned(),
            embed: Affine::bind(store, &format!("{prefix}.embed"), e[1], e[0])?,
            st_hidden: Affine::bind(store, &format!("{prefix}.st.hidden"), 2, h[0])?,
            st_out: Affine::bind(store, &format!("{prefix}.st.out"), h[0], 1)?,
            fuse: Affine::bind(store, &format!("{prefix}.fuse"), 2, 1)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.embed.in_dim
    }

    pub fn embed(&self, store: &ParamStore, feature: &[f64]) -> Result<Vec<f64>> {
        self.embed.forward(store, feature)
    }

    /// `σ(⟨E a, E b⟩)`; symmetric in its arguments.
    pub fn visual_similarity(&self, store: &ParamStore, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(sigmoid(dot(&self.embed(store, a)?, &self.embed(store, b)?)))
    }

    /// Spatio-temporal branch on normalized `[Δt, Δd]`.
    pub fn st_compatibility(&self, store: &ParamStore, st_input: [f64; 2]) -> Result<f64> {
        if !st_input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("spatio-temporal input".into()));
        }
        let pre = self.st_hidden.forward(store, &st_input)?;
        let h: Vec<f64> = pre.iter().map(|&v| relu(v)).collect();
        Ok(sigmoid(self.st_out.forward(store, &h)?[0]))
    }

    pub fn fuse_logit(&self, store: &ParamStore, visual: f64, st: f64) -> f64 {
        let w = store.value(self.fuse.weight).data();
        w[0] * visual + w[1] * st + store.value(self.fuse.bias).data()[0]
    }

    /// Forward pass from precomputed embeddings.
    pub fn forward_embedded(
        &self,
        store: &ParamStore,
        embed_a: Vec<f64>,
        embed_b: Vec<f64>,
        st_input: [f64; 2],
    ) -> Result<PsiTrace> {
        if !st_input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("spatio-temporal input".into()));
        }
        let visual = sigmoid(dot(&embed_a, &embed_b));
        let st_pre = self.st_hidden.forward(store, &st_input)?;
        let st_hidden: Vec<f64> = st_pre.iter().map(|&v| relu(v)).collect();
        let st = sigmoid(self.st_out.forward(store, &st_hidden)?[0]);
        let logit = self.fuse_logit(store, visual, st);
        Ok(PsiTrace {
            embed_a,
            embed_b,
            st_input,
            st_pre,
            st_hidden,
            visual,
            st,
            logit,
            psi: sigmoid(logit),
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        feat_a: &[f64],
        feat_b: &[f64],
        st_input: [f64; 2],
    ) -> Result<PsiTrace> {
        let ea = self.embed(store, feat_a)?;
        let eb = self.embed(store, feat_b)?;
        self.forward_embedded(store, ea, eb, st_input)
    }

    /// Accumulates parameter gradients given `∂L/∂logit` of the fused output.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        trace: &PsiTrace,
        feat_a: &[f64],
        feat_b: &[f64],
        d_logit: f64,
    ) {
        let dfuse = self.fuse.backward(store, &[trace.visual, trace.st], &[d_logit]);
        let d_vis_pre = dfuse[0] * trace.visual * (1.0 - trace.visual);
        let d_st_pre = dfuse[1] * trace.st * (1.0 - trace.st);

        let dh = self.st_out.backward(store, &trace.st_hidden, &[d_st_pre]);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&trace.st_pre)
            .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
            .collect();
        self.st_hidden.backward(store, &trace.st_input, &dpre);

        let dea: Vec<f64> = trace.embed_b.iter().map(|v| d_vis_pre * v).collect();
        let deb: Vec<f64> = trace.embed_a.iter().map(|v| d_vis_pre * v).collect();
        self.embed.backward(store, feat_a, &dea);
        self.embed.backward(store, feat_b, &deb);
    }

    /// Gradient of `ψ` itself (rather than its logit).
    pub fn backward_psi(
        &self,
        store: &mut ParamStore,
        trace: &PsiTrace,
        feat_a: &[f64],
        feat_b: &[f64],
        d_psi: f64,
    ) {
        let d_logit = d_psi * trace.psi * (1.0 - trace.psi);
        self.backward(store, trace, feat_a, feat_b, d_logit);
    }
}

/// A labelled pair of sightings; `a` precedes `b` in time whenever the
/// sampler can order them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub a: StateIx,
    pub b: StateIx,
    pub label: bool,
}

/// All consecutive same-vehicle training sightings at distinct cameras, plus
/// `negatives_per_positive` uniformly drawn different-vehicle pairs per
/// positive on directed camera adjacencies of the catalog.
pub fn sample_training_pairs(
    ds: &Dataset,
    catalog: &PathCatalog,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let mut samples = Vec::new();
    for traj in ds.trajectories(Split::Train).values() {
        for w in traj.windows(2) {
            if ds.state(w[0]).camera != ds.state(w[1]).camera {
                samples.push(PairSample {
                    a: w[0],
                    b: w[1],
                    label: true,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no positive adjacent-camera training pairs".into()));
    }
    let n_neg = samples.len() * negatives_per_positive;

    // each edge weighted by the number of state pairs it carries, so that a
    // uniform pick within the edge is uniform over all pairs
    let mut edges = Vec::new();
    let mut cumulative = Vec::new();
    let mut total = 0usize;
    for (i, j) in catalog.edges() {
        let ki = ds.states_at(i, Split::Train)?.len();
        let kj = ds.states_at(j, Split::Train)?.len();
        if ki * kj > 0 {
            total += ki * kj;
            edges.push((i, j));
            cumulative.push(total);
        }
    }
    let mut rng = seeded_rng(seed);
    let mut attempts = 0usize;
    let mut drawn = 0;
    while drawn < n_neg {
        attempts += 1;
        if attempts > 1000 * (n_neg + 1) {
            return Err(Error::Dataset("could not draw enough negative pairs".into()));
        }
        let r = rng.random_range(0..total);
        let e = cumulative.partition_point(|&c| c <= r);
        let (ci, cj) = edges[e];
        let si = ds.states_at(ci, Split::Train)?;
        let sj = ds.states_at(cj, Split::Train)?;
        let a = si[rng.random_range(0..si.len())];
        let b = sj[rng.random_range(0..sj.len())];
        if ds.state(a).vehicle == ds.state(b).vehicle {
            continue;
        }
        samples.push(PairSample { a, b, label: false });
        drawn += 1;
    }
    Ok(samples)
}

/// Pairs from any two distinct cameras of `split`, each ordered by
/// `(timestamp, state_id)`: every same-vehicle pair as a positive and
/// `negatives_per_positive` uniform different-vehicle pairs per positive.
pub fn sample_any_camera_pairs(
    ds: &Dataset,
    split: Split,
    negatives_per_positive: usize,
    max_positives: Option<usize>,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let mut rng = seeded_rng(seed);
    let mut positives = Vec::new();
    for traj in ds.trajectories(split).values() {
        for (k, &a) in traj.iter().enumerate() {
            for &b in &traj[k + 1..] {
                if ds.state(a).camera != ds.state(b).camera {
                    positives.push(PairSample { a, b, label: true });
                }
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::Dataset("no positive cross-camera pairs".into()));
    }
    if let Some(cap) = max_positives {
        if positives.len() > cap {
            positives.shuffle(&mut rng);
            positives.truncate(cap);
            positives.sort_by_key(|p| (p.a, p.b));
        }
    }
    let pool: Vec<StateIx> = ds
        .split_indices(split)
        .into_iter()
        .filter(|&ix| ds.state(ix).vehicle.is_some())
        .collect();
    let n_neg = positives.len() * negatives_per_positive;
    let mut samples = positives;
    let mut attempts = 0usize;
    let mut drawn = 0;
    while drawn < n_neg {
        attempts += 1;
        if attempts > 1000 * (n_neg + 1) {
            return Err(Error::Dataset("could not draw enough negative pairs".into()));
        }
        let x = pool[rng.random_range(0..pool.len())];
        let y = pool[rng.random_range(0..pool.len())];
        let (sx, sy) = (ds.state(x), ds.state(y));
        if sx.camera == sy.camera || sx.vehicle == sy.vehicle {
            continue;
        }
        let (a, b) = time_order(ds, x, y);
        samples.push(PairSample { a, b, label: false });
        drawn += 1;
    }
    Ok(samples)
}

/// Orders two states by `(timestamp, state_id)`.
pub fn time_order(ds: &Dataset, x: StateIx, y: StateIx) -> (StateIx, StateIx) {
    let (sx, sy) = (ds.state(x), ds.state(y));
    if (sx.timestamp, sx.id) <= (sy.timestamp, sy.id) {
        (x, y)
    } else {
        (y, x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample loss over the full sample set after this epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }
}

fn sample_inputs<'a>(
    ds: &'a Dataset,
    norm: &Normalizer,
    s: &PairSample,
) -> Result<(&'a [f64], &'a [f64], [f64; 2])> {
    let (a, b) = (ds.state(s.a), ds.state(s.b));
    let (dt, dd) = st_features(ds, a, b)?;
    Ok((&a.appearance, &b.appearance, norm.apply(dt, dd)))
}

/// Mean binary cross-entropy of the network over `samples`. When
/// `accumulate` is set, gradients of that mean are added to the store.
pub fn potential_loss(
    net: &PotentialNet,
    store: &mut ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    samples: &[PairSample],
    accumulate: bool,
) -> Result<f64> {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        let (fa, fb, st) = sample_inputs(ds, norm, s)?;
        let trace = net.forward(store, fa, fb, st)?;
        let (loss, d_logit) = bce_with_logit(trace.logit, if s.label { 1.0 } else { 0.0 });
        total += loss;
        if accumulate {
            net.backward(store, &trace, fa, fb, d_logit / n);
        }
    }
    Ok(total / n)
}

/// Minibatch SGD on binary cross-entropy of `ψ`.
pub fn train_potential(
    net: &PotentialNet,
    store: &mut ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    samples: &[PairSample],
    cfg: &PotentialConfig,
    seed: u64,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = seeded_rng(seed);
    let initial_loss = potential_loss(net, store, ds, norm, samples, false)?;
    let mut log = TrainLog {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch_size = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<PairSample> = chunk.iter().map(|&i| samples[i]).collect();
            store.zero_grads();
            let loss = potential_loss(net, store, ds, norm, &batch, true)?;
            if !loss.is_finite() {
                return Err(divergence(store, epoch, loss));
            }
            sgd_step(store, cfg.lr).map_err(|_| divergence(store, epoch, loss))?;
        }
        let loss = potential_loss(net, store, ds, norm, samples, false)?;
        if !loss.is_finite() {
            return Err(divergence(store, epoch, loss));
        }
        tracing::debug!(prefix = %net.prefix, epoch, loss, "potential epoch");
        log.epochs.push(EpochLog { epoch, loss });
    }
    Ok(log)
}

pub(crate) fn divergence(store: &ParamStore, epoch: usize, loss: f64) -> Error {
    let mut detail = format!("loss {loss}");
    for id in store.ids() {
        let t = store.value(id);
        let g = store.grad(id);
        let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let grad_finite = g.is_finite();
        detail.push_str(&format!(
            "; {} max|θ|={max_abs:.3e} grad_finite={grad_finite}",
            store.name(id)
        ));
    }
    Error::Divergence { epoch, detail }
}

/// Anything that can score two sightings of one dataset.
pub trait PairPotential: Sync {
    fn psi(&self, a: StateIx, b: StateIx) -> f64;
}

impl<F> PairPotential for F
where
    F: Fn(StateIx, StateIx) -> f64 + Sync,
{
    fn psi(&self, a: StateIx, b: StateIx) -> f64 {
        self(a, b)
    }
}

/// Frozen potential network bound to a dataset, with per-state embeddings
/// computed once.
pub struct FrozenPotential<'a> {
    net: PotentialNet,
    store: ParamStore,
    ds: &'a Dataset,
    norm: Normalizer,
    embeddings: Vec<Vec<f64>>,
}

impl<'a> FrozenPotential<'a> {
    pub fn new(net: PotentialNet, store: ParamStore, ds: &'a Dataset, norm: Normalizer) -> Result<Self> {
        if net.feature_dim() != ds.feature_dim() {
            return Err(Error::shape(
                "potential",
                format!("feature dimension {}", net.feature_dim()),
                ds.feature_dim(),
            ));
        }
        let embeddings = ds
            .states()
            .iter()
            .map(|s| net.embed(&store, &s.appearance))
            .collect::<Result<_>>()?;
        Ok(FrozenPotential {
            net,
            store,
            ds,
            norm,
            embeddings,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn net(&self) -> &PotentialNet {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn visual(&self, a: StateIx, b: StateIx) -> f64 {
        sigmoid(dot(&self.embeddings[a], &self.embeddings[b]))
    }

    pub fn trace(&self, a: StateIx, b: StateIx) -> PsiTrace {
        let (sa, sb) = (self.ds.state(a), self.ds.state(b));
        let dd = self
            .ds
            .camera_distance(sa.camera, sb.camera)
            .expect("cameras validated at load");
        let st = self.norm.apply(sb.timestamp - sa.timestamp, dd);
        self.net
            .forward_embedded(&self.store, self.embeddings[a].clone(), self.embeddings[b].clone(), st)
            .expect("shapes validated at construction")
    }
}

impl PairPotential for FrozenPotential<'_> {
    fn psi(&self, a: StateIx, b: StateIx) -> f64 {
        self.trace(a, b).psi
    }
}

/// ψ values between the states of two cameras. Entries whose transition
/// goes back in time are never evaluated and hold NaN.
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl PsiMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

type Slot = Arc<OnceLock<Arc<PsiMatrix>>>;

/// Write-once cache of per-camera-pair ψ matrices with an evaluation counter.
pub struct PsiMatrixCache<'a, P: PairPotential> {
    potential: &'a P,
    ds: &'a Dataset,
    split: Split,
    slots: Mutex<HashMap<(CameraId, CameraId), Slot>>,
    evaluations: AtomicU64,
}

impl<'a, P: PairPotential> PsiMatrixCache<'a, P> {
    pub fn new(potential: &'a P, ds: &'a Dataset, split: Split) -> Self {
        PsiMatrixCache {
            potential,
            ds,
            split,
            slots: Mutex::new(HashMap::new()),
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn potential(&self) -> &'a P {
        self.potential
    }

    /// Entry `(k, m)` is `ψ(states_at(from)[k], states_at(to)[m])` when the
    /// first state is not later than the second, NaN otherwise.
    pub fn psi_matrix(&self, from: CameraId, to: CameraId) -> Result<Arc<PsiMatrix>> {
        let rows = self.ds.states_at(from, self.split)?;
        let cols = self.ds.states_at(to, self.split)?;
        let slot = {
            let mut slots = self.slots.lock().expect("psi cache poisoned");
            slots.entry((from, to)).or_default().clone()
        };
        Ok(slot
            .get_or_init(|| {
                let mut values = Vec::with_capacity(rows.len() * cols.len());
                let mut evaluated = 0u64;
                for &a in rows {
                    let ta = self.ds.state(a).timestamp;
                    for &b in cols {
                        if ta <= self.ds.state(b).timestamp {
                            values.push(self.potential.psi(a, b));
                            evaluated += 1;
                        } else {
                            values.push(f64::NAN);
                        }
                    }
                }
                self.evaluations.fetch_add(evaluated, Ordering::Relaxed);
                Arc::new(PsiMatrix {
                    rows: rows.len(),
                    cols: cols.len(),
                    values,
                })
            })
            .clone())
    }

    /// Number of ψ entries ever computed by this cache.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn cached_pairs(&self) -> Vec<(CameraId, CameraId)> {
        let slots = self.slots.lock().expect("psi cache poisoned");
        let mut v: Vec<_> = slots.keys().copied().collect();
        v.sort();
        v
    }
}

/// Counts calls to an inner potential.
pub struct CountingPotential<'a, P: PairPotential> {
    inner: &'a P,
    calls: AtomicU64,
}

impl<'a, P: PairPotential> CountingPotential<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        CountingPotential {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<P: PairPotential> PairPotential for CountingPotential<'_, P> {
    fn psi(&self, a: StateIx, b: StateIx) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.psi(a, b)
    }
}

/// Σ over catalog edges of `K_i · K_j` for `split`.
pub fn edge_pair_bound(ds: &Dataset, catalog: &PathCatalog, split: Split) -> Result<u64> {
    let mut total = 0u64;
    for (i, j) in catalog.edges() {
        total += (ds.states_at(i, split)?.len() * ds.states_at(j, split)?.len()) as u64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::{cameras, meta, state};
    use crate::network::CameraId;
    use crate::numeric::{grad_check, DEFAULT_GRAD_CHECK_EPS};
    use proptest::prelude::*;
    use rand::Rng;

    fn net_with(dim: usize, seed: u64) -> (PotentialNet, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = PotentialConfig {
            embed_dim: 4,
            hidden: 3,
            ..PotentialConfig::default()
        };
        let net = PotentialNet::init(&mut store, "psi", dim, &cfg, &mut seeded_rng(seed)).unwrap();
        (net, store)
    }

    #[test]
    fn orthogonal_embeddings_give_one_half() {
        let (net, mut store) = net_with(2, 0);
        store.value_mut(net.embed.weight).fill(0.0);
        {
            let w = store.value_mut(net.embed.weight).data_mut();
            w[0] = 1.0; // row 0 reads x₀
            w[2 + 1] = 1.0; // row 1 reads x₁
        }
        let v = net.visual_similarity(&store, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn self_similarity_closed_form() {
        let (net, mut store) = net_with(1, 0);
        store.value_mut(net.embed.weight).fill(0.0);
        store.value_mut(net.embed.weight).data_mut()[0] = 3f64.ln().sqrt();
        let v = net.visual_similarity(&store, &[1.0], &[1.0]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_st_branch_is_one_half() {
        let (net, mut store) = net_with(2, 3);
        for layer in [net.st_hidden, net.st_out] {
            store.value_mut(layer.weight).fill(0.0);
            store.value_mut(layer.bias).fill(0.0);
        }
        assert_eq!(net.st_compatibility(&store, [3.0, -2.0]).unwrap(), 0.5);
        assert!(net.st_compatibility(&store, [f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn zero_fusion_is_one_half() {
        let (net, mut store) = net_with(2, 4);
        store.value_mut(net.fuse.weight).fill(0.0);
        store.value_mut(net.fuse.bias).fill(0.0);
        let t = net.forward(&store, &[0.3, 0.1], &[-1.0, 2.0], [0.4, 0.2]).unwrap();
        assert_eq!(t.psi, 0.5);
    }

    #[test]
    fn st_features_examples() {
        let mut cams = cameras(2);
        cams[0].location = [0.0, 0.0];
        cams[1].location = [3.0, 4.0];
        let states = vec![state(1, 0, 10.0, Some(1)), state(2, 0, 25.0, Some(1)), state(3, 1, 5.0, Some(2))];
        let ds = Dataset::new(cams, states, meta(&[1, 2, 3], &[], &[])).unwrap();
        assert_eq!(st_features(&ds, ds.state(0), ds.state(1)).unwrap(), (15.0, 0.0));
        assert_eq!(st_features(&ds, ds.state(0), ds.state(2)).unwrap(), (-5.0, 5.0));
    }

    #[test]
    fn loss_at_chance_is_ln2() {
        let (net, mut store) = net_with(2, 5);
        store.value_mut(net.fuse.weight).fill(0.0);
        store.value_mut(net.fuse.bias).fill(0.0);
        let ds = Dataset::new(
            cameras(2),
            vec![state(1, 0, 0.0, Some(1)), state(2, 1, 1.0, Some(1)), state(3, 1, 2.0, Some(2))],
            meta(&[1, 2, 3], &[], &[]),
        )
        .unwrap();
        let norm = Normalizer::from_dataset(&ds);
        let samples = [
            PairSample { a: 0, b: 1, label: true },
            PairSample { a: 0, b: 2, label: false },
        ];
        let loss = potential_loss(&net, &mut store, &ds, &norm, &samples, false).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (net, mut store) = net_with(5, 9);
        let mut rng = seeded_rng(10);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let sts: Vec<[f64; 2]> = (0..3)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let labels = [1.0, 0.0, 1.0];
        let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
            let mut total = 0.0;
            for k in 0..3 {
                let t = net.forward(s, &feats[2 * k], &feats[2 * k + 1], sts[k])?;
                let (l, d) = bce_with_logit(t.logit, labels[k]);
                net.backward(s, &t, &feats[2 * k], &feats[2 * k + 1], d);
                total += l;
            }
            Ok(total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn single_positive_pair_overfits() {
        let mut cams = cameras(2);
        cams[1].location = [500.0, 0.0];
        let mut a = state(1, 0, 0.0, Some(1));
        let mut b = state(2, 1, 50.0, Some(1));
        a.appearance = vec![0.6, 0.8];
        b.appearance = vec![0.62, 0.78];
        let ds = Dataset::new(cams, vec![a, b], meta(&[1, 2], &[], &[])).unwrap();
        let norm = Normalizer::from_dataset(&ds);
        let (net, mut store) = net_with(2, 11);
        let samples = [PairSample { a: 0, b: 1, label: true }];
        let cfg = PotentialConfig {
            lr: 0.5,
            epochs: 200,
            batch: 1,
            ..PotentialConfig::default()
        };
        let log = train_potential(&net, &mut store, &ds, &norm, &samples, &cfg, 1).unwrap();
        assert!(log.final_loss() < log.initial_loss);
        let psi = net.forward(&store, &[0.6, 0.8], &[0.62, 0.78], norm.apply(50.0, 500.0)).unwrap().psi;
        assert!(psi > 0.9, "{psi}");
    }

    fn grid_dataset() -> Dataset {
        // two vehicles along 0→1→2, one along 0→2
        let states = vec![
            state(1, 0, 0.0, Some(1)),
            state(2, 1, 10.0, Some(1)),
            state(3, 2, 20.0, Some(1)),
            state(4, 0, 5.0, Some(2)),
            state(5, 1, 15.0, Some(2)),
            state(6, 2, 26.0, Some(2)),
            state(7, 0, 7.0, Some(3)),
            state(8, 2, 30.0, Some(3)),
        ];
        Dataset::new(cameras(3), states, meta(&[1, 2, 3, 4, 5, 6, 7, 8], &[], &[])).unwrap()
    }

    #[test]
    fn training_pairs_count_and_determinism() {
        let ds = grid_dataset();
        let cat = PathCatalog::build(&ds).unwrap();
        let a = sample_training_pairs(&ds, &cat, 3, 7).unwrap();
        let b = sample_training_pairs(&ds, &cat, 3, 7).unwrap();
        assert_eq!(a, b);
        let positives = a.iter().filter(|s| s.label).count();
        assert_eq!(positives, 5);
        assert_eq!(a.len(), 20);
        let edges = cat.edges();
        for s in &a {
            let pair = (ds.state(s.a).camera, ds.state(s.b).camera);
            assert!(edges.contains(&pair), "{pair:?}");
            assert_eq!(s.label, ds.state(s.a).vehicle == ds.state(s.b).vehicle);
        }
    }

    #[test]
    fn any_pair_sampler_orders_by_time() {
        let ds = grid_dataset();
        let s = sample_any_camera_pairs(&ds, Split::Train, 3, None, 1).unwrap();
        assert_eq!(s.iter().filter(|p| p.label).count(), 7);
        for p in &s {
            assert!(ds.state(p.a).timestamp <= ds.state(p.b).timestamp);
            assert_ne!(ds.state(p.a).camera, ds.state(p.b).camera);
        }
    }

    #[test]
    fn psi_matrix_caches_and_counts() {
        let ds = grid_dataset();
        let table = |a: StateIx, b: StateIx| ((a * 7 + b * 3) % 10) as f64 / 10.0 + 0.05;
        let cache = PsiMatrixCache::new(&table, &ds, Split::Train);
        let m = cache.psi_matrix(CameraId(0), CameraId(1)).unwrap();
        let rows = ds.states_at(CameraId(0), Split::Train).unwrap();
        let cols = ds.states_at(CameraId(1), Split::Train).unwrap();
        let mut forward = 0;
        for (r, &a) in rows.iter().enumerate() {
            for (c, &b) in cols.iter().enumerate() {
                if ds.state(a).timestamp <= ds.state(b).timestamp {
                    assert_eq!(m.get(r, c), table(a, b));
                    forward += 1;
                } else {
                    assert!(m.get(r, c).is_nan());
                }
            }
        }
        assert!(forward > 0);
        assert_eq!(cache.evaluations(), forward);
        let again = cache.psi_matrix(CameraId(0), CameraId(1)).unwrap();
        assert_eq!(cache.evaluations(), forward);
        assert!(Arc::ptr_eq(&m, &again));
        let empty = cache.psi_matrix(CameraId(0), CameraId(1));
        assert!(empty.is_ok());
        assert!(cache.psi_matrix(CameraId(0), CameraId(9)).is_err());
        let test_cache = PsiMatrixCache::new(&table, &ds, Split::Test);
        assert!(test_cache.psi_matrix(CameraId(0), CameraId(1)).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn psi_in_unit_interval_and_visual_symmetric(
            seed in any::<u64>(),
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            dt in -5.0f64..5.0,
            dd in 0.0f64..5.0,
        ) {
            let (net, store) = net_with(3, seed);
            let t = net.forward(&store, &a, &b, [dt, dd]).unwrap();
            prop_assert!(t.psi > 0.0 && t.psi < 1.0);
            let v1 = net.visual_similarity(&store, &a, &b).unwrap();
            let v2 = net.visual_similarity(&store, &b, &a).unwrap();
            prop_assert_eq!(v1, v2);
        }

        #[test]
        fn visual_only_fusion_preserves_ranking(
            seed in any::<u64>(),
            w in 0.1f64..5.0,
            feats in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 4),
            sts in proptest::collection::vec((-1.0f64..1.0, 0.0f64..1.0), 2),
        ) {
            let (net, mut store) = net_with(3, seed);
            store.value_mut(net.fuse.weight).data_mut().copy_from_slice(&[w, 0.0]);
            let t1 = net.forward(&store, &feats[0], &feats[1], [sts[0].0, sts[0].1]).unwrap();
            let t2 = net.forward(&store, &feats[2], &feats[3], [sts[1].0, sts[1].1]).unwrap();
            if t1.visual != t2.visual {
                prop_assert_eq!(t1.visual < t2.visual, t1.psi < t2.psi);
            }
        }
    }
}
