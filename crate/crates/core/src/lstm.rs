//! Path-LSTM: a recurrent validity score over the step differences of a
//! proposal, added to the Siamese pair score.
//!
//! For consecutive states `a`, `b` of a proposal the step input is
//! `y = relu(F [ |R a − R b|, Δd, Δt ])` with `R a = relu(W_R a + b_R)`. A
//! single LSTM layer of width 32 runs over the `N − 1` steps from zero state
//! and an affine head maps the last hidden state to the score.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{PathProposal, ProposalEngine};
use crate::network::{Dataset, PathCatalog, Split, StateIx};
use crate::numeric::{adam_step, bce_with_logit, relu, seeded_rng, sgd_step, sigmoid, AdamConfig, Affine, ParamStore};
use crate::potential::{
    divergence, time_order, EpochLog, Normalizer, PairPotential, PairSample, PotentialNet, PsiMatrixCache,
    TrainLog,
};

pub const LSTM_HIDDEN: usize = 32;
const STEP_INPUT: usize = LSTM_HIDDEN + 2;
const GATE_INPUT: usize = 2 * LSTM_HIDDEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub negatives_per_positive: usize,
    /// Upper bound on positive training pairs; `None` keeps all.
    pub max_positives: Option<usize>,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            epochs: 30,
            batch: 32,
            adam: AdamConfig::default(),
            negatives_per_positive: 3,
            max_positives: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            batch: 32,
            lr: 0.01,
        }
    }
}

/// Parameter handles of the Path-LSTM inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct PathLstm {
    pub visual: Affine,
    pub step: Affine,
    pub forget: Affine,
    pub input: Affine,
    pub output: Affine,
    pub cell: Affine,
    pub head: Affine,
}

/// Gate activations and states of one LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub z: Vec<f64>,
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Inputs of one path: the appearance of every state and the normalized
/// `[Δd, Δt]` of every step.
#[derive(Debug, Clone)]
pub struct PathSequence<'a> {
    pub features: Vec<&'a [f64]>,
    pub steps: Vec<[f64; 2]>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct PathTrace {
    visual_pre: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    step_in: Vec<Vec<f64>>,
    step_pre: Vec<Vec<f64>>,
    cells: Vec<StepTrace>,
    pub score: f64,
}

const NAMES: [&str; 7] = [
    "lstm.R",
    "lstm.f",
    "lstm.gates.forget",
    "lstm.gates.input",
    "lstm.gates.output",
    "lstm.gates.cell",
    "lstm.head",
];

impl PathLstm {
    /// Registers all `lstm.*` parameters.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let h = LSTM_HIDDEN;
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(PathLstm {
            visual: Affine::register(store, NAMES[0], feature_dim, h, s(feature_dim), rng)?,
            step: Affine::register(store, NAMES[1], STEP_INPUT, h, s(STEP_INPUT), rng)?,
            forget: Affine::register(store, NAMES[2], GATE_INPUT, h, s(GATE_INPUT), rng)?,
            input: Affine::register(store, NAMES[3], GATE_INPUT, h, s(GATE_INPUT), rng)?,
            output: Affine::register(store, NAMES[4], GATE_INPUT, h, s(GATE_INPUT), rng)?,
            cell: Affine::register(store, NAMES[5], GATE_INPUT, h, s(GATE_INPUT), rng)?,
            head: Affine::register(store, NAMES[6], h, 1, s(h), rng)?,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let w = store.value(store.require("lstm.R.w")?).shape().to_vec();
        if w.len() != 2 || w[0] != LSTM_HIDDEN {
            return Err(Error::shape("bind", format!("lstm.R.w with {LSTM_HIDDEN} rows"), format!("{w:?}")));
        }
        let h = LSTM_HIDDEN;
        Ok(PathLstm {
            visual: Affine::bind(store, NAMES[0], w[1], h)?,
            step: Affine::bind(store, NAMES[1], STEP_INPUT, h)?,
            forget: Affine::bind(store, NAMES[2], GATE_INPUT, h)?,
            input: Affine::bind(store, NAMES[3], GATE_INPUT, h)?,
            output: Affine::bind(store, NAMES[4], GATE_INPUT, h)?,
            cell: Affine::bind(store, NAMES[5], GATE_INPUT, h)?,
            head: Affine::bind(store, NAMES[6], h, 1)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.visual.in_dim
    }

    fn visual_transform(&self, store: &ParamStore, feature: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pre = self.visual.forward(store, feature)?;
        let out = pre.iter().map(|&v| relu(v)).collect();
        Ok((pre, out))
    }

    fn step_input(ra: &[f64], rb: &[f64], st: [f64; 2]) -> Vec<f64> {
        let mut x: Vec<f64> = ra.iter().zip(rb).map(|(a, b)| (a - b).abs()).collect();
        x.extend_from_slice(&st);
        x
    }

    /// `y` for one step between states with features `fa`, `fb` and
    /// normalized `[Δd, Δt]`.
    pub fn step_features(&self, store: &ParamStore, fa: &[f64], fb: &[f64], st: [f64; 2]) -> Result<Vec<f64>> {
        let (_, ra) = self.visual_transform(store, fa)?;
        let (_, rb) = self.visual_transform(store, fb)?;
        let pre = self.step.forward(store, &Self::step_input(&ra, &rb, st))?;
        Ok(pre.iter().map(|&v| relu(v)).collect())
    }

    /// One LSTM update from `(h, c)` on input `y`.
    pub fn lstm_step(&self, store: &ParamStore, h: &[f64], c: &[f64], y: &[f64]) -> Result<StepTrace> {
        if h.len() != LSTM_HIDDEN || c.len() != LSTM_HIDDEN || y.len() != LSTM_HIDDEN {
            return Err(Error::shape(
                "lstm_step",
                format!("vectors of length {LSTM_HIDDEN}"),
                format!("h {}, c {}, y {}", h.len(), c.len(), y.len()),
            ));
        }
        if !h.iter().chain(c).chain(y).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("lstm state".into()));
        }
        let mut z = h.to_vec();
        z.extend_from_slice(y);
        let gate = |layer: &Affine, act: fn(f64) -> f64| -> Result<Vec<f64>> {
            Ok(layer.forward(store, &z)?.into_iter().map(act).collect())
        };
        let forget = gate(&self.forget, sigmoid)?;
        let input = gate(&self.input, sigmoid)?;
        let output = gate(&self.output, sigmoid)?;
        let candidate = gate(&self.cell, f64::tanh)?;
        let c_new: Vec<f64> = (0..LSTM_HIDDEN)
            .map(|j| forget[j] * c[j] + input[j] * candidate[j])
            .collect();
        let h_new = (0..LSTM_HIDDEN).map(|j| output[j] * c_new[j].tanh()).collect();
        Ok(StepTrace {
            z,
            forget,
            input,
            output,
            candidate,
            c_prev: c.to_vec(),
            c: c_new,
            h: h_new,
        })
    }

    /// Runs the network over a path of at least two states.
    pub fn forward(&self, store: &ParamStore, seq: &PathSequence<'_>) -> Result<PathTrace> {
        let n = seq.features.len();
        if n < 2 || seq.steps.len() != n - 1 {
            return Err(Error::shape(
                "path_score",
                "at least two states and one step per edge",
                format!("{n} states, {} steps", seq.steps.len()),
            ));
        }
        let mut visual_pre = Vec::with_capacity(n);
        let mut visual = Vec::with_capacity(n);
        for f in &seq.features {
            let (pre, out) = self.visual_transform(store, f)?;
            visual_pre.push(pre);
            visual.push(out);
        }
        let mut h = vec![0.0; LSTM_HIDDEN];
        let mut c = vec![0.0; LSTM_HIDDEN];
        let mut step_in = Vec::with_capacity(n - 1);
        let mut step_pre = Vec::with_capacity(n - 1);
        let mut cells = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let x = Self::step_input(&visual[k], &visual[k + 1], seq.steps[k]);
            let pre = self.step.forward(store, &x)?;
            let y: Vec<f64> = pre.iter().map(|&v| relu(v)).collect();
            let cell = self.lstm_step(store, &h, &c, &y)?;
            h.clone_from(&cell.h);
            c.clone_from(&cell.c);
            step_in.push(x);
            step_pre.push(pre);
            cells.push(cell);
        }
        let score = self.head.forward(store, &h)?[0];
        if !score.is_finite() {
            return Err(Error::NonFinite("path score".into()));
        }
        Ok(PathTrace {
            visual_pre,
            visual,
            step_in,
            step_pre,
            cells,
            score,
        })
    }

    pub fn score(&self, store: &ParamStore, seq: &PathSequence<'_>) -> Result<f64> {
        Ok(self.forward(store, seq)?.score)
    }

    /// Backpropagation through time; accumulates `∂L/∂θ` given `∂L/∂score`.
    pub fn backward(&self, store: &mut ParamStore, seq: &PathSequence<'_>, trace: &PathTrace, d_score: f64) {
        let n = seq.features.len();
        let last = &trace.cells[n - 2].h;
        let mut dh = self.head.backward(store, last, &[d_score]);
        let mut dc = vec![0.0; LSTM_HIDDEN];
        let mut d_visual = vec![vec![0.0; LSTM_HIDDEN]; n];
        for k in (0..n - 1).rev() {
            let cell = &trace.cells[k];
            let mut d_f = vec![0.0; LSTM_HIDDEN];
            let mut d_i = vec![0.0; LSTM_HIDDEN];
            let mut d_o = vec![0.0; LSTM_HIDDEN];
            let mut d_g = vec![0.0; LSTM_HIDDEN];
            for j in 0..LSTM_HIDDEN {
                let tc = cell.c[j].tanh();
                let o = cell.output[j];
                d_o[j] = dh[j] * tc * o * (1.0 - o);
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                let (f, i, g) = (cell.forget[j], cell.input[j], cell.candidate[j]);
                d_f[j] = dcj * cell.c_prev[j] * f * (1.0 - f);
                d_i[j] = dcj * g * i * (1.0 - i);
                d_g[j] = dcj * i * (1.0 - g * g);
                dc[j] = dcj * f;
            }
            let mut dz = vec![0.0; GATE_INPUT];
            for (layer, d) in [(&self.forget, &d_f), (&self.input, &d_i), (&self.output, &d_o), (&self.cell, &d_g)] {
                for (acc, v) in dz.iter_mut().zip(layer.backward(store, &cell.z, d)) {
                    *acc += v;
                }
            }
            dh = dz[..LSTM_HIDDEN].to_vec();
            let d_pre: Vec<f64> = dz[LSTM_HIDDEN..]
                .iter()
                .zip(&trace.step_pre[k])
                .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                .collect();
            let dx = self.step.backward(store, &trace.step_in[k], &d_pre);
            for j in 0..LSTM_HIDDEN {
                let diff = trace.visual[k][j] - trace.visual[k + 1][j];
                let g = dx[j] * diff.signum() * f64::from(u8::from(diff != 0.0));
                d_visual[k][j] += g;
                d_visual[k + 1][j] -= g;
            }
        }
        for (k, dv) in d_visual.iter().enumerate() {
            let d_pre: Vec<f64> = dv
                .iter()
                .zip(&trace.visual_pre[k])
                .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                .collect();
            self.visual.backward(store, seq.features[k], &d_pre);
        }
    }
}

/// Builds the LSTM input for a time-ordered list of states.
pub fn path_sequence<'a>(ds: &'a Dataset, norm: &Normalizer, states: &[StateIx]) -> Result<PathSequence<'a>> {
    let mut steps = Vec::with_capacity(states.len().saturating_sub(1));
    for w in states.windows(2) {
        let (a, b) = (ds.state(w[0]), ds.state(w[1]));
        let dd = ds.camera_distance(a.camera, b.camera)?;
        let [dt, dd] = norm.apply(b.timestamp - a.timestamp, dd);
        steps.push([dd, dt]);
    }
    Ok(PathSequence {
        features: states.iter().map(|&ix| ds.state(ix).appearance.as_slice()).collect(),
        steps,
    })
}

/// Path validity score of a proposal.
pub fn path_score(lstm: &PathLstm, store: &ParamStore, ds: &Dataset, norm: &Normalizer, prop: &PathProposal) -> Result<f64> {
    lstm.score(store, &path_sequence(ds, norm, &prop.states)?)
}

/// Siamese score plus the path score when a feasible proposal exists.
pub fn final_similarity(siamese: f64, path_score: Option<f64>) -> f64 {
    siamese + path_score.unwrap_or(0.0)
}

/// `ψ` of the Siamese network on the time-ordered pair.
pub fn siamese_pair_score(
    net: &PotentialNet,
    store: &ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    x: StateIx,
    y: StateIx,
) -> Result<f64> {
    let (a, b) = time_order(ds, x, y);
    let (sa, sb) = (ds.state(a), ds.state(b));
    let st = norm.apply(sb.timestamp - sa.timestamp, ds.camera_distance(sa.camera, sb.camera)?);
    Ok(net.forward(store, &sa.appearance, &sb.appearance, st)?.psi)
}

/// A labelled pair with its frozen proposal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledProposal {
    pub a: StateIx,
    pub b: StateIx,
    pub label: bool,
    pub proposal: Option<PathProposal>,
}

/// Proposals over the domain of `split` for every sample, computed once.
pub fn label_proposals<P: PairPotential>(
    ds: &Dataset,
    split: Split,
    catalog: &PathCatalog,
    potential: &P,
    samples: &[PairSample],
    threads: usize,
) -> Result<Vec<LabeledProposal>> {
    let engine = ProposalEngine::new(PsiMatrixCache::new(potential, ds, split), catalog);
    let pairs: Vec<(StateIx, StateIx)> = samples.iter().map(|s| time_order(ds, s.a, s.b)).collect();
    let proposals = engine.batch_propose(&pairs, threads)?;
    Ok(samples
        .iter()
        .zip(pairs)
        .zip(proposals)
        .map(|((s, (a, b)), proposal)| LabeledProposal {
            a,
            b,
            label: s.label,
            proposal,
        })
        .collect())
}

fn label_value(label: bool) -> f64 {
    if label {
        1.0
    } else {
        0.0
    }
}

/// Mean BCE of `sigmoid(path_score)` over feasible proposals.
pub fn path_loss(
    lstm: &PathLstm,
    store: &mut ParamStore,
    data: &[(PathSequence<'_>, bool)],
    accumulate: bool,
) -> Result<f64> {
    let n = data.len() as f64;
    let mut total = 0.0;
    for (seq, label) in data {
        let trace = lstm.forward(store, seq)?;
        let (loss, d) = bce_with_logit(trace.score, label_value(*label));
        total += loss;
        if accumulate {
            lstm.backward(store, seq, &trace, d / n);
        }
    }
    Ok(total / n)
}

fn feasible_sequences<'a>(
    ds: &'a Dataset,
    norm: &Normalizer,
    data: &[LabeledProposal],
) -> Result<Vec<(PathSequence<'a>, bool)>> {
    data.iter()
        .filter_map(|d| d.proposal.as_ref().map(|p| (p, d.label)))
        .map(|(p, label)| Ok((path_sequence(ds, norm, &p.states)?, label)))
        .collect()
}

/// Adam pretraining on binary cross-entropy of `sigmoid(path_score)`.
/// Infeasible proposals are skipped.
pub fn train_path_lstm(
    lstm: &PathLstm,
    store: &mut ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    data: &[LabeledProposal],
    cfg: &LstmConfig,
    seed: u64,
) -> Result<TrainLog> {
    let seqs = feasible_sequences(ds, norm, data)?;
    if seqs.is_empty() {
        return Err(Error::Dataset("no feasible proposals to train the path scorer".into()));
    }
    let mut rng = seeded_rng(seed);
    let initial_loss = path_loss(lstm, store, &seqs, false)?;
    let mut log = TrainLog {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<(PathSequence<'_>, bool)> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            store.zero_grads();
            let loss = path_loss(lstm, store, &batch, true)?;
            if !loss.is_finite() {
                return Err(divergence(store, epoch, loss));
            }
            adam_step(store, &cfg.adam).map_err(|_| divergence(store, epoch, loss))?;
        }
        let loss = path_loss(lstm, store, &seqs, false)?;
        if !loss.is_finite() {
            return Err(divergence(store, epoch, loss));
        }
        tracing::debug!(epoch, loss, "path-lstm epoch");
        log.epochs.push(EpochLog { epoch, loss });
    }
    Ok(log)
}

/// Joint objective: mean BCE of `sigmoid(ψ_siamese + path_score)`, or of
/// `sigmoid(ψ_siamese)` alone when the proposal is infeasible.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    siamese: &PotentialNet,
    lstm: &PathLstm,
    store: &mut ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    data: &[LabeledProposal],
    accumulate: bool,
) -> Result<f64> {
    let n = data.len() as f64;
    let mut total = 0.0;
    for d in data {
        let (sa, sb) = (ds.state(d.a), ds.state(d.b));
        let st = norm.apply(sb.timestamp - sa.timestamp, ds.camera_distance(sa.camera, sb.camera)?);
        let pair = siamese.forward(store, &sa.appearance, &sb.appearance, st)?;
        let path = match &d.proposal {
            Some(p) => {
                let seq = path_sequence(ds, norm, &p.states)?;
                let trace = lstm.forward(store, &seq)?;
                Some((seq, trace))
            }
            None => None,
        };
        let logit = final_similarity(pair.psi, path.as_ref().map(|(_, t)| t.score));
        let (loss, dlogit) = bce_with_logit(logit, label_value(d.label));
        total += loss;
        if accumulate {
            let g = dlogit / n;
            siamese.backward_psi(store, &pair, &sa.appearance, &sb.appearance, g);
            if let Some((seq, trace)) = &path {
                lstm.backward(store, seq, trace, g);
            }
        }
    }
    Ok(total / n)
}

/// End-to-end SGD of the Siamese network and the Path-LSTM sharing one store.
/// Proposals stay as given.
#[allow(clippy::too_many_arguments)]
pub fn finetune_joint(
    siamese: &PotentialNet,
    lstm: &PathLstm,
    store: &mut ParamStore,
    ds: &Dataset,
    norm: &Normalizer,
    data: &[LabeledProposal],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no finetuning samples".into()));
    }
    let mut rng = seeded_rng(seed);
    let initial_loss = joint_loss(siamese, lstm, store, ds, norm, data, false)?;
    let mut log = TrainLog {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<LabeledProposal> = chunk.iter().map(|&i| data[i].clone()).collect();
            store.zero_grads();
            let loss = joint_loss(siamese, lstm, store, ds, norm, &batch, true)?;
            if !loss.is_finite() {
                return Err(divergence(store, epoch, loss));
            }
            sgd_step(store, cfg.lr).map_err(|_| divergence(store, epoch, loss))?;
        }
        let loss = joint_loss(siamese, lstm, store, ds, norm, data, false)?;
        if !loss.is_finite() {
            return Err(divergence(store, epoch, loss));
        }
        tracing::debug!(epoch, loss, "joint finetune epoch");
        log.epochs.push(EpochLog { epoch, loss });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, DEFAULT_GRAD_CHECK_EPS};
    use crate::potential::PotentialConfig;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    const D: usize = 4;

    fn fresh(seed: u64) -> (PathLstm, ParamStore) {
        let mut store = ParamStore::new();
        let lstm = PathLstm::init(&mut store, D, &mut seeded_rng(seed)).unwrap();
        (lstm, store)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
    }

    fn random_features(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (0..D).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn sequence(features: &[Vec<f64>]) -> PathSequence<'_> {
        PathSequence {
            features: features.iter().map(Vec::as_slice).collect(),
            steps: (1..features.len()).map(|k| [0.3 * k as f64, 0.2 + 0.1 * k as f64]).collect(),
        }
    }

    #[test]
    fn checkpoint_names() {
        let (_, store) = fresh(0);
        let names: Vec<&str> = store.ids().map(|id| store.name(id)).collect();
        for n in NAMES {
            assert!(names.contains(&format!("{n}.w").as_str()), "{n}");
        }
        assert!(names.iter().all(|n| n.starts_with("lstm.")));
        assert!(PathLstm::bind(&store).is_ok());
    }

    #[test]
    fn identical_states_see_only_the_step_bias() {
        let (lstm, mut store) = fresh(1);
        let a = random_features(1, 2).remove(0);
        let y = lstm.step_features(&store, &a, &a, [0.0, 0.0]).unwrap();
        let want: Vec<f64> = store.value(lstm.step.bias).data().iter().map(|&b| relu(b)).collect();
        assert_eq!(y, want);
        zero_all(&mut store);
        let b = random_features(1, 3).remove(0);
        assert!(lstm.step_features(&store, &a, &b, [0.4, 0.9]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_features_are_symmetric() {
        let (lstm, store) = fresh(4);
        let f = random_features(2, 5);
        let ab = lstm.step_features(&store, &f[0], &f[1], [0.5, 0.5]).unwrap();
        let ba = lstm.step_features(&store, &f[1], &f[0], [0.5, 0.5]).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn zero_parameters_give_half_gates_and_zero_state() {
        let (lstm, mut store) = fresh(6);
        zero_all(&mut store);
        let y = vec![0.7; LSTM_HIDDEN];
        let t = lstm.lstm_step(&store, &vec![0.0; LSTM_HIDDEN], &vec![0.0; LSTM_HIDDEN], &y).unwrap();
        assert!(t.forget.iter().chain(&t.input).chain(&t.output).all(|&g| g == 0.5));
        assert!(t.c.iter().chain(&t.h).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_and_closed_input_keep_the_cell() {
        let (lstm, mut store) = fresh(7);
        zero_all(&mut store);
        store.value_mut(lstm.forget.bias).fill(60.0);
        store.value_mut(lstm.input.bias).fill(-60.0);
        let c: Vec<f64> = (0..LSTM_HIDDEN).map(|j| j as f64 / 10.0 - 1.0).collect();
        let t = lstm.lstm_step(&store, &vec![0.1; LSTM_HIDDEN], &c, &vec![0.3; LSTM_HIDDEN]).unwrap();
        for (a, b) in t.c.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_rejects_bad_shapes() {
        let (lstm, store) = fresh(8);
        assert!(lstm.lstm_step(&store, &[0.0; 3], &[0.0; LSTM_HIDDEN], &[0.0; LSTM_HIDDEN]).is_err());
        let mut h = vec![0.0; LSTM_HIDDEN];
        h[0] = f64::NAN;
        assert!(lstm.lstm_step(&store, &h, &[0.0; LSTM_HIDDEN], &[0.0; LSTM_HIDDEN]).is_err());
    }

    #[test]
    fn zero_parameters_score_the_head_bias() {
        let (lstm, mut store) = fresh(9);
        zero_all(&mut store);
        store.value_mut(lstm.head.bias).data_mut()[0] = -0.25;
        let f = random_features(2, 1);
        assert_eq!(lstm.score(&store, &sequence(&f)).unwrap(), -0.25);
    }

    #[test]
    fn single_step_paths_are_allowed() {
        let (lstm, store) = fresh(10);
        let f = random_features(2, 2);
        let t = lstm.forward(&store, &sequence(&f)).unwrap();
        assert_eq!(t.cells.len(), 1);
        let f = random_features(1, 2);
        assert!(lstm.forward(&store, &sequence(&f)).is_err());
    }

    #[test]
    fn final_similarity_fallback_and_additivity() {
        assert_eq!(final_similarity(0.4, None), 0.4);
        assert_eq!(final_similarity(0.4, Some(0.0)), 0.4);
        assert_eq!(final_similarity(0.4, Some(1.5)) + 0.5, final_similarity(0.4, Some(2.0)));
    }

    #[test]
    fn five_step_gradient_matches_finite_differences() {
        let (lstm, mut store) = fresh(11);
        let f = random_features(6, 12);
        let seq = sequence(&f);
        let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
            let t = lstm.forward(s, &seq)?;
            // a nonlinear objective so that the head gradient is not trivial
            let (loss, d) = bce_with_logit(t.score, 1.0);
            lstm.backward(s, &seq, &t, d);
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn path_loss_at_zero_score_is_ln_two() {
        let (lstm, mut store) = fresh(13);
        zero_all(&mut store);
        let f = random_features(3, 1);
        let data = vec![(sequence(&f), true), (sequence(&f), false)];
        let loss = path_loss(&lstm, &mut store, &data, false).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn adam_overfits_ten_paths() {
        let (lstm, mut store) = fresh(14);
        let feats: Vec<Vec<Vec<f64>>> = (0..10).map(|i| random_features(3 + i % 3, 100 + i as u64)).collect();
        let data: Vec<(PathSequence<'_>, bool)> = feats.iter().enumerate().map(|(i, f)| (sequence(f), i % 2 == 0)).collect();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        for _ in 0..300 {
            store.zero_grads();
            path_loss(&lstm, &mut store, &data, true).unwrap();
            adam_step(&mut store, &cfg).unwrap();
        }
        assert!(path_loss(&lstm, &mut store, &data, false).unwrap() < 0.1);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        use crate::network::{Camera, CameraId, DatasetMeta, SplitLists, StateId, VehicleId, VstState};
        let feats = random_features(6, 40);
        let states: Vec<VstState> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| VstState {
                id: StateId(i as u64),
                camera: CameraId(i as u32 % 3),
                timestamp: 10.0 * i as f64,
                appearance: f.clone(),
                vehicle: Some(VehicleId(i as u64 % 2)),
            })
            .collect();
        let cams = (0..3)
            .map(|i| Camera {
                id: CameraId(i),
                location: [100.0 * f64::from(i), 50.0],
            })
            .collect();
        let meta = DatasetMeta {
            feature_dim: D,
            splits: SplitLists {
                train: (0..6).map(StateId).collect(),
                test: vec![],
                query: vec![],
            },
            roads: vec![],
            provenance: None,
        };
        let ds = Dataset::new(cams, states, meta).unwrap();
        let norm = Normalizer::from_dataset(&ds);
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(41);
        let pcfg = PotentialConfig {
            embed_dim: 5,
            hidden: 4,
            ..PotentialConfig::default()
        };
        let siamese = PotentialNet::init(&mut store, "siamese", D, &pcfg, &mut rng).unwrap();
        let lstm = PathLstm::init(&mut store, D, &mut rng).unwrap();
        let prop = |states: Vec<StateIx>| {
            Some(PathProposal {
                path: crate::network::SpatialPath::new(states.iter().map(|&s| ds.state(s).camera).collect()).unwrap(),
                edge_psi: vec![0.5; states.len() - 1],
                log_value: 0.0,
                score: 0.5,
                states,
            })
        };
        let data = vec![
            LabeledProposal { a: 0, b: 5, label: true, proposal: prop(vec![0, 1, 2, 3, 4, 5]) },
            LabeledProposal { a: 1, b: 3, label: false, proposal: prop(vec![1, 2, 3]) },
            LabeledProposal { a: 2, b: 4, label: false, proposal: None },
        ];
        let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
            joint_loss(&siamese, &lstm, s, &ds, &norm, &data, true)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let before: Vec<f64> = store.ids().flat_map(|id| store.value(id).data().to_vec()).collect();
        let cfg = FinetuneConfig { epochs: 2, batch: 2, lr: 0.0 };
        finetune_joint(&siamese, &lstm, &mut store, &ds, &norm, &data, &cfg, 1).unwrap();
        let after: Vec<f64> = store.ids().flat_map(|id| store.value(id).data().to_vec()).collect();
        assert_eq!(before, after);
    }

    proptest! {
        #[test]
        fn gates_stay_in_the_open_unit_interval(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let (lstm, store) = fresh(seed);
            let mut rng = seeded_rng(seed ^ 0xabc);
            let v = |rng: &mut crate::numeric::Rng| -> Vec<f64> {
                (0..LSTM_HIDDEN).map(|_| { let z: f64 = StandardNormal.sample(rng); 0.1 * scale * z }).collect()
            };
            let (h, c, y) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let t = lstm.lstm_step(&store, &h, &c, &y).unwrap();
            for g in t.forget.iter().chain(&t.input).chain(&t.output) {
                prop_assert!(*g >= 0.0 && *g <= 1.0);
            }
            for j in 0..LSTM_HIDDEN {
                prop_assert!(t.c[j].abs() <= t.c_prev[j].abs() + 1.0);
                prop_assert!(t.candidate[j].abs() <= 1.0);
                prop_assert!(t.h[j].abs() < 1.0);
            }
        }

        #[test]
        fn cell_grows_at_most_one_per_step(seed in 0u64..500, n in 2usize..8) {
            let (lstm, store) = fresh(seed);
            let f = random_features(n, seed + 1);
            let t = lstm.forward(&store, &sequence(&f)).unwrap();
            for (k, cell) in t.cells.iter().enumerate() {
                prop_assert!(cell.c.iter().all(|c| c.abs() <= (k + 1) as f64));
            }
        }
    }
}
