//! Small dense linear algebra, activations, parameter storage, optimizers,
//! finite-difference gradient checking and the checkpoint format.
//!
//! Every trainable network in the crate is a fixed topology of [`Affine`]
//! layers with hand-written backward passes. Gradients accumulate into the
//! [`ParamStore`] until an optimizer step consumes and zeroes them.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_GRAD_CHECK_EPS, GRAD_CHECK_FLOOR};
pub use optim::{adam_step, adam_step_count, sgd_step, AdamConfig};
pub use params::{affine, affine_backward, Affine, ParamId, ParamStore};
pub use tensor::{dot, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide PRNG: ChaCha with 8 rounds, seeded from a `u64`.
pub type Rng = ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8";

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task from a base seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the seed through splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label ∈ {0, 1}`,
/// together with its derivative with respect to the logit.
#[inline]
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    (softplus(logit) - label * logit, sigmoid(logit) - label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(-(3f64.ln())) - 0.25).abs() < 1e-15);
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
    }

    #[test]
    fn bce_at_chance_is_ln2() {
        let (l1, _) = bce_with_logit(0.0, 1.0);
        let (l0, _) = bce_with_logit(0.0, 0.0);
        assert!((l1 - 2f64.ln()).abs() < 1e-15);
        assert!((l0 - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(x in -50.0f64..50.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn sigmoid_is_monotone(x in -30.0f64..30.0, dx in 1e-3f64..5.0) {
            prop_assert!(sigmoid(x + dx) > sigmoid(x));
        }

        #[test]
        fn affine_is_linear(
            w in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 2),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            y in proptest::collection::vec(-1.0f64..1.0, 3),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let w = Tensor::matrix(2, 3, w).unwrap();
            let b = Tensor::vector(b).unwrap();
            let zero = Tensor::zeros(&[2]);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, c)| alpha * a + beta * c).collect();
            let lhs = affine(&w, &b, &mix).unwrap();
            let fx = affine(&w, &zero, &x).unwrap();
            let fy = affine(&w, &zero, &y).unwrap();
            for r in 0..2 {
                let rhs = alpha * fx[r] + beta * fy[r] + b.data()[r];
                prop_assert!((lhs[r] - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn affine_backward_matches_finite_differences(
            w in proptest::collection::vec(-1.0f64..1.0, 6),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            dy in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            // L = dy · (W x + b)
            let mut store = ParamStore::new();
            let wid = store.insert("l.w", Tensor::matrix(2, 3, w).unwrap()).unwrap();
            store.insert("l.b", Tensor::zeros(&[2])).unwrap();
            let xid = store.insert("x", Tensor::vector(x).unwrap()).unwrap();
            let layer = Affine::bind(&store, "l", 3, 2).unwrap();
            let report = grad_check(&mut store, DEFAULT_GRAD_CHECK_EPS, |s| {
                let xv = s.value(xid).data().to_vec();
                let y = layer.forward(s, &xv)?;
                let dx = layer.backward(s, &xv, &dy);
                for (g, d) in s.grad_mut(xid).data_mut().iter_mut().zip(dx) {
                    *g += d;
                }
                Ok(dot(&y, &dy))
            }).unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
            let _ = wid;
        }
    }
}
