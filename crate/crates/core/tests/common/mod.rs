#![allow(dead_code)]

pub mod oracle;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transference::eval::{apply_shift, edit_distance, MAX_SHIFT_SPAN};
use transference::model::{init_params, ModelConfig};
use transference::tensor::{NamedTensors, Tensor};

/// Miniature f64 parameters with non-trivial layer-norm gains and biases.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> NamedTensors<f64> {
    let mut p = init_params(cfg, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in p.iter_mut() {
        if name.ends_with("/gain") || name.ends_with("/bias") || name.contains("/b_") {
            let base = if name.ends_with("/gain") { 1.0 } else { 0.0 };
            *t = Tensor::from_fn(t.shape().to_vec(), |_| base + rng.random_range(-0.3..0.3))
                .unwrap();
        }
    }
    p
}

/// Minimum of (#shifts + edit distance) over every sequence of at most
/// `depth` arbitrary shifts.
pub fn exhaustive_ter(hyp: &[String], reference: &[String], depth: usize) -> usize {
    let mut best = edit_distance(hyp, reference);
    if depth == 0 {
        return best;
    }
    for from in 0..hyp.len() {
        for len in 1..=(hyp.len() - from).min(MAX_SHIFT_SPAN) {
            for to in 0..=hyp.len() - len {
                if to != from {
                    let moved = apply_shift(hyp, from, len, to);
                    best = best.min(1 + exhaustive_ter(&moved, reference, depth - 1));
                }
            }
        }
    }
    best
}
