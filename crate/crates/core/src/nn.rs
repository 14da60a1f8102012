//! Small helpers shared by the trainable networks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diff::{ParamStore, Tape, Var};
use crate::error::Result;

/// Glorot-uniform initial weights for a `fan_in x fan_out` matrix.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in * fan_out, limit)
}

/// `n` draws from `U(-limit, limit)`.
pub fn uniform<R: Rng>(rng: &mut R, n: usize, limit: f64) -> Vec<f64> {
    if limit == 0.0 {
        return vec![0.0; n];
    }
    let dist = Uniform::new(-limit, limit).expect("valid uniform bounds");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `x W + b` for `x: m x k`, `W: k x n`, `b: 1 x n`, loaded from segments
/// `{prefix}.w` and `{prefix}.b`.
pub fn linear(tape: &Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    Ok(tape.add_row(tape.matmul(x, w), b))
}

/// Registers `{prefix}.w` (Glorot) and `{prefix}.b` (zeros).
pub fn add_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.add(
        &format!("{prefix}.w"),
        fan_in,
        fan_out,
        &glorot(rng, fan_in, fan_out),
    );
    store.add(&format!("{prefix}.b"), 1, fan_out, &vec![0.0; fan_out]);
}
