//! Regularized squared-error objective and its backpropagated gradient.
//!
//! ```text
//! J(θ) = (1/n) Σ ½ (p_n − ỹ_n)² + λ ‖θ‖²      (biases excluded from ‖θ‖²)
//! ```
//!
//! Examples are processed in fixed-size chunks. Chunks may run on any number
//! of threads, but partial sums are always combined in chunk order and the
//! embedding scatter-adds are applied in example order, so results are
//! bitwise identical for every thread count.

use rayon::prelude::*;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{Group, Layout, ModelParams};

const CHUNK: usize = 256;
const CHUNKS_PER_ROUND: usize = 64;

/// Flattened parameter (or gradient) vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatView {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl FlatView {
    pub fn group(&self, group: Group) -> &[f64] {
        &self.values[self.layout.range(group)]
    }
}

pub fn flatten(params: &ModelParams) -> FlatView {
    FlatView {
        values: params.values().to_vec(),
        layout: *params.layout(),
    }
}

pub fn unflatten(view: FlatView, k_max: f64) -> Result<ModelParams> {
    ModelParams::from_values(view.layout, k_max, view.values)
}

/// One training example with its target already on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Batch { examples })
    }

    /// All of `dataset`'s ratings with targets divided by its `k_max`.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        Self::new(
            dataset
                .triplets
                .iter()
                .map(|r| Example {
                    user: r.user,
                    item: r.item,
                    target: r.y / dataset.k_max,
                })
                .collect(),
        )
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        for e in &self.examples {
            params.check_user(e.user)?;
            params.check_item(e.item)?;
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `Σ θ²` over every non-bias coordinate.
fn weight_norm_sq(params: &ModelParams) -> f64 {
    let layout = params.layout();
    Group::ALL
        .iter()
        .filter(|g| !g.is_bias())
        .flat_map(|&g| params.values()[layout.range(g)].iter())
        .map(|v| v * v)
        .sum()
}

/// Sum of squared-error halves over one chunk, in example order.
fn chunk_loss(params: &ModelParams, chunk: &[Example]) -> f64 {
    let l = params.layout();
    let mut x = vec![0.0; 2 * l.d];
    let mut a1 = vec![0.0; l.h];
    let mut loss = 0.0;
    for e in chunk {
        let r = params.forward_into(e.user, e.item, &mut x, &mut a1) - e.target;
        loss += 0.5 * r * r;
    }
    loss
}

pub fn objective(params: &ModelParams, batch: &Batch, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    batch.check(params)?;
    let partials: Vec<f64> = batch
        .examples
        .par_chunks(CHUNK)
        .map(|c| chunk_loss(params, c))
        .collect();
    let loss: f64 = partials.iter().sum();
    Ok(loss / batch.len() as f64 + lambda * weight_norm_sq(params))
}

struct ChunkGrad {
    loss: f64,
    /// Gradient of the dense tail (`W_l1`, `b_l1`, `w_l2`, `b_l2`).
    dense: Vec<f64>,
    /// `∂/∂x` per example, `2d` values each.
    dx: Vec<f64>,
}

fn chunk_grad(params: &ModelParams, chunk: &[Example]) -> ChunkGrad {
    let l = params.layout();
    let (d, h) = (l.d, l.h);
    let two_d = 2 * d;
    let tail = l.offset(Group::HiddenWeights);
    let w1 = params.group(Group::HiddenWeights);
    let w2 = params.group(Group::OutputWeights);
    // offsets inside the dense tail
    let o_b1 = h * two_d;
    let o_w2 = o_b1 + h;
    let o_b2 = o_w2 + h;

    let mut out = ChunkGrad {
        loss: 0.0,
        dense: vec![0.0; l.len() - tail],
        dx: vec![0.0; chunk.len() * two_d],
    };
    let mut x = vec![0.0; two_d];
    let mut a1 = vec![0.0; h];
    for (n, e) in chunk.iter().enumerate() {
        let p = params.forward_into(e.user, e.item, &mut x, &mut a1);
        let r = p - e.target;
        out.loss += 0.5 * r * r;
        let delta2 = r * p * (1.0 - p);
        out.dense[o_b2] += delta2;
        let dx = &mut out.dx[n * two_d..(n + 1) * two_d];
        for j in 0..h {
            out.dense[o_w2 + j] += delta2 * a1[j];
            let delta1 = w2[j] * delta2 * (1.0 - a1[j] * a1[j]);
            out.dense[o_b1 + j] += delta1;
            let row = &w1[j * two_d..(j + 1) * two_d];
            let grow = &mut out.dense[j * two_d..(j + 1) * two_d];
            for (gk, xk) in grow.iter_mut().zip(&x) {
                *gk += delta1 * xk;
            }
            for (dk, wk) in dx.iter_mut().zip(row) {
                *dk += delta1 * wk;
            }
        }
    }
    out
}

/// Objective value and its exact gradient in one pass.
pub fn value_and_gradient(params: &ModelParams, batch: &Batch, lambda: f64) -> Result<(f64, FlatView)> {
    check_lambda(lambda)?;
    batch.check(params)?;
    let l = *params.layout();
    let d = l.d;
    let tail = l.offset(Group::HiddenWeights);
    let user_off = l.offset(Group::UserEmbedding);
    let item_off = l.offset(Group::ItemEmbedding);

    let mut grad = vec![0.0; l.len()];
    let mut loss = 0.0;
    let chunks: Vec<&[Example]> = batch.examples.chunks(CHUNK).collect();
    for round in chunks.chunks(CHUNKS_PER_ROUND) {
        let partials: Vec<ChunkGrad> = round.par_iter().map(|c| chunk_grad(params, c)).collect();
        for (chunk, part) in round.iter().zip(partials) {
            loss += part.loss;
            for (g, v) in grad[tail..].iter_mut().zip(&part.dense) {
                *g += v;
            }
            for (e, dx) in chunk.iter().zip(part.dx.chunks_exact(2 * d)) {
                for r in 0..d {
                    grad[user_off + r * l.users + e.user] += dx[r];
                    grad[item_off + r * l.items + e.item] += dx[d + r];
                }
            }
        }
    }

    let n = batch.len() as f64;
    let values = params.values();
    let bias = l.bias_ranges();
    for (c, g) in grad.iter_mut().enumerate() {
        *g /= n;
        if !bias.iter().any(|r| r.contains(&c)) {
            *g += 2.0 * lambda * values[c];
        }
    }
    let f = loss / n + lambda * weight_norm_sq(params);
    Ok((
        f,
        FlatView {
            values: grad,
            layout: l,
        },
    ))
}

/// Backpropagated gradient of [`objective`].
pub fn gradient(params: &ModelParams, batch: &Batch, lambda: f64) -> Result<FlatView> {
    value_and_gradient(params, batch, lambda).map(|(_, g)| g)
}

/// Central finite differences of [`objective`], one coordinate at a time.
pub fn fd_gradient(params: &ModelParams, batch: &Batch, lambda: f64, epsilon: f64) -> Result<FlatView> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut out = vec![0.0; params.values().len()];
    for (c, slot) in out.iter_mut().enumerate() {
        let orig = params.values()[c];
        probe.values_mut()[c] = orig + epsilon;
        let plus = objective(&probe, batch, lambda)?;
        probe.values_mut()[c] = orig - epsilon;
        let minus = objective(&probe, batch, lambda)?;
        probe.values_mut()[c] = orig;
        *slot = (plus - minus) / (2.0 * epsilon);
    }
    Ok(FlatView {
        values: out,
        layout: *params.layout(),
    })
}

/// `max_c |a_c − b_c| / max(1, |a_c| + |b_c|)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
