//! Learnable parameters and the forward pass.
//!
//! All parameters live in one contiguous buffer laid out in a fixed order
//! (see [`Group`]): user table, item table, hidden weights, hidden bias,
//! output weights, output bias. Each tensor is stored row-major, so the
//! embedding of user `u` is column `u` of the `d × users` user table.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameter tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// `W_user`, `d × users`.
    UserEmbedding,
    /// `W_item`, `d × items`.
    ItemEmbedding,
    /// `W_l1`, `h × 2d`.
    HiddenWeights,
    /// `b_l1`, length `h`.
    HiddenBias,
    /// `w_l2`, length `h`.
    OutputWeights,
    /// `b_l2`, scalar.
    OutputBias,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::UserEmbedding,
        Group::ItemEmbedding,
        Group::HiddenWeights,
        Group::HiddenBias,
        Group::OutputWeights,
        Group::OutputBias,
    ];

    /// Tensor name used in model files.
    pub fn name(self) -> &'static str {
        match self {
            Group::UserEmbedding => "W_user",
            Group::ItemEmbedding => "W_item",
            Group::HiddenWeights => "W_l1",
            Group::HiddenBias => "b_l1",
            Group::OutputWeights => "w_l2",
            Group::OutputBias => "b_l2",
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Group::HiddenBias | Group::OutputBias)
    }
}

/// Dimensions of a model, and with them the offsets of every tensor in the
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub h: usize,
    pub users: usize,
    pub items: usize,
}

impl Layout {
    pub fn new(d: usize, h: usize, users: usize, items: usize) -> Result<Self> {
        if d == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension and hidden width must be >= 1 (got d={d}, h={h})"
            )));
        }
        if users == 0 || items == 0 {
            return Err(Error::InvalidArgument(format!(
                "user and item counts must be >= 1 (got {users}, {items})"
            )));
        }
        Ok(Layout { d, h, users, items })
    }

    /// `(rows, cols)` of a tensor.
    pub fn shape(&self, group: Group) -> (usize, usize) {
        match group {
            Group::UserEmbedding => (self.d, self.users),
            Group::ItemEmbedding => (self.d, self.items),
            Group::HiddenWeights => (self.h, 2 * self.d),
            Group::HiddenBias | Group::OutputWeights => (1, self.h),
            Group::OutputBias => (1, 1),
        }
    }

    pub fn size(&self, group: Group) -> usize {
        let (r, c) = self.shape(group);
        r * c
    }

    pub fn offset(&self, group: Group) -> usize {
        Group::ALL
            .iter()
            .take_while(|&&g| g != group)
            .map(|&g| self.size(g))
            .sum()
    }

    pub fn range(&self, group: Group) -> Range<usize> {
        let start = self.offset(group);
        start..start + self.size(group)
    }

    /// `d·users + d·items + h·2d + h + h + 1`.
    pub fn len(&self) -> usize {
        Group::ALL.iter().map(|&g| self.size(g)).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinates of the two bias tensors, which are excluded from L2.
    pub fn bias_ranges(&self) -> [Range<usize>; 2] {
        [self.range(Group::HiddenBias), self.range(Group::OutputBias)]
    }
}

/// Training and architecture knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Embedding dimension.
    pub d: usize,
    /// Hidden layer width.
    pub h: usize,
    /// L2 weight on all non-bias parameters.
    pub lambda: f64,
    /// Half-width of the uniform init interval; `None` uses `1/√fan_in` per
    /// tensor (fan-in 1 for the lookup tables).
    pub init_scale: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lbfgs_history: usize,
    pub lbfgs_inner_iters: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    /// Keep both biases at zero.
    pub freeze_biases: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d: 24,
            h: 40,
            lambda: 1e-4,
            init_scale: None,
            seed: 42,
            batch_size: 10_000,
            epochs: 100,
            lbfgs_history: 10,
            lbfgs_inner_iters: 4,
            patience: 5,
            freeze_biases: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 || self.h == 0 {
            return bad(format!("d and h must be >= 1 (got {}, {})", self.d, self.h));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("init_scale must be > 0, got {s}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lbfgs_history", self.lbfgs_history),
            ("lbfgs_inner_iters", self.lbfgs_inner_iters),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }
}

/// All learnable tensors of one model, stored flat in [`Group`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    k_max: f64,
    values: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(layout: Layout, k_max: f64) -> Result<Self> {
        Self::from_values(layout, k_max, vec![0.0; layout.len()])
    }

    pub fn from_values(layout: Layout, k_max: f64, values: Vec<f64>) -> Result<Self> {
        if !(k_max > 0.0 && k_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("k_max must be > 0, got {k_max}")));
        }
        if values.len() != layout.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: layout.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {pos}")));
        }
        Ok(ModelParams {
            layout,
            k_max,
            values,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn group(&self, group: Group) -> &[f64] {
        &self.values[self.layout.range(group)]
    }

    pub fn group_mut(&mut self, group: Group) -> &mut [f64] {
        let r = self.layout.range(group);
        &mut self.values[r]
    }

    pub fn output_bias(&self) -> f64 {
        self.values[self.layout.offset(Group::OutputBias)]
    }

    /// Column `user` of the user table.
    pub fn user_embedding(&self, user: usize) -> Result<Vec<f64>> {
        self.check_user(user)?;
        Ok(self.column(Group::UserEmbedding, user))
    }

    pub fn item_embedding(&self, item: usize) -> Result<Vec<f64>> {
        self.check_item(item)?;
        Ok(self.column(Group::ItemEmbedding, item))
    }

    fn column(&self, group: Group, col: usize) -> Vec<f64> {
        let (rows, cols) = self.layout.shape(group);
        let base = &self.values[self.layout.range(group)];
        (0..rows).map(|r| base[r * cols + col]).collect()
    }

    pub(crate) fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.layout.users {
            return Err(Error::IndexOutOfBounds {
                kind: "user",
                index: user,
                size: self.layout.users,
            });
        }
        Ok(())
    }

    pub(crate) fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.layout.items {
            return Err(Error::IndexOutOfBounds {
                kind: "item",
                index: item,
                size: self.layout.items,
            });
        }
        Ok(())
    }

    /// Writes `[user column ; item column]` into `x` (length `2d`). Indices
    /// must already be checked.
    pub(crate) fn concat_into(&self, user: usize, item: usize, x: &mut [f64]) {
        let l = &self.layout;
        let d = l.d;
        let ut = &self.values[l.range(Group::UserEmbedding)];
        let it = &self.values[l.range(Group::ItemEmbedding)];
        for r in 0..d {
            x[r] = ut[r * l.users + user];
            x[d + r] = it[r * l.items + item];
        }
    }

    /// Forward pass into preallocated buffers; returns `p`. Indices must
    /// already be checked.
    pub(crate) fn forward_into(
        &self,
        user: usize,
        item: usize,
        x: &mut [f64],
        a1: &mut [f64],
    ) -> f64 {
        self.concat_into(user, item, x);
        let l = &self.layout;
        let w1 = &self.values[l.range(Group::HiddenWeights)];
        let b1 = &self.values[l.range(Group::HiddenBias)];
        let w2 = &self.values[l.range(Group::OutputWeights)];
        let two_d = 2 * l.d;
        let mut z2 = self.output_bias();
        for j in 0..l.h {
            let row = &w1[j * two_d..(j + 1) * two_d];
            let z1 = b1[j] + dot(row, x);
            a1[j] = z1.tanh();
            z2 += w2[j] * a1[j];
        }
        sigmoid(z2)
    }
}

/// Dot product with four interleaved accumulators (fixed order, so still
/// deterministic).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Draws every weight uniformly from `[-s, s]` (per-tensor `s`, see
/// [`Hyperparams::init_scale`]) with a generator seeded by `hp.seed`.
/// Biases start at zero.
pub fn init_params(
    user_count: usize,
    item_count: usize,
    k_max: f64,
    hp: &Hyperparams,
) -> Result<ModelParams> {
    hp.validate()?;
    let layout = Layout::new(hp.d, hp.h, user_count, item_count)?;
    let mut params = ModelParams::zeros(layout, k_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    for group in Group::ALL {
        if group.is_bias() {
            continue;
        }
        let fan_in = match group {
            Group::UserEmbedding | Group::ItemEmbedding => 1,
            Group::HiddenWeights => 2 * hp.d,
            _ => hp.h,
        };
        let scale = hp.init_scale.unwrap_or(1.0 / (fan_in as f64).sqrt());
        for v in params.group_mut(group) {
            *v = rng.random_range(-scale..=scale);
        }
    }
    Ok(params)
}

/// Concatenated input `[W_user[:, user] ; W_item[:, item]]`.
pub fn lookup_concat(params: &ModelParams, user: usize, item: usize) -> Result<Vec<f64>> {
    params.check_user(user)?;
    params.check_item(item)?;
    let mut x = vec![0.0; 2 * params.layout.d];
    params.concat_into(user, item, &mut x);
    Ok(x)
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: f64,
    pub p: f64,
}

/// `z1 = W_l1·x + b_l1`, `a1 = tanh(z1)`, `z2 = w_l2·a1 + b_l2`,
/// `p = sigmoid(z2)`.
pub fn forward(params: &ModelParams, user: usize, item: usize) -> Result<ForwardTrace> {
    let x = lookup_concat(params, user, item)?;
    let l = params.layout;
    let w1 = params.group(Group::HiddenWeights);
    let b1 = params.group(Group::HiddenBias);
    let w2 = params.group(Group::OutputWeights);
    let z1: Vec<f64> = (0..l.h)
        .map(|j| b1[j] + dot(&w1[j * 2 * l.d..(j + 1) * 2 * l.d], &x))
        .collect();
    let a1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
    let z2 = params.output_bias() + dot(w2, &a1);
    Ok(ForwardTrace {
        x,
        z1,
        a1,
        z2,
        p: sigmoid(z2),
    })
}

/// `k_max · p`, a rating on the original scale.
pub fn predict_rating(params: &ModelParams, user: usize, item: usize) -> Result<f64> {
    params.check_user(user)?;
    params.check_item(item)?;
    Ok(predict_unchecked(params, user, item))
}

pub(crate) fn predict_unchecked(params: &ModelParams, user: usize, item: usize) -> f64 {
    let l = params.layout;
    let mut x = vec![0.0; 2 * l.d];
    let mut a1 = vec![0.0; l.h];
    params.k_max * params.forward_into(user, item, &mut x, &mut a1)
}
