//! Mini-batched L-BFGS.
//!
//! Each batch gets a few L-BFGS iterations (two-loop recursion plus a strong
//! Wolfe line search on that batch's objective). Curvature history carries
//! over from batch to batch and is dropped whenever a line search fails.

use std::collections::VecDeque;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::grad::{value_and_gradient, Batch, Example};
use crate::model::{Hyperparams, ModelParams};

/// Relative threshold on `sᵀy` below which a pair is discarded.
pub const CURVATURE_FLOOR: f64 = 1e-10;
/// Halvings tried by the fallback backtracking search.
pub const MAX_HALVINGS: usize = 30;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    history: VecDeque<CurvaturePair>,
    m: usize,
    pub iter: usize,
}

impl LbfgsState {
    /// `m = 0` never stores a pair, which reduces to line-searched
    /// steepest descent.
    pub fn new(m: usize) -> Self {
        LbfgsState {
            history: VecDeque::with_capacity(m),
            m,
            iter: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Stored pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.history.iter()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Stores `(s, y)` if `sᵀy > 1e-10·‖s‖·‖y‖`, evicting the oldest pair
    /// when full. Returns whether the pair was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if self.m == 0 {
            return false;
        }
        let sy = dot(&s, &y);
        if !(sy.is_finite() && sy > CURVATURE_FLOOR * norm(&s) * norm(&y)) {
            return false;
        }
        if self.history.len() == self.m {
            self.history.pop_front();
        }
        self.history.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        true
    }
}

/// `−H·g` by the two-loop recursion, with `H₀ = γI`,
/// `γ = sᵀy / yᵀy` of the newest pair (1 with no history).
pub fn two_loop_direction(state: &LbfgsState, g: &[f64]) -> Result<Vec<f64>> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(state.len());
    for pair in state.history.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = state.history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (pair, a) in state.history.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOptions {
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_evals: usize,
    pub initial_step: f64,
    /// Growth factor while bracketing.
    pub expand: f64,
}

impl Default for LineSearchOptions {
    fn default() -> Self {
        LineSearchOptions {
            c1: 1e-4,
            c2: 0.9,
            max_evals: 20,
            initial_step: 1.0,
            expand: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    pub step: f64,
    pub f_new: f64,
    pub g_new: Vec<f64>,
    pub evals: usize,
    /// Whether the curvature condition also holds (otherwise this is the
    /// best Armijo point found before the evaluation budget ran out).
    pub strong_wolfe: bool,
}

#[derive(Clone, Copy)]
struct Probe {
    alpha: f64,
    f: f64,
    dphi: f64,
}

/// Minimizer of the cubic matching value and slope at `a` and `b`, if it
/// exists.
fn cubic_min(a: Probe, b: Probe) -> Option<f64> {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Search<'a, F> {
    objective: &'a mut F,
    x0: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    dphi0: f64,
    opts: LineSearchOptions,
    evals: usize,
    best: Option<(f64, f64, Vec<f64>)>,
    trial: Vec<f64>,
}

impl<F> Search<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, alpha: f64) -> Result<(Probe, Vec<f64>)> {
        for ((t, x), d) in self.trial.iter_mut().zip(self.x0).zip(self.dir) {
            *t = x + alpha * d;
        }
        self.evals += 1;
        let (f, g) = (self.objective)(&self.trial)?;
        let dphi = dot(&g, self.dir);
        if f.is_finite() && self.armijo(alpha, f) && self.best.as_ref().is_none_or(|b| f < b.1) {
            self.best = Some((alpha, f, g.clone()));
        }
        Ok((Probe { alpha, f, dphi }, g))
    }

    fn armijo(&self, alpha: f64, f: f64) -> bool {
        f <= self.f0 + self.opts.c1 * alpha * self.dphi0
    }

    fn curvature(&self, dphi: f64) -> bool {
        dphi.abs() <= -self.opts.c2 * self.dphi0
    }

    fn done(&self, p: Probe, g: Vec<f64>) -> LineSearchResult {
        LineSearchResult {
            step: p.alpha,
            f_new: p.f,
            g_new: g,
            evals: self.evals,
            strong_wolfe: true,
        }
    }

    fn fallback(self) -> Result<LineSearchResult> {
        match self.best {
            Some((step, f_new, g_new)) => Ok(LineSearchResult {
                step,
                f_new,
                g_new,
                evals: self.evals,
                strong_wolfe: false,
            }),
            None => Err(Error::LineSearchFailed { evals: self.evals }),
        }
    }

    /// `lo` satisfies Armijo and has the lowest value seen; the minimizer
    /// lies between `lo` and `hi`.
    fn zoom(mut self, mut lo: Probe, mut hi: Probe) -> Result<LineSearchResult> {
        while self.evals < self.opts.max_evals {
            let (left, right) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let width = right - left;
            if width <= 1e-14 * right.max(1e-300) {
                break;
            }
            let guard = 0.1 * width;
            let alpha = if hi.f.is_finite() && hi.dphi.is_finite() {
                cubic_min(lo, hi)
                    .filter(|t| *t >= left + guard && *t <= right - guard)
                    .unwrap_or(0.5 * (left + right))
            } else {
                0.5 * (left + right)
            };
            let (p, g) = self.eval(alpha)?;
            if !p.f.is_finite() || !self.armijo(alpha, p.f) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(p.dphi) {
                    return Ok(self.done(p, g));
                }
                if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        self.fallback()
    }
}

/// Strong Wolfe line search along `direction` from `x0`: bracketing by
/// expansion, then sectioning with safeguarded cubic interpolation.
/// `objective` returns value and gradient at a point.
pub fn wolfe_line_search<F>(
    objective: &mut F,
    x0: &[f64],
    f0: f64,
    g0: &[f64],
    direction: &[f64],
    opts: LineSearchOptions,
) -> Result<LineSearchResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dphi0 = dot(g0, direction);
    if !(dphi0 < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "line search needs a descent direction (gᵀd = {dphi0})"
        )));
    }
    let mut s = Search {
        objective,
        x0,
        dir: direction,
        f0,
        dphi0,
        opts,
        evals: 0,
        best: None,
        trial: vec![0.0; x0.len()],
    };
    let mut prev = Probe {
        alpha: 0.0,
        f: f0,
        dphi: dphi0,
    };
    let mut alpha = opts.initial_step;
    while s.evals < opts.max_evals {
        let (p, g) = s.eval(alpha)?;
        if !p.f.is_finite() || !s.armijo(alpha, p.f) || (s.evals > 1 && p.f >= prev.f) {
            return s.zoom(prev, p);
        }
        if s.curvature(p.dphi) {
            return Ok(s.done(p, g));
        }
        if p.dphi >= 0.0 {
            return s.zoom(p, prev);
        }
        prev = p;
        alpha *= opts.expand;
    }
    s.fallback()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Line search succeeded along the quasi-Newton direction.
    Wolfe,
    /// Line search failed; history was reset and a backtracking step along
    /// `−g` was accepted.
    Backtracked,
    /// No acceptable step; parameters unchanged.
    Stalled,
    /// Zero gradient; parameters unchanged.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub f: f64,
    pub g: Vec<f64>,
    pub step: f64,
    pub evals: usize,
    pub kind: StepKind,
}

/// One L-BFGS iteration from `x` (where the objective is `f0`, `g0`).
/// On return `x` holds the new iterate and `outcome.f ≤ f0`.
pub fn lbfgs_step<F>(
    state: &mut LbfgsState,
    x: &mut [f64],
    f0: f64,
    g0: &[f64],
    objective: &mut F,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let unchanged = |kind| StepOutcome {
        f: f0,
        g: g0.to_vec(),
        step: 0.0,
        evals: 0,
        kind,
    };
    if g0.iter().all(|&v| v == 0.0) {
        return Ok(unchanged(StepKind::Stationary));
    }
    let mut dir = two_loop_direction(state, g0)?;
    if !(dot(&dir, g0) < 0.0) || dir.iter().any(|v| !v.is_finite()) {
        state.reset();
        dir = g0.iter().map(|v| -v).collect();
    }

    match wolfe_line_search(objective, x, f0, g0, &dir, LineSearchOptions::default()) {
        Ok(ls) => {
            let s: Vec<f64> = dir.iter().map(|d| ls.step * d).collect();
            let y: Vec<f64> = ls.g_new.iter().zip(g0).map(|(a, b)| a - b).collect();
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi += si;
            }
            state.push_pair(s, y);
            state.iter += 1;
            Ok(StepOutcome {
                f: ls.f_new,
                g: ls.g_new,
                step: ls.step,
                evals: ls.evals,
                kind: StepKind::Wolfe,
            })
        }
        Err(Error::LineSearchFailed { evals }) => {
            state.reset();
            state.iter += 1;
            let gg = dot(g0, g0);
            let mut trial = x.to_vec();
            let mut alpha = 1.0;
            for k in 0..=MAX_HALVINGS {
                for ((t, xi), gi) in trial.iter_mut().zip(x.iter()).zip(g0) {
                    *t = xi - alpha * gi;
                }
                let (f, g) = objective(&trial)?;
                if f.is_finite() && f <= f0 - 1e-4 * alpha * gg {
                    x.copy_from_slice(&trial);
                    return Ok(StepOutcome {
                        f,
                        g,
                        step: alpha,
                        evals: evals + k + 1,
                        kind: StepKind::Backtracked,
                    });
                }
                alpha *= 0.5;
            }
            Ok(StepOutcome {
                evals: evals + MAX_HALVINGS + 1,
                ..unchanged(StepKind::Stalled)
            })
        }
        Err(e) => Err(e),
    }
}

/// Batch objective over a flat parameter vector, with optionally frozen
/// coordinates whose gradient is forced to zero.
pub struct BatchObjective<'a> {
    scratch: ModelParams,
    batch: &'a Batch,
    lambda: f64,
    frozen: Vec<Range<usize>>,
}

impl<'a> BatchObjective<'a> {
    pub fn new(template: &ModelParams, batch: &'a Batch, lambda: f64, freeze_biases: bool) -> Self {
        let frozen = if freeze_biases {
            template.layout().bias_ranges().to_vec()
        } else {
            Vec::new()
        };
        BatchObjective {
            scratch: template.clone(),
            batch,
            lambda,
            frozen,
        }
    }

    pub fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.scratch.values_mut().copy_from_slice(x);
        let (f, mut g) = value_and_gradient(&self.scratch, self.batch, self.lambda)?;
        for r in &self.frozen {
            g.values[r.clone()].fill(0.0);
        }
        Ok((f, g.values))
    }
}

/// One L-BFGS iteration on `batch`; returns the new batch objective.
pub fn lbfgs_step_on_batch(
    state: &mut LbfgsState,
    params: &mut ModelParams,
    batch: &Batch,
    lambda: f64,
) -> Result<f64> {
    let mut obj = BatchObjective::new(params, batch, lambda, false);
    let (f0, g0) = obj.eval(params.values())?;
    let out = lbfgs_step(state, params.values_mut(), f0, &g0, &mut |x: &[f64]| obj.eval(x))?;
    Ok(out.f)
}

/// Runs `iters` L-BFGS iterations on one batch; returns the final objective.
pub fn optimize_batch(
    state: &mut LbfgsState,
    params: &mut ModelParams,
    batch: &Batch,
    lambda: f64,
    iters: usize,
    freeze_biases: bool,
) -> Result<f64> {
    let mut obj = BatchObjective::new(params, batch, lambda, freeze_biases);
    let (mut f, mut g) = obj.eval(params.values())?;
    for _ in 0..iters {
        let out = lbfgs_step(state, params.values_mut(), f, &g, &mut |x: &[f64]| obj.eval(x))?;
        f = out.f;
        g = out.g;
        if matches!(out.kind, StepKind::Stationary | StepKind::Stalled) {
            break;
        }
    }
    Ok(f)
}

/// Batches for epoch `epoch`: a seeded shuffle decides membership, then
/// each batch is put back in dataset order so a full batch sums its terms
/// identically every epoch.
pub fn epoch_batches(train: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            Batch::new(
                idx.into_iter()
                    .map(|i| {
                        let r = train.triplets[i];
                        Example {
                            user: r.user,
                            item: r.item,
                            target: r.y / train.k_max,
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

/// One pass over `train`; returns the mean of per-batch final objectives.
pub fn run_epoch(
    params: &mut ModelParams,
    train: &Dataset,
    hp: &Hyperparams,
    state: &mut LbfgsState,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(train, hp.batch_size, hp.seed, epoch)?;
    let mut total = 0.0;
    for batch in &batches {
        total += optimize_batch(
            state,
            params,
            batch,
            hp.lambda,
            hp.lbfgs_inner_iters,
            hp.freeze_biases,
        )?;
    }
    Ok(total / batches.len() as f64)
}
