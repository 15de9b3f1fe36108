//! RMSE evaluation, cold-start prediction and reference baselines.

use rayon::prelude::*;

use crate::dataio::{Dataset, Vocab};
use crate::error::{Error, Result};
use crate::model::{predict_unchecked, ModelParams};

/// `sqrt(mean((pred − truth)²))`, summed in input order.
pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let mut sum = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        let e = p - t;
        sum += e * e;
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("predictions".into()));
    }
    Ok((sum / predictions.len() as f64).sqrt())
}

/// Anything that maps a dense (user, item) pair to a rating.
pub trait RatingPredictor: Sync {
    fn predict(&self, user: usize, item: usize) -> f64;
}

impl RatingPredictor for ModelParams {
    /// Out-of-table indices yield NaN, which [`rmse`] rejects.
    fn predict(&self, user: usize, item: usize) -> f64 {
        if user < self.layout().users && item < self.layout().items {
            predict_unchecked(self, user, item)
        } else {
            f64::NAN
        }
    }
}

/// RMSE of `predictor` over every rating in `test`, on the original scale.
/// Predictions are computed in parallel and reduced in dataset order.
pub fn evaluate<P: RatingPredictor + ?Sized>(predictor: &P, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let preds: Vec<f64> = test
        .triplets
        .par_iter()
        .map(|r| predictor.predict(r.user, r.item))
        .collect();
    let truths: Vec<f64> = test.triplets.iter().map(|r| r.y).collect();
    rmse(&preds, &truths)
}

/// A trained network with everything needed to serve raw-ID queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
    /// Mean training rating, served for unknown users or items.
    pub global_mean: f64,
    /// L2 weight used in training (informational).
    pub lambda: f64,
}

impl TrainedModel {
    pub fn fallback(&self) -> f64 {
        self.global_mean.clamp(0.0, self.params.k_max())
    }

    /// Fails if the vocabularies differ from `dataset`'s, which would make
    /// dense indices mean different things.
    pub fn check_vocab(&self, dataset: &Dataset) -> Result<()> {
        if self.user_vocab != dataset.user_vocab {
            return Err(Error::VocabMismatch(format!(
                "user vocabulary ({} ids in model, {} in data)",
                self.user_vocab.len(),
                dataset.user_vocab.len()
            )));
        }
        if self.item_vocab != dataset.item_vocab {
            return Err(Error::VocabMismatch(format!(
                "item vocabulary ({} ids in model, {} in data)",
                self.item_vocab.len(),
                dataset.item_vocab.len()
            )));
        }
        Ok(())
    }
}

impl RatingPredictor for TrainedModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        let l = self.params.layout();
        if user < l.users && item < l.items {
            predict_unchecked(&self.params, user, item)
        } else {
            self.fallback()
        }
    }
}

/// Network prediction when both IDs are known, else the clamped training
/// mean.
pub fn predict_with_fallback(model: &TrainedModel, user_raw: &str, item_raw: &str) -> f64 {
    match (
        model.user_vocab.index_of(user_raw),
        model.item_vocab.index_of(item_raw),
    ) {
        (Some(u), Some(i)) => model.predict(u, i),
        _ => model.fallback(),
    }
}

/// Per-item mean ratings of `train`, `None` for items without ratings.
fn item_means(train: &Dataset) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); train.item_count()];
    for r in &train.triplets {
        sums[r.item].0 += r.y;
        sums[r.item].1 += 1;
    }
    sums.into_iter()
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Predicts the training mean for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMean {
    pub mean: f64,
}

impl GlobalMean {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let mean = train.mean_rating().ok_or(Error::Empty("training set"))?;
        Ok(GlobalMean {
            mean: mean.clamp(0.0, train.k_max),
        })
    }
}

impl RatingPredictor for GlobalMean {
    fn predict(&self, _user: usize, _item: usize) -> f64 {
        self.mean
    }
}

/// Predicts the item's training mean, or the global mean for unseen items.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMean {
    pub means: Vec<Option<f64>>,
    pub global_mean: f64,
}

impl ItemMean {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let global_mean = GlobalMean::fit(train)?.mean;
        Ok(ItemMean {
            means: item_means(train),
            global_mean,
        })
    }
}

impl RatingPredictor for ItemMean {
    fn predict(&self, _user: usize, item: usize) -> f64 {
        self.means.get(item).copied().flatten().unwrap_or(self.global_mean)
    }
}

/// Pairwise item deviations for weighted Slope One.
///
/// Only pairs `a < b` are stored (row-packed upper triangle); the reverse
/// direction is the exact negation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeOneModel {
    items: usize,
    /// Σ (r_a − r_b) over users rating both, for `a < b`.
    sums: Vec<f64>,
    counts: Vec<u32>,
    pub item_means: Vec<Option<f64>>,
    pub global_mean: Option<f64>,
    pub k_max: f64,
}

impl SlopeOneModel {
    fn slot(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < b && b < self.items);
        a * (2 * self.items - a - 1) / 2 + (b - a - 1)
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    /// Number of users who rated both `a` and `b`.
    pub fn count(&self, a: usize, b: usize) -> u32 {
        if a == b || a >= self.items || b >= self.items {
            return 0;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.counts[self.slot(lo, hi)]
    }

    /// Average `r_a − r_b` over co-rating users; `None` for self-pairs and
    /// pairs never co-rated.
    pub fn dev(&self, a: usize, b: usize) -> Option<f64> {
        let c = self.count(a, b);
        if c == 0 {
            return None;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let d = self.sums[self.slot(lo, hi)] / c as f64;
        Some(if a < b { d } else { -d })
    }

    fn fallback(&self, target: usize) -> f64 {
        self.item_means
            .get(target)
            .copied()
            .flatten()
            .or(self.global_mean)
            .unwrap_or(0.5 * self.k_max)
    }
}

/// Ratings grouped by user, in dataset order.
pub fn ratings_by_user(dataset: &Dataset) -> Vec<Vec<(usize, f64)>> {
    let mut by_user = vec![Vec::new(); dataset.user_count()];
    for r in &dataset.triplets {
        by_user[r.user].push((r.item, r.y));
    }
    by_user
}

pub fn slopeone_fit(train: &Dataset) -> Result<SlopeOneModel> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let n = train.item_count();
    let pairs = n * n.saturating_sub(1) / 2;
    let mut model = SlopeOneModel {
        items: n,
        sums: vec![0.0; pairs],
        counts: vec![0; pairs],
        item_means: item_means(train),
        global_mean: train.mean_rating(),
        k_max: train.k_max,
    };
    for ratings in ratings_by_user(train) {
        for (x, &(a, ra)) in ratings.iter().enumerate() {
            for &(b, rb) in &ratings[x + 1..] {
                if a == b {
                    continue;
                }
                let (slot, diff) = if a < b {
                    (model.slot(a, b), ra - rb)
                } else {
                    (model.slot(b, a), rb - ra)
                };
                model.sums[slot] += diff;
                model.counts[slot] += 1;
            }
        }
    }
    Ok(model)
}

/// Weighted Slope One: `Σ c(t,j)·(r_j + dev(t,j)) / Σ c(t,j)` over the
/// user's rated items `j`, falling back to the item mean, then the global
/// mean. Clamped to `[0, k_max]`.
pub fn slopeone_predict(model: &SlopeOneModel, user_ratings: &[(usize, f64)], target: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(j, rj) in user_ratings {
        if let Some(dev) = model.dev(target, j) {
            let c = model.count(target, j) as f64;
            num += c * (rj + dev);
            den += c;
        }
    }
    let raw = if den > 0.0 { num / den } else { model.fallback(target) };
    raw.clamp(0.0, model.k_max)
}

/// Slope One bound to the training ratings of every user.
#[derive(Debug, Clone)]
pub struct SlopeOne {
    pub model: SlopeOneModel,
    pub user_ratings: Vec<Vec<(usize, f64)>>,
}

impl SlopeOne {
    pub fn fit(train: &Dataset) -> Result<Self> {
        Ok(SlopeOne {
            model: slopeone_fit(train)?,
            user_ratings: ratings_by_user(train),
        })
    }
}

impl RatingPredictor for SlopeOne {
    fn predict(&self, user: usize, item: usize) -> f64 {
        let ratings = self.user_ratings.get(user).map(Vec::as_slice).unwrap_or(&[]);
        slopeone_predict(&self.model, ratings, item)
    }
}
