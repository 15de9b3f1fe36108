//! End-to-end training loop with held-out RMSE and early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{init_params, Hyperparams, ModelParams};
use crate::optim::{run_epoch, LbfgsState};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub objective: f64,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_rmse: f64,
}

impl TrainReport {
    /// Tab-separated table, one row per epoch. Wall-clock seconds are only
    /// included when asked for, since they differ between identical runs.
    pub fn to_tsv(&self, with_seconds: bool) -> String {
        let mut out = String::from("epoch\tobjective\ttrain_rmse\ttest_rmse");
        if with_seconds {
            out.push_str("\tseconds");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{}\t{:e}\t{}\t{}",
                r.epoch, r.objective, r.train_rmse, r.test_rmse
            );
            if with_seconds {
                let _ = write!(out, "\t{:.3}", r.seconds);
            }
            out.push('\n');
        }
        out
    }
}

pub fn train_model(train: &Dataset, test: &Dataset, hp: &Hyperparams) -> Result<(ModelParams, TrainReport)> {
    train_model_with(train, test, hp, |_| {})
}

/// Like [`train_model`], calling `on_epoch` after every epoch.
pub fn train_model_with<F>(
    train: &Dataset,
    test: &Dataset,
    hp: &Hyperparams,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(&EpochRecord),
{
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if train.user_count() != test.user_count() || train.item_count() != test.item_count() {
        return Err(Error::VocabMismatch(format!(
            "train has {}x{} users x items, test has {}x{}",
            train.user_count(),
            train.item_count(),
            test.user_count(),
            test.item_count()
        )));
    }
    if train.k_max != test.k_max {
        return Err(Error::Data(format!(
            "rating ceilings differ: {} vs {}",
            train.k_max, test.k_max
        )));
    }

    let mut params = init_params(train.user_count(), train.item_count(), train.k_max, hp)?;
    let mut state = LbfgsState::new(hp.lbfgs_history);
    let mut report = TrainReport {
        records: Vec::with_capacity(hp.epochs),
        best_epoch: 0,
        best_test_rmse: f64::INFINITY,
    };
    let mut best = params.clone();
    let start = Instant::now();

    for epoch in 1..=hp.epochs {
        let objective = run_epoch(&mut params, train, hp, &mut state, epoch)?;
        let record = EpochRecord {
            epoch,
            objective,
            train_rmse: evaluate(&params, train)?,
            test_rmse: evaluate(&params, test)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if record.test_rmse < report.best_test_rmse {
            report.best_test_rmse = record.test_rmse;
            report.best_epoch = epoch;
            best.clone_from(&params);
        }
        report.records.push(record);
        if epoch - report.best_epoch >= hp.patience {
            break;
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{build_dataset, RatingTriplet};

    fn toy() -> Dataset {
        let ts: Vec<_> = (0..30)
            .map(|k| RatingTriplet {
                user_raw: (k % 5).to_string(),
                item_raw: (k % 7).to_string(),
                rating: ((k * 3) % 5 + 1) as f64,
                timestamp: None,
            })
            .collect();
        build_dataset(&ts, Some(5.0)).unwrap()
    }

    fn hp() -> Hyperparams {
        Hyperparams {
            d: 3,
            h: 4,
            lambda: 1e-3,
            epochs: 8,
            batch_size: 12,
            patience: 3,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn returns_best_snapshot() {
        let ds = toy();
        let (params, report) = train_model(&ds, &ds, &hp()).unwrap();
        assert!(report.records.len() <= 8);
        let min = report
            .records
            .iter()
            .map(|r| r.test_rmse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_test_rmse, min);
        assert_eq!(report.records[report.best_epoch - 1].test_rmse, min);
        assert_eq!(evaluate(&params, &ds).unwrap(), min);
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = toy();
        let hp = Hyperparams { epochs: 0, ..hp() };
        assert!(matches!(train_model(&ds, &ds, &hp), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic() {
        let ds = toy();
        let strip = |mut r: TrainReport| {
            for rec in &mut r.records {
                rec.seconds = 0.0;
            }
            r
        };
        let (p1, r1) = train_model(&ds, &ds, &hp()).unwrap();
        let (p2, r2) = train_model(&ds, &ds, &hp()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(strip(r1.clone()), strip(r2));
        assert_eq!(r1.to_tsv(false).lines().count(), r1.records.len() + 1);
        assert!(r1.to_tsv(true).starts_with("epoch\tobjective\ttrain_rmse\ttest_rmse\tseconds\n"));
    }

    #[test]
    fn early_stopping_truncates() {
        let ds = toy();
        let hp = Hyperparams {
            epochs: 200,
            patience: 1,
            ..hp()
        };
        let (_, report) = train_model(&ds, &ds, &hp).unwrap();
        assert!(report.records.len() < 200);
        assert_eq!(report.records.len(), report.best_epoch + 1);
    }

    #[test]
    fn mismatched_vocab_rejected() {
        let ds = toy();
        let mut other = ds.clone();
        other.user_vocab.intern("new");
        assert!(train_model(&ds, &other, &hp()).is_err());
    }
}
