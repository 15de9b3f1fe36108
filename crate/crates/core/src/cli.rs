//! `drcf` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{build_dataset, parse_movielens, split, Dataset, Format, MOVIELENS_K_MAX};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_with_fallback, GlobalMean, ItemMean, RatingPredictor, SlopeOne, TrainedModel};
use crate::model::Hyperparams;
use crate::persist;
use crate::train::train_model_with;

#[derive(Debug, Parser)]
#[command(name = "drcf", version, about = "Embedding + MLP collaborative filtering trained with L-BFGS")]
pub struct Cli {
    /// Worker threads for gradient and evaluation (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the seeded train/test split of a ratings file.
    Split(SplitArgs),
    /// Train a model and write it (plus an optional per-epoch report).
    Train(TrainArgs),
    /// Test RMSE of a saved model or a baseline on the seeded split.
    Eval(EvalArgs),
    /// Predict one rating from a saved model.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ml100k,
    Ml1m,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ml100k => Format::Ml100k,
            FormatArg::Ml1m => Format::Ml1m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    GlobalMean,
    ItemMean,
    Slopeone,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Ratings file (`u.data` or `ratings.dat`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "ml100k")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output prefix; writes `<out>.train` and `<out>.test`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Embedding dimension.
    #[arg(long, default_value_t = 24)]
    pub d: usize,
    /// Hidden layer width.
    #[arg(long, default_value_t = 40)]
    pub hidden: usize,
    /// L2 weight.
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10_000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub lbfgs_history: usize,
    #[arg(long, default_value_t = 4)]
    pub lbfgs_inner_iters: usize,
    /// Epochs without test improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Uniform init half-width (default: 1/sqrt(fan-in) per tensor).
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Keep hidden and output biases at zero.
    #[arg(long)]
    pub freeze_biases: bool,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch TSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Add a wall-clock `seconds` column to the report.
    #[arg(long)]
    pub report_timings: bool,
}

impl TrainArgs {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            d: self.d,
            h: self.hidden,
            lambda: self.lambda,
            init_scale: self.init_scale,
            seed: self.data.seed,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lbfgs_history: self.lbfgs_history,
            lbfgs_inner_iters: self.lbfgs_inner_iters,
            patience: self.patience,
            freeze_biases: self.freeze_biases,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw user ID.
    #[arg(long)]
    pub user: String,
    /// Raw item ID.
    #[arg(long)]
    pub item: String,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(&cli.command))),
        None => dispatch(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// Parses the ratings file and returns `(full, train, test)`.
fn load_split(args: &DataArgs) -> Result<(Dataset, Dataset, Dataset)> {
    let triplets = parse_movielens(&args.data, args.format.into())?;
    let full = build_dataset(&triplets, Some(MOVIELENS_K_MAX))?;
    let (train, test) = split(&full, args.train_fraction, args.seed)?;
    Ok((full, train, test))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn render(ds: &Dataset, format: Format) -> String {
    let sep = match format {
        Format::Ml100k => "\t",
        Format::Ml1m => "::",
    };
    let mut out = String::new();
    for r in &ds.triplets {
        let user = ds.user_vocab.raw(r.user).unwrap_or_default();
        let item = ds.item_vocab.raw(r.item).unwrap_or_default();
        out.push_str(&format!("{user}{sep}{item}{sep}{}\n", r.y));
    }
    out
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let (_, train, test) = load_split(&args.data)?;
    let format = args.data.format.into();
    write_file(&with_suffix(&args.out, ".train"), &render(&train, format))?;
    write_file(&with_suffix(&args.out, ".test"), &render(&test, format))?;
    println!("train={} test={}", train.len(), test.len());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let hp = args.hyperparams();
    hp.validate()?;
    let (_, train, test) = load_split(&args.data)?;
    eprintln!(
        "train={} test={} users={} items={}",
        train.len(),
        test.len(),
        train.user_count(),
        train.item_count()
    );
    let (params, report) = train_model_with(&train, &test, &hp, |r| {
        eprintln!(
            "epoch {:>3}  objective {:.6e}  train_rmse {:.4}  test_rmse {:.4}  {:.1}s",
            r.epoch, r.objective, r.train_rmse, r.test_rmse, r.seconds
        );
    })?;
    let model = TrainedModel {
        params,
        user_vocab: train.user_vocab.clone(),
        item_vocab: train.item_vocab.clone(),
        global_mean: train.mean_rating().ok_or(Error::Empty("training set"))?,
        lambda: hp.lambda,
    };
    persist::save(&model, &args.out)?;
    if let Some(path) = &args.report {
        write_file(path, &report.to_tsv(args.report_timings))?;
    }
    println!("test_rmse={}", report.best_test_rmse);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (full, train, test) = load_split(&args.data)?;
    let predictor: Box<dyn RatingPredictor> = match (&args.model, args.baseline) {
        (Some(path), _) => {
            let model = persist::load(path)?;
            model.check_vocab(&full)?;
            if model.params.k_max() != full.k_max {
                return Err(Error::VocabMismatch(format!(
                    "model rating ceiling {} differs from dataset's {}",
                    model.params.k_max(),
                    full.k_max
                )));
            }
            Box::new(RawIdModel { model, data: full })
        }
        (None, Some(Baseline::GlobalMean)) => Box::new(GlobalMean::fit(&train)?),
        (None, Some(Baseline::ItemMean)) => Box::new(ItemMean::fit(&train)?),
        (None, Some(Baseline::Slopeone)) => Box::new(SlopeOne::fit(&train)?),
        (None, None) => return Err(Error::InvalidArgument("need --model or --baseline".into())),
    };
    println!("test_rmse={}", evaluate(predictor.as_ref(), &test)?);
    Ok(())
}

/// Routes dense dataset indices back through raw IDs so the model's own
/// vocabulary and fallback rules apply.
struct RawIdModel {
    model: TrainedModel,
    data: Dataset,
}

impl RatingPredictor for RawIdModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        let u = self.data.user_vocab.raw(user).unwrap_or_default();
        let i = self.data.item_vocab.raw(item).unwrap_or_default();
        predict_with_fallback(&self.model, u, i)
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = persist::load(&args.model)?;
    println!("{:.4}", predict_with_fallback(&model, &args.user, &args.item));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cli = Cli::try_parse_from(["drcf", "train", "--data", "u.data", "--out", "m"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let hp = a.hyperparams();
        assert_eq!((hp.d, hp.h, hp.lambda, hp.seed), (24, 40, 1e-4, 42));
        assert_eq!(a.data.train_fraction, 0.9);
        assert_eq!(a.data.format, FormatArg::Ml100k);
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["drcf"]), 1);
        assert_eq!(run(["drcf", "train", "--data", "x"]), 1);
        assert_eq!(run(["drcf", "eval", "--data", "x"]), 1);
        assert_eq!(run(["drcf", "train", "--data", "x", "--out", "m", "--format", "csv"]), 1);
        assert_eq!(run(["drcf", "--help"]), 0);
    }

    #[test]
    fn missing_file_exits_3() {
        assert_eq!(run(["drcf", "train", "--data", "/nonexistent/u.data", "--out", "/tmp/x"]), 3);
        assert_eq!(run(["drcf", "predict", "--model", "/nonexistent", "--user", "1", "--item", "2"]), 3);
    }

    #[test]
    fn bad_hyperparams_exit_1() {
        assert_eq!(
            run(["drcf", "train", "--data", "/nonexistent", "--out", "m", "--epochs", "0"]),
            1
        );
    }
}
