//! `vce` command line: one subcommand per pipeline stage.
//!
//! Output layout under the output root:
//!
//! ```text
//! data/                       phantoms and manifest.csv
//! runs/gamma_<g>/fold_<k>/    checkpoint.ckpt, history.csv, metrics.csv, heatmaps/
//! report.txt, report.csv      cross-fold summary
//! vce.log                     timestamped log
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{
    aggregate, evaluate_predictions, heatmap, make_folds, predict, sample_id, train_fold, FoldFragment, FoldJob,
    FoldPlan,
};
use crate::imgcore::PairedSample;
use crate::model::Checkpoint;
use crate::parallel::{map_indexed, Execution};
use crate::phantom::{generate_dataset, read_manifest, ManifestRecord, MANIFEST_NAME};
use crate::preprocess::preprocess_sample;
use crate::trainer::TrainStatus;

#[derive(Debug, Parser)]
#[command(name = "vce", version, about = "Lesion-aware virtual contrast enhancement pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    Phantoms(Common),
    /// Train one (gamma, fold) cell.
    Train(CellArgs),
    /// Score a checkpoint on its fold's test split.
    Evaluate(CellArgs),
    /// Summarize every evaluated fold.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the phantom, training and fold seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CellArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Initialize all four networks from this checkpoint.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Checkpoint to evaluate; defaults to the cell's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

pub fn cell_dir(root: &Path, gamma: f64, fold: usize) -> PathBuf {
    root.join("runs").join(format!("gamma_{gamma}")).join(format!("fold_{fold}"))
}

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_text(path, &cfg.to_toml())
}

struct Dataset {
    manifest: Vec<ManifestRecord>,
    samples: Vec<PairedSample>,
}

/// Loads and preprocesses every manifest sample.
fn load_dataset(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    let manifest_path = data_dir(root).join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Error::Invalid(format!(
            "no dataset at {}; run `vce phantoms --config <file>` first",
            manifest_path.display()
        )));
    }
    let manifest = read_manifest(&manifest_path)?;
    let dir = data_dir(root);
    let samples = map_indexed(Execution::Parallel, manifest.len(), |i| {
        let r = &manifest[i];
        let s_path = (!r.path_s.is_empty()).then(|| dir.join(&r.path_s));
        let raw = crate::imgcore::load_sample(dir.join(&r.path_x), dir.join(&r.path_y), s_path.as_deref(), &r.patient_id)?;
        preprocess_sample(&raw, &cfg.preprocess)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn fold_plan(cfg: &RunConfig, data: &Dataset, fold: usize) -> Result<FoldPlan> {
    if fold >= cfg.folds.n_folds {
        return Err(Error::Config(format!(
            "--fold {fold} out of range for {} folds",
            cfg.folds.n_folds
        )));
    }
    make_folds(&data.manifest, cfg.folds.n_folds, cfg.folds.seed)
}

pub fn cmd_phantoms(cfg: &RunConfig, root: &Path) -> Result<()> {
    let dir = data_dir(root);
    let records = generate_dataset(&cfg.phantom, &dir, Execution::Parallel)?;
    echo_config(cfg, &root.join("config.phantoms.toml"))?;
    let lesions = records.iter().filter(|r| r.has_lesion).count();
    log::info!("wrote {} samples ({lesions} with lesions) to {}", records.len(), dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, root: &Path, gamma: f64, fold: usize, warm: Option<&Path>) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.train.weights.gamma = gamma;
    cfg.train.pretrain = gamma == 0.0;
    cfg.validate()?;
    let data = load_dataset(&cfg, root)?;
    let plan = fold_plan(&cfg, &data, fold)?;
    let job = FoldJob {
        net: &cfg.net,
        train: &cfg.train,
        augment: &cfg.augment,
        init_seed: cfg.train.seed,
        warm_start: warm,
        exec: Execution::Parallel,
    };
    let (split, mut outcome) = train_fold(&plan, fold, &data.samples, &job)?;
    log::info!(
        "fold {fold}, gamma {gamma}: {} train / {} val / {} test samples",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let cell = cell_dir(root, gamma, fold);
    fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
    outcome.best.meta = serde_json::json!({
        "gamma": gamma,
        "fold": fold,
        "warm_start": warm.map(|p| p.display().to_string()),
        "train": cfg.train,
    });
    outcome.best.save(cell.join(CHECKPOINT_NAME))?;
    outcome.history.save_csv(&cell.join("history.csv"))?;
    echo_config(&cfg, &cell.join("config.train.toml"))?;
    match outcome.status {
        TrainStatus::Aborted(why) => Err(Error::NonFinite(format!(
            "training aborted ({why}); best checkpoint from epoch {} kept",
            outcome.history.best_epoch
        ))),
        _ => {
            log::info!(
                "best epoch {}, stopped at {}",
                outcome.history.best_epoch,
                outcome.history.stopped_epoch
            );
            Ok(())
        }
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, root: &Path, gamma: f64, fold: usize, checkpoint: Option<&Path>) -> Result<()> {
    let cell = cell_dir(root, gamma, fold);
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cell.join(CHECKPOINT_NAME));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if ckpt.bundle.config != cfg.net {
        return Err(Error::Incompatible(format!(
            "checkpoint {} does not match the configured network",
            ckpt_path.display()
        )));
    }
    let data = load_dataset(cfg, root)?;
    let plan = fold_plan(cfg, &data, fold)?;
    let ids: Vec<&str> = data.samples.iter().map(|s| s.patient_id()).collect();
    let split = plan.split(&ids, fold)?;
    let refs: Vec<&PairedSample> = split.test.iter().map(|&i| &data.samples[i]).collect();
    let mut bundle = ckpt.bundle;
    bundle.set_execution(Execution::Parallel);
    let preds = predict(&bundle, &refs)?;
    let names: Vec<String> = split.test.iter().map(|&i| sample_id(i)).collect();
    let records = evaluate_predictions(&names, &refs, &preds, Execution::Parallel)?;
    let fragment = FoldFragment {
        gamma,
        fold,
        status: crate::harness::FragmentStatus::Ok,
        records,
    };
    write_text(&cell.join("metrics.csv"), &fragment.to_csv())?;

    let maps = cell.join("heatmaps");
    if maps.exists() {
        fs::remove_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    }
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let mut written = 0;
    for ((s, p), name) in refs.iter().zip(&preds).zip(&names) {
        if s.has_lesion() {
            heatmap(s.y(), p, s.s(), cfg.heatmap_vmax, &maps.join(format!("{name}.png")))?;
            written += 1;
        }
    }
    echo_config(cfg, &cell.join("config.evaluate.toml"))?;
    log::info!("scored {} test samples, {written} heatmaps", refs.len());
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig, root: &Path) -> Result<String> {
    let mut fragments = Vec::new();
    let mut variants = Vec::new();
    for &gamma in &cfg.gammas {
        let before = fragments.len();
        for fold in 0..cfg.folds.n_folds {
            let path = cell_dir(root, gamma, fold).join("metrics.csv");
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                fragments.push(FoldFragment::from_csv(gamma, fold, &text, &path)?);
            }
        }
        if fragments.len() > before {
            variants.push(gamma);
        }
    }
    if variants.is_empty() {
        return Err(Error::Invalid(format!(
            "no evaluated folds under {}; run `vce evaluate` for at least two folds",
            root.join("runs").display()
        )));
    }
    let report = aggregate(&fragments, &variants)?;
    let text = report.to_text();
    write_text(&root.join("report.txt"), &text)?;
    write_text(&root.join("report.csv"), &report.to_csv())?;
    echo_config(cfg, &root.join("config.report.toml"))?;
    Ok(text)
}

/// Plain messages on stderr, timestamped lines in `vce.log`.
struct RunLogger {
    file: Mutex<Option<fs::File>>,
}

impl log::Log for RunLogger {
    fn enabled(&self, meta: &log::Metadata) -> bool {
        meta.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        eprintln!("[{}] {}", record.level(), record.args());
        if let Ok(mut guard) = self.file.lock() {
            if let Some(f) = guard.as_mut() {
                let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
                let _ = writeln!(f, "{}.{:03} [{}] {}", ts.as_secs(), ts.subsec_millis(), record.level(), record.args());
            }
        }
    }

    fn flush(&self) {}
}

fn init_logging(root: &Path) {
    let file = fs::create_dir_all(root)
        .ok()
        .and_then(|_| OpenOptions::new().create(true).append(true).open(root.join("vce.log")).ok());
    let logger = RunLogger {
        file: Mutex::new(file),
    };
    if log::set_boxed_logger(Box::new(logger)).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Phantoms(c) | Command::Report(c) => c,
        Command::Train(a) | Command::Evaluate(a) => &a.common,
    };
    let cfg = load_config(common)?;
    let root = cfg.output_root();
    init_logging(&root);
    match &cli.command {
        Command::Phantoms(_) => cmd_phantoms(&cfg, &root),
        Command::Train(a) => cmd_train(&cfg, &root, a.gamma, a.fold, a.warm_start.as_deref()),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &root, a.gamma, a.fold, a.checkpoint.as_deref()),
        Command::Report(_) => {
            print!("{}", cmd_report(&cfg, &root)?);
            Ok(())
        }
    }
}

pub fn main_entry() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
