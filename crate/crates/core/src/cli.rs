//! `avfusion` command line: gen, train, eval, ablate, gradcheck.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::fusion::FusionMode;
use crate::metrics::{write_reports_csv, EvalReport};
use crate::model::{Model, Target};
use crate::numcore::ParamSet;
use crate::synthdata::{generate, read_dataset, write_dataset, MANIFEST_FILE};
use crate::training::{cross_validate, evaluate, fold_split, train, write_history_csv, write_predictions_csv, TrainConfig};
use crate::verify::{gradcheck_suite, SuiteOptions};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "avfusion", version, about = "Gated recursive joint cross-attention experiments")]
pub struct Cli {
    /// TOML experiment configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides both the generator and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `<out>/data`.
    Gen,
    /// Train (k-fold or a single fold) and write reports, histories,
    /// predictions and parameters into `<out>/train`.
    Train {
        /// Dataset directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-evaluate saved parameters on their validation folds into `<out>/eval`.
    Eval {
        /// Dataset directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding `fold*/params_*.json` (default `<out>/train`).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Sweep RJCA/GRJCA/HGRJCA over M = 1..max-m into `<out>/ablate/ablation.csv`.
    Ablate {
        /// Dataset directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Largest recursion depth in the sweep.
        #[arg(long, default_value_t = 4)]
        max_m: usize,
    },
    /// Check analytic gradients of every mode against finite differences.
    Gradcheck {
        /// Scale one parameter's analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
}

/// Exit status for an error: 1 verification or numeric failure, 2
/// configuration or parse error, 3 I/O error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format { .. } => 2,
        Error::Csv(c) if !c.is_io_error() => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        Error::Num(_) | Error::Training(_) => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs one command and returns its exit status.
pub fn run(cli: &Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        // A second call in the same process keeps the first pool, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.gen.seed = s;
        cfg.train.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.join("data"));
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, &out.join("data")).map(|_| 0),
        Command::Train { data } => cmd_train(&cfg, &data_dir(data), &out.join("train")).map(|_| 0),
        Command::Eval { data, params } => {
            let params = params.clone().unwrap_or_else(|| out.join("train"));
            cmd_eval(&data_dir(data), &params, &out.join("eval")).map(|_| 0)
        }
        Command::Ablate { data, max_m } => cmd_ablate(&cfg, &data_dir(data), &out.join("ablate"), *max_m).map(|_| 0),
        Command::Gradcheck { corrupt_grad } => {
            let opts = SuiteOptions { inject_fault: corrupt_grad.clone(), ..Default::default() };
            cmd_gradcheck(&opts, &mut std::io::stdout().lock())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Generates the dataset and returns the manifest checksum.
pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let clips = generate(&cfg.gen)?;
    write_dataset(dir, &cfg.gen, &clips)?;
    let sum = file_sha256(&dir.join(MANIFEST_FILE))?;
    println!("wrote {} clips to {} (manifest sha256 {sum})", clips.len(), dir.display());
    Ok(sum)
}

/// Trained model as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub fold: usize,
    pub target: Target,
    pub best_epoch: usize,
    pub best_val_ccc: f64,
    pub train: TrainConfig,
    pub model: Model,
    pub params: ParamSet,
}

fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = create_file(path)?;
    write_reports_csv(&mut f, reports)?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Trains every configured fold and target. Returns the fold reports and
/// the index of the best fold.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<(Vec<EvalReport>, usize)> {
    let clips = read_dataset(data)?;
    let (results, best) = cross_validate(&clips, &cfg.model, &cfg.train)?;
    create_dir(out)?;
    for r in &results {
        let dir = fold_dir(out, r.fold);
        create_dir(&dir)?;
        for o in &r.outcomes {
            let t = o.model.target.name();
            let p = dir.join(format!("history_{t}.csv"));
            write_history_csv(create_file(&p)?, &o.history)?;
            let p = dir.join(format!("predictions_{t}.csv"));
            write_predictions_csv(create_file(&p)?, &o.evaluation.predictions)?;
            let saved = SavedModel {
                fold: r.fold,
                target: o.model.target,
                best_epoch: o.best_epoch,
                best_val_ccc: o.best_val_ccc,
                train: cfg.train.clone(),
                model: o.model.clone(),
                params: o.params.clone(),
            };
            let p = dir.join(format!("params_{t}.json"));
            let json = serde_json::to_vec(&saved).map_err(|e| Error::Training(e.to_string()))?;
            fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        }
    }
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
    write_reports(&out.join("reports.csv"), &reports)?;
    for r in &reports {
        println!("fold {}: score {:.6}", r.fold, r.score());
    }
    println!("best fold: {}", results[best].fold);
    Ok((reports, best))
}

/// Loads every `fold*/params_*.json` under `params_dir`, sorted by path.
pub fn load_saved_models(params_dir: &Path) -> Result<Vec<SavedModel>> {
    let mut paths = Vec::new();
    if params_dir.is_dir() {
        for entry in fs::read_dir(params_dir).map_err(|e| Error::io(params_dir, e))? {
            let dir = entry.map_err(|e| Error::io(params_dir, e))?.path();
            if !dir.is_dir() || !dir.file_name().is_some_and(|n| n.to_string_lossy().starts_with("fold")) {
                continue;
            }
            for f in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = f.map_err(|e| Error::io(&dir, e))?.path();
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if name.starts_with("params_") && name.ends_with(".json") {
                    paths.push(p);
                }
            }
        }
    }
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no saved parameters (fold*/params_*.json) under {}; run `train` first",
            params_dir.display()
        )));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: p.clone(), offset: 0, message: e.to_string() })
        })
        .collect()
}

/// Evaluates saved models on their own validation folds. Never writes into
/// the dataset directory.
pub fn cmd_eval(data: &Path, params_dir: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    let clips = read_dataset(data)?;
    let saved = load_saved_models(params_dir)?;
    create_dir(out)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for s in &saved {
        let (_, val_set) = fold_split(&clips, &s.train, s.fold)?;
        let ev = evaluate(&s.model, &s.params, &val_set)?;
        let dir = fold_dir(out, s.fold);
        create_dir(&dir)?;
        let p = dir.join(format!("predictions_{}.csv", s.target.name()));
        write_predictions_csv(create_file(&p)?, &ev.predictions)?;
        let report = match reports.iter_mut().find(|r| r.fold == s.fold) {
            Some(r) => r,
            None => {
                reports.push(EvalReport {
                    fold: s.fold,
                    mode: s.model.config.mode,
                    iterations: s.model.config.iterations,
                    temperature: s.model.config.temperature,
                    ccc_valence: None,
                    ccc_arousal: None,
                    frames: ev.frames,
                    per_clip: ev.per_clip.clone(),
                });
                reports.last_mut().expect("just pushed")
            }
        };
        for &(t, v) in &ev.ccc {
            match t {
                Target::Valence => report.ccc_valence = Some(v),
                Target::Arousal => report.ccc_arousal = Some(v),
                Target::Joint => {}
            }
        }
        println!("fold {} {}: ccc {:.6} (saved {:.6})", s.fold, s.target.name(), ev.score(), s.best_val_ccc);
    }
    write_reports(&out.join("reports.csv"), &reports)?;
    Ok(reports)
}

pub const ABLATION_MODES: [FusionMode; 3] = [FusionMode::Rjca, FusionMode::Grjca, FusionMode::Hgrjca];

/// One row of the recursion-depth ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub iterations: usize,
    /// Validation CCC per (target, mode): valence RJCA, GRJCA, HGRJCA, then
    /// arousal in the same order.
    pub cells: [f64; 6],
    pub best: bool,
}

pub fn ablation_header() -> Vec<String> {
    let mut h = vec!["M".to_string()];
    for t in ["valence", "arousal"] {
        for m in ABLATION_MODES {
            h.push(format!("{m}_{t}"));
        }
    }
    h.push("best".into());
    h
}

/// Trains every (M, mode, target) on one fold with a shared seed and data.
/// The row with the highest mean CCC is flagged as best.
pub fn ablate(cfg: &ExperimentConfig, clips: &[crate::synthdata::LabeledClip], max_m: usize) -> Result<Vec<AblationRow>> {
    if max_m == 0 {
        return Err(Error::config("ablation needs max M of at least 1"));
    }
    let fold = cfg.train.fold.unwrap_or(0);
    let (train_set, val_set) = fold_split(clips, &cfg.train, fold)?;
    let mut rows = Vec::new();
    for m in 1..=max_m {
        let mut cells = [0.0; 6];
        for (ti, target) in [Target::Valence, Target::Arousal].into_iter().enumerate() {
            for (mi, mode) in ABLATION_MODES.into_iter().enumerate() {
                let model = crate::model::ModelConfig { mode, iterations: m, ..cfg.model.clone() };
                let outcome = train(&train_set, &val_set, &model, target, &cfg.train)?;
                cells[ti * 3 + mi] = outcome.best_val_ccc;
            }
        }
        rows.push(AblationRow { iterations: m, cells, best: false });
    }
    let mean = |r: &AblationRow| r.cells.iter().sum::<f64>() / 6.0;
    let best = (0..rows.len()).fold(0, |b, i| if mean(&rows[i]) > mean(&rows[b]) { i } else { b });
    rows[best].best = true;
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ablation_header())?;
    for r in rows {
        let mut rec = vec![r.iterations.to_string()];
        rec.extend(r.cells.iter().map(|c| c.to_string()));
        rec.push(r.best.to_string());
        out.write_record(rec)?;
    }
    out.flush().map_err(|e| Error::Training(e.to_string()))
}

pub fn cmd_ablate(cfg: &ExperimentConfig, data: &Path, out: &Path, max_m: usize) -> Result<Vec<AblationRow>> {
    let clips = read_dataset(data)?;
    let rows = ablate(cfg, &clips, max_m)?;
    create_dir(out)?;
    let p = out.join("ablation.csv");
    let mut f = create_file(&p)?;
    write_ablation_csv(&mut f, &rows)?;
    f.flush().map_err(|e| Error::io(&p, e))?;
    println!("wrote {}", p.display());
    Ok(rows)
}

/// Runs the gradient suite, prints one line per parameter group and
/// returns 0 when every group is below tolerance, 1 otherwise.
pub fn cmd_gradcheck<W: Write>(opts: &SuiteOptions, out: &mut W) -> Result<u8> {
    let report = gradcheck_suite(opts)?;
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    writeln!(out, "{:<40} {:>12} {:>8} {:>6}", "group", "worst_rel", "checked", "kinks").map_err(io)?;
    for g in &report.groups {
        writeln!(out, "{:<40} {:>12.3e} {:>8} {:>6}", g.group, g.worst_rel_err, g.checked, g.skipped_kinks).map_err(io)?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        let worst = report.worst().map_or(0.0, |g| g.worst_rel_err);
        writeln!(out, "PASS: {} groups, worst relative error {worst:.3e} < {:e}", report.groups.len(), report.tolerance)
            .map_err(io)?;
        Ok(0)
    } else {
        for g in &failures {
            writeln!(out, "FAIL: {} relative error {:.3e}", g.group, g.worst_rel_err).map_err(io)?;
        }
        Ok(1)
    }
}
