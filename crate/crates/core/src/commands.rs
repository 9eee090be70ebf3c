//! Operator commands behind the `hpl` binary: generate, train, evaluate, ablate, report.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run>/config.toml      config snapshot
//! <run>/stage1/          Stage I checkpoint + metrics.csv (absent when prompts are off)
//! <run>/stage2/          Stage II checkpoint + metrics.csv
//! <run>/results.json     written by `evaluate`
//! ```
//!
//! `evaluate` also appends one row per task to `runs.csv` next to the run directory.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, RunConfig, TaskSelection};
use crate::data::{generate_synthetic, GeneratedData, TrainingData};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_i2i, evaluate_t2i, RetrievalResult};
use crate::train::checkpoint::{load_checkpoint, Checkpoint, CheckpointMeta};
use crate::train::{model_from_checkpoint, run_stage1, run_stage2, stage_dir};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    All,
}

/// Writes the synthetic manifest pair (and images) under `out`.
pub fn generate(
    cfg: &RunConfig,
    out: &Path,
    identities: Option<usize>,
    images: Option<usize>,
) -> Result<GeneratedData> {
    let mut spec = cfg.synthetic_spec();
    if let Some(n) = identities {
        spec.n_identities = n;
    }
    if let Some(n) = images {
        spec.images_per_identity = n;
    }
    generate_synthetic(&spec, out)
}

/// Loads the manifests named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<TrainingData> {
    let (t2i, i2i) = (cfg.data.t2i_path(), cfg.data.i2i_path());
    for p in [&t2i, &i2i] {
        if !p.exists() {
            return Err(Error::Input(format!(
                "no manifest at {} (run `hpl generate` or set data.root)",
                p.display()
            )));
        }
    }
    TrainingData::from_paths(
        &t2i,
        &i2i,
        &cfg.data.correspondences,
        cfg.model.max_text_len,
    )
}

fn write_config_snapshot(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Trains the selected stages into `cfg.output.dir`. Stages already finished
/// there are kept; interrupted ones resume from their last epoch.
pub fn train(cfg: &RunConfig, data: &TrainingData, stage: StageSelection) -> Result<Checkpoint> {
    cfg.validate()?;
    let run_dir = &cfg.output.dir;
    write_config_snapshot(cfg, run_dir)?;
    match stage {
        StageSelection::One => run_stage1(cfg, data, run_dir),
        StageSelection::Two => run_stage2(cfg, data, run_dir, false),
        StageSelection::All => {
            if cfg.ablation.enable_hpl {
                run_stage1(cfg, data, run_dir)?;
            }
            run_stage2(cfg, data, run_dir, false)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config_hash: String,
    pub config: RunConfig,
    pub results: Vec<RetrievalResult>,
}

impl RunResults {
    pub fn task(&self, task: &str) -> Option<&RetrievalResult> {
        self.results.iter().find(|r| r.task == task)
    }
}

/// Evaluates the Stage II checkpoint of `cfg.output.dir`, writing `results.json`
/// and appending to the neighbouring `runs.csv`.
pub fn evaluate(cfg: &RunConfig, data: &TrainingData, task: TaskSelection) -> Result<RunResults> {
    let run_dir = &cfg.output.dir;
    let dir = stage_dir(run_dir, 2);
    if !dir.join("metadata.json").exists() {
        return Err(Error::Config(format!(
            "no Stage II checkpoint at {}",
            dir.display()
        )));
    }
    let ckpt = load_checkpoint(&dir, Some(cfg), false)?;
    if ckpt.meta.vocab != data.vocab {
        return Err(Error::Data(
            "checkpoint vocabulary differs from the evaluation data".into(),
        ));
    }
    let model = model_from_checkpoint(&ckpt, &data.vocab)?;
    let mut results = Vec::new();
    if task.includes_t2i() {
        results.push(evaluate_t2i(&model, data, cfg.eval.batch_size)?);
    }
    if task.includes_i2i() {
        results.push(evaluate_i2i(&model, data, cfg.eval.batch_size)?);
    }
    let out = RunResults {
        config_hash: ckpt.meta.config_hash.clone(),
        config: ckpt.meta.config.clone(),
        results,
    };
    let path = run_dir.join("results.json");
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    append_runs_csv(&runs_csv_path(run_dir), run_dir, &out)?;
    Ok(out)
}

pub fn runs_csv_path(run_dir: &Path) -> PathBuf {
    match run_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join("runs.csv"),
        _ => PathBuf::from("runs.csv"),
    }
}

const RUNS_HEADER: [&str; 11] = [
    "run",
    "config_hash",
    "task",
    "rank1",
    "rank5",
    "rank10",
    "mAP",
    "n_queries",
    "n_gallery",
    "skipped",
    "seed",
];

fn append_runs_csv(path: &Path, run_dir: &Path, res: &RunResults) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RUNS_HEADER)?;
    }
    for r in &res.results {
        w.write_record([
            run_dir.display().to_string(),
            res.config_hash[..12].to_string(),
            r.task.clone(),
            format!("{:.6}", r.rank1),
            format!("{:.6}", r.rank5),
            format!("{:.6}", r.rank10),
            format!("{:.6}", r.map),
            r.n_queries.to_string(),
            r.n_gallery.to_string(),
            r.skipped.to_string(),
            res.config.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the four cumulative component rows into `<cfg.output.dir>/<row>` and
/// writes the report over them into `cfg.output.dir`.
pub fn ablate(cfg: &RunConfig, data: &TrainingData) -> Result<Vec<ReportRow>> {
    let root = cfg.output.dir.clone();
    let mut dirs = Vec::new();
    for (name, row) in AblationConfig::grid() {
        let mut c = cfg.clone();
        c.ablation = row;
        c.output.dir = root.join(name);
        log::info!("ablation row {name}");
        train(&c, data, StageSelection::All)?;
        evaluate(&c, data, TaskSelection::Both)?;
        dirs.push(c.output.dir);
    }
    report(&dirs, &root)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub seed: u64,
    pub enable_trt: bool,
    pub enable_hpl: bool,
    pub enable_cmpr: bool,
    pub t2i_rank1: Option<f64>,
    pub t2i_map: Option<f64>,
    pub i2i_rank1: Option<f64>,
    pub i2i_map: Option<f64>,
}

impl ReportRow {
    /// Mean of T2I Rank-1 and I2I mAP, the single number used to compare rows.
    pub fn score(&self) -> Option<f64> {
        Some((self.t2i_rank1? + self.i2i_map?) / 2.0)
    }
}

/// Column order of `ablation.csv`.
pub const REPORT_COLUMNS: [&str; 10] = [
    "run",
    "seed",
    "enable_trt",
    "enable_hpl",
    "enable_cmpr",
    "t2i_rank1",
    "t2i_mAP",
    "i2i_rank1",
    "i2i_mAP",
    "score",
];

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Builds `ablation.csv`, `ablation.txt` and `curves.csv` in `out` from evaluated runs.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let missing: Vec<String> = run_dirs
        .iter()
        .filter(|d| !d.join("results.json").exists())
        .map(|d| d.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "missing evaluated run directories: {}",
            missing.join(", ")
        )));
    }
    if run_dirs.is_empty() {
        return Err(Error::Input(
            "report needs at least one run directory".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rows = Vec::new();
    let mut curves = csv::Writer::from_path(out.join("curves.csv"))?;
    curves.write_record(["run", "stage", "epoch", "term", "value"])?;
    for dir in run_dirs {
        let res: RunResults = read_json(&dir.join("results.json"))?;
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let a = res.config.ablation;
        rows.push(ReportRow {
            run: run.clone(),
            seed: res.config.seed,
            enable_trt: a.enable_trt,
            enable_hpl: a.enable_hpl,
            enable_cmpr: a.enable_cmpr,
            t2i_rank1: res.task("t2i").map(|r| r.rank1),
            t2i_map: res.task("t2i").map(|r| r.map),
            i2i_rank1: res.task("i2i").map(|r| r.rank1),
            i2i_map: res.task("i2i").map(|r| r.map),
        });
        for stage in [1u8, 2] {
            let meta_path = stage_dir(dir, stage).join("metadata.json");
            if !meta_path.exists() {
                continue;
            }
            let meta: CheckpointMeta = read_json(&meta_path)?;
            for m in meta.history.iter().filter(|m| m.stage == stage) {
                let terms = m.losses.iter().cloned().chain([
                    ("lr".to_string(), m.lr),
                    ("wall_time_s".to_string(), m.wall_time_s),
                ]);
                for (term, value) in terms {
                    curves.write_record([
                        run.clone(),
                        stage.to_string(),
                        m.epoch.to_string(),
                        term,
                        format!("{value:.6e}"),
                    ])?;
                }
            }
        }
    }
    curves.flush().map_err(|e| Error::io(out, e))?;

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(REPORT_COLUMNS)?;
    for r in &rows {
        w.write_record([
            r.run.clone(),
            r.seed.to_string(),
            r.enable_trt.to_string(),
            r.enable_hpl.to_string(),
            r.enable_cmpr.to_string(),
            fmt(r.t2i_rank1),
            fmt(r.t2i_map),
            fmt(r.i2i_rank1),
            fmt(r.i2i_map),
            fmt(r.score()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;

    let table = render_table(&rows);
    let path = out.join("ablation.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Fixed-width text rendering with metrics in percent.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let pct = |v: Option<f64>| {
        v.map(|x| format!("{:.2}", 100.0 * x))
            .unwrap_or_else(|| "-".into())
    };
    let mut s = format!(
        "{:<16} {:>4} {:>4} {:>5} {:>9} {:>8} {:>9} {:>8}\n",
        "run", "TRT", "HPL", "CMPR", "T2I R1", "T2I mAP", "I2I R1", "I2I mAP"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>4} {:>4} {:>5} {:>9} {:>8} {:>9} {:>8}\n",
            r.run,
            mark(r.enable_trt),
            mark(r.enable_hpl),
            mark(r.enable_cmpr),
            pct(r.t2i_rank1),
            pct(r.t2i_map),
            pct(r.i2i_rank1),
            pct(r.i2i_map)
        ));
    }
    s
}
