//! The four subcommands. Each writes its artifacts under the configured
//! output directory and returns what it wrote.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rotq::dataset::{read_csv_set, stratified_split, LabeledImageSet, Split};
use rotq::featstore::{extract_features, FeatureStore, NormMode};
use rotq::nn::{load_model, save_model, train, CnnModel, TrainHistory};
use rotq::pipeline::{evaluate, EvalReport, Evaluation};
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, CliResult};

pub fn load_pool(cfg: &RunConfig) -> CliResult<LabeledImageSet> {
    Ok(match &cfg.data {
        DataSource::Idx { images, labels } => LabeledImageSet::from_idx(images, labels)?,
        DataSource::Csv { path } => read_csv_set(path)?,
    })
}

pub fn load_split(cfg: &RunConfig) -> CliResult<Split> {
    Ok(stratified_split(&load_pool(cfg)?, &cfg.split)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    seconds: f64,
}

fn write_timing(path: &Path, seconds: f64) -> CliResult<()> {
    write_json(path, &Timing { seconds })
}

pub struct TrainOutput {
    pub model: CnnModel,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

fn train_to(cfg: &RunConfig, split: &Split, checkpoint: &Path) -> CliResult<TrainOutput> {
    let start = Instant::now();
    let model = CnnModel::digit(cfg.train.rng_seed);
    let (model, history) = train(model, &split.train, &split.val, &cfg.train)?;
    if let Some(dir) = checkpoint.parent() {
        ensure_dir(dir)?;
    }
    save_model(&model, checkpoint)?;
    write_json(&checkpoint.with_extension("history.json"), &history)?;
    write_timing(
        &checkpoint.with_extension("timing.json"),
        start.elapsed().as_secs_f64(),
    )?;
    Ok(TrainOutput {
        model,
        history,
        checkpoint: checkpoint.to_path_buf(),
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let split = load_split(&cfg)?;
    let out = train_to(&cfg, &split, &cfg.checkpoint_path())?;
    println!(
        "trained {} batches; validation accuracy {}; checkpoint {}",
        out.history.batches.len(),
        out.history
            .final_validation_accuracy()
            .map_or("n/a".to_string(), |a| format!("{:.4}", a)),
        out.checkpoint.display()
    );
    Ok(out)
}

fn extract_to(
    model: &CnnModel,
    split: &Split,
    norm: NormMode,
    path: &Path,
) -> CliResult<FeatureStore> {
    let store = extract_features(model, &split.train, norm)?;
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    store.save(path)?;
    Ok(store)
}

pub fn cmd_extract(cfg: &RunConfig) -> CliResult<PathBuf> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let model = load_model(cfg.checkpoint_path())?;
    let split = load_split(&cfg)?;
    let path = cfg.store_path();
    let store = extract_to(&model, &split, cfg.norm, &path)?;
    println!(
        "stored {} emissions of width {} ({}) in {}",
        store.len(),
        store.dim(),
        cfg.norm.name(),
        path.display()
    );
    Ok(path)
}

pub struct EvalOutput {
    pub evaluation: Evaluation,
    pub report_path: PathBuf,
}

fn eval_to(
    cfg: &RunConfig,
    model: &CnnModel,
    store: &FeatureStore,
    split: &Split,
    dir: &Path,
) -> CliResult<EvalOutput> {
    if store.norm_mode() != cfg.norm {
        return Err(CliError::config(format!(
            "store holds {} features but norm is {}",
            store.norm_mode().name(),
            cfg.norm.name()
        )));
    }
    let mut evaluation = evaluate(&split.test, model, store, cfg.selection, &cfg.qlearn)?;
    evaluation.report.config = serde_json::to_value(cfg).map_err(std::io::Error::from)?;
    ensure_dir(dir)?;
    let report_path = dir.join("report.json");
    fs::write(&report_path, evaluation.report.to_json())?;
    evaluation.write_outcomes(BufWriter::new(File::create(dir.join("outcomes.jsonl"))?))?;
    evaluation.write_traces(BufWriter::new(File::create(dir.join("traces.jsonl"))?))?;
    write_timing(&dir.join("timing.json"), evaluation.report.runtime_seconds)?;
    Ok(EvalOutput {
        evaluation,
        report_path,
    })
}

fn print_report(r: &EvalReport) {
    println!(
        "selection {}: nn_only_accuracy {:.4}  proposed_accuracy {:.4}  (hard {}, corrected {})",
        r.selection, r.nn_only_accuracy, r.proposed_accuracy, r.hard_count, r.corrected_count
    );
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let model = load_model(cfg.checkpoint_path())?;
    let store = FeatureStore::load(cfg.store_path())?;
    let split = load_split(&cfg)?;
    let out = eval_to(&cfg, &model, &store, &split, &cfg.out)?;
    print_report(&out.evaluation.report);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryRow {
    fn new(name: &str, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = if accuracies.len() > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            name: name.to_string(),
            mean,
            std: var.sqrt(),
            min: accuracies.iter().copied().fold(f64::INFINITY, f64::min),
            max: accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            accuracies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormSummary {
    pub norm: NormMode,
    pub rows: Vec<SummaryRow>,
    pub mean_improvement: f64,
    pub proposed_never_below_nn: bool,
    /// Relative to the bench output directory.
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub seeds: Vec<u64>,
    pub selection: String,
    pub norms: Vec<NormSummary>,
}

impl BenchSummary {
    pub fn norm(&self, norm: NormMode) -> Option<&NormSummary> {
        self.norms.iter().find(|n| n.norm == norm)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "seeds {:?}, selection {}\n\n| norm | row | mean | std | min | max |\n|---|---|---|---|---|---|\n",
            self.seeds, self.selection
        );
        for n in &self.norms {
            for r in &n.rows {
                s.push_str(&format!(
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                    n.norm.name(),
                    r.name,
                    r.mean,
                    r.std,
                    r.min,
                    r.max
                ));
            }
        }
        s
    }
}

struct NormRuns {
    norm: NormMode,
    nn: Vec<f64>,
    proposed: Vec<f64>,
    reports: Vec<PathBuf>,
}

/// Train, extract and evaluate once per seed and norm mode.
///
/// Layout: `seed-<s>/model.rqm` and `seed-<s>/<norm>/{store.rqf, report.json,
/// outcomes.jsonl, traces.jsonl}`, plus `summary.json` and `summary.md`.
pub fn cmd_bench(cfg: &RunConfig) -> CliResult<BenchSummary> {
    cfg.validate()?;
    let pool = load_pool(cfg)?;
    let mut per_norm: Vec<NormRuns> = cfg
        .bench_norms
        .iter()
        .map(|&norm| NormRuns {
            norm,
            nn: Vec::new(),
            proposed: Vec::new(),
            reports: Vec::new(),
        })
        .collect();
    for &seed in &cfg.bench_seeds {
        let mut run = cfg.clone();
        run.seeds = crate::config::Seeds::all(seed);
        let run = run.resolved();
        let split = stratified_split(&pool, &run.split)?;
        let seed_dir = cfg.out.join(format!("seed-{seed}"));
        let trained = train_to(&run, &split, &seed_dir.join("model.rqm"))?;
        for NormRuns {
            norm,
            nn: nn_acc,
            proposed: prop_acc,
            reports,
        } in per_norm.iter_mut()
        {
            let mut run = run.clone();
            run.norm = *norm;
            let dir = seed_dir.join(norm.name());
            let store = extract_to(&trained.model, &split, *norm, &dir.join("store.rqf"))?;
            let out = eval_to(&run, &trained.model, &store, &split, &dir)?;
            let r = &out.evaluation.report;
            println!("seed {seed} norm {}:", norm.name());
            print_report(r);
            nn_acc.push(r.nn_only_accuracy);
            prop_acc.push(r.proposed_accuracy);
            let rel = out
                .report_path
                .strip_prefix(&cfg.out)
                .unwrap_or(&out.report_path);
            reports.push(rel.to_path_buf());
        }
    }
    let norms = per_norm
        .into_iter()
        .map(
            |NormRuns {
                 norm,
                 nn,
                 proposed: prop,
                 reports,
             }| {
                let gains: Vec<f64> = prop.iter().zip(&nn).map(|(p, n)| p - n).collect();
                NormSummary {
                    norm,
                    proposed_never_below_nn: gains.iter().all(|&g| g >= 0.0),
                    mean_improvement: gains.iter().sum::<f64>() / gains.len() as f64,
                    rows: vec![
                        SummaryRow::new("cnn_nn", nn),
                        SummaryRow::new("proposed", prop),
                    ],
                    reports,
                }
            },
        )
        .collect();
    let summary = BenchSummary {
        seeds: cfg.bench_seeds.clone(),
        selection: cfg.selection.to_string(),
        norms,
    };
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("summary.json"), &summary)?;
    fs::write(cfg.out.join("summary.md"), summary.to_markdown())?;
    print!("{}", summary.to_markdown());
    Ok(summary)
}
