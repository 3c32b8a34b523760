//! The cross-validated experiment: cohort, per-job training and scoring,
//! and the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use msr_core::corrupt::{CorruptionSpec, Variant};
use msr_core::detect::{abnormality_grades, calibrate, read_scores, write_scores, CalibrationStats, ScoreRow, Split};
use msr_core::eval::{evaluate_experiment, evaluate_variant, write_pr_csv, write_roc_csv, EvalReport, ExperimentScores, TaskSpec};
use msr_core::model::{load_checkpoint, save_checkpoint, LossConfig, ModelParams};
use msr_core::phantom::{build_cohort, fold_splits, Dataset, FoldSplit};
use msr_core::rng::{fnv1a, Rng};
use msr_core::train::{train_with, EpochRecord, TrainConfig, TrainLog};
use msr_core::Tensor;

use crate::config::{job_seed, ExperimentConfig, GridSpec, CHECKPOINT_DIR, SCORES, SUMMARY, TRAIN_LOG, TRAIN_POOL};
use crate::error::{CliError, Result};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(msr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

/// Runs `f` on every item with at most `jobs` worker threads. Results keep
/// the input order; the first failure in that order is returned.
pub fn run_jobs<I, T, F>(jobs: usize, items: &[I], f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// Stratum index of `grade`: the last stratum starting at or below it.
fn stratum_of(cfg: &ExperimentConfig, grade: f64) -> usize {
    cfg.cohort.strata.iter().rposition(|s| s.lo <= grade).unwrap_or(0)
}

/// Patch counts per stratum for each split of each fold.
pub fn split_table(cfg: &ExperimentConfig, data: &Dataset, splits: &[FoldSplit]) -> String {
    let strata = &cfg.cohort.strata;
    let mut out = format!("{:<6}{:<12}", "fold", "split");
    for s in strata {
        let _ = write!(out, "{:>12}", format!("[{},{})", s.lo, s.hi));
    }
    out.push_str(&format!("{:>10}\n", "total"));
    for f in splits {
        for (name, subjects) in [("train", &f.train), ("validation", &f.validation), ("test", &f.test)] {
            let mut counts = vec![0usize; strata.len()];
            for m in data.meta.iter().filter(|m| subjects.contains(&m.subject_id)) {
                counts[stratum_of(cfg, m.stenosis_grade)] += 1;
            }
            let _ = write!(out, "{:<6}{:<12}", f.fold, name);
            for c in &counts {
                let _ = write!(out, "{c:>12}");
            }
            let _ = writeln!(out, "{:>10}", counts.iter().sum::<usize>());
        }
    }
    out
}

/// Builds the cohort and writes it to the data directory.
pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let dir = cfg.data_dir();
    let occupied = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::config(format!("{} is not empty; pass --force to replace it", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let data = build_cohort(&cfg.cohort)?;
    data.save(&dir)?;
    let splits = fold_splits(&cfg.cohort)?;
    Ok(split_table(cfg, &data, &splits))
}

/// Loads the cohort and checks it was built from the configured spec.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = Dataset::load(&cfg.data_dir())?;
    if data.spec != cfg.cohort {
        return Err(CliError::config(format!(
            "cohort in {} was generated from a different spec; rerun gen-data --force",
            cfg.data_dir().display()
        )));
    }
    Ok(data)
}

fn split_for(cfg: &ExperimentConfig, fold: usize) -> Result<FoldSplit> {
    fold_splits(&cfg.cohort)?
        .into_iter()
        .find(|s| s.fold == fold)
        .ok_or_else(|| CliError::config(format!("fold {fold} outside 0..{}", cfg.cohort.k_folds)))
}

/// Normal patches (grade below the training threshold) of the training subjects.
pub fn training_ids(cfg: &ExperimentConfig, data: &Dataset, split: &FoldSplit) -> Vec<usize> {
    data.select(&split.train, |g| g < cfg.normal_grade_threshold)
}

/// Normal patches (grade below the calibration threshold) of the validation subjects.
pub fn calibration_ids(cfg: &ExperimentConfig, data: &Dataset, split: &FoldSplit) -> Vec<usize> {
    data.select(&split.validation, |g| g < cfg.calibration_grade_threshold)
}

/// Initialises and trains one model on the patches `ids`.
pub fn fit(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ids: &[usize],
    corruption: &CorruptionSpec,
    loss: &LossConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord) -> msr_core::Result<()>,
) -> Result<(ModelParams, TrainLog)> {
    if ids.len() < 2 {
        return Err(CliError::config(format!("training pool has {} patches; need at least 2", ids.len())));
    }
    let patches = data.gather(ids)?;
    let mut params = ModelParams::init(cfg.channel_plan, &mut Rng::derive(train_cfg.seed, fnv1a(b"init")))?;
    let log = train_with(&mut params, &patches, corruption, loss, train_cfg, on_epoch)?;
    Ok((params, log))
}

/// One patch of a job's training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub patch_id: usize,
    pub subject_id: usize,
    pub stenosis_grade: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub steps: usize,
    pub final_loss: f64,
}

/// Trains one (variant, fold) job and writes its checkpoint and log.
pub fn train_job(cfg: &ExperimentConfig, data: &Dataset, variant: Variant, fold: usize) -> Result<TrainSummary> {
    let split = split_for(cfg, fold)?;
    let seed = job_seed(cfg.master_seed, variant.name(), fold);
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let dir = cfg.job_dir(variant, fold);
    let ids = training_ids(cfg, data, &split);

    let mut pool = csv::Writer::from_writer(create(&dir.join(TRAIN_POOL))?);
    for &i in &ids {
        let m = &data.meta[i];
        pool.serialize(PoolRow {
            patch_id: i,
            subject_id: m.subject_id,
            stenosis_grade: m.stenosis_grade,
        })
        .map_err(msr_core::Error::from)?;
    }
    pool.flush()?;

    // the log is written as training goes so long runs can be followed
    let mut out = create(&dir.join(TRAIN_LOG))?;
    out.write_all(train_cfg.header().as_bytes())?;
    out.flush()?;
    let mut rows = csv::Writer::from_writer(out);
    let (params, log) = fit(cfg, data, &ids, &variant.corruption(), &cfg.loss, &train_cfg, |r| {
        rows.serialize(r)?;
        rows.flush()?;
        Ok(())
    })
    .inspect_err(|e| log::error!("{variant} fold {fold}: {e}"))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt).map_err(|e| io_err(&ckpt, e))?;
    }
    save_checkpoint(&ckpt, &params, &cfg.loss)?;
    Ok(TrainSummary {
        variant,
        fold,
        seed,
        n_train: ids.len(),
        steps: log.steps,
        final_loss: log.epochs.last().map_or(f64::NAN, |r| r.mean_total_loss),
    })
}

/// Calibrates `params` on the validation normals and grades every patch of
/// the given splits.
pub fn score_patches(
    cfg: &ExperimentConfig,
    data: &Dataset,
    params: &ModelParams,
    split: &FoldSplit,
    which: &[Split],
) -> Result<(CalibrationStats, Vec<ScoreRow>)> {
    let normals = data.gather(&calibration_ids(cfg, data, split))?;
    let stats = calibrate(params, &normals, cfg.inference_batch)?;
    let mut rows = Vec::new();
    for &part in which {
        let subjects = match part {
            Split::Validation => &split.validation,
            Split::Test => &split.test,
        };
        let ids = data.select(subjects, |_| true);
        let patches: Tensor = data.gather(&ids)?;
        for s in abnormality_grades(params, &stats, &patches, &ids, cfg.inference_batch, false)? {
            let m = &data.meta[s.patch_id];
            rows.push(ScoreRow {
                patch_id: s.patch_id,
                subject_id: m.subject_id,
                split: part,
                stenosis_grade_label: m.stenosis_grade,
                abnormality_grade: s.grade,
            });
        }
    }
    Ok((stats, rows))
}

/// Scores one job's validation and test patches and writes the scores CSV.
pub fn score_job(cfg: &ExperimentConfig, data: &Dataset, variant: Variant, fold: usize) -> Result<CalibrationStats> {
    let split = split_for(cfg, fold)?;
    let dir = cfg.job_dir(variant, fold);
    let (params, manifest) = load_checkpoint(&dir.join(CHECKPOINT_DIR))?;
    if manifest.channel_plan != cfg.channel_plan {
        return Err(CliError::config(format!(
            "checkpoint in {} has channel plan {:?}, config has {:?}",
            dir.display(),
            manifest.channel_plan,
            cfg.channel_plan
        )));
    }
    let (stats, rows) = score_patches(cfg, data, &params, &split, &[Split::Validation, Split::Test])?;
    write_scores(create(&dir.join(SCORES))?, &stats, &rows)?;
    Ok(stats)
}

/// Test-split rows of every configured (variant, fold), or the list of
/// missing score files.
pub fn collect_scores(cfg: &ExperimentConfig) -> Result<ExperimentScores> {
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for &v in &cfg.variants {
        let mut folds = Vec::new();
        for fold in 0..cfg.cohort.k_folds {
            let path = cfg.job_dir(v, fold).join(SCORES);
            if !path.exists() {
                missing.push(path);
                continue;
            }
            let (_, rows) = read_scores(File::open(&path).map_err(|e| io_err(&path, e))?)?;
            folds.push((fold, rows.into_iter().filter(|r| r.split == Split::Test).collect()));
        }
        out.insert(v.name().to_string(), folds);
    }
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts(missing));
    }
    Ok(out)
}

/// File name stem for curve CSVs.
fn curve_stem(variant: &str, task: &str) -> String {
    format!("{variant}_task{task}")
}

/// Evaluates every variant and task and writes the summary and curves.
pub fn report(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let scores = collect_scores(cfg)?;
    let report = evaluate_experiment(&scores, &cfg.tasks, &cfg.eval)?;
    let dir = cfg.report_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for r in &report.results {
        let stem = curve_stem(&r.variant, &r.task);
        write_roc_csv(create(&dir.join(format!("{stem}_roc.csv")))?, &r.roc)?;
        write_pr_csv(create(&dir.join(format!("{stem}_pr.csv")))?, &r.pr)?;
    }
    let path = dir.join(SUMMARY);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| io_err(&path, e))?;
    Ok(report)
}

/// Human-readable table of the report.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<10}{:<6}{:>10}{:>10}{:>10}{:>10}{:>12}\n",
        "variant", "task", "auc", "ap", "macro_auc", "macro_ap", "p_vs_0.5"
    );
    for r in &report.results {
        let _ = writeln!(
            out,
            "{:<10}{:<6}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>12.3e}",
            r.variant, r.task, r.pooled_auc, r.pooled_ap, r.macro_auc, r.macro_ap, r.auc_vs_chance.p
        );
    }
    for d in &report.directional {
        let _ = writeln!(
            out,
            "task {}: min MSR auc {:.4} vs max non-MSR auc {:.4}: {} (p = {:.3e})",
            d.task,
            d.min_msr_auc,
            d.max_non_msr_auc,
            if d.holds { "holds" } else { "does not hold" },
            d.test.p
        );
    }
    out
}

/// Every (variant, fold) pair in config order.
pub fn all_jobs(cfg: &ExperimentConfig) -> Vec<(Variant, usize)> {
    cfg.variants
        .iter()
        .flat_map(|&v| (0..cfg.cohort.k_folds).map(move |f| (v, f)))
        .collect()
}

/// `gen-data` (unless the cohort is already on disk), then train, score and report.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<EvalReport> {
    if !cfg.data_dir().join(msr_core::phantom::DATASET_MANIFEST).exists() {
        gen_data(cfg, false)?;
    }
    let data = load_data(cfg)?;
    let pairs = all_jobs(cfg);
    run_jobs(jobs, &pairs, |&(v, f)| {
        train_job(cfg, &data, v, f)?;
        score_job(cfg, &data, v, f)
    })?;
    report(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub validation_auc: f64,
    pub validation_ap: f64,
}

/// Cartesian product of the grid lists as `(λ, γ, α, σ)`.
pub fn grid_points(g: &GridSpec) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    for &l in &g.lambda {
        for &c in &g.gamma {
            for &a in &g.alpha {
                for &s in &g.sigma {
                    out.push([l, c, a, s]);
                }
            }
        }
    }
    out
}

/// Trains and validates each grid point on one fold; rows sorted best first.
///
/// Every point starts from the same initialisation and seed, so the result
/// does not depend on the order of the grid lists.
pub fn gridsearch(cfg: &ExperimentConfig, data: &Dataset, jobs: usize) -> Result<Vec<GridRow>> {
    let g = &cfg.gridsearch;
    let points = grid_points(g);
    if points.is_empty() {
        return Err(CliError::config("gridsearch grid is empty"));
    }
    let split = split_for(cfg, g.fold)?;
    let task = cfg
        .tasks
        .iter()
        .find(|t| t.name == "A")
        .cloned()
        .unwrap_or_else(TaskSpec::task_a);
    let train_cfg = TrainConfig {
        seed: job_seed(cfg.master_seed, "gridsearch", g.fold),
        scale: g.scale,
        ..cfg.train.clone()
    };
    let mut rows = run_jobs(jobs, &points, |&[lambda, gamma, alpha, sigma]| {
        let corruption = CorruptionSpec::new(alpha, sigma).map_err(|e| CliError::config(e.to_string()))?;
        let loss = LossConfig {
            lambda,
            gamma,
            ..cfg.loss
        };
        loss.validate().map_err(|e| CliError::config(e.to_string()))?;
        let (params, _) = fit(cfg, data, &training_ids(cfg, data, &split), &corruption, &loss, &train_cfg, |_| Ok(()))?;
        let (_, scores) = score_patches(cfg, data, &params, &split, &[Split::Validation])?;
        let r = evaluate_variant("grid", &[(g.fold, scores)], &task, &cfg.eval)?;
        Ok(GridRow {
            rank: 0,
            lambda,
            gamma,
            alpha,
            sigma,
            validation_auc: r.pooled_auc,
            validation_ap: r.pooled_ap,
        })
    })?;
    rows.sort_by(|a, b| {
        b.validation_auc
            .total_cmp(&a.validation_auc)
            .then(b.validation_ap.total_cmp(&a.validation_ap))
            .then([a.lambda, a.gamma, a.alpha, a.sigma].partial_cmp(&[b.lambda, b.gamma, b.alpha, b.sigma]).unwrap_or(std::cmp::Ordering::Equal))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

pub fn write_grid(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(msr_core::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
