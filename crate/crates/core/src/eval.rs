//! ROC/PR metrics over pooled and fold-wise scores, and the Mann-Whitney U test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::detect::ScoreRow;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    /// `true` for the diseased stratum.
    pub label: bool,
    pub fold: usize,
    pub patch_id: usize,
}

/// One-sided condition on a stenosis grade.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradeBound {
    Lt(f64),
    Le(f64),
    Gt(f64),
    Ge(f64),
}

impl GradeBound {
    pub fn holds(&self, grade: f64) -> bool {
        match *self {
            GradeBound::Lt(t) => grade < t,
            GradeBound::Le(t) => grade <= t,
            GradeBound::Gt(t) => grade > t,
            GradeBound::Ge(t) => grade >= t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Upper-bounded stratum (`Lt`/`Le`).
    pub negative: GradeBound,
    /// Lower-bounded stratum (`Gt`/`Ge`).
    pub positive: GradeBound,
}

impl TaskSpec {
    /// Mild (< 0.3) against severe (> 0.7).
    pub fn task_a() -> Self {
        TaskSpec {
            name: "A".into(),
            negative: GradeBound::Lt(0.3),
            positive: GradeBound::Gt(0.7),
        }
    }

    /// Below 0.4 against 0.4 and above.
    pub fn task_b() -> Self {
        TaskSpec {
            name: "B".into(),
            negative: GradeBound::Lt(0.4),
            positive: GradeBound::Ge(0.4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use GradeBound::*;
        let ok = match (self.negative, self.positive) {
            (Lt(a), Gt(b)) | (Lt(a), Ge(b)) | (Le(a), Gt(b)) => a <= b,
            (Le(a), Ge(b)) => a < b,
            _ => false,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "task {} needs an upper-bounded negative and a disjoint lower-bounded positive stratum",
                self.name
            )));
        }
        Ok(())
    }

    /// `Some(label)` for patches in either stratum, `None` otherwise.
    pub fn label(&self, grade: f64) -> Option<bool> {
        if self.positive.holds(grade) {
            Some(true)
        } else if self.negative.holds(grade) {
            Some(false)
        } else {
            None
        }
    }

    pub fn samples(&self, rows: &[ScoreRow], fold: usize) -> Vec<ScoredSample> {
        rows.iter()
            .filter_map(|r| {
                self.label(r.stenosis_grade_label).map(|label| ScoredSample {
                    score: r.abnormality_grade as f64,
                    label,
                    fold,
                    patch_id: r.patch_id,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label).count();
    (pos, samples.len() - pos)
}

/// `(threshold, positives, negatives)` per distinct score, descending.
fn tie_groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for s in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s.score => {
                if s.label {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s.score, usize::from(s.label), usize::from(!s.label))),
        }
    }
    groups
}

/// ROC curve from a descending threshold sweep and its trapezoidal area.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(Vec<RocPoint>, f64)> {
    let (p, n) = class_counts(samples);
    if p == 0 || n == 0 {
        return Err(Error::invalid(format!("ROC needs both classes, got {p} positives and {n} negatives")));
    }
    let (pf, nf) = (p as f64, n as f64);
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (t, gp, gn) in tie_groups(samples) {
        let (tp0, fp0) = (tp, fp);
        tp += gp;
        fp += gn;
        // a tie group contributes a diagonal segment: half credit
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        curve.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nf,
            tpr: tp as f64 / pf,
        });
    }
    Ok((curve, area / (pf * nf)))
}

/// Step-interpolated average precision, one step per tie group.
pub fn pr_ap(samples: &[ScoredSample]) -> Result<(Vec<PrPoint>, f64)> {
    let (p, _) = class_counts(samples);
    if p == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (t, gp, gn) in tie_groups(samples) {
        tp += gp;
        seen += gp + gn;
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
        curve.push(PrPoint {
            threshold: t,
            recall,
            precision,
        });
    }
    Ok((curve, ap))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwMode {
    /// Normal approximation with tie-corrected variance and continuity correction.
    #[default]
    Normal,
    /// Exact permutation distribution; only for `n + m <= EXACT_MAX`.
    Exact,
    /// Exact when small enough, normal otherwise.
    Auto,
}

pub const EXACT_MAX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Statistic of the first sample: `R_a − n(n+1)/2`.
    pub u: f64,
    /// Two-sided.
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], mode: MwMode) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("Mann-Whitney input contains NaN"));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let ra: f64 = ranks[..n].iter().sum();
    let u = ra - (n * (n + 1)) as f64 / 2.0;
    let exact = match mode {
        MwMode::Normal => false,
        MwMode::Exact => {
            if n + m > EXACT_MAX {
                return Err(Error::invalid(format!("exact Mann-Whitney limited to n + m <= {EXACT_MAX}, got {}", n + m)));
            }
            true
        }
        MwMode::Auto => n + m <= EXACT_MAX,
    };
    let p = if exact { exact_p(&ranks, n) } else { normal_p(u, &pooled, n, m) };
    Ok(MannWhitney { u, p, exact })
}

fn normal_p(u: f64, pooled: &[f64], n: usize, m: usize) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = nf * mf / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Fraction of the `C(N, n)` label arrangements whose `|U − nm/2|` is at
/// least the observed one, counted by dynamic programming over doubled
/// midranks (which are integers).
fn exact_p(ranks: &[f64], n: usize) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0u64; max_sum + 1]; n + 1];
    ways[0][0] = 1;
    for &d in &doubled {
        for k in (1..=n).rev() {
            for s in (d..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - d];
            }
        }
    }
    let m = ranks.len() - n;
    let centre = (n * (n + 1) + n * m) as i64; // doubled rank sum at U = nm/2
    let observed: i64 = doubled[..n].iter().sum::<usize>() as i64;
    let dist = (observed - centre).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for (s, &w) in ways[n].iter().enumerate() {
        total += w;
        if (s as i64 - centre).abs() >= dist {
            extreme += w;
        }
    }
    extreme as f64 / total as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// One curve over the union of every fold's test scores.
    #[default]
    Pooled,
    /// Mean of the fold-wise metrics.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTaskReport {
    pub variant: String,
    pub task: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub pooled_auc: f64,
    pub pooled_ap: f64,
    pub macro_auc: f64,
    pub macro_ap: f64,
    /// Pooled or macro value, per the report's aggregation setting.
    pub auc: f64,
    pub ap: f64,
    pub folds: Vec<usize>,
    pub fold_auc: Vec<f64>,
    pub fold_ap: Vec<f64>,
    /// Fold AUCs against an equally long list of 0.5.
    pub auc_vs_chance: MannWhitney,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    #[serde(skip)]
    pub pr: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: String,
    pub metric: String,
    pub a: String,
    pub b: String,
    pub u: f64,
    pub p: f64,
}

/// "MSR variants are at least as good as non-MSR variants" on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalClaim {
    pub task: String,
    pub min_msr_auc: f64,
    pub max_non_msr_auc: f64,
    pub holds: bool,
    /// Fold AUCs of all MSR variants against those of all non-MSR variants.
    pub test: MannWhitney,
}

/// Test rows per variant, as `(fold, rows)` pairs.
pub type ExperimentScores = BTreeMap<String, Vec<(usize, Vec<ScoreRow>)>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub mw_mode: MwMode,
    pub tasks: Vec<TaskSpec>,
    pub results: Vec<VariantTaskReport>,
    pub comparisons: Vec<Comparison>,
    pub directional: Vec<DirectionalClaim>,
}

impl EvalReport {
    pub fn get(&self, variant: &str, task: &str) -> Option<&VariantTaskReport> {
        self.results.iter().find(|r| r.variant == variant && r.task == task)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub aggregation: Aggregation,
    pub mw_mode: MwMode,
    /// Variant names counted as MSR in the directional claim.
    pub msr_variants: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            aggregation: Aggregation::Pooled,
            mw_mode: MwMode::Auto,
            msr_variants: vec!["SAE-MSR".into(), "SDAE-MSR".into()],
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Metrics for one variant and task; `folds` holds each fold's score rows.
pub fn evaluate_variant(
    variant: &str,
    folds: &[(usize, Vec<ScoreRow>)],
    task: &TaskSpec,
    opts: &EvalOptions,
) -> Result<VariantTaskReport> {
    task.validate()?;
    let mut pooled = Vec::new();
    let (mut used, mut fold_auc, mut fold_ap) = (Vec::new(), Vec::new(), Vec::new());
    for (fold, rows) in folds {
        let samples = task.samples(rows, *fold);
        match (roc_auc(&samples), pr_ap(&samples)) {
            (Ok((_, auc)), Ok((_, ap))) => {
                used.push(*fold);
                fold_auc.push(auc);
                fold_ap.push(ap);
            }
            _ => log::warn!("{variant}, task {}: fold {fold} lacks a class; kept only in the pool", task.name),
        }
        pooled.extend(samples);
    }
    let (roc, pooled_auc) = roc_auc(&pooled)?;
    let (pr, pooled_ap) = pr_ap(&pooled)?;
    let (n_positive, n_negative) = class_counts(&pooled);
    let (macro_auc, macro_ap) = (mean(&fold_auc), mean(&fold_ap));
    let (auc, ap) = match opts.aggregation {
        Aggregation::Pooled => (pooled_auc, pooled_ap),
        Aggregation::Macro => (macro_auc, macro_ap),
    };
    let auc_vs_chance = if fold_auc.is_empty() {
        MannWhitney { u: f64::NAN, p: f64::NAN, exact: false }
    } else {
        mann_whitney_u(&fold_auc, &vec![0.5; fold_auc.len()], opts.mw_mode)?
    };
    Ok(VariantTaskReport {
        variant: variant.to_string(),
        task: task.name.clone(),
        n_positive,
        n_negative,
        pooled_auc,
        pooled_ap,
        macro_auc,
        macro_ap,
        auc,
        ap,
        folds: used,
        fold_auc,
        fold_ap,
        auc_vs_chance,
        roc,
        pr,
    })
}

/// Every variant on every task, plus pairwise fold-wise tests.
///
/// `scores[variant]` lists `(fold, rows)` for each evaluated fold.
pub fn evaluate_experiment(
    scores: &ExperimentScores,
    tasks: &[TaskSpec],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("experiment scores"));
    }
    let mut results = Vec::new();
    for task in tasks {
        for (variant, folds) in scores {
            results.push(evaluate_variant(variant, folds, task, opts)?);
        }
    }
    let mut comparisons = Vec::new();
    let mut directional = Vec::new();
    for task in tasks {
        let rows: Vec<&VariantTaskReport> = results.iter().filter(|r| r.task == task.name).collect();
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                for (metric, xa, xb) in [("auc", &a.fold_auc, &b.fold_auc), ("ap", &a.fold_ap, &b.fold_ap)] {
                    if xa.is_empty() || xb.is_empty() {
                        continue;
                    }
                    let t = mann_whitney_u(xa, xb, opts.mw_mode)?;
                    comparisons.push(Comparison {
                        task: task.name.clone(),
                        metric: metric.into(),
                        a: a.variant.clone(),
                        b: b.variant.clone(),
                        u: t.u,
                        p: t.p,
                    });
                }
            }
        }
        let (msr, other): (Vec<&&VariantTaskReport>, Vec<&&VariantTaskReport>) =
            rows.iter().partition(|r| opts.msr_variants.contains(&r.variant));
        if !msr.is_empty() && !other.is_empty() {
            let min_msr_auc = msr.iter().map(|r| r.pooled_auc).fold(f64::INFINITY, f64::min);
            let max_non_msr_auc = other.iter().map(|r| r.pooled_auc).fold(f64::NEG_INFINITY, f64::max);
            let xa: Vec<f64> = msr.iter().flat_map(|r| r.fold_auc.iter().copied()).collect();
            let xb: Vec<f64> = other.iter().flat_map(|r| r.fold_auc.iter().copied()).collect();
            if !xa.is_empty() && !xb.is_empty() {
                directional.push(DirectionalClaim {
                    task: task.name.clone(),
                    min_msr_auc,
                    max_non_msr_auc,
                    holds: min_msr_auc >= max_non_msr_auc,
                    test: mann_whitney_u(&xa, &xb, opts.mw_mode)?,
                });
            }
        }
    }
    Ok(EvalReport {
        aggregation: opts.aggregation,
        mw_mode: opts.mw_mode,
        tasks: tasks.to_vec(),
        results,
        comparisons,
        directional,
    })
}

pub fn write_roc_csv<W: std::io::Write>(w: W, curve: &[RocPoint]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for p in curve {
        csv.serialize(p)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_pr_csv<W: std::io::Write>(w: W, curve: &[PrPoint]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for p in curve {
        csv.serialize(p)?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;

    fn samples(pos: &[f64], neg: &[f64]) -> Vec<ScoredSample> {
        let mk = |score: f64, label: bool| ScoredSample { score, label, fold: 0, patch_id: 0 };
        pos.iter().map(|&s| mk(s, true)).chain(neg.iter().map(|&s| mk(s, false))).collect()
    }

    fn random_samples(rng: &mut Rng, max_len: usize, levels: usize) -> Vec<ScoredSample> {
        let n = 2 + rng.below(max_len - 1);
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|i| ScoredSample {
                score: rng.below(levels) as f64,
                label: rng.uniform() < 0.4,
                fold: 0,
                patch_id: i,
            })
            .collect();
        s[0].label = true;
        s[1].label = false;
        s
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&samples(&[0.9, 0.8], &[0.1, 0.2])).unwrap().1, 1.0);
        assert_eq!(roc_auc(&samples(&[3.0, 3.0], &[3.0, 3.0, 3.0])).unwrap().1, 0.5);
        assert!(roc_auc(&samples(&[1.0], &[])).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let s = random_samples(&mut rng, 50, 8);
            let a = roc_auc(&s).unwrap().1;
            assert!((a - oracle::auc_pair_counting(&s)).abs() < 1e-9);
        }
    }

    #[test]
    fn roc_curve_is_monotone() {
        let mut rng = Rng::new(2);
        let s = random_samples(&mut rng, 80, 10);
        let (curve, _) = roc_auc(&s).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let last = curve.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn auc_rank_invariance_and_reversal() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let s = random_samples(&mut rng, 40, 1000);
            let a = roc_auc(&s).unwrap().1;
            let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: (x.score * 0.01).exp(), ..*x }).collect();
            assert!((roc_auc(&t).unwrap().1 - a).abs() < 1e-12);
            let distinct = {
                let mut v: Vec<f64> = s.iter().map(|x| x.score).collect();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[0] != w[1])
            };
            if distinct {
                let r: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { label: !x.label, ..*x }).collect();
                assert!((roc_auc(&r).unwrap().1 - (1.0 - a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_ap(&samples(&[5.0, 4.0], &[1.0, 2.0])).unwrap().1, 1.0);
        assert_eq!(pr_ap(&samples(&[1.0], &[2.0, 3.0, 4.0])).unwrap().1, 0.25);
        let flat = samples(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert!((pr_ap(&flat).unwrap().1 - 0.4).abs() < 1e-15);
        assert!(pr_ap(&samples(&[], &[1.0])).is_err());
    }

    #[test]
    fn ap_matches_enumeration() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let s = random_samples(&mut rng, 100, 12);
            let a = pr_ap(&s).unwrap().1;
            assert!((a - oracle::ap_enumeration(&s)).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_at_least_prevalence_when_positives_lead() {
        let s = samples(&[9.0, 8.0, 8.0], &[1.0, 2.0, 3.0, 3.0, 0.0]);
        assert!(pr_ap(&s).unwrap().1 >= 3.0 / 8.0);
    }

    #[test]
    fn midrank_values() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mw_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], MwMode::Exact).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p - 0.1).abs() < 1e-15);
        let x = [1.0, 4.0, 2.0, 9.0];
        let r = mann_whitney_u(&x, &x, MwMode::Normal).unwrap();
        assert_eq!(r.u, 8.0);
        assert!(r.p > 0.99);
        assert!(mann_whitney_u(&[], &[1.0], MwMode::Normal).is_err());
        assert!(mann_whitney_u(&[0.0; 9], &[1.0; 8], MwMode::Exact).is_err());
    }

    #[test]
    fn u_statistics_are_complementary() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..1 + rng.below(10)).map(|_| rng.below(6) as f64).collect();
            let b: Vec<f64> = (0..1 + rng.below(10)).map(|_| rng.below(6) as f64).collect();
            let ab = mann_whitney_u(&a, &b, MwMode::Normal).unwrap();
            let ba = mann_whitney_u(&b, &a, MwMode::Normal).unwrap();
            assert_eq!(ab.u + ba.u, (a.len() * b.len()) as f64);
            assert!((ab.p - ba.p).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_matches_enumeration_for_small_samples() {
        let mut rng = Rng::new(6);
        for n in 1..=8 {
            for m in 1..=8 {
                let a: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.below(5) as f64).collect();
                let fast = mann_whitney_u(&a, &b, MwMode::Exact).unwrap();
                let (u, p) = oracle::mann_whitney_enumeration(&a, &b);
                assert_eq!(fast.u, u);
                assert_eq!(fast.p, p);
            }
        }
    }

    #[test]
    fn normal_approximation_tracks_exact() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.uniform() + 0.2).collect();
            let normal = mann_whitney_u(&a, &b, MwMode::Normal).unwrap().p;
            let exact = mann_whitney_u(&a, &b, MwMode::Exact).unwrap().p;
            assert!((normal - exact).abs() <= 0.02, "{normal} vs {exact}");
        }
    }

    #[test]
    fn chance_reference_for_five_folds() {
        let r = mann_whitney_u(&[0.8, 0.9, 0.7, 0.85, 0.75], &[0.5; 5], MwMode::Auto).unwrap();
        assert!(r.exact);
        assert!((r.p - 2.0 / 252.0).abs() < 1e-15);
    }

    fn rows(grades: &[(f64, usize)]) -> Vec<ScoreRow> {
        grades
            .iter()
            .enumerate()
            .map(|(i, &(g, s))| ScoreRow {
                patch_id: i,
                subject_id: 0,
                split: crate::detect::Split::Test,
                stenosis_grade_label: g,
                abnormality_grade: s,
            })
            .collect()
    }

    #[test]
    fn task_labels() {
        let a = TaskSpec::task_a();
        assert_eq!(a.label(0.29), Some(false));
        assert_eq!(a.label(0.5), None);
        assert_eq!(a.label(0.7), None);
        assert_eq!(a.label(0.71), Some(true));
        let b = TaskSpec::task_b();
        assert_eq!(b.label(0.4), Some(true));
        assert_eq!(b.label(0.399), Some(false));
        let bad = TaskSpec {
            name: "x".into(),
            negative: GradeBound::Le(0.5),
            positive: GradeBound::Ge(0.5),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pooling_is_idempotent_and_matches_oracle() {
        let r = rows(&[(0.1, 3), (0.8, 9), (0.2, 5), (0.9, 5), (0.75, 2), (0.05, 0), (0.5, 7)]);
        let task = TaskSpec::task_a();
        let opts = EvalOptions::default();
        let one = evaluate_variant("SAE", &[(0, r.clone())], &task, &opts).unwrap();
        let two = evaluate_variant("SAE", &[(0, r.clone()), (1, r.clone())], &task, &opts).unwrap();
        assert!((one.pooled_auc - two.pooled_auc).abs() < 1e-15);
        let all: Vec<ScoredSample> = task.samples(&r, 0).into_iter().chain(task.samples(&r, 1)).collect();
        assert!((two.pooled_auc - oracle::auc_pair_counting(&all)).abs() < 1e-12);
        assert_eq!(two.fold_auc.len(), 2);
    }

    #[test]
    fn degenerate_fold_only_pooled() {
        let good = rows(&[(0.1, 1), (0.8, 4)]);
        let only_neg = rows(&[(0.1, 2), (0.2, 3)]);
        let rep = evaluate_variant("SAE", &[(0, good), (1, only_neg)], &TaskSpec::task_a(), &EvalOptions::default()).unwrap();
        assert_eq!(rep.folds, vec![0]);
        assert_eq!(rep.n_negative, 3);
    }

    #[test]
    fn experiment_self_comparison() {
        let r = rows(&[(0.1, 3), (0.8, 9), (0.2, 5), (0.9, 5), (0.75, 2), (0.05, 0)]);
        let r2 = rows(&[(0.1, 1), (0.8, 9), (0.2, 6), (0.9, 8), (0.75, 2), (0.05, 0)]);
        let folds = vec![(0, r.clone()), (1, r2.clone()), (2, r)];
        let mut scores = BTreeMap::new();
        scores.insert("SAE".to_string(), folds.clone());
        scores.insert("SAE-MSR".to_string(), folds);
        let rep = evaluate_experiment(&scores, &[TaskSpec::task_a(), TaskSpec::task_b()], &EvalOptions::default()).unwrap();
        assert_eq!(rep.results.len(), 4);
        for c in &rep.comparisons {
            assert!(c.p > 0.99, "{c:?}");
        }
        assert!(rep.directional.iter().all(|d| d.holds));
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.results[0].pooled_auc, rep.results[0].pooled_auc);
    }
}
