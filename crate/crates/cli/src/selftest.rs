//! Oracle suites: finite-difference gradients, the naive convolution, and
//! brute-force metric references.

use std::fmt;

use msr_core::eval::{mann_whitney_u, pr_ap, roc_auc, MwMode, ScoredSample};
use msr_core::model::{ChannelPlan, LossConfig, ModelParams, ReconNorm};
use msr_core::nn::ConvLayer;
use msr_core::oracle::{
    auc_pair_counting, ap_enumeration, check_layer_gradients, check_loss_gradients, conv3d_naive, mann_whitney_enumeration,
    GradCheck,
};
use msr_core::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

fn grad_check(name: String, g: &GradCheck) -> Check {
    // a check where every coordinate sat on a kink proves nothing
    let passed = g.max_rel_error < GRAD_TOL && g.checked > 0;
    Check {
        detail: format!(
            "max relative error {:.2e} over {} coordinates ({} skipped at kinks)",
            g.max_rel_error, g.checked, g.skipped
        ),
        name,
        passed,
    }
}

/// Every layer's backward pass, and the full loss on a `[1, 1, 8, 8, 4]`
/// patch with a 1→2→3 encoder, under each loss setting.
pub fn gradient_checks(seed: u64) -> msr_core::Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut out: Vec<Check> = check_layer_gradients(&mut rng, GRAD_EPS)?
        .iter()
        .map(|(n, g)| grad_check(format!("gradient {n}"), g))
        .collect();
    let plan = ChannelPlan {
        encoder: [2, 3],
        decoder: [2, 2],
    };
    let params = ModelParams::<f32>::init(plan, &mut rng)?.cast::<f64>();
    let x = Tensor::<f32>::gaussian(&mut rng, &[1, 1, 8, 8, 4], 0.5, 0.2)?.cast::<f64>();
    let xc = Tensor::<f32>::gaussian(&mut rng, &[1, 1, 8, 8, 4], 0.5, 0.2)?.cast::<f64>();
    for (label, recon, on_clean) in [
        ("L1", ReconNorm::L1, false),
        ("L1, sparsity on clean", ReconNorm::L1, true),
        ("L2", ReconNorm::L2, false),
    ] {
        let cfg = LossConfig {
            lambda: 0.001,
            gamma: 0.0005,
            recon,
            sparsity_on_clean: on_clean,
        };
        let mut total = GradCheck::default();
        for (_, g) in check_loss_gradients(&params, &x, &xc, &cfg, GRAD_EPS)? {
            total.merge(g);
        }
        out.push(grad_check(format!("gradient loss ({label})"), &total));
    }
    Ok(out)
}

pub const CONV_TOL: f64 = 1e-5;

/// `n` random convolutions up to `[2, 3, 6, 6, 6]` against the nested-loop
/// oracle. Error is measured relative to the largest output magnitude.
pub fn conv_oracle(seed: u64, n: usize) -> msr_core::Result<Check> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let nb = 1 + rng.below(2);
        let ci = 1 + rng.below(3);
        let co = 1 + rng.below(3);
        let [d, h, w] = [1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)];
        let weight = Tensor::<f32>::gaussian(&mut rng, &[co, ci, 3, 3, 3], 0.0, 1.0)?;
        let bias = Tensor::<f32>::gaussian(&mut rng, &[co], 0.0, 1.0)?;
        let x = Tensor::<f32>::gaussian(&mut rng, &[nb, ci, d, h, w], 0.0, 1.0)?;
        let got = ConvLayer::new(weight.clone(), bias.clone())?.forward(&x)?;
        let want = conv3d_naive(&ConvLayer::new(weight.cast(), bias.cast())?, &x.cast());
        let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
        worst = worst.max(err / scale);
    }
    Ok(Check {
        name: "conv3d vs naive oracle".into(),
        passed: worst < CONV_TOL,
        detail: format!("{n} shapes, max relative error {worst:.2e}"),
    })
}

pub const METRIC_TOL: f64 = 1e-9;

/// Random scored list of length `2..=max_len` with heavy ties and both classes.
fn scored_list(rng: &mut Rng, max_len: usize) -> Vec<ScoredSample> {
    loop {
        let n = 2 + rng.below(max_len - 1);
        let levels = 1 + rng.below(12);
        let v: Vec<ScoredSample> = (0..n)
            .map(|i| ScoredSample {
                score: rng.below(levels) as f64 * 0.5,
                label: rng.uniform() < 0.4,
                fold: 0,
                patch_id: i,
            })
            .collect();
        if v.iter().any(|s| s.label) && v.iter().any(|s| !s.label) {
            return v;
        }
    }
}

/// AUC and AP on `lists` random lists of size ≤ 100, and the exact
/// Mann-Whitney test for every `n, m ≤ 8`.
pub fn metric_oracles(seed: u64, lists: usize) -> msr_core::Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let (mut auc_err, mut ap_err) = (0.0f64, 0.0f64);
    for _ in 0..lists {
        let s = scored_list(&mut rng, 100);
        auc_err = auc_err.max((roc_auc(&s)?.1 - auc_pair_counting(&s)).abs());
        ap_err = ap_err.max((pr_ap(&s)?.1 - ap_enumeration(&s)).abs());
    }
    let mut mw_bad = Vec::new();
    let mut pairs = 0;
    for n in 1..=8 {
        for m in 1..=8 {
            let levels = 2 + rng.below(10);
            let mut draw = |k: usize| (0..k).map(|_| rng.below(levels) as f64).collect::<Vec<_>>();
            let (a, b) = (draw(n), draw(m));
            let got = mann_whitney_u(&a, &b, MwMode::Exact)?;
            let (u, p) = mann_whitney_enumeration(&a, &b);
            pairs += 1;
            if got.u != u || got.p != p {
                mw_bad.push(format!("n={n} m={m}: U {} vs {u}, p {} vs {p}", got.u, got.p));
            }
        }
    }
    Ok(vec![
        Check {
            name: "roc_auc vs pair counting".into(),
            passed: auc_err <= METRIC_TOL,
            detail: format!("{lists} lists, max abs error {auc_err:.2e}"),
        },
        Check {
            name: "pr_ap vs threshold enumeration".into(),
            passed: ap_err <= METRIC_TOL,
            detail: format!("{lists} lists, max abs error {ap_err:.2e}"),
        },
        Check {
            name: "mann_whitney_u exact vs enumeration".into(),
            passed: mw_bad.is_empty(),
            detail: if mw_bad.is_empty() {
                format!("{pairs} size pairs, U and p identical")
            } else {
                mw_bad.join("; ")
            },
        },
    ])
}

/// Every suite with its default size.
pub fn run_all(seed: u64) -> msr_core::Result<Vec<Check>> {
    let mut out = gradient_checks(seed)?;
    out.push(conv_oracle(seed, 100)?);
    out.extend(metric_oracles(seed, 200)?);
    Ok(out)
}
