//! Slow, obviously-correct reference implementations used by tests and by
//! the `selftest` command.

use crate::error::Result;
use crate::eval::{midranks, ScoredSample};
use crate::model::{kink_signature, loss, loss_backward, LossConfig, ModelParams, PARAM_NAMES};
use crate::nn::{maxpool2_backward, maxpool2_forward, upsample2_backward, upsample2_forward, ConvLayer, PReluLayer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Direct nested-loop 3-D convolution with zero "same" padding.
pub fn conv3d_naive(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [nb, ci, dd, hh, ww] = <[usize; 5]>::try_from(x.shape()).expect("rank 5 input");
    let ws = layer.weight.shape();
    let (co, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let w = |o: usize, i: usize, a: usize, b: usize, c: usize| layer.weight.data()[(((o * ci + i) * kd + a) * kh + b) * kw + c];
    let xv = |n: usize, i: usize, d: isize, h: isize, v: isize| -> f64 {
        if d < 0 || h < 0 || v < 0 || d >= dd as isize || h >= hh as isize || v >= ww as isize {
            return 0.0;
        }
        x.data()[(((n * ci + i) * dd + d as usize) * hh + h as usize) * ww + v as usize]
    };
    let mut out = Tensor::zeros(&[nb, co, dd, hh, ww]);
    let data = out.data_mut();
    let mut idx = 0;
    for n in 0..nb {
        for o in 0..co {
            for d in 0..dd {
                for h in 0..hh {
                    for v in 0..ww {
                        let mut acc = layer.bias.data()[o];
                        for i in 0..ci {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let sd = d as isize + a as isize - (kd / 2) as isize;
                                        let sh = h as isize + b as isize - (kh / 2) as isize;
                                        let sw = v as isize + c as isize - (kw / 2) as isize;
                                        acc += w(o, i, a, b, c) * xv(n, i, sd, sh, sw);
                                    }
                                }
                            }
                        }
                        data[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`] in gradient checks.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference comparison over one or more tensors.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates where a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Central differences over `analytic.len()` coordinates.
///
/// `eval(i, delta)` returns the objective and its kink signature with
/// coordinate `i` shifted by `delta`. Coordinates whose signature at `±eps`
/// differs from the unperturbed one are skipped.
pub fn central_differences(
    label: &str,
    analytic: &[f64],
    eps: f64,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, Vec<i64>)>,
) -> Result<GradCheck> {
    let mut report = GradCheck::default();
    for (i, &a) in analytic.iter().enumerate() {
        let (_, base) = eval(i, 0.0)?;
        let (plus, sig_plus) = eval(i, eps)?;
        let (minus, sig_minus) = eval(i, -eps)?;
        if sig_plus != base || sig_minus != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(a, numeric, GRAD_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{label}[{i}]: analytic {a:e}, numeric {numeric:e}");
        }
    }
    Ok(report)
}

fn shifted(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut out = t.clone();
    out.data_mut()[i] += delta;
    out
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Every parameter of the full loss against central differences.
pub fn check_loss_gradients(
    params: &ModelParams<f64>,
    x_clean: &Tensor<f64>,
    x_corrupted: &Tensor<f64>,
    cfg: &LossConfig,
    eps: f64,
) -> Result<Vec<(&'static str, GradCheck)>> {
    let (_, grads) = loss_backward(params, x_clean, x_corrupted, cfg)?;
    let mut out = Vec::new();
    for (k, (name, g)) in grads.tensors().into_iter().enumerate() {
        let report = central_differences(name, g.data(), eps, |i, delta| {
            let mut p = params.clone();
            p.tensors_mut()[k].1.data_mut()[i] += delta;
            Ok((
                loss(&p, x_clean, x_corrupted, cfg)?.total,
                kink_signature(&p, x_clean, x_corrupted, cfg)?,
            ))
        })?;
        debug_assert_eq!(name, PARAM_NAMES[k]);
        out.push((name, report));
    }
    Ok(out)
}

/// Per-layer checks of every backward pass against the scalar objective
/// `Σ r ⊙ layer(x)` for a fixed random `r`.
pub fn check_layer_gradients(rng: &mut Rng, eps: f64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut gauss = |shape: &[usize]| Tensor::<f32>::gaussian(rng, shape, 0.0, 1.0).map(|t| t.cast::<f64>());
    let x = gauss(&[2, 3, 4, 6, 4])?;
    let mut out = Vec::new();

    let conv = ConvLayer::new(gauss(&[2, 3, 3, 3, 3])?, gauss(&[2])?)?;
    let r = gauss(&[2, 2, 4, 6, 4])?;
    let g = conv.backward(&x, &r)?;
    let no_kinks = Vec::new;
    let objective = |c: &ConvLayer<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<i64>)> { Ok((dot(&c.forward(x)?, &r), no_kinks())) };
    out.push((
        "conv.weight",
        central_differences("conv.weight", g.weight.data(), eps, |i, d| {
            objective(&ConvLayer::new(shifted(&conv.weight, i, d), conv.bias.clone())?, &x)
        })?,
    ));
    out.push((
        "conv.bias",
        central_differences("conv.bias", g.bias.data(), eps, |i, d| {
            objective(&ConvLayer::new(conv.weight.clone(), shifted(&conv.bias, i, d))?, &x)
        })?,
    ));
    out.push((
        "conv.input",
        central_differences("conv.input", g.input.data(), eps, |i, d| objective(&conv, &shifted(&x, i, d)))?,
    ));

    let prelu = PReluLayer { slope: gauss(&[3])? };
    let r = gauss(x.shape())?;
    let g = prelu.backward(&x, &r)?;
    let sides = |x: &Tensor<f64>| x.data().iter().map(|&v| i64::from(v > 0.0)).collect::<Vec<_>>();
    out.push((
        "prelu.slope",
        central_differences("prelu.slope", g.slope.data(), eps, |i, d| {
            let p = PReluLayer { slope: shifted(&prelu.slope, i, d) };
            Ok((dot(&p.forward(&x)?, &r), sides(&x)))
        })?,
    ));
    out.push((
        "prelu.input",
        central_differences("prelu.input", g.input.data(), eps, |i, d| {
            let xs = shifted(&x, i, d);
            Ok((dot(&prelu.forward(&xs)?, &r), sides(&xs)))
        })?,
    ));

    let (pooled, idx) = maxpool2_forward(&x)?;
    let r = gauss(pooled.shape())?;
    let g = maxpool2_backward(&idx, &r)?;
    out.push((
        "maxpool.input",
        central_differences("maxpool.input", g.data(), eps, |i, d| {
            let (y, idx) = maxpool2_forward(&shifted(&x, i, d))?;
            Ok((dot(&y, &r), idx.argmax.iter().map(|&j| j as i64).collect()))
        })?,
    ));

    let r = gauss(&[2, 3, 8, 12, 8])?;
    let g = upsample2_backward(&r)?;
    out.push((
        "upsample.input",
        central_differences("upsample.input", g.data(), eps, |i, d| {
            Ok((dot(&upsample2_forward(&shifted(&x, i, d))?, &r), Vec::new()))
        })?,
    ));
    Ok(out)
}

/// `(Σ[s_p > s_n] + ½·Σ[s_p = s_n]) / (P·N)` over every positive/negative pair.
pub fn auc_pair_counting(samples: &[ScoredSample]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for p in samples.iter().filter(|s| s.label) {
        for n in samples.iter().filter(|s| !s.label) {
            pairs += 1;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

/// Average precision by visiting each distinct score as a threshold
/// (`score >= t` predicts positive) and counting from scratch.
pub fn ap_enumeration(samples: &[ScoredSample]) -> f64 {
    let mut thresholds: Vec<f64> = samples.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = samples.iter().filter(|s| s.label).count() as f64;
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for t in thresholds {
        let predicted: Vec<&ScoredSample> = samples.iter().filter(|s| s.score >= t).collect();
        let tp = predicted.iter().filter(|s| s.label).count() as f64;
        let recall = tp / positives;
        ap += (recall - last_recall) * tp / predicted.len() as f64;
        last_recall = recall;
    }
    ap
}

/// Exact two-sided Mann-Whitney by listing every way to pick which pooled
/// observations belong to the first sample. Returns `(U, p)`.
pub fn mann_whitney_enumeration(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (n, m) = (a.len(), b.len());
    let u_of = |idx: &[usize]| idx.iter().map(|&i| ranks[i]).sum::<f64>() - (n * (n + 1)) as f64 / 2.0;
    let observed: Vec<usize> = (0..n).collect();
    let u = u_of(&observed);
    let centre = (n * m) as f64 / 2.0;
    let dist = (u - centre).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        total += 1;
        // midranks are multiples of 1/2, so these comparisons are exact
        if (u_of(&idx) - centre).abs() >= dist {
            extreme += 1;
        }
        // next combination in lexicographic order
        let Some(i) = (0..n).rev().find(|&i| idx[i] < n + m - n + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
    (u, extreme as f64 / total as f64)
}
