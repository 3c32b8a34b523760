//! Reconstruction-error calibration and the μ+3σ voxel-count grade.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// `|x − decode(encode(x))|` for a `[b, 1, D, H, W]` batch. No corruption.
pub fn reconstruction_error(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let y = params.reconstruct(x)?;
    x.zip_map(&y, "reconstruction error", |a, b| (a - b).abs())
}

/// Pooled statistics of normal reconstruction errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub n_voxels: usize,
}

impl CalibrationStats {
    pub fn threshold(&self) -> f64 {
        self.mu + 3.0 * self.sigma
    }

    pub fn from_errors(errors: &[f32]) -> Result<Self> {
        let mut acc = CalibrationAccumulator::default();
        acc.push(errors);
        acc.finish()
    }
}

/// Running sums, accumulated in push order.
#[derive(Clone, Debug, Default)]
pub struct CalibrationAccumulator {
    sum: f64,
    sum_sq: f64,
    n: usize,
}

impl CalibrationAccumulator {
    pub fn push(&mut self, errors: &[f32]) {
        for &e in errors {
            let e = e as f64;
            self.sum += e;
            self.sum_sq += e * e;
        }
        self.n += errors.len();
    }

    pub fn finish(&self) -> Result<CalibrationStats> {
        if self.n == 0 {
            return Err(Error::Empty("calibration normals"));
        }
        let n = self.n as f64;
        let mu = self.sum / n;
        let var = (self.sum_sq / n - mu * mu).max(0.0);
        Ok(CalibrationStats {
            mu,
            sigma: var.sqrt(),
            n_voxels: self.n,
        })
    }
}

/// Runs `f` on the error map of each consecutive batch of `patches`.
pub fn for_each_error_batch(
    params: &ModelParams,
    patches: &Tensor,
    batch_size: usize,
    mut f: impl FnMut(&Tensor) -> Result<()>,
) -> Result<()> {
    if patches.shape().len() != 5 {
        return Err(Error::shape("patches", patches.shape(), &[0, 1, 0, 0, 0]));
    }
    let n = patches.shape()[0];
    if n == 0 {
        return Ok(());
    }
    let batch_size = batch_size.max(1);
    let per = patches.len() / n;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = patches.shape().to_vec();
        shape[0] = end - start;
        let batch = Tensor::new(shape, patches.data()[start * per..end * per].to_vec())?;
        f(&reconstruction_error(params, &batch)?)?;
        start = end;
    }
    Ok(())
}

/// μ and σ over every voxel of every patch in `normals`.
pub fn calibrate(params: &ModelParams, normals: &Tensor, batch_size: usize) -> Result<CalibrationStats> {
    let mut acc = CalibrationAccumulator::default();
    for_each_error_batch(params, normals, batch_size, |e| {
        acc.push(e.data());
        Ok(())
    })?;
    acc.finish()
}

/// Voxels whose error is strictly above `μ + 3σ`.
pub fn grade_from_errors(errors: &[f32], stats: &CalibrationStats) -> usize {
    let t = stats.threshold();
    errors.iter().filter(|&&e| e as f64 > t).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbnormalityScore {
    pub patch_id: usize,
    pub grade: usize,
    pub error_map: Option<Tensor>,
}

/// Grade of every patch in `patches`; `ids` labels them in order.
pub fn abnormality_grades(
    params: &ModelParams,
    stats: &CalibrationStats,
    patches: &Tensor,
    ids: &[usize],
    batch_size: usize,
    keep_maps: bool,
) -> Result<Vec<AbnormalityScore>> {
    let n = patches.shape().first().copied().unwrap_or(0);
    if ids.len() != n {
        return Err(Error::shape("patch ids", &[ids.len()], &[n]));
    }
    let mut out = Vec::with_capacity(n);
    for_each_error_batch(params, patches, batch_size, |e| {
        for k in 0..e.shape()[0] {
            let map = e.outer(k)?;
            out.push(AbnormalityScore {
                patch_id: ids[out.len()],
                grade: grade_from_errors(map.data(), stats),
                error_map: keep_maps.then_some(map),
            });
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

/// One line of a scores file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patch_id: usize,
    pub subject_id: usize,
    pub split: Split,
    pub stenosis_grade_label: f64,
    pub abnormality_grade: usize,
}

/// Writes `rows` below a `#` header carrying the calibration statistics.
pub fn write_scores<W: Write>(mut w: W, stats: &CalibrationStats, rows: &[ScoreRow]) -> Result<()> {
    writeln!(w, "# mu={:?}", stats.mu)?;
    writeln!(w, "# sigma={:?}", stats.sigma)?;
    writeln!(w, "# n_voxels={}", stats.n_voxels)?;
    writeln!(w, "# threshold={:?}", stats.threshold())?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_scores<R: Read>(mut r: R) -> Result<(CalibrationStats, Vec<ScoreRow>)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let field = |key: &str| -> Result<&str> {
        let prefix = format!("# {key}=");
        text.lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| l.strip_prefix(prefix.as_str()))
            .ok_or_else(|| Error::Format(format!("scores header lacks {key}")))
    };
    let parse = |key: &str| -> Result<f64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Format(format!("scores header field {key} is not a number")))
    };
    let stats = CalibrationStats {
        mu: parse("mu")?,
        sigma: parse("sigma")?,
        n_voxels: parse("n_voxels")? as usize,
    };
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = reader.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?;
    Ok((stats, rows))
}
