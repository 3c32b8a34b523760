//! Momentum SGD over a staged schedule.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt_into, CorruptionSpec, PatchPool};
use crate::error::{Error, Result};
use crate::model::{loss_backward, LossComponents, LossConfig, ModelParams};
use crate::rng::{fnv1a, Rng};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    pub learning_rate: f64,
}

impl Stage {
    pub const fn new(epochs: usize, minibatches_per_epoch: usize, learning_rate: f64) -> Self {
        Stage {
            epochs,
            minibatches_per_epoch,
            learning_rate,
        }
    }
}

/// The four-stage schedule, full length.
pub const DEFAULT_STAGES: [Stage; 4] = [
    Stage::new(100, 100, 0.001),
    Stage::new(80, 200, 0.0005),
    Stage::new(60, 300, 0.00025),
    Stage::new(40, 500, 0.0001),
];

pub const DESK_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub momentum: f64,
    pub batch_size: usize,
    /// Multiplier on every stage's epoch count (rounded, at least 1).
    pub scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: DEFAULT_STAGES.to_vec(),
            momentum: 0.9,
            batch_size: 32,
            scale: DESK_SCALE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Unscaled schedule.
    pub fn full() -> Self {
        TrainConfig {
            scale: 1.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("training schedule has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || s.minibatches_per_epoch == 0 || !(s.learning_rate > 0.0) {
                return Err(Error::invalid(format!("stage {} must have positive fields: {s:?}", i + 1)));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn scaled_epochs(&self, stage: &Stage) -> usize {
        ((stage.epochs as f64 * self.scale).round() as usize).max(1)
    }

    /// Gradient steps the schedule takes.
    pub fn total_steps(&self) -> usize {
        self.stages
            .iter()
            .map(|s| self.scaled_epochs(s) * s.minibatches_per_epoch)
            .sum()
    }

    /// `#`-prefixed description of the schedule, written above the log rows.
    pub fn header(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.stages.iter().enumerate() {
            out += &format!(
                "# stage {}: epochs={} minibatches_per_epoch={} learning_rate={} scaled_epochs={}\n",
                i + 1,
                s.epochs,
                s.minibatches_per_epoch,
                s.learning_rate,
                self.scaled_epochs(s)
            );
        }
        out += &format!(
            "# momentum={} batch_size={} scale={} seed={}\n",
            self.momentum, self.batch_size, self.scale, self.seed
        );
        out
    }
}

/// Momentum buffers; shapes mirror the parameters.
pub type Velocity<T = f32> = ModelParams<T>;

/// `v ← m·v − lr·g; θ ← θ + v`, element by element.
pub fn sgd_momentum_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let (lr, m) = (T::of(lr), T::of(momentum));
    let triples = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut());
    for (((name, p), (_, g)), (_, v)) in triples {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(name, p.shape(), g.shape()));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv - lr * gv;
            *pv = *pv + *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub stage: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_recon: f64,
    pub mean_weight_penalty: f64,
    pub mean_sparsity: f64,
    pub learning_rate: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub header: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.header.as_bytes())?;
        let mut csv = csv::Writer::from_writer(w);
        for r in &self.epochs {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<EpochRecord>> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        Ok(reader.deserialize().collect::<Result<Vec<EpochRecord>, _>>()?)
    }
}

/// Trains `params` in place on the `[N, 1, D, H, W]` patches in `data`.
///
/// Every minibatch draws `batch_size` indices uniformly with replacement and
/// corrupts each sample afresh; the loss compares the reconstruction of the
/// corrupted batch with the clean one.
pub fn train(
    params: &mut ModelParams,
    data: &Tensor,
    corruption: &CorruptionSpec,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(params, data, corruption, loss_cfg, cfg, |_| Ok(()))
}

/// [`train`], calling `on_epoch` with each record as soon as the epoch ends.
pub fn train_with(
    params: &mut ModelParams,
    data: &Tensor,
    corruption: &CorruptionSpec,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    corruption.validate()?;
    loss_cfg.validate()?;
    if data.shape().len() != 5 {
        return Err(Error::shape("training data", data.shape(), &[0, 1, 0, 0, 0]));
    }
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let n = data.shape()[0];
    let patch_len = data.len() / n;
    let mut batch_shape = data.shape().to_vec();
    batch_shape[0] = cfg.batch_size;

    let mut rng = Rng::derive(cfg.seed, fnv1a(b"train"));
    let mut velocity = Velocity::zeros(params.plan());
    let mut log = TrainLog {
        header: cfg.header(),
        ..TrainLog::default()
    };
    let mut clean = vec![0.0f32; cfg.batch_size * patch_len];
    let mut noisy = vec![0.0f32; cfg.batch_size * patch_len];
    let mut ids = vec![0usize; cfg.batch_size];

    for (si, stage) in cfg.stages.iter().enumerate() {
        for epoch in 0..cfg.scaled_epochs(stage) {
            let started = Instant::now();
            let mut sums = [0.0f64; 4];
            for _ in 0..stage.minibatches_per_epoch {
                for (b, id) in ids.iter_mut().enumerate() {
                    *id = rng.below(n);
                    let slot = b * patch_len..(b + 1) * patch_len;
                    clean[slot.clone()].copy_from_slice(data.patch(*id));
                    corrupt_into(corruption, data, *id, &mut rng, &mut noisy[slot])?;
                }
                let x = Tensor::new(batch_shape.clone(), std::mem::take(&mut clean))?;
                let xc = Tensor::new(batch_shape.clone(), std::mem::take(&mut noisy))?;
                let (l, grads) = loss_backward(params, &x, &xc, loss_cfg)?;
                if !finite(&l) {
                    return Err(Error::NonFinite {
                        stage: si + 1,
                        epoch: epoch + 1,
                        step: log.steps,
                        batch: ids.clone(),
                        detail: format!("{l:?}"),
                    });
                }
                sgd_momentum_step(params, &grads, &mut velocity, stage.learning_rate, cfg.momentum)?;
                log.steps += 1;
                for (s, v) in sums.iter_mut().zip([l.total, l.recon, l.weight_penalty, l.sparsity]) {
                    *s += v;
                }
                clean = x.into_data();
                noisy = xc.into_data();
            }
            let k = stage.minibatches_per_epoch as f64;
            let record = EpochRecord {
                stage: si + 1,
                epoch: epoch + 1,
                mean_total_loss: sums[0] / k,
                mean_recon: sums[1] / k,
                mean_weight_penalty: sums[2] / k,
                mean_sparsity: sums[3] / k,
                learning_rate: stage.learning_rate,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            log::debug!(
                "stage {} epoch {}: loss {:.6} ({} ms)",
                record.stage,
                record.epoch,
                record.mean_total_loss,
                record.wall_ms
            );
            on_epoch(&record)?;
            log.epochs.push(record);
        }
    }
    Ok(log)
}

fn finite(l: &LossComponents) -> bool {
    [l.total, l.recon, l.weight_penalty, l.sparsity].iter().all(|v| v.is_finite())
}
