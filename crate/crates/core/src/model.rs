//! Two-level convolutional autoencoder and its regularised training loss.
//!
//! ```text
//! encode: x -> conv -> PReLU -> pool -> conv -> PReLU -> pool -> h
//! decode: h -> conv -> PReLU -> up -> conv -> PReLU -> up -> 1x1x1 conv -> y
//! ```
//!
//! The loss is `recon(x_clean, decode(encode(x_corrupted))) + λ·Σ‖W‖² + γ·mean|h|`
//! where `W` ranges over every convolution weight (biases and PReLU slopes
//! are not penalised) and `h` is the code of the corrupted input unless
//! [`LossConfig::sparsity_on_clean`] is set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::{
    dims5, he_init, maxpool2_backward, maxpool2_forward, upsample2_backward, upsample2_forward,
    ConvLayer, PReluLayer, PoolIndices,
};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Channel counts of the four hidden layers. Input and output are single channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    /// `[c1, c2]`; `c2` is the code depth.
    pub encoder: [usize; 2],
    pub decoder: [usize; 2],
}

impl Default for ChannelPlan {
    fn default() -> Self {
        ChannelPlan {
            encoder: [16, 96],
            decoder: [32, 16],
        }
    }
}

impl ChannelPlan {
    /// Code elements per patch of spatial shape `[d, h, w]`.
    pub fn code_size(&self, [d, h, w]: [usize; 3]) -> usize {
        self.encoder[1] * (d / 4) * (h / 4) * (w / 4)
    }

    /// `true` when the code has at least as many elements as the patch.
    pub fn is_overcomplete(&self, patch: [usize; 3]) -> bool {
        self.code_size(patch) >= patch.iter().product()
    }

    /// Logs a warning when the code is smaller than the patch.
    pub fn warn_if_undercomplete(&self, patch: [usize; 3]) -> bool {
        let ok = self.is_overcomplete(patch);
        if !ok {
            log::warn!(
                "channel plan {:?} gives a {}-element code for a {:?} patch ({} voxels); the code is not overcomplete",
                self,
                self.code_size(patch),
                patch,
                patch.iter().product::<usize>()
            );
        }
        ok
    }
}

/// Convolution followed by PReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub conv: ConvLayer<T>,
    pub prelu: PReluLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub enc1: Block<T>,
    pub enc2: Block<T>,
    pub dec1: Block<T>,
    pub dec2: Block<T>,
    pub head: ConvLayer<T>,
}

/// Gradients share the parameter layout.
pub type ModelGrads<T = f32> = ModelParams<T>;

pub const PARAM_NAMES: [&str; 14] = [
    "enc1.conv.weight",
    "enc1.conv.bias",
    "enc1.prelu.slope",
    "enc2.conv.weight",
    "enc2.conv.bias",
    "enc2.prelu.slope",
    "dec1.conv.weight",
    "dec1.conv.bias",
    "dec1.prelu.slope",
    "dec2.conv.weight",
    "dec2.conv.bias",
    "dec2.prelu.slope",
    "head.weight",
    "head.bias",
];

/// Names of the penalised weight tensors.
pub fn is_penalised(name: &str) -> bool {
    name.ends_with("weight")
}

fn shapes_for(plan: &ChannelPlan) -> [Vec<usize>; 14] {
    let [c1, c2] = plan.encoder;
    let [d1, d2] = plan.decoder;
    [
        vec![c1, 1, 3, 3, 3],
        vec![c1],
        vec![c1],
        vec![c2, c1, 3, 3, 3],
        vec![c2],
        vec![c2],
        vec![d1, c2, 3, 3, 3],
        vec![d1],
        vec![d1],
        vec![d2, d1, 3, 3, 3],
        vec![d2],
        vec![d2],
        vec![1, d2, 1, 1, 1],
        vec![1],
    ]
}

impl ModelParams<f32> {
    /// He-initialised convolutions, zero biases, PReLU slopes at 0.25.
    pub fn init(plan: ChannelPlan, rng: &mut Rng) -> Result<Self> {
        let [c1, c2] = plan.encoder;
        let [d1, d2] = plan.decoder;
        if [c1, c2, d1, d2].contains(&0) {
            return Err(Error::invalid(format!("channel plan has a zero entry: {plan:?}")));
        }
        let mut block = |o: usize, i: usize| -> Result<Block> {
            Ok(Block {
                conv: he_init(rng, [o, i, 3, 3, 3])?,
                prelu: PReluLayer::new(o),
            })
        };
        let enc1 = block(c1, 1)?;
        let enc2 = block(c2, c1)?;
        let dec1 = block(d1, c2)?;
        let dec2 = block(d2, d1)?;
        let head = he_init(rng, [1, d2, 1, 1, 1])?;
        Ok(ModelParams {
            enc1,
            enc2,
            dec1,
            dec2,
            head,
        })
    }
}

impl<T: Element> ModelParams<T> {
    /// All-zero parameters (including PReLU slopes) for a plan.
    pub fn zeros(plan: ChannelPlan) -> Self {
        let shapes = shapes_for(&plan);
        let z = |i: usize| Tensor::zeros(&shapes[i]);
        let block = |i: usize| Block {
            conv: ConvLayer {
                weight: z(i),
                bias: z(i + 1),
            },
            prelu: PReluLayer { slope: z(i + 2) },
        };
        ModelParams {
            enc1: block(0),
            enc2: block(3),
            dec1: block(6),
            dec2: block(9),
            head: ConvLayer {
                weight: z(12),
                bias: z(13),
            },
        }
    }

    /// Assemble from tensors listed in [`PARAM_NAMES`] order.
    pub fn from_tensors(plan: ChannelPlan, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = Self::zeros(plan);
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((name, slot), t) in out.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(name, t.shape(), slot.shape()));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn plan(&self) -> ChannelPlan {
        ChannelPlan {
            encoder: [self.enc1.conv.out_channels(), self.enc2.conv.out_channels()],
            decoder: [self.dec1.conv.out_channels(), self.dec2.conv.out_channels()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 14] {
        let n = PARAM_NAMES;
        [
            (n[0], &self.enc1.conv.weight),
            (n[1], &self.enc1.conv.bias),
            (n[2], &self.enc1.prelu.slope),
            (n[3], &self.enc2.conv.weight),
            (n[4], &self.enc2.conv.bias),
            (n[5], &self.enc2.prelu.slope),
            (n[6], &self.dec1.conv.weight),
            (n[7], &self.dec1.conv.bias),
            (n[8], &self.dec1.prelu.slope),
            (n[9], &self.dec2.conv.weight),
            (n[10], &self.dec2.conv.bias),
            (n[11], &self.dec2.prelu.slope),
            (n[12], &self.head.weight),
            (n[13], &self.head.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 14] {
        let n = PARAM_NAMES;
        [
            (n[0], &mut self.enc1.conv.weight),
            (n[1], &mut self.enc1.conv.bias),
            (n[2], &mut self.enc1.prelu.slope),
            (n[3], &mut self.enc2.conv.weight),
            (n[4], &mut self.enc2.conv.bias),
            (n[5], &mut self.enc2.prelu.slope),
            (n[6], &mut self.dec1.conv.weight),
            (n[7], &mut self.dec1.conv.bias),
            (n[8], &mut self.dec1.prelu.slope),
            (n[9], &mut self.dec2.conv.weight),
            (n[10], &mut self.dec2.conv.bias),
            (n[11], &mut self.dec2.prelu.slope),
            (n[12], &mut self.head.weight),
            (n[13], &mut self.head.bias),
        ]
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let tensors = self.tensors().into_iter().map(|(_, t)| t.cast::<U>()).collect();
        ModelParams::from_tensors(self.plan(), tensors).expect("cast preserves shapes")
    }

    /// Σ‖W‖² over every convolution weight.
    pub fn weight_sq_norm(&self) -> f64 {
        self.tensors()
            .into_iter()
            .filter(|(name, _)| is_penalised(name))
            .map(|(_, t)| t.sum_sq())
            .sum()
    }

    fn check_patch(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = dims5(x.shape(), "autoencoder input")?;
        if c != 1 {
            return Err(Error::shape("autoencoder input channels", x.shape(), &[1]));
        }
        if d % 4 != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "patch extents {:?} must be divisible by 4",
                &x.shape()[2..]
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_trace(x)?.code)
    }

    pub fn decode(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decode_trace(h)?.output)
    }

    /// `decode(encode(x))`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    fn encode_trace(&self, x: &Tensor<T>) -> Result<EncodeTrace<T>> {
        self.check_patch(x)?;
        let a1 = self.enc1.conv.forward(x)?;
        let (q1, idx1) = maxpool2_forward(&self.enc1.prelu.forward(&a1)?)?;
        let a2 = self.enc2.conv.forward(&q1)?;
        let (code, idx2) = maxpool2_forward(&self.enc2.prelu.forward(&a2)?)?;
        Ok(EncodeTrace {
            input: x.clone(),
            a1,
            idx1,
            q1,
            a2,
            idx2,
            code,
        })
    }

    fn decode_trace(&self, h: &Tensor<T>) -> Result<DecodeTrace<T>> {
        let [_, c, ..] = dims5(h.shape(), "decoder input")?;
        if c != self.dec1.conv.in_channels() {
            return Err(Error::shape("decoder input channels", h.shape(), self.dec1.conv.weight.shape()));
        }
        let a3 = self.dec1.conv.forward(h)?;
        let u3 = upsample2_forward(&self.dec1.prelu.forward(&a3)?)?;
        let a4 = self.dec2.conv.forward(&u3)?;
        let u4 = upsample2_forward(&self.dec2.prelu.forward(&a4)?)?;
        let output = self.head.forward(&u4)?;
        Ok(DecodeTrace {
            code: h.clone(),
            a3,
            u3,
            a4,
            u4,
            output,
        })
    }

    /// Backpropagates `grad_code` through the encoder, accumulating into `grads`.
    fn encode_backward(&self, trace: &EncodeTrace<T>, grad_code: &Tensor<T>, grads: &mut ModelGrads<T>) -> Result<()> {
        let gp2 = maxpool2_backward(&trace.idx2, grad_code)?;
        let pr2 = self.enc2.prelu.backward(&trace.a2, &gp2)?;
        let c2 = self.enc2.conv.backward(&trace.q1, &pr2.input)?;
        let gp1 = maxpool2_backward(&trace.idx1, &c2.input)?;
        let pr1 = self.enc1.prelu.backward(&trace.a1, &gp1)?;
        let c1 = self.enc1.conv.backward(&trace.input, &pr1.input)?;
        grads.enc2.prelu.slope.add_assign(&pr2.slope)?;
        grads.enc2.conv.weight.add_assign(&c2.weight)?;
        grads.enc2.conv.bias.add_assign(&c2.bias)?;
        grads.enc1.prelu.slope.add_assign(&pr1.slope)?;
        grads.enc1.conv.weight.add_assign(&c1.weight)?;
        grads.enc1.conv.bias.add_assign(&c1.bias)?;
        Ok(())
    }

    /// Backpropagates `grad_out` through the decoder; returns the code gradient.
    fn decode_backward(&self, trace: &DecodeTrace<T>, grad_out: &Tensor<T>, grads: &mut ModelGrads<T>) -> Result<Tensor<T>> {
        let head = self.head.backward(&trace.u4, grad_out)?;
        let gp4 = upsample2_backward(&head.input)?;
        let pr4 = self.dec2.prelu.backward(&trace.a4, &gp4)?;
        let c4 = self.dec2.conv.backward(&trace.u3, &pr4.input)?;
        let gp3 = upsample2_backward(&c4.input)?;
        let pr3 = self.dec1.prelu.backward(&trace.a3, &gp3)?;
        let c3 = self.dec1.conv.backward(&trace.code, &pr3.input)?;
        grads.head.weight.add_assign(&head.weight)?;
        grads.head.bias.add_assign(&head.bias)?;
        grads.dec2.prelu.slope.add_assign(&pr4.slope)?;
        grads.dec2.conv.weight.add_assign(&c4.weight)?;
        grads.dec2.conv.bias.add_assign(&c4.bias)?;
        grads.dec1.prelu.slope.add_assign(&pr3.slope)?;
        grads.dec1.conv.weight.add_assign(&c3.weight)?;
        grads.dec1.conv.bias.add_assign(&c3.bias)?;
        Ok(c3.input)
    }
}

struct EncodeTrace<T> {
    input: Tensor<T>,
    a1: Tensor<T>,
    idx1: PoolIndices,
    q1: Tensor<T>,
    a2: Tensor<T>,
    idx2: PoolIndices,
    code: Tensor<T>,
}

struct DecodeTrace<T> {
    code: Tensor<T>,
    a3: Tensor<T>,
    u3: Tensor<T>,
    a4: Tensor<T>,
    u4: Tensor<T>,
    output: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight-decay coefficient λ.
    pub lambda: f64,
    /// Sparsity coefficient γ.
    pub gamma: f64,
    pub recon: ReconNorm,
    /// Evaluate the sparsity penalty on the code of the clean input
    /// (costs a second encoder pass) instead of the corrupted one.
    #[serde(default)]
    pub sparsity_on_clean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.001,
            gamma: 0.0005,
            recon: ReconNorm::L1,
            sparsity_on_clean: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda and gamma must be >= 0, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// Loss terms; `weight_penalty` and `sparsity` already include λ and γ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub recon: f64,
    pub weight_penalty: f64,
    pub sparsity: f64,
}

impl LossComponents {
    fn new(recon: f64, weight_penalty: f64, sparsity: f64) -> Self {
        LossComponents {
            total: recon + weight_penalty + sparsity,
            recon,
            weight_penalty,
            sparsity,
        }
    }
}

/// L1 subgradient with `sign(0) = 0`.
#[inline]
fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn recon_term<T: Element>(norm: ReconNorm, clean: &Tensor<T>, output: &Tensor<T>) -> f64 {
    let n = clean.len() as f64;
    let pairs = clean.data().iter().zip(output.data());
    match norm {
        ReconNorm::L1 => pairs.map(|(&x, &y)| (x - y).abs().as_f64()).sum::<f64>() / n,
        ReconNorm::L2 => pairs.map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / n,
    }
}

fn recon_grad<T: Element>(norm: ReconNorm, clean: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let inv_n = T::of(1.0 / clean.len() as f64);
    let two = T::of(2.0);
    output
        .zip_map(clean, "recon grad", |y, x| match norm {
            ReconNorm::L1 => sign(y - x) * inv_n,
            ReconNorm::L2 => two * (y - x) * inv_n,
        })
        .expect("shapes checked by caller")
}

fn mean_abs<T: Element>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / t.len() as f64
}

fn check_pair<T: Element>(x_clean: &Tensor<T>, x_corrupted: &Tensor<T>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    x_clean.check_same_shape(x_corrupted, "loss inputs")
}

/// Total loss and its components.
pub fn loss<T: Element>(
    params: &ModelParams<T>,
    x_clean: &Tensor<T>,
    x_corrupted: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossComponents> {
    check_pair(x_clean, x_corrupted, cfg)?;
    let code = params.encode(x_corrupted)?;
    let output = params.decode(&code)?;
    let sparse_code = if cfg.sparsity_on_clean {
        params.encode(x_clean)?
    } else {
        code
    };
    Ok(LossComponents::new(
        recon_term(cfg.recon, x_clean, &output),
        cfg.lambda * params.weight_sq_norm(),
        cfg.gamma * mean_abs(&sparse_code),
    ))
}

/// Loss together with its gradient with respect to every parameter.
pub fn loss_backward<T: Element>(
    params: &ModelParams<T>,
    x_clean: &Tensor<T>,
    x_corrupted: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossComponents, ModelGrads<T>)> {
    check_pair(x_clean, x_corrupted, cfg)?;
    let enc = params.encode_trace(x_corrupted)?;
    let dec = params.decode_trace(&enc.code)?;
    let mut grads = ModelGrads::zeros(params.plan());

    let grad_out = recon_grad(cfg.recon, x_clean, &dec.output);
    let mut grad_code = params.decode_backward(&dec, &grad_out, &mut grads)?;

    let sparsity_grad = |code: &Tensor<T>| {
        let scale = T::of(cfg.gamma / code.len() as f64);
        code.map(|h| sign(h) * scale)
    };
    let sparsity = if cfg.sparsity_on_clean {
        let clean = params.encode_trace(x_clean)?;
        params.encode_backward(&clean, &sparsity_grad(&clean.code), &mut grads)?;
        mean_abs(&clean.code)
    } else {
        grad_code.add_assign(&sparsity_grad(&enc.code))?;
        mean_abs(&enc.code)
    };
    params.encode_backward(&enc, &grad_code, &mut grads)?;

    if cfg.lambda != 0.0 {
        let two_lambda = T::of(2.0 * cfg.lambda);
        for ((name, g), (_, w)) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            if is_penalised(name) {
                for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv = *gv + two_lambda * wv;
                }
            }
        }
    }

    let components = LossComponents::new(
        recon_term(cfg.recon, x_clean, &dec.output),
        cfg.lambda * params.weight_sq_norm(),
        cfg.gamma * sparsity,
    );
    Ok((components, grads))
}

/// Discrete state of every non-smooth point of the loss: PReLU sides,
/// pooling winners, and signs of code elements and residuals. Two parameter
/// settings with equal signatures lie in the same smooth region.
pub fn kink_signature<T: Element>(
    params: &ModelParams<T>,
    x_clean: &Tensor<T>,
    x_corrupted: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Vec<i64>> {
    check_pair(x_clean, x_corrupted, cfg)?;
    fn signs<T: Element>(out: &mut Vec<i64>, t: &Tensor<T>) {
        out.extend(t.data().iter().map(|&v| sign(v).as_f64() as i64));
    }
    fn sides<T: Element>(out: &mut Vec<i64>, t: &Tensor<T>) {
        out.extend(t.data().iter().map(|&v| i64::from(v > T::zero())));
    }
    let mut sig = Vec::new();
    let encoder = |sig: &mut Vec<i64>, x: &Tensor<T>| -> Result<Tensor<T>> {
        let t = params.encode_trace(x)?;
        sides(sig, &t.a1);
        sides(sig, &t.a2);
        sig.extend(t.idx1.argmax.iter().chain(&t.idx2.argmax).map(|&i| i as i64));
        signs(sig, &t.code);
        Ok(t.code)
    };
    let code = encoder(&mut sig, x_corrupted)?;
    if cfg.sparsity_on_clean {
        encoder(&mut sig, x_clean)?;
    }
    let d = params.decode_trace(&code)?;
    sides(&mut sig, &d.a3);
    sides(&mut sig, &d.a4);
    if cfg.recon == ReconNorm::L1 {
        signs(&mut sig, &d.output.sub(x_clean)?);
    }
    Ok(sig)
}

const CHECKPOINT_FORMAT: &str = "msr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub channel_plan: ChannelPlan,
    pub loss: LossConfig,
    pub parameters: Vec<TensorEntry>,
}

/// Writes `manifest.json` plus one MSRT file per parameter into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, loss: &LossConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    for (name, t) in params.tensors() {
        let file = format!("{name}.msrt");
        container::save(&dir.join(&file), t)?;
        parameters.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        channel_plan: params.plan(),
        loss: *loss,
        parameters,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let names: Vec<&str> = manifest.parameters.iter().map(|p| p.name.as_str()).collect();
    if names != PARAM_NAMES {
        return Err(Error::Format(format!("unexpected parameter list {names:?}")));
    }
    let tensors = manifest
        .parameters
        .iter()
        .map(|entry| {
            let t = container::load(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: stored shape {:?} differs from manifest {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(manifest.channel_plan, tensors)?;
    Ok((params, manifest))
}
