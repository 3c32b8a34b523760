//! Input corruption: additive Gaussian noise, mixing with another training
//! sample, or both.
//!
//! `x̃ = (1 − α)·x + α·x_r + z`, `z ~ N(0, σ²)` per voxel, where `x_r` is a
//! different member of the pool drawn uniformly by index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    None,
    Noise,
    Msr,
    MsrNoise,
}

impl CorruptionKind {
    fn of(alpha: f64, sigma: f64) -> Self {
        match (alpha > 0.0, sigma > 0.0) {
            (false, false) => CorruptionKind::None,
            (false, true) => CorruptionKind::Noise,
            (true, false) => CorruptionKind::Msr,
            (true, true) => CorruptionKind::MsrNoise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub alpha: f64,
    pub sigma: f64,
    pub kind: CorruptionKind,
}

impl CorruptionSpec {
    /// Builds a spec whose tag is derived from `alpha` and `sigma`.
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        let spec = CorruptionSpec {
            alpha,
            sigma,
            kind: CorruptionKind::of(alpha, sigma),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        let implied = CorruptionKind::of(self.alpha, self.sigma);
        if implied != self.kind {
            return Err(Error::invalid(format!(
                "corruption tag {:?} contradicts alpha={} sigma={} (implies {:?})",
                self.kind, self.alpha, self.sigma, implied
            )));
        }
        Ok(())
    }
}

/// The four autoencoder variants compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SAE")]
    Sae,
    #[serde(rename = "SDAE")]
    Sdae,
    #[serde(rename = "SAE-MSR")]
    SaeMsr,
    #[serde(rename = "SDAE-MSR")]
    SdaeMsr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sae, Variant::Sdae, Variant::SaeMsr, Variant::SdaeMsr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sae => "SAE",
            Variant::Sdae => "SDAE",
            Variant::SaeMsr => "SAE-MSR",
            Variant::SdaeMsr => "SDAE-MSR",
        }
    }

    pub fn is_msr(self) -> bool {
        matches!(self, Variant::SaeMsr | Variant::SdaeMsr)
    }

    pub fn corruption(self) -> CorruptionSpec {
        let (alpha, sigma) = match self {
            Variant::Sae => (0.0, 0.0),
            Variant::Sdae => (0.0, 0.1),
            Variant::SaeMsr => (0.1, 0.0),
            Variant::SdaeMsr => (0.1, 0.001),
        };
        CorruptionSpec::new(alpha, sigma).expect("table values are valid")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}; expected one of SAE, SDAE, SAE-MSR, SDAE-MSR")))
    }
}

pub fn spec_for_variant(name: &str) -> Result<CorruptionSpec> {
    Ok(name.parse::<Variant>()?.corruption())
}

/// Indexed collection of equally shaped samples.
pub trait PatchPool {
    fn len(&self) -> usize;
    fn patch(&self, index: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `[N, ...]` tensor is a pool of its `N` outer slices.
impl PatchPool for Tensor {
    fn len(&self) -> usize {
        self.shape().first().copied().unwrap_or(0)
    }

    fn patch(&self, index: usize) -> &[f32] {
        let n = self.shape()[0];
        let size = self.data().len() / n;
        &self.data()[index * size..][..size]
    }
}

/// Uniform index in `0..n` other than `exclude`.
pub fn draw_partner(rng: &mut Rng, n: usize, exclude: usize) -> usize {
    let j = rng.below(n - 1);
    if j >= exclude {
        j + 1
    } else {
        j
    }
}

/// Writes the corrupted version of pool member `index` into `out` and
/// returns the partner index when one was drawn.
///
/// The partner is drawn before the noise, and noise is drawn in voxel order.
pub fn corrupt_into<P: PatchPool + ?Sized>(
    spec: &CorruptionSpec,
    pool: &P,
    index: usize,
    rng: &mut Rng,
    out: &mut [f32],
) -> Result<Option<usize>> {
    spec.validate()?;
    if index >= pool.len() {
        return Err(Error::invalid(format!("sample {index} outside a pool of {}", pool.len())));
    }
    let x = pool.patch(index);
    if out.len() != x.len() {
        return Err(Error::shape("corruption output", &[out.len()], &[x.len()]));
    }
    let partner = if spec.alpha > 0.0 {
        if pool.len() < 2 {
            return Err(Error::invalid("mixing needs a pool with at least two samples"));
        }
        Some(draw_partner(rng, pool.len(), index))
    } else {
        None
    };
    match partner {
        Some(j) => {
            let xr = pool.patch(j);
            for ((o, &a), &b) in out.iter_mut().zip(x).zip(xr) {
                *o = ((1.0 - spec.alpha) * a as f64 + spec.alpha * b as f64) as f32;
            }
        }
        None => out.copy_from_slice(x),
    }
    if spec.sigma > 0.0 {
        for o in out.iter_mut() {
            *o = (*o as f64 + spec.sigma * rng.normal()) as f32;
        }
    }
    Ok(partner)
}

/// Allocating form of [`corrupt_into`]; the result has the patch shape `shape`.
pub fn corrupt<P: PatchPool + ?Sized>(
    spec: &CorruptionSpec,
    pool: &P,
    index: usize,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<(Tensor, Option<usize>)> {
    if index >= pool.len() {
        return Err(Error::invalid(format!("sample {index} outside a pool of {}", pool.len())));
    }
    let mut out = vec![0.0f32; pool.patch(index).len()];
    let partner = corrupt_into(spec, pool, index, rng, &mut out)?;
    Ok((Tensor::new(shape.to_vec(), out)?, partner))
}
