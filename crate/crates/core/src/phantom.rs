//! Synthetic vessel cross-section patches with exact stenosis labels.
//!
//! Each patch is a `[1, D, H, W]` volume holding a vessel seen end-on: a
//! disk of wall tissue containing a (possibly eccentric, possibly narrowed)
//! lumen disk, on a background. Areas are counted on the rasterised central
//! slice, so the label always agrees with the pixels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, mix, Rng};
use crate::tensor::Tensor;

/// `1 − lumen / wall`.
pub fn stenosis_grade(lumen_area: f64, wall_area: f64) -> Result<f64> {
    if !(wall_area > 0.0) || !(lumen_area >= 0.0) || lumen_area > wall_area {
        return Err(Error::invalid(format!(
            "stenosis grade needs 0 <= lumen <= wall and wall > 0, got lumen={lumen_area} wall={wall_area}"
        )));
    }
    Ok(1.0 - lumen_area / wall_area)
}

pub const MAX_TARGET_GRADE: f64 = 0.95;
/// Largest allowed gap between the requested and the rasterised grade.
pub const GRADE_TOLERANCE: f64 = 0.03;

/// Per-subject appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: usize,
    /// Outer vessel radius in voxels.
    pub outer_radius: f64,
    pub lumen_intensity: f64,
    pub wall_intensity: f64,
    pub background_intensity: f64,
    /// Noise level in the lumen and background.
    pub texture_sigma: f64,
    /// Noise level in the wall, where plaque is heterogeneous.
    pub wall_texture_sigma: f64,
    /// In-plane Gaussian blur (voxels) applied before the noise; 0 disables it.
    pub blur_sigma: f64,
    /// Maximum in-plane offset of the vessel centre from the patch centre.
    pub center_jitter: f64,
    /// Maximum per-slice wobble of the centre around its patch position.
    pub slice_jitter: f64,
    /// Lumen offset range as a fraction of the free space `R − r`.
    pub eccentricity: (f64, f64),
}

impl SubjectProfile {
    pub fn validate(&self, [_, h, w]: [usize; 3]) -> Result<()> {
        for v in [self.lumen_intensity, self.wall_intensity, self.background_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
            }
        }
        let reach = self.outer_radius + self.center_jitter + self.slice_jitter;
        if !(self.outer_radius > 0.0) || 2.0 * reach > h.min(w) as f64 {
            return Err(Error::invalid(format!(
                "vessel radius {} with jitter {}+{} does not fit a {h}x{w} slice",
                self.outer_radius, self.center_jitter, self.slice_jitter
            )));
        }
        let (e0, e1) = self.eccentricity;
        if !(0.0 <= e0 && e0 <= e1 && e1 <= 1.0) || self.texture_sigma < 0.0
            || self.wall_texture_sigma < 0.0
            || self.blur_sigma < 0.0
            || self.center_jitter < 0.0 || self.slice_jitter < 0.0 {
            return Err(Error::invalid(format!("malformed subject profile {self:?}")));
        }
        Ok(())
    }
}

/// Geometry and labels of one patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: usize,
    pub subject_id: usize,
    pub target_grade: f64,
    /// Lumen voxels on the central slice.
    pub lumen_area: f64,
    /// Vessel voxels (lumen included) on the central slice.
    pub wall_area: f64,
    pub stenosis_grade: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    /// `[1, D, H, W]`
    pub tensor: Tensor,
    pub meta: PatchMeta,
}

/// Number of voxel centres of an `h×w` slice inside the disk.
fn disk_area(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> usize {
    let r2 = r * r;
    let mut n = 0;
    for i in 0..h {
        let dy = i as f64 + 0.5 - cy;
        for j in 0..w {
            let dx = j as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r2 {
                n += 1;
            }
        }
    }
    n
}

/// Lumen disk centre for radius `r` given the vessel centre and offset direction.
fn lumen_center(center: (f64, f64), outer: f64, r: f64, ecc: f64, dir: (f64, f64)) -> (f64, f64) {
    let shift = ecc * (outer - r).max(0.0);
    (center.0 + shift * dir.0, center.1 + shift * dir.1)
}

/// Normalised Gaussian taps out to `3σ`; a single tap when `σ` is 0.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable in-place blur of an `h×w` slice; borders replicate.
fn blur_slice(img: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * img[i * w + at(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            img[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[at(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
}

/// Renders one patch of spatial shape `[D, H, W]`.
pub fn render_patch(profile: &SubjectProfile, shape: [usize; 3], target_grade: f64, rng: &mut Rng) -> Result<LabeledPatch> {
    profile.validate(shape)?;
    if !(0.0..=MAX_TARGET_GRADE).contains(&target_grade) {
        return Err(Error::invalid(format!("target grade {target_grade} outside [0, {MAX_TARGET_GRADE}]")));
    }
    let [dd, hh, ww] = shape;
    let jitter = |rng: &mut Rng, a: f64| if a > 0.0 { rng.uniform_range(-a, a) } else { 0.0 };
    let center = (
        hh as f64 / 2.0 + jitter(rng, profile.center_jitter),
        ww as f64 / 2.0 + jitter(rng, profile.center_jitter),
    );
    let (e0, e1) = profile.eccentricity;
    let ecc = if e1 > e0 { rng.uniform_range(e0, e1) } else { e0 };
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let dir = (theta.sin(), theta.cos());
    let outer = profile.outer_radius;

    let wall = disk_area(hh, ww, center.0, center.1, outer);
    let lumen_at = |r: f64| {
        let c = lumen_center(center, outer, r, ecc, dir);
        disk_area(hh, ww, c.0, c.1, r)
    };
    // lumen area is non-decreasing in r: larger disks contain smaller ones
    let goal = (1.0 - target_grade) * wall as f64;
    let (mut lo, mut hi) = (0.0, outer);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if (lumen_at(mid) as f64) < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let radius = [lo, hi]
        .into_iter()
        .min_by(|&a, &b| {
            let da = (lumen_at(a) as f64 - goal).abs();
            let db = (lumen_at(b) as f64 - goal).abs();
            da.total_cmp(&db)
        })
        .expect("two candidates");
    let lumen = lumen_at(radius);
    let grade = stenosis_grade(lumen as f64, wall as f64)?;
    if lumen == 0 || (grade - target_grade).abs() > GRADE_TOLERANCE {
        return Err(Error::invalid(format!(
            "target grade {target_grade} is not reachable on a {hh}x{ww} slice with radius {outer} (best {grade})"
        )));
    }

    let mid = dd / 2;
    let kernel = gaussian_kernel(profile.blur_sigma);
    let mut data = Vec::with_capacity(dd * hh * ww);
    let mut base = vec![0.0f64; hh * ww];
    let mut in_wall = vec![false; hh * ww];
    for z in 0..dd {
        let wobble = if z == mid {
            (0.0, 0.0)
        } else {
            (jitter(rng, profile.slice_jitter), jitter(rng, profile.slice_jitter))
        };
        let c = (center.0 + wobble.0, center.1 + wobble.1);
        let lc = lumen_center(c, outer, radius, ecc, dir);
        for i in 0..hh {
            for j in 0..ww {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let in_disk = |cy: f64, cx: f64, r: f64| (y - cy).powi(2) + (x - cx).powi(2) <= r * r;
                let k = i * ww + j;
                in_wall[k] = false;
                base[k] = if in_disk(lc.0, lc.1, radius) {
                    profile.lumen_intensity
                } else if in_disk(c.0, c.1, outer) {
                    in_wall[k] = true;
                    profile.wall_intensity
                } else {
                    profile.background_intensity
                };
            }
        }
        if kernel.len() > 1 {
            blur_slice(&mut base, hh, ww, &kernel);
        }
        for (&b, &wall) in base.iter().zip(&in_wall) {
            let sigma = if wall { profile.wall_texture_sigma } else { profile.texture_sigma };
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            data.push((b + noise) as f32);
        }
    }
    Ok(LabeledPatch {
        tensor: Tensor::new(vec![1, dd, hh, ww], data)?,
        meta: PatchMeta {
            patch_id: 0,
            subject_id: profile.subject_id,
            target_grade,
            lumen_area: lumen as f64,
            wall_area: wall as f64,
            stenosis_grade: grade,
        },
    })
}

/// Grade interval `[lo, hi)` and its share of each subject's patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
    pub proportion: f64,
}

/// Per-subject strata shares: `<0.3` 37.1%, `>0.7` 14.9%, `<0.4` 55.7%,
/// `>=0.4` 44.3%. `<0.3` is split into `<0.2` and `[0.2, 0.3)` so that
/// training pools (grade below 0.2) are not empty.
pub fn default_strata() -> Vec<Stratum> {
    vec![
        Stratum { lo: 0.0, hi: 0.2, proportion: 0.300 },
        Stratum { lo: 0.2, hi: 0.3, proportion: 0.071 },
        Stratum { lo: 0.3, hi: 0.4, proportion: 0.186 },
        Stratum { lo: 0.4, hi: 0.7, proportion: 0.294 },
        Stratum { lo: 0.7, hi: MAX_TARGET_GRADE, proportion: 0.149 },
    ]
}

/// Ranges from which subject profiles are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceRanges {
    /// As a fraction of the smaller in-plane extent.
    pub outer_radius_fraction: (f64, f64),
    pub lumen_intensity: (f64, f64),
    pub wall_intensity: (f64, f64),
    pub background_intensity: (f64, f64),
    pub texture_sigma: (f64, f64),
    pub wall_texture_sigma: (f64, f64),
    pub blur_sigma: f64,
    /// As a fraction of the smaller in-plane extent.
    pub center_jitter_fraction: f64,
    /// Voxels.
    pub slice_jitter: f64,
    pub eccentricity: (f64, f64),
}

impl Default for AppearanceRanges {
    fn default() -> Self {
        AppearanceRanges {
            outer_radius_fraction: (0.28, 0.34),
            lumen_intensity: (0.75, 0.85),
            wall_intensity: (0.40, 0.50),
            background_intensity: (0.10, 0.20),
            texture_sigma: (0.02, 0.04),
            wall_texture_sigma: (0.10, 0.14),
            blur_sigma: 1.2,
            center_jitter_fraction: 0.05,
            slice_jitter: 0.3,
            eccentricity: (0.0, 0.8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub k_folds: usize,
    pub patches_per_subject: usize,
    /// Spatial patch shape `[D, H, W]`.
    pub patch: [usize; 3],
    pub strata: Vec<Stratum>,
    pub appearance: AppearanceRanges,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects: 20,
            k_folds: 5,
            patches_per_subject: 200,
            patch: [4, 16, 16],
            strata: default_strata(),
            appearance: AppearanceRanges::default(),
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn full() -> Self {
        CohortSpec {
            n_subjects: 90,
            k_folds: 10,
            patches_per_subject: 400,
            patch: [8, 80, 80],
            ..CohortSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 3 || self.n_subjects == 0 || !self.n_subjects.is_multiple_of(self.k_folds) {
            return Err(Error::invalid(format!(
                "{} subjects cannot be split into {} equal folds (need k >= 3 dividing n)",
                self.n_subjects, self.k_folds
            )));
        }
        if self.patch.iter().any(|&e| e == 0 || e % 4 != 0) {
            return Err(Error::invalid(format!("patch extents {:?} must be positive multiples of 4", self.patch)));
        }
        let total: f64 = self.strata.iter().map(|s| s.proportion).sum();
        if self.strata.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("strata proportions sum to {total}, not 1")));
        }
        for s in &self.strata {
            if !(0.0 <= s.lo && s.lo < s.hi && s.hi <= MAX_TARGET_GRADE && s.proportion >= 0.0) {
                return Err(Error::invalid(format!("malformed stratum {s:?}")));
            }
        }
        if self.patches_per_subject == 0 {
            return Err(Error::invalid("patches_per_subject must be positive"));
        }
        Ok(())
    }

    /// Patches per stratum for one subject (largest-remainder rounding).
    pub fn stratum_counts(&self) -> Vec<usize> {
        let n = self.patches_per_subject as f64;
        let raw: Vec<f64> = self.strata.iter().map(|s| s.proportion * n).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let short = self.patches_per_subject - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }

    pub fn profile(&self, subject_id: usize) -> SubjectProfile {
        let a = &self.appearance;
        let mut rng = Rng::derive(mix(self.seed, fnv1a(b"subject")), subject_id as u64);
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.uniform_range(lo, hi) } else { lo };
        let extent = self.patch[1].min(self.patch[2]) as f64;
        SubjectProfile {
            subject_id,
            outer_radius: draw(a.outer_radius_fraction) * extent,
            lumen_intensity: draw(a.lumen_intensity),
            wall_intensity: draw(a.wall_intensity),
            background_intensity: draw(a.background_intensity),
            texture_sigma: draw(a.texture_sigma),
            wall_texture_sigma: draw(a.wall_texture_sigma),
            blur_sigma: a.blur_sigma,
            center_jitter: a.center_jitter_fraction * extent,
            slice_jitter: a.slice_jitter,
            eccentricity: a.eccentricity,
        }
    }
}

/// Subject ids of one fold's three splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subjects are shuffled once into `k` equal groups. Fold `f` tests on
/// groups `f..f+e` and validates on `f+e..f+2e` (mod `k`) with
/// `e = max(1, k/5)`; the remaining groups train.
pub fn fold_splits(spec: &CohortSpec) -> Result<Vec<FoldSplit>> {
    spec.validate()?;
    let k = spec.k_folds;
    let mut ids: Vec<usize> = (0..spec.n_subjects).collect();
    Rng::derive(spec.seed, fnv1a(b"folds")).shuffle(&mut ids);
    let size = spec.n_subjects / k;
    let groups: Vec<&[usize]> = ids.chunks(size).collect();
    let e = (k / 5).max(1);
    let collect = |sel: &mut dyn Iterator<Item = usize>| {
        let mut v: Vec<usize> = sel.flat_map(|g| groups[g].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    Ok((0..k)
        .map(|f| {
            let test = collect(&mut (0..e).map(|j| (f + j) % k));
            let validation = collect(&mut (e..2 * e).map(|j| (f + j) % k));
            let train = collect(&mut (2 * e..k).map(|j| (f + j) % k));
            FoldSplit {
                fold: f,
                train,
                validation,
                test,
            }
        })
        .collect())
}

/// All patches of a cohort, stacked as `[N, 1, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: CohortSpec,
    pub patches: Tensor,
    pub meta: Vec<PatchMeta>,
}

pub fn build_cohort(spec: &CohortSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = spec.stratum_counts();
    let [dd, hh, ww] = spec.patch;
    let total = spec.n_subjects * spec.patches_per_subject;
    let mut data = Vec::with_capacity(total * dd * hh * ww);
    let mut meta = Vec::with_capacity(total);
    for subject in 0..spec.n_subjects {
        let profile = spec.profile(subject);
        let mut rng = Rng::derive(mix(spec.seed, fnv1a(b"patches")), subject as u64);
        for (stratum, &count) in spec.strata.iter().zip(&counts) {
            // keep the rasterised grade inside the stratum where the width allows
            let lo = if stratum.lo > 0.0 { stratum.lo + GRADE_TOLERANCE } else { 0.0 };
            let hi = if stratum.hi < MAX_TARGET_GRADE { stratum.hi - GRADE_TOLERANCE } else { stratum.hi };
            let (lo, hi) = if lo < hi { (lo, hi) } else { (stratum.lo, stratum.hi) };
            for _ in 0..count {
                let target = rng.uniform_range(lo, hi);
                let mut p = render_patch(&profile, spec.patch, target, &mut rng)?;
                p.meta.patch_id = meta.len();
                data.extend_from_slice(p.tensor.data());
                meta.push(p.meta);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        patches: Tensor::new(vec![meta.len(), 1, dd, hh, ww], data)?,
        meta,
    })
}

/// Manifest row: patch metadata plus its byte offset in the shard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    #[serde(flatten)]
    pub meta: PatchMeta,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: CohortSpec,
    pub seed: u64,
    pub shard: String,
    pub patches: Vec<ShardEntry>,
}

const DATASET_FORMAT: &str = "msr-phantom";
pub const SHARD_FILE: &str = "patches.msrt";
pub const DATASET_MANIFEST: &str = "manifest.json";

impl Dataset {
    pub fn patch_len(&self) -> usize {
        self.spec.patch.iter().product()
    }

    /// `[n, 1, D, H, W]` stack of the selected patches, in the given order.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        let per = self.patch_len();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            if i >= self.meta.len() {
                return Err(Error::invalid(format!("patch {i} outside a dataset of {}", self.meta.len())));
            }
            data.extend_from_slice(&self.patches.data()[i * per..(i + 1) * per]);
        }
        let [d, h, w] = self.spec.patch;
        Tensor::new(vec![ids.len(), 1, d, h, w], data)
    }

    /// Ids of patches from `subjects` whose grade satisfies `keep`.
    pub fn select(&self, subjects: &[usize], keep: impl Fn(f64) -> bool) -> Vec<usize> {
        self.meta
            .iter()
            .filter(|m| subjects.contains(&m.subject_id) && keep(m.stenosis_grade))
            .map(|m| m.patch_id)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        container::save(&dir.join(SHARD_FILE), &self.patches)?;
        let header = container::header_len(self.patches.shape().len()) as u64;
        let bytes = 4 * self.patch_len() as u64;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            seed: self.spec.seed,
            shard: SHARD_FILE.into(),
            patches: self
                .meta
                .iter()
                .enumerate()
                .map(|(i, m)| ShardEntry {
                    meta: m.clone(),
                    offset: header + i as u64 * bytes,
                })
                .collect(),
        };
        let path = dir.join(DATASET_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format(format!("not a phantom dataset: {}", manifest.format)));
        }
        let patches = container::load(&dir.join(&manifest.shard))?;
        let [d, h, w] = manifest.spec.patch;
        let expected = [manifest.patches.len(), 1, d, h, w];
        if patches.shape() != expected {
            return Err(Error::Format(format!("shard shape {:?}, manifest implies {expected:?}", patches.shape())));
        }
        Ok(Dataset {
            spec: manifest.spec,
            patches,
            meta: manifest.patches.into_iter().map(|e| e.meta).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_profile(radius: f64) -> SubjectProfile {
        SubjectProfile {
            subject_id: 0,
            outer_radius: radius,
            lumen_intensity: 0.8,
            wall_intensity: 0.45,
            background_intensity: 0.15,
            texture_sigma: 0.0,
            wall_texture_sigma: 0.0,
            blur_sigma: 0.0,
            center_jitter: 0.0,
            slice_jitter: 0.0,
            eccentricity: (0.0, 0.0),
        }
    }

    #[test]
    fn grade_arithmetic() {
        assert_eq!(stenosis_grade(10.0, 10.0).unwrap(), 0.0);
        assert!((stenosis_grade(0.2 * 7.0, 7.0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(stenosis_grade(50.0, 100.0).unwrap(), 0.5);
        assert!(stenosis_grade(1.0, 0.0).is_err());
        assert!(stenosis_grade(3.0, 2.0).is_err());
    }

    #[test]
    fn unobstructed_vessel() {
        let p = render_patch(&still_profile(5.0), [4, 16, 16], 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(p.meta.stenosis_grade, 0.0);
        assert_eq!(p.meta.lumen_area, p.meta.wall_area);
        assert_eq!(p.tensor.shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn stored_grade_is_recomputable() {
        let mut rng = Rng::new(2);
        let spec = CohortSpec::default();
        for k in 0..200 {
            let profile = spec.profile(k % 7);
            let p = render_patch(&profile, spec.patch, rng.uniform_range(0.0, MAX_TARGET_GRADE), &mut rng).unwrap();
            let m = &p.meta;
            assert_eq!(stenosis_grade(m.lumen_area, m.wall_area).unwrap(), m.stenosis_grade);
            assert!(m.lumen_area > 0.0 && m.lumen_area <= m.wall_area);
            assert!((m.stenosis_grade - m.target_grade).abs() <= GRADE_TOLERANCE);
        }
    }

    #[test]
    fn rasterisation_accuracy() {
        let mut rng = Rng::new(3);
        let spec = CohortSpec::default();
        let mut total = 0.0;
        for k in 0..1000 {
            let profile = spec.profile(k % 20);
            let target = rng.uniform_range(0.0, MAX_TARGET_GRADE);
            let p = render_patch(&profile, spec.patch, target, &mut rng).unwrap();
            total += (p.meta.stenosis_grade - target).abs();
        }
        assert!(total / 1000.0 <= 0.015, "{}", total / 1000.0);
    }

    #[test]
    fn infeasible_geometry_rejected() {
        // a 1-voxel vessel cannot show a 0.5 stenosis
        assert!(render_patch(&still_profile(0.6), [4, 8, 8], 0.5, &mut Rng::new(4)).is_err());
        assert!(render_patch(&still_profile(5.0), [4, 16, 16], 0.99, &mut Rng::new(4)).is_err());
        assert!(render_patch(&still_profile(9.0), [4, 16, 16], 0.1, &mut Rng::new(4)).is_err());
    }

    #[test]
    fn pixels_follow_the_label() {
        let p = render_patch(&still_profile(6.0), [4, 16, 16], 0.6, &mut Rng::new(5)).unwrap();
        let slice = &p.tensor.data()[2 * 256..3 * 256];
        let lumen = slice.iter().filter(|&&v| v == 0.8).count();
        let vessel = slice.iter().filter(|&&v| v != 0.15).count();
        assert_eq!(lumen as f64, p.meta.lumen_area);
        assert_eq!(vessel as f64, p.meta.wall_area);
    }

    #[test]
    fn wall_texture_stays_in_the_wall() {
        let profile = SubjectProfile {
            wall_texture_sigma: 0.1,
            ..still_profile(6.0)
        };
        let p = render_patch(&profile, [4, 16, 16], 0.6, &mut Rng::new(6)).unwrap();
        let slice = &p.tensor.data()[2 * 256..3 * 256];
        let clean = slice.iter().filter(|&&v| v == 0.8 || v == 0.15).count() as f64;
        assert_eq!(clean, 256.0 - (p.meta.wall_area - p.meta.lumen_area));
    }

    #[test]
    fn blur_kernel_and_slice() {
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
        let k = gaussian_kernel(1.2);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[8]);
        let mut flat = vec![0.3; 8 * 6];
        blur_slice(&mut flat, 8, 6, &k);
        assert!(flat.iter().all(|v| (v - 0.3).abs() < 1e-15));
        let mut step: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
        blur_slice(&mut step, 8, 8, &k);
        // rows stay equal, the edge is softened and monotone
        assert_eq!(step[..8], step[8..16]);
        assert!(step[..8].windows(2).all(|w| w[0] < w[1]));
        assert!(step[3] > 0.0 && step[4] < 1.0);
    }

    #[test]
    fn strata_counts() {
        let spec = CohortSpec::default();
        assert_eq!(spec.stratum_counts(), vec![60, 14, 37, 59, 30]);
        assert_eq!(spec.stratum_counts().iter().sum::<usize>(), 200);
    }

    #[test]
    fn full_scale_fold_sizes() {
        let splits = fold_splits(&CohortSpec::full()).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (54, 18, 18));
        }
        // with two test groups per fold each subject is tested twice over ten folds
        let mut seen = vec![0; 90];
        for s in &splits {
            for &i in &s.test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 2));
    }

    #[test]
    fn desk_folds_test_each_subject_once() {
        let splits = fold_splits(&CohortSpec::default()).unwrap();
        let mut seen = [0; 20];
        for s in &splits {
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (12, 4, 4));
            for &i in &s.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..20).collect::<Vec<_>>());
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn indivisible_cohort_rejected() {
        let spec = CohortSpec {
            n_subjects: 21,
            ..CohortSpec::default()
        };
        assert!(build_cohort(&spec).is_err());
    }

    fn small_spec() -> CohortSpec {
        CohortSpec {
            n_subjects: 5,
            patches_per_subject: 20,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn cohort_is_reproducible_and_round_trips() {
        let spec = small_spec();
        let a = build_cohort(&spec).unwrap();
        let b = build_cohort(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta.len(), 100);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, a);

        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(DATASET_MANIFEST)).unwrap()).unwrap();
        let raw = fs::read(dir.path().join(SHARD_FILE)).unwrap();
        let entry = &manifest.patches[37];
        let first = f32::from_le_bytes(raw[entry.offset as usize..][..4].try_into().unwrap());
        assert_eq!(first, a.gather(&[37]).unwrap().data()[0]);
    }

    #[test]
    fn different_seed_different_cohort() {
        let a = build_cohort(&small_spec()).unwrap();
        let b = build_cohort(&CohortSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.patches, b.patches);
    }

    #[test]
    fn select_filters_by_subject_and_grade() {
        let d = build_cohort(&small_spec()).unwrap();
        let ids = d.select(&[1, 3], |g| g < 0.2);
        assert!(!ids.is_empty());
        for i in ids {
            assert!(d.meta[i].stenosis_grade < 0.2);
            assert!([1, 3].contains(&d.meta[i].subject_id));
        }
    }
}
