//! Deterministic synthetic 3D dataset generator plus split management.
//!
//! Cases are binary segmentation volumes: foreground mean intensity 1,
//! background 0, Gaussian noise, Gaussian blur, then per-case z-score
//! normalization. Two organ styles: `smooth-blob` (one convex-ish ellipsoid)
//! and `multi-lobe` (2–4 overlapping lobes with ragged boundaries — the hard
//! setting). All randomness is derived from `(seed, case index, attempt)`
//! streams, so generating case 17 alone produces exactly the same bytes as
//! generating the whole set, on any platform.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::rng::{stream, tag};
use crate::vox::{LabelMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum OrganStyle {
    SmoothBlob,
    MultiLobe,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSpec {
    pub num_cases: usize,
    pub volume_shape: [usize; 3],
    pub organ_style: OrganStyle,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_cases: 40,
            volume_shape: [64, 64, 48],
            organ_style: OrganStyle::MultiLobe,
            noise_sigma: 0.9,
            blur_sigma: 1.0,
            seed: 2024,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_cases < 1 {
            return Err(Error::argument("num_cases must be >= 1"));
        }
        if self.volume_shape.iter().any(|&s| s < 16) {
            return Err(Error::argument("volume shape must be >= 16 per axis"));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::argument("sigmas must be >= 0"));
        }
        Ok(())
    }
}

/// One labeled volume. The generator guarantees the foreground fraction lies
/// in [`FG_FRACTION_MIN`], [`FG_FRACTION_MAX`].
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume<f32>,
    pub label: LabelMask,
}

pub const FG_FRACTION_MIN: f64 = 0.005;
pub const FG_FRACTION_MAX: f64 = 0.40;
const MAX_ATTEMPTS: u64 = 100;

/// Labeled/unlabeled partition of the training ids, plus the held-out test
/// ids of the same dataset.
#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub test_ids: Vec<String>,
    pub labeled_ratio: f64,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generate the whole dataset. Pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Case>> {
    spec.validate()?;
    (0..spec.num_cases).map(|i| generate_case(spec, i)).collect()
}

/// Generate a single case; independent of every other case.
pub fn generate_case(spec: &DatasetSpec, index: usize) -> Result<Case> {
    spec.validate()?;
    let shape = spec.volume_shape;
    let total = shape[0] * shape[1] * shape[2];

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(spec.seed, &[tag::CASE, index as u64, attempt]);
        let label = match spec.organ_style {
            OrganStyle::SmoothBlob => smooth_blob(shape, &mut rng),
            OrganStyle::MultiLobe => multi_lobe(shape, &mut rng),
        };
        let fg = label.as_slice().iter().filter(|&&v| v == 1).count();
        let frac = fg as f64 / total as f64;
        if !(FG_FRACTION_MIN..=FG_FRACTION_MAX).contains(&frac) {
            continue;
        }

        let mut field: Vec<f64> = label.as_slice().iter().map(|&v| v as f64).collect();
        if spec.noise_sigma > 0.0 {
            for x in field.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += n * spec.noise_sigma;
            }
        }
        if spec.blur_sigma > 0.0 {
            gaussian_blur(&mut field, shape, spec.blur_sigma);
        }
        zscore(&mut field);

        let data = Grid3::from_vec(shape, field.iter().map(|&v| v as f32).collect())?;
        return Ok(Case {
            id: case_id(index),
            volume: Volume::new(data, [1.0, 1.0, 1.0]),
            label: LabelMask::new(label, 2)?,
        });
    }
    Err(Error::Generation(format!(
        "case {index}: foreground fraction outside [{FG_FRACTION_MIN}, {FG_FRACTION_MAX}] after {MAX_ATTEMPTS} attempts"
    )))
}

fn smooth_blob(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Grid3<u8> {
    let center: [f64; 3] = core::array::from_fn(|a| {
        rng.random_range(0.35..0.65) * shape[a] as f64
    });
    let radii: [f64; 3] = core::array::from_fn(|a| {
        rng.random_range(0.18..0.32) * shape[a] as f64
    });
    Grid3::from_fn(shape, |h, w, d| {
        let q = ellipsoid_q([h, w, d], center, radii);
        u8::from(q <= 1.0)
    })
}

fn multi_lobe(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Grid3<u8> {
    let n_lobes: usize = rng.random_range(2..=4);
    let base: [f64; 3] = core::array::from_fn(|a| {
        rng.random_range(0.38..0.62) * shape[a] as f64
    });
    let mut lobes = Vec::with_capacity(n_lobes);
    for _ in 0..n_lobes {
        let center: [f64; 3] = core::array::from_fn(|a| {
            base[a] + rng.random_range(-0.15..0.15) * shape[a] as f64
        });
        let radii: [f64; 3] = core::array::from_fn(|a| {
            rng.random_range(0.10..0.22) * shape[a] as f64
        });
        lobes.push((center, radii));
    }
    // Low-frequency boundary noise: a coarse grid upsampled trilinearly.
    let coarse_shape = [8usize, 8, 8];
    let coarse: Vec<f64> = (0..coarse_shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    const RAGGED_AMPLITUDE: f64 = 0.35;

    Grid3::from_fn(shape, |h, w, d| {
        let mut phi = f64::NEG_INFINITY;
        for &(center, radii) in &lobes {
            let q = ellipsoid_q([h, w, d], center, radii);
            phi = phi.max(1.0 - q);
        }
        phi += RAGGED_AMPLITUDE * trilinear(&coarse, coarse_shape, [h, w, d], shape);
        u8::from(phi > 0.0)
    })
}

#[inline]
fn ellipsoid_q(pos: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let mut q = 0.0;
    for a in 0..3 {
        let t = (pos[a] as f64 + 0.5 - center[a]) / radii[a];
        q += t * t;
    }
    q
}

/// Sample a coarse grid at a fine-grid voxel with trilinear interpolation.
fn trilinear(coarse: &[f64], cs: [usize; 3], pos: [usize; 3], fine: [usize; 3]) -> f64 {
    let mut idx = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = (pos[a] as f64 + 0.5) / fine[a] as f64 * (cs[a] - 1) as f64;
        let i = (x.floor() as usize).min(cs[a] - 2);
        idx[a] = i;
        frac[a] = x - i as f64;
    }
    let at = |h: usize, w: usize, d: usize| coarse[(h * cs[1] + w) * cs[2] + d];
    let mut value = 0.0;
    for (dh, fh) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (dw, fw) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (dd, fd) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                value += fh * fw * fd * at(idx[0] + dh, idx[1] + dw, idx[2] + dd);
            }
        }
    }
    value
}

/// Separable Gaussian blur with a truncated kernel (radius = ceil(3σ)),
/// renormalized at the borders so constants stay constant.
pub fn gaussian_blur(field: &mut [f64], shape: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }

    let [hh, ww, dd] = shape;
    let idx = |h: usize, w: usize, d: usize| (h * ww + w) * dd + d;
    let mut tmp = alloc::vec![0.0f64; field.len()];

    // One pass per axis; borders renormalize over the valid support.
    for (axis, len) in [(0usize, hh), (1, ww), (2, dd)] {
        for h in 0..hh {
            for w in 0..ww {
                for d in 0..dd {
                    let pos = [h, w, d];
                    let c = pos[axis] as isize;
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let o = c + ki as isize - radius as isize;
                        if o < 0 || o >= len as isize {
                            continue;
                        }
                        let mut p = pos;
                        p[axis] = o as usize;
                        acc += kv * field[idx(p[0], p[1], p[2])];
                        wsum += kv;
                    }
                    tmp[idx(h, w, d)] = acc / wsum;
                }
            }
        }
        field.copy_from_slice(&tmp);
    }
}

fn zscore(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for v in field.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Crop volume and label by the same uniformly drawn offset.
pub fn random_crop(case: &Case, crop_shape: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = case.volume.shape();
    for a in 0..3 {
        if crop_shape[a] > shape[a] {
            return Err(Error::argument(format!(
                "crop axis {a}: {} exceeds volume extent {}",
                crop_shape[a], shape[a]
            )));
        }
    }
    let offset: [usize; 3] =
        core::array::from_fn(|a| rng.random_range(0..=shape[a] - crop_shape[a]));
    crop_at(case, offset, crop_shape)
}

pub fn crop_at(case: &Case, offset: [usize; 3], crop_shape: [usize; 3]) -> Result<Case> {
    Ok(Case {
        id: case.id.clone(),
        volume: Volume::new(
            case.volume.data.crop(offset, crop_shape)?,
            case.volume.spacing,
        ),
        label: LabelMask::new(case.label.data.crop(offset, crop_shape)?, case.label.num_classes)?,
    })
}

/// Seeded shuffle; the first `floor(ratio·N)` ids become the labeled pool.
pub fn make_split(ids: &[String], labeled_ratio: f64, seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::argument("make_split: empty id list"));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::argument("labeled_ratio must be in (0, 1]"));
    }
    let mut order: Vec<String> = ids.to_vec();
    let mut rng = stream(seed, &[tag::SPLIT]);
    shuffle(&mut order, &mut rng);
    let n_labeled = (labeled_ratio * ids.len() as f64).floor() as usize;
    let unlabeled_ids = order.split_off(n_labeled);
    Ok(SplitManifest {
        labeled_ids: order,
        unlabeled_ids,
        test_ids: Vec::new(),
        labeled_ratio,
    })
}

/// Fisher–Yates, pinned here so the shuffle order never depends on `rand`
/// internals.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
