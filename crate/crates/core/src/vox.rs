//! Voxel-level primitives shared by every other module: typed maps over the
//! voxel lattice plus softmax, argmax, one-hot, entropy and masked
//! reductions.
//!
//! Conventions, fixed once for the whole crate:
//! * class 1 is foreground, class 0 background (binary tasks);
//! * entropy is in bits (log base 2), so thresholds live in `[0, log2 C]`;
//! * cross-entropy style losses use natural log — the two never mix;
//! * argmax ties break toward the lower class index;
//! * probabilities are clamped to `>= 1e-12` before any log.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{ChanGrid, Grid3};
use crate::real::Real;

/// Sentinel label for voxels excluded from a loss. Distinct from every class
/// index (class count is capped at 255).
pub const IGNORE: u8 = u8::MAX;

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A 3D scalar intensity grid with voxel spacing metadata (mm, informational).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<F> {
    pub data: Grid3<F>,
    pub spacing: [f64; 3],
}

impl<F: Real> Volume<F> {
    pub fn new(data: Grid3<F>, spacing: [f64; 3]) -> Self {
        Self { data, spacing }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn cast<G: Real>(&self) -> Volume<G> {
        Volume {
            data: self.data.cast(),
            spacing: self.spacing,
        }
    }
}

/// Per-voxel class indices in `{0..C-1}` plus the [`IGNORE`] sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub data: Grid3<u8>,
    pub num_classes: usize,
}

impl LabelMask {
    pub fn new(data: Grid3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > IGNORE as usize {
            return Err(Error::argument("num_classes must be in 2..=254"));
        }
        if data
            .as_slice()
            .iter()
            .any(|&v| v != IGNORE && v as usize >= num_classes)
        {
            return Err(Error::argument("label outside 0..num_classes"));
        }
        Ok(Self { data, num_classes })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn has_ignore(&self) -> bool {
        self.data.as_slice().iter().any(|&v| v == IGNORE)
    }

    pub fn count_ignore(&self) -> usize {
        self.data.as_slice().iter().filter(|&&v| v == IGNORE).count()
    }
}

/// Pre-softmax per-voxel class scores (C×H×W×D).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap<F>(pub ChanGrid<F>);

/// Post-softmax per-voxel class probabilities; channels sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<F>(pub ChanGrid<F>);

/// Per-voxel Shannon entropy in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap<F>(pub Grid3<F>);

/// Per-voxel embedding (F×H×W×D) used for prototypes and the contrastive
/// objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F>(pub ChanGrid<F>);

impl<F: Real> ProbMap<F> {
    /// Check the per-voxel channel-sum and range invariants (tests).
    pub fn validate(&self, tol: f64) -> Result<()> {
        let c = self.0.channels();
        let s = self.0.spatial_len();
        for v in 0..s {
            let mut sum = 0.0;
            for ch in 0..c {
                let p = self.0.at(ch, v).as_f64();
                if !(0.0..=1.0 + tol).contains(&p) {
                    return Err(Error::argument("probability outside [0,1]"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::NonFinite("probability channel sum".to_string()));
            }
        }
        Ok(())
    }
}

/// Temperature softmax over the channel axis, computed with per-voxel max
/// subtraction. `temperature = 1` is the standard softmax; lower values
/// sharpen the distribution.
pub fn softmax<F: Real>(logits: &LogitMap<F>, temperature: F) -> Result<ProbMap<F>> {
    if temperature <= F::zero() {
        return Err(Error::argument("softmax temperature must be positive"));
    }
    let c = logits.0.channels();
    let s = logits.0.spatial_len();
    let mut out = ChanGrid::zeros(c, logits.0.shape());

    // Channel-sweep so every inner pass is a contiguous slab.
    let mut maxes = alloc::vec![F::neg_infinity(); s];
    for ch in 0..c {
        for (m, &z) in maxes.iter_mut().zip(logits.0.channel(ch)) {
            if z > *m {
                *m = z;
            }
        }
    }
    let mut sums = alloc::vec![F::zero(); s];
    for ch in 0..c {
        let slab = out.channel_mut(ch);
        for ((o, &z), (&m, acc)) in slab
            .iter_mut()
            .zip(logits.0.channel(ch))
            .zip(maxes.iter().zip(sums.iter_mut()))
        {
            let e = ((z - m) / temperature).exp();
            *o = e;
            *acc += e;
        }
    }
    for ch in 0..c {
        for (o, &sum) in out.channel_mut(ch).iter_mut().zip(sums.iter()) {
            *o /= sum;
        }
    }
    Ok(ProbMap(out))
}

/// Per-voxel argmax over channels; ties break toward the lower class index.
pub fn argmax_labels<F: Real>(p: &ProbMap<F>) -> LabelMask {
    argmax_channels(&p.0)
}

/// Argmax over the channel axis of any channel grid (logits or probs give
/// the same result).
pub fn argmax_channels<F: Real>(grid: &ChanGrid<F>) -> LabelMask {
    let c = grid.channels();
    let s = grid.spatial_len();
    let mut best = alloc::vec![0u8; s];
    let mut best_val: Vec<F> = grid.channel(0).to_vec();
    for ch in 1..c {
        for ((b, bv), &x) in best
            .iter_mut()
            .zip(best_val.iter_mut())
            .zip(grid.channel(ch))
        {
            // Strict '>' keeps the lowest index on ties.
            if x > *bv {
                *bv = x;
                *b = ch as u8;
            }
        }
    }
    LabelMask {
        data: Grid3::from_vec(grid.shape(), best).expect("shape consistent"),
        num_classes: c,
    }
}

/// Per-voxel Shannon entropy in bits; `0·log 0` is treated as 0 via the
/// probability floor.
pub fn entropy_map<F: Real>(p: &ProbMap<F>) -> EntropyMap<F> {
    let c = p.0.channels();
    let s = p.0.spatial_len();
    let floor = F::of(PROB_FLOOR);
    let mut ent = alloc::vec![F::zero(); s];
    for ch in 0..c {
        for (e, &pr) in ent.iter_mut().zip(p.0.channel(ch)) {
            let q = pr.max(floor);
            *e = *e - q * q.log2();
        }
    }
    EntropyMap(Grid3::from_vec(p.0.shape(), ent).expect("shape consistent"))
}

/// One-hot encoding of a label mask. The caller must mask out IGNORE first.
pub fn one_hot<F: Real>(m: &LabelMask) -> Result<ProbMap<F>> {
    if m.has_ignore() {
        return Err(Error::argument(
            "one_hot: mask contains IGNORE entries; mask them out first",
        ));
    }
    let mut out = ChanGrid::zeros(m.num_classes, m.shape());
    let s = out.spatial_len();
    for (v, &lab) in m.data.as_slice().iter().enumerate() {
        out.as_mut_slice()[lab as usize * s + v] = F::one();
    }
    Ok(ProbMap(out))
}

/// Sum of `values` over voxels where `mask != 0`.
pub fn masked_sum<F: Real>(values: &Grid3<F>, mask: &Grid3<u8>) -> Result<F> {
    if values.shape() != mask.shape() {
        return Err(Error::shape("masked_sum", values.shape(), mask.shape()));
    }
    Ok(values
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v)
        .sum())
}

/// Mean of `values` over voxels where `mask != 0`; zero when the mask is
/// empty.
pub fn masked_mean<F: Real>(values: &Grid3<F>, mask: &Grid3<u8>) -> Result<F> {
    let count = mask.as_slice().iter().filter(|&&m| m != 0).count();
    if count == 0 {
        return Ok(F::zero());
    }
    Ok(masked_sum(values, mask)? / F::of(count as f64))
}
