//! Mask and pseudo-label constructions: the confident-disagreement mask, the
//! entropy percentile/ignore rule, the reliability mask with its class
//! subsets, and class prototypes.
//!
//! Everything here is a pure function of probability, entropy or feature
//! maps. Outputs feed the loss module as detached quantities (they carry no
//! gradient), which is what makes the finite-difference gradient checks of
//! the losses well defined.

use alloc::string::ToString;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::real::Real;
use crate::vox::{argmax_labels, EntropyMap, FeatureMap, LabelMask, ProbMap, IGNORE};

/// Binary mask over voxels where exactly one subnet makes a confident
/// foreground call (XOR mode), or at least one does (OR mode).
#[derive(Clone, Debug, PartialEq)]
pub struct DisagreementMask {
    pub data: Grid3<u8>,
    pub lambda: f64,
}

/// How the two per-subnet confidence conditions combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CombineMode {
    /// Exactly one condition holds — inconsistent confident predictions.
    #[default]
    Xor,
    /// At least one condition holds.
    Or,
}

/// Per-subnet entropy thresholds at the γ-th percentile of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyThresholds<F> {
    pub tau_a: F,
    pub tau_b: F,
    pub gamma_percentile: f64,
}

/// 1 = both subnets agree and both entropies are below threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMask {
    pub data: Grid3<u8>,
}

/// Partition of the voxel set by reliability and (foreground) class.
/// Indices are linear spatial indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSubsets {
    pub reliable_fg: Vec<u32>,
    pub reliable_bg: Vec<u32>,
    pub uncertain: Vec<u32>,
}

/// Mean feature embeddings of the reliable foreground/background voxels.
/// `None` marks an undefined prototype (empty member set).
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<F> {
    pub fg: Option<Vec<F>>,
    pub bg: Option<Vec<F>>,
    pub n_fg: usize,
    pub n_bg: usize,
}

/// The confident-foreground condition for one subnet: predicted class 1 and
/// foreground probability at least λ.
#[inline]
fn confident_fg<F: Real>(p: &ProbMap<F>, labels: &LabelMask, v: usize, lambda: F) -> bool {
    let s = p.0.spatial_len();
    labels.data.as_slice()[v] == 1 && p.0.as_slice()[s + v] >= lambda
}

/// Confident-disagreement mask between the two subnets.
///
/// The condition is evaluated on the softmax probability of the foreground
/// class (class 1). XOR is the default combine mode; OR is available as a
/// config switch.
pub fn disagreement_mask<F: Real>(
    prob_a: &ProbMap<F>,
    prob_b: &ProbMap<F>,
    lambda: f64,
    mode: CombineMode,
) -> Result<DisagreementMask> {
    if prob_a.0.shape() != prob_b.0.shape() || prob_a.0.channels() != prob_b.0.channels() {
        return Err(Error::shape(
            "disagreement_mask",
            prob_a.0.shape(),
            prob_b.0.shape(),
        ));
    }
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(Error::argument("lambda must be in (0, 1)"));
    }
    let lam = F::of(lambda);
    let labels_a = argmax_labels(prob_a);
    let labels_b = argmax_labels(prob_b);
    let s = prob_a.0.spatial_len();
    let mut out = Grid3::zeros(prob_a.0.shape());
    for v in 0..s {
        let ca = confident_fg(prob_a, &labels_a, v, lam);
        let cb = confident_fg(prob_b, &labels_b, v, lam);
        let hit = match mode {
            CombineMode::Xor => ca ^ cb,
            CombineMode::Or => ca || cb,
        };
        out.as_mut_slice()[v] = u8::from(hit);
    }
    Ok(DisagreementMask { data: out, lambda })
}

/// γ-th percentile with linear interpolation (the `rank = γ/100·(n-1)`
/// convention), pinned for cross-implementation determinism.
pub fn percentile<F: Real>(values: &[F], gamma: f64) -> Result<F> {
    if values.is_empty() {
        return Err(Error::argument("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&gamma) {
        return Err(Error::argument("percentile rank must be in [0, 100]"));
    }
    let mut sorted: Vec<F> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite entropy values"));
    let rank = gamma / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = F::of(rank - lo as f64);
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Per-subnet entropy thresholds over the current batch (stack the batch's
/// entropy maps before calling).
pub fn percentile_thresholds<F: Real>(
    ent_a: &EntropyMap<F>,
    ent_b: &EntropyMap<F>,
    gamma: f64,
) -> Result<EntropyThresholds<F>> {
    if !(0.0 < gamma && gamma < 100.0) {
        return Err(Error::argument("gamma must be in (0, 100)"));
    }
    Ok(EntropyThresholds {
        tau_a: percentile(ent_a.0.as_slice(), gamma)?,
        tau_b: percentile(ent_b.0.as_slice(), gamma)?,
        gamma_percentile: gamma,
    })
}

/// Entropy-filtered pseudo-labels: argmax of `prob_src` where both entropies
/// are within threshold, IGNORE where either exceeds it (strict `>`).
pub fn efs_pseudo_labels<F: Real>(
    prob_src: &ProbMap<F>,
    ent_a: &EntropyMap<F>,
    ent_b: &EntropyMap<F>,
    thresholds: &EntropyThresholds<F>,
) -> Result<LabelMask> {
    if prob_src.0.shape() != ent_a.0.shape() || ent_a.0.shape() != ent_b.0.shape() {
        return Err(Error::shape(
            "efs_pseudo_labels",
            prob_src.0.shape(),
            ent_a.0.shape(),
        ));
    }
    let mut labels = argmax_labels(prob_src);
    for ((lab, &ea), &eb) in labels
        .data
        .as_mut_slice()
        .iter_mut()
        .zip(ent_a.0.as_slice())
        .zip(ent_b.0.as_slice())
    {
        if ea > thresholds.tau_a || eb > thresholds.tau_b {
            *lab = IGNORE;
        }
    }
    Ok(labels)
}

/// Reliability: both subnets agree on the argmax and both entropies are
/// strictly below their thresholds.
pub fn reliability_mask<F: Real>(
    prob_a: &ProbMap<F>,
    prob_b: &ProbMap<F>,
    ent_a: &EntropyMap<F>,
    ent_b: &EntropyMap<F>,
    thresholds: &EntropyThresholds<F>,
) -> Result<ReliabilityMask> {
    if prob_a.0.shape() != prob_b.0.shape() {
        return Err(Error::shape(
            "reliability_mask",
            prob_a.0.shape(),
            prob_b.0.shape(),
        ));
    }
    if prob_a.0.shape() != ent_a.0.shape() || ent_a.0.shape() != ent_b.0.shape() {
        return Err(Error::shape(
            "reliability_mask",
            prob_a.0.shape(),
            ent_a.0.shape(),
        ));
    }
    let la = argmax_labels(prob_a);
    let lb = argmax_labels(prob_b);
    let mut out = Grid3::zeros(prob_a.0.shape());
    for (v, m) in out.as_mut_slice().iter_mut().enumerate() {
        let agree = la.data.as_slice()[v] == lb.data.as_slice()[v];
        let low_a = ent_a.0.as_slice()[v] < thresholds.tau_a;
        let low_b = ent_b.0.as_slice()[v] < thresholds.tau_b;
        *m = u8::from(agree && low_a && low_b);
    }
    Ok(ReliabilityMask { data: out })
}

/// Split the voxel set into reliable-foreground, reliable-background and
/// uncertain. Class membership comes from subnet A's argmax; "background"
/// is every class other than 1, so the three sets partition the lattice for
/// any class count.
pub fn class_subsets(mask: &ReliabilityMask, labels_a: &LabelMask) -> Result<ClassSubsets> {
    if mask.data.shape() != labels_a.shape() {
        return Err(Error::shape(
            "class_subsets",
            mask.data.shape(),
            labels_a.shape(),
        ));
    }
    let mut subsets = ClassSubsets {
        reliable_fg: Vec::new(),
        reliable_bg: Vec::new(),
        uncertain: Vec::new(),
    };
    for (v, (&m, &lab)) in mask
        .data
        .as_slice()
        .iter()
        .zip(labels_a.data.as_slice())
        .enumerate()
    {
        let v = v as u32;
        if m == 0 {
            subsets.uncertain.push(v);
        } else if lab == 1 {
            subsets.reliable_fg.push(v);
        } else {
            subsets.reliable_bg.push(v);
        }
    }
    Ok(subsets)
}

/// Arithmetic mean of the member feature vectors per class; an empty member
/// set leaves that prototype undefined.
pub fn compute_prototypes<F: Real>(
    features: &FeatureMap<F>,
    reliable_fg: &[u32],
    reliable_bg: &[u32],
) -> Result<Prototypes<F>> {
    let s = features.0.spatial_len();
    for &v in reliable_fg.iter().chain(reliable_bg) {
        if v as usize >= s {
            return Err(Error::Argument(
                "prototype voxel index outside feature map".to_string(),
            ));
        }
    }
    Ok(Prototypes {
        fg: mean_embedding(features, reliable_fg),
        bg: mean_embedding(features, reliable_bg),
        n_fg: reliable_fg.len(),
        n_bg: reliable_bg.len(),
    })
}

fn mean_embedding<F: Real>(features: &FeatureMap<F>, members: &[u32]) -> Option<Vec<F>> {
    if members.is_empty() {
        return None;
    }
    let c = features.0.channels();
    let inv = F::of(1.0 / members.len() as f64);
    let mut mean = alloc::vec![F::zero(); c];
    for ch in 0..c {
        let slab = features.0.channel(ch);
        let mut acc = F::zero();
        for &v in members {
            acc += slab[v as usize];
        }
        mean[ch] = acc * inv;
    }
    Some(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ChanGrid;

    fn prob_map(shape: [usize; 3], fg: &[f64]) -> ProbMap<f64> {
        let s = shape[0] * shape[1] * shape[2];
        assert_eq!(fg.len(), s);
        let mut g = ChanGrid::zeros(2, shape);
        for (v, &p) in fg.iter().enumerate() {
            g.as_mut_slice()[v] = 1.0 - p;
            g.as_mut_slice()[s + v] = p;
        }
        ProbMap(g)
    }

    fn ent_map(shape: [usize; 3], e: &[f64]) -> EntropyMap<f64> {
        EntropyMap(Grid3::from_vec(shape, e.to_vec()).unwrap())
    }

    #[test]
    fn disagreement_truth_table() {
        // voxel 0: both confident fg           -> XOR 0, OR 1
        // voxel 1: A confident fg, B bg (0.2)  -> XOR 1, OR 1
        // voxel 2: both below lambda           -> XOR 0, OR 0
        let a = prob_map([1, 1, 3], &[0.9, 0.9, 0.55]);
        let b = prob_map([1, 1, 3], &[0.9, 0.2, 0.52]);
        let xor = disagreement_mask(&a, &b, 0.6, CombineMode::Xor).unwrap();
        assert_eq!(xor.data.as_slice(), &[0, 1, 0]);
        let or = disagreement_mask(&a, &b, 0.6, CombineMode::Or).unwrap();
        assert_eq!(or.data.as_slice(), &[1, 1, 0]);
    }

    #[test]
    fn disagreement_symmetric_in_subnets() {
        let a = prob_map([1, 2, 2], &[0.9, 0.3, 0.7, 0.1]);
        let b = prob_map([1, 2, 2], &[0.2, 0.8, 0.7, 0.9]);
        let ab = disagreement_mask(&a, &b, 0.6, CombineMode::Xor).unwrap();
        let ba = disagreement_mask(&b, &a, 0.6, CombineMode::Xor).unwrap();
        assert_eq!(ab.data, ba.data);
    }

    #[test]
    fn disagreement_rejects_bad_lambda_and_shape() {
        let a = prob_map([1, 1, 2], &[0.9, 0.1]);
        let b = prob_map([1, 1, 3], &[0.9, 0.1, 0.5]);
        assert!(disagreement_mask(&a, &a, 0.0, CombineMode::Xor).is_err());
        assert!(disagreement_mask(&a, &b, 0.6, CombineMode::Xor).is_err());
    }

    #[test]
    fn percentile_constant_and_interpolated() {
        let v = [0.4f64; 9];
        assert_eq!(percentile(&v, 13.0).unwrap(), 0.4);

        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let p = percentile(&v, 70.0).unwrap();
        assert!((p - 0.73).abs() < 1e-12);
        // never exceeds the maximum
        assert!(percentile(&v, 99.999).unwrap() <= 1.0);
    }

    #[test]
    fn efs_rules() {
        let shape = [1, 1, 4];
        let probs = prob_map(shape, &[0.9, 0.9, 0.2, 0.2]);
        let thr = EntropyThresholds {
            tau_a: 0.5,
            tau_b: 0.5,
            gamma_percentile: 50.0,
        };

        // all entropies zero: labels = argmax, no IGNORE
        let zero = ent_map(shape, &[0.0; 4]);
        let lab = efs_pseudo_labels(&probs, &zero, &zero, &thr).unwrap();
        assert_eq!(lab.data.as_slice(), &[1, 1, 0, 0]);

        // ent_a above tau everywhere: all IGNORE
        let high = ent_map(shape, &[0.9; 4]);
        let lab = efs_pseudo_labels(&probs, &high, &zero, &thr).unwrap();
        assert!(lab.data.as_slice().iter().all(|&v| v == IGNORE));

        // boundary: exactly tau is kept (strict >)
        let edge = ent_map(shape, &[0.5, 0.500001, 0.1, 0.9]);
        let lab = efs_pseudo_labels(&probs, &edge, &zero, &thr).unwrap();
        assert_eq!(lab.data.as_slice()[0], 1);
        assert_eq!(lab.data.as_slice()[1], IGNORE);
        assert_eq!(lab.data.as_slice()[3], IGNORE);
    }

    #[test]
    fn reliability_rules_and_boundary() {
        let shape = [1, 1, 3];
        let a = prob_map(shape, &[0.9, 0.9, 0.9]);
        let b = prob_map(shape, &[0.8, 0.2, 0.8]);
        let thr = EntropyThresholds {
            tau_a: 0.5,
            tau_b: 0.5,
            gamma_percentile: 50.0,
        };
        // voxel 0: agree + low entropy -> 1
        // voxel 1: disagree -> 0
        // voxel 2: agree but ent_a == tau_a exactly -> 0 (strict <)
        let ea = ent_map(shape, &[0.1, 0.1, 0.5]);
        let eb = ent_map(shape, &[0.1, 0.1, 0.1]);
        let m = reliability_mask(&a, &b, &ea, &eb, &thr).unwrap();
        assert_eq!(m.data.as_slice(), &[1, 0, 0]);
    }

    #[test]
    fn subsets_partition_lattice() {
        let shape = [1, 2, 2];
        let mask = ReliabilityMask {
            data: Grid3::from_vec(shape, alloc::vec![1, 1, 0, 1]).unwrap(),
        };
        let labels = LabelMask::new(Grid3::from_vec(shape, alloc::vec![1, 0, 1, 1]).unwrap(), 2)
            .unwrap();
        let s = class_subsets(&mask, &labels).unwrap();
        assert_eq!(s.reliable_fg, alloc::vec![0, 3]);
        assert_eq!(s.reliable_bg, alloc::vec![1]);
        assert_eq!(s.uncertain, alloc::vec![2]);
        assert_eq!(
            s.reliable_fg.len() + s.reliable_bg.len() + s.uncertain.len(),
            4
        );
    }

    #[test]
    fn subsets_degenerate_masks() {
        let shape = [1, 1, 3];
        let all_fg = LabelMask::new(Grid3::filled(shape, 1u8), 2).unwrap();
        let ones = ReliabilityMask {
            data: Grid3::filled(shape, 1u8),
        };
        let s = class_subsets(&ones, &all_fg).unwrap();
        assert_eq!(s.reliable_fg.len(), 3);
        assert!(s.reliable_bg.is_empty() && s.uncertain.is_empty());

        let zeros = ReliabilityMask {
            data: Grid3::filled(shape, 0u8),
        };
        let s = class_subsets(&zeros, &all_fg).unwrap();
        assert_eq!(s.uncertain.len(), 3);
    }

    #[test]
    fn prototypes_single_member_and_symmetry() {
        let mut g: ChanGrid<f64> = ChanGrid::zeros(2, [1, 1, 2]);
        // voxel 0 feature u = (2, -1); voxel 1 feature -u
        g.as_mut_slice()[0] = 2.0;
        g.as_mut_slice()[1] = -2.0;
        g.as_mut_slice()[2] = -1.0;
        g.as_mut_slice()[3] = 1.0;
        let f = FeatureMap(g);

        let p = compute_prototypes(&f, &[0], &[]).unwrap();
        assert_eq!(p.fg.as_deref(), Some(&[2.0, -1.0][..]));
        assert!(p.bg.is_none());
        assert_eq!((p.n_fg, p.n_bg), (1, 0));

        let p = compute_prototypes(&f, &[0, 1], &[]).unwrap();
        let fg = p.fg.unwrap();
        assert!(fg.iter().all(|&x| x.abs() < 1e-15));
    }
}
