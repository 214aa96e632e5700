//! Training objectives with analytic gradients.
//!
//! Every loss comes in two flavors: a value function with the natural
//! domain signature, and a `*_grad` variant that takes raw logits (or
//! features) plus *detached* context — pseudo-labels, masks, soft targets,
//! confidence weights — and returns the value together with gradients. The
//! detached context is computed once by the caller (see [`crate::pseudo`]
//! and [`une_context`]), which keeps the gradient of each loss a plain
//! function of its tensor inputs; the finite-difference suite exploits
//! exactly that.
//!
//! Cross-entropy uses natural log; entropy maps for masking use log2 (see
//! [`crate::vox`]). The two never mix.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{ChanGrid, Grid3};
use crate::pseudo::{ClassSubsets, DisagreementMask};
use crate::real::Real;
use crate::vox::{softmax, FeatureMap, LabelMask, LogitMap, ProbMap, IGNORE, PROB_FLOOR};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Stabilizer for the masked consistency loss denominator.
pub const CR_EPSILON: f64 = 1e-8;
/// Below this Euclidean distance the contrastive gradient is treated as 0.
const DIST_FLOOR: f64 = 1e-12;

/// Scalar weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// Consistency-regularization weight α.
    pub alpha: f64,
    /// Contrastive weight λ_c (normally schedule-driven).
    pub lambda_c: f64,
    /// Sharpening temperature for soft pseudo-targets.
    pub t_p: f64,
    /// Denominator stabilizer of the masked consistency loss.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda_c: 0.1,
            t_p: 0.5,
            epsilon: CR_EPSILON,
        }
    }
}

/// Which components participate in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Toggles {
    pub cps: bool,
    pub efs: bool,
    pub pgl: bool,
    pub ue: bool,
    pub cr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

impl Toggles {
    pub fn full() -> Self {
        Toggles {
            cps: true,
            efs: true,
            pgl: true,
            ue: true,
            cr: true,
        }
    }

    pub fn supervised_only() -> Self {
        Toggles {
            cps: false,
            efs: false,
            pgl: false,
            ue: false,
            cr: false,
        }
    }

    pub fn cps_only() -> Self {
        Toggles {
            cps: true,
            ..Self::supervised_only()
        }
    }

    pub fn efs_only() -> Self {
        Toggles {
            efs: true,
            ..Self::supervised_only()
        }
    }

    /// Cross-consistency enhancement = CPS and EFS together.
    pub fn cce_only() -> Self {
        Toggles {
            cps: true,
            efs: true,
            ..Self::supervised_only()
        }
    }

    /// True when any component consumes the unlabeled batch.
    pub fn uses_unlabeled(&self) -> bool {
        self.cps || self.efs || self.pgl || self.ue
    }
}

/// Degenerate events observed while assembling a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossFlags {
    /// Every pseudo-label voxel was IGNORE in at least one direction.
    pub efs_all_ignore: bool,
    /// The disagreement mask selected no voxels.
    pub cr_mask_empty: bool,
    pub proto_fg_undefined: bool,
    pub proto_bg_undefined: bool,
    pub uncertain_empty: bool,
}

/// Per-iteration loss bookkeeping. Component values are stored unweighted
/// and zeroed when their toggle is off; [`LossReport::recompute_total`]
/// rebuilds `total` from the parts.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_s_a: f64,
    pub l_s_b: f64,
    pub l_cr: f64,
    pub l_cps: f64,
    pub l_efs: f64,
    pub l_une: f64,
    pub l_c: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda_c: f64,
    /// 1.0 counts each shared bidirectional term once; 2.0 reproduces the
    /// per-subnet double-count reading.
    pub unsup_scale: f64,
    pub toggles: Toggles,
    pub flags: LossFlags,
}

impl LossReport {
    /// Assemble the report from component values; `total` is derived.
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        l_s_a: f64,
        l_s_b: f64,
        l_cr: f64,
        l_cps: f64,
        l_efs: f64,
        l_une: f64,
        l_c: f64,
        alpha: f64,
        lambda_c: f64,
        unsup_scale: f64,
        toggles: Toggles,
        flags: LossFlags,
    ) -> Self {
        let mut report = LossReport {
            l_s_a,
            l_s_b,
            l_cr: if toggles.cr { l_cr } else { 0.0 },
            l_cps: if toggles.cps { l_cps } else { 0.0 },
            l_efs: if toggles.efs { l_efs } else { 0.0 },
            l_une: if toggles.ue { l_une } else { 0.0 },
            l_c: if toggles.pgl { l_c } else { 0.0 },
            total: 0.0,
            alpha,
            lambda_c,
            unsup_scale,
            toggles,
            flags,
        };
        report.total = report.recompute_total();
        report
    }

    /// The weighted sum the trainer optimizes. `l_cr` is the two-subnet
    /// average, and each subnet carries its own α-weighted term, hence the
    /// factor 2.
    pub fn recompute_total(&self) -> f64 {
        self.l_s_a
            + self.l_s_b
            + 2.0 * self.alpha * self.l_cr
            + self.lambda_c * self.l_c
            + self.unsup_scale * (self.l_cps + self.l_efs + self.l_une)
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.l_s_a, "l_s_a"),
            (self.l_s_b, "l_s_b"),
            (self.l_cr, "l_cr"),
            (self.l_cps, "l_cps"),
            (self.l_efs, "l_efs"),
            (self.l_une, "l_une"),
            (self.l_c, "l_c"),
            (self.total, "total"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

/// Log-softmax over channels with max subtraction.
fn log_softmax<F: Real>(logits: &ChanGrid<F>) -> ChanGrid<F> {
    let c = logits.channels();
    let s = logits.spatial_len();
    let mut out = ChanGrid::zeros(c, logits.shape());

    let mut maxes = alloc::vec![F::neg_infinity(); s];
    for ch in 0..c {
        for (m, &z) in maxes.iter_mut().zip(logits.channel(ch)) {
            if z > *m {
                *m = z;
            }
        }
    }
    let mut sums = alloc::vec![F::zero(); s];
    for ch in 0..c {
        for ((&z, &m), acc) in logits
            .channel(ch)
            .iter()
            .zip(maxes.iter())
            .zip(sums.iter_mut())
        {
            *acc += (z - m).exp();
        }
    }
    for ch in 0..c {
        let slab = out.channel_mut(ch);
        for (((o, &z), &m), &sum) in slab
            .iter_mut()
            .zip(logits.channel(ch))
            .zip(maxes.iter())
            .zip(sums.iter())
        {
            *o = z - m - sum.ln();
        }
    }
    out
}

/// dL/dz from dL/dp through the softmax Jacobian:
/// `dz_c = p_c (g_c − Σ_k g_k p_k)`.
fn softmax_backward<F: Real>(p: &ChanGrid<F>, dldp: &ChanGrid<F>) -> ChanGrid<F> {
    let c = p.channels();
    let s = p.spatial_len();
    let mut dot = alloc::vec![F::zero(); s];
    for ch in 0..c {
        for ((acc, &g), &pr) in dot.iter_mut().zip(dldp.channel(ch)).zip(p.channel(ch)) {
            *acc += g * pr;
        }
    }
    let mut out = ChanGrid::zeros(c, p.shape());
    for ch in 0..c {
        let slab = out.channel_mut(ch);
        for (((o, &g), &pr), &dt) in slab
            .iter_mut()
            .zip(dldp.channel(ch))
            .zip(p.channel(ch))
            .zip(dot.iter())
        {
            *o = pr * (g - dt);
        }
    }
    out
}

fn check_same_shape<F: Real>(context: &str, a: &ChanGrid<F>, b: &ChanGrid<F>) -> Result<()> {
    if a.shape() != b.shape() || a.channels() != b.channels() {
        return Err(Error::shape(String::from(context), a.shape(), b.shape()));
    }
    Ok(())
}

fn check_target<F: Real>(context: &str, logits: &ChanGrid<F>, target: &LabelMask) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(String::from(context), logits.shape(), target.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy from logits (log-softmax path). The target must not
/// contain IGNORE — use [`efs_ce_loss`] for that.
pub fn ce_loss<F: Real>(logits: &LogitMap<F>, target: &LabelMask) -> Result<F> {
    check_target("ce_loss", &logits.0, target)?;
    if target.has_ignore() {
        return Err(Error::argument(
            "ce_loss: target contains IGNORE; use efs_ce_loss",
        ));
    }
    let lp = log_softmax(&logits.0);
    let s = lp.spatial_len();
    let mut acc = F::zero();
    for (v, &t) in target.data.as_slice().iter().enumerate() {
        acc -= lp.at(t as usize, v);
    }
    Ok(acc / F::of(s as f64))
}

/// Mean cross-entropy from already-softmaxed probabilities.
pub fn ce_loss_from_probs<F: Real>(p: &ProbMap<F>, target: &LabelMask) -> Result<F> {
    check_target("ce_loss_from_probs", &p.0, target)?;
    if target.has_ignore() {
        return Err(Error::argument(
            "ce_loss_from_probs: target contains IGNORE",
        ));
    }
    let floor = F::of(PROB_FLOOR);
    let s = p.0.spatial_len();
    let mut acc = F::zero();
    for (v, &t) in target.data.as_slice().iter().enumerate() {
        acc -= p.0.at(t as usize, v).max(floor).ln();
    }
    Ok(acc / F::of(s as f64))
}

/// Cross-entropy with gradient `(softmax − onehot)/N`.
pub fn ce_loss_grad<F: Real>(
    logits: &LogitMap<F>,
    target: &LabelMask,
) -> Result<(F, ChanGrid<F>)> {
    let value = ce_loss(logits, target)?;
    let p = softmax(logits, F::one())?;
    let s = p.0.spatial_len();
    let inv = F::of(1.0 / s as f64);
    let mut grad = p.0;
    for slab in 0..grad.channels() {
        for g in grad.channel_mut(slab) {
            *g = *g * inv;
        }
    }
    for (v, &t) in target.data.as_slice().iter().enumerate() {
        let i = t as usize * s + v;
        grad.as_mut_slice()[i] -= inv;
    }
    Ok((value, grad))
}

/// Cross-entropy averaged over non-IGNORE voxels only; all-IGNORE
/// batches contribute 0 by convention (flagged by the caller).
pub fn efs_ce_loss<F: Real>(logits: &LogitMap<F>, pseudo: &LabelMask) -> Result<F> {
    Ok(efs_ce_loss_grad_impl(logits, pseudo, false)?.0)
}

/// Value, gradient and the all-IGNORE flag.
pub fn efs_ce_loss_grad<F: Real>(
    logits: &LogitMap<F>,
    pseudo: &LabelMask,
) -> Result<(F, ChanGrid<F>, bool)> {
    let (value, grad, all_ignore) = efs_ce_loss_grad_impl(logits, pseudo, true)?;
    Ok((value, grad.expect("grad requested"), all_ignore))
}

fn efs_ce_loss_grad_impl<F: Real>(
    logits: &LogitMap<F>,
    pseudo: &LabelMask,
    want_grad: bool,
) -> Result<(F, Option<ChanGrid<F>>, bool)> {
    check_target("efs_ce_loss", &logits.0, pseudo)?;
    let s = logits.0.spatial_len();
    let kept = s - pseudo.count_ignore();
    if kept == 0 {
        let grad = want_grad.then(|| ChanGrid::zeros(logits.0.channels(), logits.0.shape()));
        return Ok((F::zero(), grad, true));
    }
    let lp = log_softmax(&logits.0);
    let inv = F::of(1.0 / kept as f64);
    let mut acc = F::zero();
    for (v, &t) in pseudo.data.as_slice().iter().enumerate() {
        if t != IGNORE {
            acc -= lp.at(t as usize, v);
        }
    }
    let value = acc * inv;
    if !want_grad {
        return Ok((value, None, false));
    }
    let c = logits.0.channels();
    let mut grad = ChanGrid::zeros(c, logits.0.shape());
    for (v, &t) in pseudo.data.as_slice().iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        for ch in 0..c {
            let p = lp.at(ch, v).exp();
            let one = if ch == t as usize { F::one() } else { F::zero() };
            grad.as_mut_slice()[ch * s + v] = (p - one) * inv;
        }
    }
    Ok((value, Some(grad), false))
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// Soft Dice loss on the foreground channel (class 1):
/// `1 − (2 Σ p_f t_f + s) / (Σ p_f + Σ t_f + s)`.
pub fn dice_loss<F: Real>(p: &ProbMap<F>, target: &LabelMask) -> Result<F> {
    check_target("dice_loss", &p.0, target)?;
    if target.has_ignore() {
        return Err(Error::argument("dice_loss: target contains IGNORE"));
    }
    let (num, den) = dice_terms(&p.0, target);
    Ok(F::one() - num / den)
}

fn dice_terms<F: Real>(p: &ChanGrid<F>, target: &LabelMask) -> (F, F) {
    let smooth = F::of(DICE_SMOOTH);
    let fg = p.channel(1);
    let mut inter = F::zero();
    let mut psum = F::zero();
    let mut tsum = F::zero();
    for (&pf, &t) in fg.iter().zip(target.data.as_slice()) {
        psum += pf;
        if t == 1 {
            inter += pf;
            tsum += F::one();
        }
    }
    (F::of(2.0) * inter + smooth, psum + tsum + smooth)
}

/// Dice loss computed from logits, with gradient through the softmax.
pub fn dice_loss_grad<F: Real>(
    logits: &LogitMap<F>,
    target: &LabelMask,
) -> Result<(F, ChanGrid<F>)> {
    check_target("dice_loss_grad", &logits.0, target)?;
    if target.has_ignore() {
        return Err(Error::argument("dice_loss_grad: target contains IGNORE"));
    }
    let p = softmax(logits, F::one())?;
    let (num, den) = dice_terms(&p.0, target);
    let value = F::one() - num / den;

    // d(1 - num/den)/dp_f(v) = -(2 t_v den - num) / den^2
    let mut dldp = ChanGrid::zeros(p.0.channels(), p.0.shape());
    let den2 = den * den;
    let two = F::of(2.0);
    {
        let slab = dldp.channel_mut(1);
        for (g, &t) in slab.iter_mut().zip(target.data.as_slice()) {
            let tv = if t == 1 { F::one() } else { F::zero() };
            *g = -(two * tv * den - num) / den2;
        }
    }
    Ok((value, softmax_backward(&p.0, &dldp)))
}

// ---------------------------------------------------------------------------
// consistency regularization
// ---------------------------------------------------------------------------

/// Distance used inside the masked consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CrDistance {
    #[default]
    Mse,
    Kl,
}

/// Masked consistency loss on labeled data. For each subnet: the per-voxel
/// distance between its prediction and the binary label, summed over mask
/// voxels and divided by `(ΣM + ε)`; the two subnets are averaged. An empty
/// mask yields exactly 0.
pub fn cr_loss<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
    y: &LabelMask,
    mask: &DisagreementMask,
    epsilon: f64,
    distance: CrDistance,
) -> Result<F> {
    let (value, ..) = cr_loss_grad(logits_a, logits_b, y, mask, epsilon, distance)?;
    Ok(value)
}

pub fn cr_loss_grad<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
    y: &LabelMask,
    mask: &DisagreementMask,
    epsilon: f64,
    distance: CrDistance,
) -> Result<(F, ChanGrid<F>, ChanGrid<F>)> {
    check_same_shape("cr_loss", &logits_a.0, &logits_b.0)?;
    check_target("cr_loss", &logits_a.0, y)?;
    if y.shape() != mask.data.shape() {
        return Err(Error::shape("cr_loss", y.shape(), mask.data.shape()));
    }
    let m_sum = mask.data.as_slice().iter().filter(|&&m| m != 0).count();
    let denom = F::of(m_sum as f64 + epsilon);
    let half = F::of(0.5);

    let mut value = F::zero();
    let mut grads = Vec::with_capacity(2);
    for logits in [logits_a, logits_b] {
        let p = softmax(logits, F::one())?;
        let (term, grad) = match distance {
            CrDistance::Mse => cr_mse_term(&p.0, y, &mask.data, denom),
            CrDistance::Kl => cr_kl_term(&p.0, y, &mask.data, denom),
        };
        value += term * half;
        // the ½ from averaging the two subnets
        let mut dldp = grad;
        for g in dldp.as_mut_slice() {
            *g = *g * half;
        }
        grads.push(softmax_backward(&p.0, &dldp));
    }
    let grad_b = grads.pop().expect("two grads");
    let grad_a = grads.pop().expect("two grads");
    Ok((value, grad_a, grad_b))
}

fn cr_mse_term<F: Real>(
    p: &ChanGrid<F>,
    y: &LabelMask,
    mask: &Grid3<u8>,
    denom: F,
) -> (F, ChanGrid<F>) {
    let fg = p.channel(1);
    let mut acc = F::zero();
    let mut dldp = ChanGrid::zeros(p.channels(), p.shape());
    {
        let slab = dldp.channel_mut(1);
        for ((g, (&pf, &t)), &m) in slab
            .iter_mut()
            .zip(fg.iter().zip(y.data.as_slice()))
            .zip(mask.as_slice())
        {
            if m == 0 {
                continue;
            }
            let yv = if t == 1 { F::one() } else { F::zero() };
            let diff = pf - yv;
            acc += diff * diff;
            *g = F::of(2.0) * diff / denom;
        }
    }
    (acc / denom, dldp)
}

fn cr_kl_term<F: Real>(
    p: &ChanGrid<F>,
    y: &LabelMask,
    mask: &Grid3<u8>,
    denom: F,
) -> (F, ChanGrid<F>) {
    // KL(onehot(y) || p) = −ln p_y, clamped.
    let floor = F::of(PROB_FLOOR);
    let s = p.spatial_len();
    let c = p.channels();
    let mut acc = F::zero();
    let mut dldp = ChanGrid::zeros(c, p.shape());
    for (v, (&t, &m)) in y.data.as_slice().iter().zip(mask.as_slice()).enumerate() {
        if m == 0 {
            continue;
        }
        let py = p.at(t as usize, v).max(floor);
        acc -= py.ln();
        if p.at(t as usize, v) > floor {
            dldp.as_mut_slice()[t as usize * s + v] = -(F::one() / py) / denom;
        }
    }
    (acc / denom, dldp)
}

// ---------------------------------------------------------------------------
// cross pseudo supervision
// ---------------------------------------------------------------------------

/// Bidirectional pseudo-label cross-entropy: each subnet is supervised by
/// the other's argmax. Value-only form with labels derived internally.
pub fn cps_loss<F: Real>(prob_a: &ProbMap<F>, prob_b: &ProbMap<F>) -> Result<F> {
    check_same_shape("cps_loss", &prob_a.0, &prob_b.0)?;
    let pseudo_a = crate::vox::argmax_labels(prob_a);
    let pseudo_b = crate::vox::argmax_labels(prob_b);
    let ab = ce_loss_from_probs(prob_b, &pseudo_a)?;
    let ba = ce_loss_from_probs(prob_a, &pseudo_b)?;
    Ok(ab + ba)
}

/// Gradient form; pseudo-labels are detached inputs.
pub fn cps_loss_grad<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
    pseudo_a: &LabelMask,
    pseudo_b: &LabelMask,
) -> Result<(F, ChanGrid<F>, ChanGrid<F>)> {
    check_same_shape("cps_loss", &logits_a.0, &logits_b.0)?;
    let (loss_b, grad_b) = ce_loss_grad(logits_b, pseudo_a)?;
    let (loss_a, grad_a) = ce_loss_grad(logits_a, pseudo_b)?;
    Ok((loss_a + loss_b, grad_a, grad_b))
}

// ---------------------------------------------------------------------------
// KL map and uncertainty-weighted loss
// ---------------------------------------------------------------------------

/// Per-voxel `Σ_c p_b(c)·ln(p_b(c)/p_a(c))` with both distributions clamped
/// to the probability floor. Nonnegative by Gibbs' inequality.
pub fn kl_map<F: Real>(p_a: &ProbMap<F>, p_b: &ProbMap<F>) -> Result<Grid3<F>> {
    check_same_shape("kl_map", &p_a.0, &p_b.0)?;
    let floor = F::of(PROB_FLOOR);
    let c = p_a.0.channels();
    let s = p_a.0.spatial_len();
    let mut out = alloc::vec![F::zero(); s];
    for ch in 0..c {
        for ((o, &pa), &pb) in out
            .iter_mut()
            .zip(p_a.0.channel(ch))
            .zip(p_b.0.channel(ch))
        {
            let qa = pa.max(floor);
            let qb = pb.max(floor);
            *o += qb * (qb / qa).ln();
        }
    }
    Ok(Grid3::from_vec(p_a.0.shape(), out).expect("shape consistent"))
}

/// Voxel-mean of [`kl_map`] with gradients through both distributions.
pub fn kl_mean_grad<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
) -> Result<(F, ChanGrid<F>, ChanGrid<F>)> {
    check_same_shape("kl_mean_grad", &logits_a.0, &logits_b.0)?;
    let p_a = softmax(logits_a, F::one())?;
    let p_b = softmax(logits_b, F::one())?;
    let kl = kl_map(&p_a, &p_b)?;
    let s = p_a.0.spatial_len();
    let c = p_a.0.channels();
    let inv_s = F::of(1.0 / s as f64);
    let floor = F::of(PROB_FLOOR);
    let value = kl.as_slice().iter().copied().sum::<F>() * inv_s;

    let mut dldp_a = ChanGrid::zeros(c, p_a.0.shape());
    let mut dldp_b = ChanGrid::zeros(c, p_b.0.shape());
    for v in 0..s {
        for ch in 0..c {
            let pa = p_a.0.at(ch, v);
            let pb = p_b.0.at(ch, v);
            let qa = pa.max(floor);
            let qb = pb.max(floor);
            if pa > floor {
                dldp_a.as_mut_slice()[ch * s + v] = -(qb / qa) * inv_s;
            }
            if pb > floor {
                dldp_b.as_mut_slice()[ch * s + v] = ((qb / qa).ln() + F::one()) * inv_s;
            }
        }
    }
    Ok((
        value,
        softmax_backward(&p_a.0, &dldp_a),
        softmax_backward(&p_b.0, &dldp_b),
    ))
}

/// Detached context for the uncertainty-weighted loss: sharpened soft
/// targets and `exp(−KL)` confidence weights, one set per direction.
#[derive(Clone, Debug)]
pub struct UneContext<F> {
    /// Soft target supervising subnet A: `softmax(logits_b / T_p)`.
    pub target_for_a: ProbMap<F>,
    /// Soft target supervising subnet B: `softmax(logits_a / T_p)`.
    pub target_for_b: ProbMap<F>,
    /// `exp(−KL(p_a, p_b))` per voxel — weight of the A←B term.
    pub weight_a: Grid3<F>,
    /// `exp(−KL(p_b, p_a))` per voxel — weight of the B←A term.
    pub weight_b: Grid3<F>,
}

/// Build the detached context from the current logits.
pub fn une_context<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
    t_p: F,
) -> Result<UneContext<F>> {
    if t_p <= F::zero() {
        return Err(Error::argument("t_p must be positive"));
    }
    check_same_shape("une_context", &logits_a.0, &logits_b.0)?;
    let p_a = softmax(logits_a, F::one())?;
    let p_b = softmax(logits_b, F::one())?;
    let kl_ab = kl_map(&p_a, &p_b)?;
    let kl_ba = kl_map(&p_b, &p_a)?;
    Ok(UneContext {
        target_for_a: softmax(logits_b, t_p)?,
        target_for_b: softmax(logits_a, t_p)?,
        weight_a: kl_ab.map(|k| (-k).exp()),
        weight_b: kl_ba.map(|k| (-k).exp()),
    })
}

/// Convenience value form: builds the context internally.
pub fn une_loss<F: Real>(logits_a: &LogitMap<F>, logits_b: &LogitMap<F>, t_p: F) -> Result<F> {
    let ctx = une_context(logits_a, logits_b, t_p)?;
    let (value, ..) = une_loss_grad(logits_a, logits_b, &ctx)?;
    Ok(value)
}

/// Uncertainty-weighted consistency: per voxel and direction,
/// `w · CE(p, soft target) + KL`, averaged over voxels, directions averaged.
/// Weights and soft targets are detached; the additive KL term carries
/// gradient through both subnets.
pub fn une_loss_grad<F: Real>(
    logits_a: &LogitMap<F>,
    logits_b: &LogitMap<F>,
    ctx: &UneContext<F>,
) -> Result<(F, ChanGrid<F>, ChanGrid<F>)> {
    check_same_shape("une_loss", &logits_a.0, &logits_b.0)?;
    let p_a = softmax(logits_a, F::one())?;
    let p_b = softmax(logits_b, F::one())?;
    let s = p_a.0.spatial_len();
    let c = p_a.0.channels();
    let inv_s = F::of(1.0 / s as f64);
    let half = F::of(0.5);
    let floor = F::of(PROB_FLOOR);

    let lp_a = log_softmax(&logits_a.0);
    let lp_b = log_softmax(&logits_b.0);

    // weighted CE terms (soft targets and weights detached)
    let mut ce_a = F::zero();
    let mut ce_b = F::zero();
    let mut dldz_a = ChanGrid::zeros(c, p_a.0.shape());
    let mut dldz_b = ChanGrid::zeros(c, p_b.0.shape());
    for v in 0..s {
        let wa = ctx.weight_a.as_slice()[v];
        let wb = ctx.weight_b.as_slice()[v];
        for ch in 0..c {
            let qa = ctx.target_for_a.0.at(ch, v);
            let qb = ctx.target_for_b.0.at(ch, v);
            ce_a -= wa * qa * lp_a.at(ch, v);
            ce_b -= wb * qb * lp_b.at(ch, v);
            // d/dz of CE(p, q-detached) is (p − q); scaled by weight & means
            let ga = wa * (p_a.0.at(ch, v) - qa) * inv_s * half;
            let gb = wb * (p_b.0.at(ch, v) - qb) * inv_s * half;
            dldz_a.as_mut_slice()[ch * s + v] += ga;
            dldz_b.as_mut_slice()[ch * s + v] += gb;
        }
    }

    // additive KL terms, differentiable in both distributions
    let kl_ab = kl_map(&p_a, &p_b)?;
    let kl_ba = kl_map(&p_b, &p_a)?;
    let kl_sum = kl_ab.as_slice().iter().copied().sum::<F>()
        + kl_ba.as_slice().iter().copied().sum::<F>();

    let mut dldp_a = ChanGrid::zeros(c, p_a.0.shape());
    let mut dldp_b = ChanGrid::zeros(c, p_b.0.shape());
    for v in 0..s {
        for ch in 0..c {
            let pa = p_a.0.at(ch, v);
            let pb = p_b.0.at(ch, v);
            let qa = pa.max(floor);
            let qb = pb.max(floor);
            let mut ga = F::zero();
            let mut gb = F::zero();
            // KL(p_a, p_b) = Σ p_b ln(p_b/p_a): d/dp_a = −p_b/p_a, d/dp_b = ln(p_b/p_a)+1
            if pa > floor {
                ga -= qb / qa;
            }
            if pb > floor {
                gb += (qb / qa).ln() + F::one();
            }
            // KL(p_b, p_a) = Σ p_a ln(p_a/p_b): d/dp_a = ln(p_a/p_b)+1, d/dp_b = −p_a/p_b
            if pa > floor {
                ga += (qa / qb).ln() + F::one();
            }
            if pb > floor {
                gb -= qa / qb;
            }
            dldp_a.as_mut_slice()[ch * s + v] = ga * inv_s * half;
            dldp_b.as_mut_slice()[ch * s + v] = gb * inv_s * half;
        }
    }
    let kl_grad_a = softmax_backward(&p_a.0, &dldp_a);
    let kl_grad_b = softmax_backward(&p_b.0, &dldp_b);
    for (g, &k) in dldz_a.as_mut_slice().iter_mut().zip(kl_grad_a.as_slice()) {
        *g += k;
    }
    for (g, &k) in dldz_b.as_mut_slice().iter_mut().zip(kl_grad_b.as_slice()) {
        *g += k;
    }

    let value = ((ce_a + ce_b) * inv_s + kl_sum * inv_s) * half;
    Ok((value, dldz_a, dldz_b))
}

// ---------------------------------------------------------------------------
// prototype-guided contrastive loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ContrastiveFlags {
    pub undefined_fg: bool,
    pub undefined_bg: bool,
    pub uncertain_empty: bool,
}

/// Value form matching the prototype signature; `protos_*` must be the
/// mean embeddings of the reliable subsets of the corresponding feature
/// maps (see [`crate::pseudo::compute_prototypes`]).
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss<F: Real>(
    features_a: &FeatureMap<F>,
    features_b: &FeatureMap<F>,
    subsets: &ClassSubsets,
    protos_a: &crate::pseudo::Prototypes<F>,
    protos_b: &crate::pseudo::Prototypes<F>,
    labels_a: &LabelMask,
    labels_b: &LabelMask,
    include_third_term: bool,
) -> Result<(F, ContrastiveFlags)> {
    let mut flags = ContrastiveFlags {
        uncertain_empty: subsets.uncertain.is_empty(),
        ..Default::default()
    };
    let half = F::of(0.5);
    let mut value = F::zero();
    for (features, protos, labels) in [
        (features_a, protos_a, labels_a),
        (features_b, protos_b, labels_b),
    ] {
        let (term, f) = subnet_contrastive_value(features, subsets, protos, labels, include_third_term)?;
        value += term * half;
        flags.undefined_fg |= f.undefined_fg;
        flags.undefined_bg |= f.undefined_bg;
    }
    Ok((value, flags))
}

fn subnet_contrastive_value<F: Real>(
    features: &FeatureMap<F>,
    subsets: &ClassSubsets,
    protos: &crate::pseudo::Prototypes<F>,
    labels: &LabelMask,
    include_third_term: bool,
) -> Result<(F, ContrastiveFlags)> {
    if features.0.shape() != labels.shape() {
        return Err(Error::shape(
            "contrastive_loss",
            features.0.shape(),
            labels.shape(),
        ));
    }
    let flags = ContrastiveFlags {
        undefined_fg: protos.fg.is_none(),
        undefined_bg: protos.bg.is_none(),
        uncertain_empty: subsets.uncertain.is_empty(),
    };
    let mut value = F::zero();
    for (proto, want_fg) in [(&protos.fg, true), (&protos.bg, false)] {
        let Some(center) = proto else { continue };
        let members: Vec<u32> = subsets
            .uncertain
            .iter()
            .copied()
            .filter(|&v| (labels.data.as_slice()[v as usize] == 1) == want_fg)
            .collect();
        if members.is_empty() {
            continue;
        }
        let inv = F::of(1.0 / members.len() as f64);
        for &v in &members {
            value += distance_to(features, v as usize, center) * inv;
        }
    }
    if include_third_term {
        if let (Some(cf), Some(cb)) = (&protos.fg, &protos.bg) {
            value += vec_distance(cf, cb);
        }
    }
    Ok((value, flags))
}

fn distance_to<F: Real>(features: &FeatureMap<F>, v: usize, center: &[F]) -> F {
    let mut acc = F::zero();
    for (ch, &c) in center.iter().enumerate() {
        let d = features.0.at(ch, v) - c;
        acc += d * d;
    }
    acc.sqrt()
}

fn vec_distance<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Gradient form. Prototypes are recomputed internally from the features so
/// that gradient flows both through the uncertain voxels and through the
/// reliable voxels that make up each prototype.
pub fn contrastive_loss_grad<F: Real>(
    features_a: &FeatureMap<F>,
    features_b: &FeatureMap<F>,
    subsets: &ClassSubsets,
    labels_a: &LabelMask,
    labels_b: &LabelMask,
    include_third_term: bool,
) -> Result<(F, ChanGrid<F>, ChanGrid<F>, ContrastiveFlags)> {
    let half = F::of(0.5);
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(2);
    let mut flags = ContrastiveFlags {
        uncertain_empty: subsets.uncertain.is_empty(),
        ..Default::default()
    };
    for (features, labels) in [(features_a, labels_a), (features_b, labels_b)] {
        let protos =
            crate::pseudo::compute_prototypes(features, &subsets.reliable_fg, &subsets.reliable_bg)?;
        let (term, f) =
            subnet_contrastive_value(features, subsets, &protos, labels, include_third_term)?;
        value += term * half;
        flags.undefined_fg |= f.undefined_fg;
        flags.undefined_bg |= f.undefined_bg;
        grads.push(subnet_contrastive_grad(
            features,
            subsets,
            &protos,
            labels,
            include_third_term,
            half,
        ));
    }
    let grad_b = grads.pop().expect("two grads");
    let grad_a = grads.pop().expect("two grads");
    Ok((value, grad_a, grad_b, flags))
}

fn subnet_contrastive_grad<F: Real>(
    features: &FeatureMap<F>,
    subsets: &ClassSubsets,
    protos: &crate::pseudo::Prototypes<F>,
    labels: &LabelMask,
    include_third_term: bool,
    scale: F,
) -> ChanGrid<F> {
    let c = features.0.channels();
    let s = features.0.spatial_len();
    let floor = F::of(DIST_FLOOR);
    let mut grad = ChanGrid::zeros(c, features.0.shape());
    let mut g_center_fg = alloc::vec![F::zero(); c];
    let mut g_center_bg = alloc::vec![F::zero(); c];

    for (proto, want_fg) in [(&protos.fg, true), (&protos.bg, false)] {
        let Some(center) = proto else { continue };
        let members: Vec<u32> = subsets
            .uncertain
            .iter()
            .copied()
            .filter(|&v| (labels.data.as_slice()[v as usize] == 1) == want_fg)
            .collect();
        if members.is_empty() {
            continue;
        }
        let inv = F::of(1.0 / members.len() as f64) * scale;
        let g_center = if want_fg {
            &mut g_center_fg
        } else {
            &mut g_center_bg
        };
        for &v in &members {
            let dist = distance_to(features, v as usize, center);
            if dist < floor {
                continue;
            }
            for ch in 0..c {
                let u = (features.0.at(ch, v as usize) - center[ch]) / dist * inv;
                grad.as_mut_slice()[ch * s + v as usize] += u;
                g_center[ch] -= u;
            }
        }
    }

    if include_third_term {
        if let (Some(cf), Some(cb)) = (&protos.fg, &protos.bg) {
            let dist = vec_distance(cf, cb);
            if dist >= floor {
                for ch in 0..c {
                    let u = (cf[ch] - cb[ch]) / dist * scale;
                    g_center_fg[ch] += u;
                    g_center_bg[ch] -= u;
                }
            }
        }
    }

    // distribute prototype gradients onto the reliable members
    for (members, g_center) in [
        (&subsets.reliable_fg, &g_center_fg),
        (&subsets.reliable_bg, &g_center_bg),
    ] {
        if members.is_empty() {
            continue;
        }
        let inv = F::of(1.0 / members.len() as f64);
        for &v in members.iter() {
            for ch in 0..c {
                grad.as_mut_slice()[ch * s + v as usize] += g_center[ch] * inv;
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::compute_prototypes;
    use crate::vox::argmax_labels;

    fn logits_for_probs(shape: [usize; 3], fg: &[f64]) -> LogitMap<f64> {
        let s = shape[0] * shape[1] * shape[2];
        assert_eq!(fg.len(), s);
        let mut g = ChanGrid::zeros(2, shape);
        for (v, &p) in fg.iter().enumerate() {
            g.as_mut_slice()[v] = (1.0 - p).max(PROB_FLOOR).ln();
            g.as_mut_slice()[s + v] = p.max(PROB_FLOOR).ln();
        }
        LogitMap(g)
    }

    fn labels(shape: [usize; 3], data: &[u8]) -> LabelMask {
        LabelMask {
            data: Grid3::from_vec(shape, data.to_vec()).unwrap(),
            num_classes: 2,
        }
    }

    #[test]
    fn ce_uniform_and_quarter() {
        let shape = [1, 1, 2];
        let uniform: LogitMap<f64> = LogitMap(ChanGrid::zeros(2, shape));
        let t = labels(shape, &[0, 1]);
        let v = ce_loss(&uniform, &t).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);

        let single = logits_for_probs([1, 1, 1], &[0.25]);
        let t = labels([1, 1, 1], &[1]);
        let v = ce_loss(&single, &t).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-10);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let shape = [1, 1, 3];
        let t = labels(shape, &[1, 0, 1]);
        // ±40 logits saturate the softmax at f64
        let mut g: ChanGrid<f64> = ChanGrid::zeros(2, shape);
        for (v, &lab) in t.data.as_slice().iter().enumerate() {
            g.as_mut_slice()[v] = if lab == 0 { 40.0 } else { -40.0 };
            g.as_mut_slice()[3 + v] = if lab == 1 { 40.0 } else { -40.0 };
        }
        let v = ce_loss(&LogitMap(g), &t).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_ignore() {
        let t = labels([1, 1, 1], &[IGNORE]);
        let l: LogitMap<f64> = LogitMap(ChanGrid::zeros(2, [1, 1, 1]));
        assert!(ce_loss(&l, &t).is_err());
    }

    #[test]
    fn efs_matches_ce_without_ignore_and_handles_degenerates() {
        let shape = [1, 2, 2];
        let l = logits_for_probs(shape, &[0.7, 0.2, 0.9, 0.4]);
        let t = labels(shape, &[1, 0, 1, 0]);
        let a = ce_loss(&l, &t).unwrap();
        let b = efs_ce_loss(&l, &t).unwrap();
        assert!((a - b).abs() < 1e-14);

        let all_ignore = labels(shape, &[IGNORE; 4]);
        let (v, g, flag) = efs_ce_loss_grad(&l, &all_ignore).unwrap();
        assert_eq!(v, 0.0);
        assert!(flag);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        // half IGNORE, perfect on the rest
        let mut g2: ChanGrid<f64> = ChanGrid::zeros(2, shape);
        g2.as_mut_slice()[0] = -40.0;
        g2.as_mut_slice()[4] = 40.0; // voxel 0 -> class 1
        g2.as_mut_slice()[1] = 40.0;
        g2.as_mut_slice()[5] = -40.0; // voxel 1 -> class 0
        let half = labels(shape, &[1, 0, IGNORE, IGNORE]);
        let v = efs_ce_loss(&LogitMap(g2), &half).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn dice_values() {
        let shape = [1, 1, 4];
        let t = labels(shape, &[1, 0, 1, 1]);
        // perfect one-hot prediction: loss ≤ s/(|fg|+s)
        let onehot = crate::vox::one_hot::<f64>(&t).unwrap();
        let v = dice_loss(&onehot, &t).unwrap();
        assert!(v <= DICE_SMOOTH / (3.0 + DICE_SMOOTH) + 1e-15);

        // p_fg = 0 everywhere, target all fg -> ~1
        let zero_fg = crate::vox::one_hot::<f64>(&labels(shape, &[0, 0, 0, 0])).unwrap();
        let all_fg = labels(shape, &[1, 1, 1, 1]);
        let v = dice_loss(&zero_fg, &all_fg).unwrap();
        assert!(v > 0.999);

        // 2 voxels, p_fg = 0.5 uniform, one fg: direct formula
        let shape2 = [1, 1, 2];
        let mut g = ChanGrid::zeros(2, shape2);
        g.as_mut_slice().fill(0.5);
        let t2 = labels(shape2, &[1, 0]);
        let v = dice_loss(&ProbMap(g), &t2).unwrap();
        let s = DICE_SMOOTH;
        let expect = 1.0 - (2.0 * 0.5 + s) / (1.0 + 1.0 + s);
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn cr_empty_mask_is_zero_and_perfect_is_zero() {
        let shape = [1, 1, 2];
        let la = logits_for_probs(shape, &[0.9, 0.2]);
        let lb = logits_for_probs(shape, &[0.4, 0.7]);
        let y = labels(shape, &[1, 0]);
        let empty = DisagreementMask {
            data: Grid3::filled(shape, 0u8),
            lambda: 0.6,
        };
        let v = cr_loss(&la, &lb, &y, &empty, CR_EPSILON, CrDistance::Mse).unwrap();
        assert_eq!(v, 0.0);

        // predictions equal to one-hot labels -> 0 for any mask
        let mut g: ChanGrid<f64> = ChanGrid::zeros(2, shape);
        g.as_mut_slice()[0] = -40.0;
        g.as_mut_slice()[2] = 40.0;
        g.as_mut_slice()[1] = 40.0;
        g.as_mut_slice()[3] = -40.0;
        let perfect = LogitMap(g);
        let full = DisagreementMask {
            data: Grid3::filled(shape, 1u8),
            lambda: 0.6,
        };
        let v = cr_loss(&perfect, &perfect, &y, &full, CR_EPSILON, CrDistance::Mse).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn cr_single_voxel_saturated() {
        let shape = [1, 1, 1];
        let mut g: ChanGrid<f64> = ChanGrid::zeros(2, shape);
        g.as_mut_slice()[0] = -40.0;
        g.as_mut_slice()[1] = 40.0; // p_fg = 1
        let l = LogitMap(g);
        let y = labels(shape, &[0]);
        let full = DisagreementMask {
            data: Grid3::filled(shape, 1u8),
            lambda: 0.6,
        };
        let v = cr_loss(&l, &l, &y, &full, CR_EPSILON, CrDistance::Mse).unwrap();
        assert!((v - 1.0 / (1.0 + CR_EPSILON)).abs() < 1e-9);
    }

    #[test]
    fn cps_zero_symmetric_and_hand_case() {
        let shape = [1, 1, 2];
        let onehot = crate::vox::one_hot::<f64>(&labels(shape, &[1, 0])).unwrap();
        let v = cps_loss(&onehot, &onehot).unwrap();
        assert!(v.abs() < 1e-9);

        let a: ProbMap<f64> = ProbMap(
            ChanGrid::from_vec(2, shape, alloc::vec![0.8, 0.3, 0.2, 0.7]).unwrap(),
        );
        let b = ProbMap(
            ChanGrid::from_vec(2, shape, alloc::vec![0.4, 0.9, 0.6, 0.1]).unwrap(),
        );
        let ab = cps_loss(&a, &b).unwrap();
        let ba = cps_loss(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // hand oracle: ŷ_a = (0,1), ŷ_b = (1,0)
        // CE(p_b, ŷ_a) = −(ln 0.4 + ln 0.1)/2 ; CE(p_a, ŷ_b) = −(ln 0.2 + ln 0.3)/2
        let expect =
            -((0.4f64.ln() + 0.1f64.ln()) / 2.0) - ((0.2f64.ln() + 0.3f64.ln()) / 2.0);
        assert!((ab - expect).abs() < 1e-12);

        // opposite confident predictions: large
        let conf_a = logits_for_probs(shape, &[0.999, 0.999]);
        let conf_b = logits_for_probs(shape, &[0.001, 0.001]);
        let pa = softmax(&conf_a, 1.0).unwrap();
        let pb = softmax(&conf_b, 1.0).unwrap();
        assert!(cps_loss(&pa, &pb).unwrap() > 5.0);
    }

    #[test]
    fn kl_identity_and_closed_form() {
        let shape = [1, 1, 1];
        let p: ProbMap<f64> = ProbMap(ChanGrid::from_vec(2, shape, alloc::vec![0.3, 0.7]).unwrap());
        let k = kl_map(&p, &p).unwrap();
        assert!(k.as_slice()[0].abs() < 1e-12);

        let pa = ProbMap(ChanGrid::from_vec(2, shape, alloc::vec![0.5, 0.5]).unwrap());
        let pb = ProbMap(ChanGrid::from_vec(2, shape, alloc::vec![1.0, 0.0]).unwrap());
        let k = kl_map(&pa, &pb).unwrap();
        assert!((k.as_slice()[0] - core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn une_identical_sharp_outputs_vanish_and_weight_unit() {
        let shape = [1, 1, 2];
        let l = logits_for_probs(shape, &[0.9999999, 0.0000001]);
        let v = une_loss(&l, &l, 0.5).unwrap();
        assert!(v.abs() < 1e-5, "{v}");

        let ctx = une_context(&l, &l, 0.5).unwrap();
        // KL = 0 -> weight exactly 1
        assert!(ctx.weight_a.as_slice().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn une_one_voxel_scalar_oracle() {
        // p_a = (0.7, 0.3), p_b = (0.6, 0.4), T_p = 0.5
        let la = logits_for_probs([1, 1, 1], &[0.3]);
        let lb = logits_for_probs([1, 1, 1], &[0.4]);
        let got = une_loss(&la, &lb, 0.5).unwrap();

        // independent scalar arithmetic
        let (pa0, pa1): (f64, f64) = (0.7, 0.3);
        let (pb0, pb1): (f64, f64) = (0.6, 0.4);
        // sharpened targets: p^2 renormalized (softmax(ln p / 0.5))
        let qa0 = pb0 * pb0 / (pb0 * pb0 + pb1 * pb1);
        let qa1 = 1.0 - qa0;
        let qb0 = pa0 * pa0 / (pa0 * pa0 + pa1 * pa1);
        let qb1 = 1.0 - qb0;
        let kl_ab: f64 = pb0 * (pb0 / pa0).ln() + pb1 * (pb1 / pa1).ln();
        let kl_ba: f64 = pa0 * (pa0 / pb0).ln() + pa1 * (pa1 / pb1).ln();
        let ce_a = -(qa0 * pa0.ln() + qa1 * pa1.ln());
        let ce_b = -(qb0 * pb0.ln() + qb1 * pb1.ln());
        let dir_a = (-kl_ab).exp() * ce_a + kl_ab;
        let dir_b = (-kl_ba).exp() * ce_b + kl_ba;
        let expect = 0.5 * (dir_a + dir_b);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    fn feature_map(shape: [usize; 3], per_voxel: &[[f64; 2]]) -> FeatureMap<f64> {
        let s = shape[0] * shape[1] * shape[2];
        assert_eq!(per_voxel.len(), s);
        let mut g = ChanGrid::zeros(2, shape);
        for (v, f) in per_voxel.iter().enumerate() {
            g.as_mut_slice()[v] = f[0];
            g.as_mut_slice()[s + v] = f[1];
        }
        FeatureMap(g)
    }

    #[test]
    fn contrastive_three_voxel_hand_case() {
        // voxel 0: reliable fg (feature (1, 0))
        // voxel 1: reliable bg (feature (0, 1))
        // voxel 2: uncertain, predicted fg by both nets (feature (3, 4))
        let shape = [1, 1, 3];
        let f = feature_map(shape, &[[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]]);
        let subsets = ClassSubsets {
            reliable_fg: alloc::vec![0],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![2],
        };
        let lab = labels(shape, &[1, 0, 1]);
        let protos = compute_prototypes(&f, &subsets.reliable_fg, &subsets.reliable_bg).unwrap();
        let (v, flags) =
            contrastive_loss(&f, &f, &subsets, &protos, &protos, &lab, &lab, true).unwrap();
        // d((3,4),(1,0)) = sqrt(4+16); third term d((1,0),(0,1)) = sqrt(2)
        let expect = (20f64).sqrt() + 2f64.sqrt();
        assert!((v - expect).abs() < 1e-12);
        assert!(!flags.undefined_fg && !flags.undefined_bg);

        // without the third term
        let (v2, _) =
            contrastive_loss(&f, &f, &subsets, &protos, &protos, &lab, &lab, false).unwrap();
        assert!((v2 - (20f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_degenerate_paths() {
        let shape = [1, 1, 3];
        let f = feature_map(shape, &[[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]]);
        let lab = labels(shape, &[1, 0, 1]);

        // empty uncertain set: loss = d(c_f, c_b) only
        let subsets = ClassSubsets {
            reliable_fg: alloc::vec![0],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![],
        };
        let protos = compute_prototypes(&f, &subsets.reliable_fg, &subsets.reliable_bg).unwrap();
        let (v, flags) =
            contrastive_loss(&f, &f, &subsets, &protos, &protos, &lab, &lab, true).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        assert!(flags.uncertain_empty);

        // undefined fg prototype: its terms contribute 0, flagged
        let subsets = ClassSubsets {
            reliable_fg: alloc::vec![],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![2],
        };
        let protos = compute_prototypes(&f, &subsets.reliable_fg, &subsets.reliable_bg).unwrap();
        let (v, flags) =
            contrastive_loss(&f, &f, &subsets, &protos, &protos, &lab, &lab, true).unwrap();
        assert!(flags.undefined_fg);
        assert!(v.abs() < 1e-12); // uncertain voxel is fg-predicted, fg proto missing

        // voxels equal to their prototypes and c_f == c_b -> 0
        let f0 = feature_map(shape, &[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let subsets = ClassSubsets {
            reliable_fg: alloc::vec![0],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![2],
        };
        let protos = compute_prototypes(&f0, &subsets.reliable_fg, &subsets.reliable_bg).unwrap();
        let (v, _) =
            contrastive_loss(&f0, &f0, &subsets, &protos, &protos, &lab, &lab, true).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn contrastive_permutation_invariant() {
        let shape = [1, 1, 4];
        let f = feature_map(
            shape,
            &[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 1.5]],
        );
        let lab = labels(shape, &[1, 0, 1, 0]);
        let s1 = ClassSubsets {
            reliable_fg: alloc::vec![0],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![2, 3],
        };
        let s2 = ClassSubsets {
            reliable_fg: alloc::vec![0],
            reliable_bg: alloc::vec![1],
            uncertain: alloc::vec![3, 2],
        };
        let p = compute_prototypes(&f, &s1.reliable_fg, &s1.reliable_bg).unwrap();
        let (v1, _) = contrastive_loss(&f, &f, &s1, &p, &p, &lab, &lab, true).unwrap();
        let (v2, _) = contrastive_loss(&f, &f, &s2, &p, &p, &lab, &lab, true).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn report_bookkeeping_identity() {
        let report = LossReport::compose(
            0.31, 0.29, 0.05, 0.8, 0.6, 0.4, 1.2, 0.5, 0.17, 1.0,
            Toggles::full(),
            LossFlags::default(),
        );
        assert!((report.total - report.recompute_total()).abs() < 1e-12);

        let sup = LossReport::compose(
            0.31, 0.29, 0.05, 0.8, 0.6, 0.4, 1.2, 0.5, 0.17, 1.0,
            Toggles::supervised_only(),
            LossFlags::default(),
        );
        assert!((sup.total - (0.31 + 0.29)).abs() < 1e-12);
        assert_eq!(sup.l_cps, 0.0);

        // λ_c = 0 -> total independent of l_c
        let z = LossReport::compose(
            0.31, 0.29, 0.05, 0.8, 0.6, 0.4, 99.0, 0.5, 0.0, 1.0,
            Toggles::full(),
            LossFlags::default(),
        );
        let z2 = LossReport::compose(
            0.31, 0.29, 0.05, 0.8, 0.6, 0.4, 1.0, 0.5, 0.0, 1.0,
            Toggles::full(),
            LossFlags::default(),
        );
        assert!((z.total - z2.total).abs() < 1e-12);
    }

    #[test]
    fn argmax_matches_cps_internal_labels() {
        let shape = [1, 1, 2];
        let a = ProbMap(ChanGrid::from_vec(2, shape, alloc::vec![0.8, 0.3, 0.2, 0.7]).unwrap());
        let m = argmax_labels(&a);
        assert_eq!(m.data.as_slice(), &[0, 1]);
    }
}
