//! Central finite-difference verification of every loss gradient.
//!
//! Each check freezes the detached context (pseudo-labels, masks, soft
//! targets, subsets), perturbs one input tensor at a time at 64-bit
//! precision, and compares the analytic gradient against
//! `(f(x+h) − f(x−h)) / 2h`. This is both a test-suite building block and
//! the release gate behind the `gradcheck` CLI command.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::{ChanGrid, Grid3};
use crate::loss::{
    contrastive_loss_grad, cps_loss_grad, cr_loss_grad, ce_loss_grad, dice_loss_grad,
    efs_ce_loss_grad, kl_mean_grad, une_context, une_loss_grad, CrDistance, CR_EPSILON,
};
use crate::pseudo::{disagreement_mask, ClassSubsets, CombineMode};
use crate::rng::stream;
use crate::vox::{argmax_labels, softmax, FeatureMap, LabelMask, LogitMap, IGNORE};

/// Maximum relative error accepted by [`CheckRow::pass`].
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, max_rel_err: f64) -> Self {
        CheckRow {
            name: String::from(name),
            max_rel_err,
            pass: max_rel_err < GRAD_TOLERANCE,
        }
    }
}

/// Central finite differences of a scalar function, element by element.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = 6e-6 * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let dn = f(&xp);
        xp[i] = orig;
        out.push((up - dn) / (2.0 * h));
    }
    out
}

/// Worst-case discrepancy between analytic and numeric gradients: relative
/// where the magnitude is meaningful, absolute for near-zero entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let m = a.abs().max(n.abs());
            if m <= 1e-6 {
                (a - n).abs()
            } else {
                (a - n).abs() / m
            }
        })
        .fold(0.0, f64::max)
    }

/// Check one closure against an analytic gradient at `x0`.
pub fn check_closure(
    name: &str,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
) -> CheckRow {
    let numeric = central_diff(f, x0);
    CheckRow::new(name, max_rel_err(analytic, &numeric))
}

const SHAPE: [usize; 3] = [4, 4, 2];
const S: usize = 32;
const C: usize = 2;
const FDIM: usize = 3;

fn rand_logits(rng: &mut impl Rng) -> LogitMap<f64> {
    let data: Vec<f64> = (0..C * S)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            1.5 * n
        })
        .collect();
    LogitMap(ChanGrid::from_vec(C, SHAPE, data).unwrap())
}

fn rand_labels(rng: &mut impl Rng) -> LabelMask {
    let data: Vec<u8> = (0..S).map(|_| rng.random_range(0..C) as u8).collect();
    LabelMask {
        data: Grid3::from_vec(SHAPE, data).unwrap(),
        num_classes: C,
    }
}

fn rand_features(rng: &mut impl Rng) -> FeatureMap<f64> {
    let data: Vec<f64> = (0..FDIM * S).map(|_| StandardNormal.sample(rng)).collect();
    FeatureMap(ChanGrid::from_vec(FDIM, SHAPE, data).unwrap())
}

fn logits_from_flat(x: &[f64]) -> LogitMap<f64> {
    LogitMap(ChanGrid::from_vec(C, SHAPE, x.to_vec()).unwrap())
}

fn features_from_flat(x: &[f64]) -> FeatureMap<f64> {
    FeatureMap(ChanGrid::from_vec(FDIM, SHAPE, x.to_vec()).unwrap())
}

type Scalar = Box<dyn FnMut(&[f64]) -> f64>;

/// Run the full finite-difference suite on tiny random instances: one row
/// per loss per input tensor (subnet direction).
pub fn run_loss_checks(seed: u64) -> Vec<CheckRow> {
    let mut rng = stream(seed, &[0xC0DE]);
    let logits_a = rand_logits(&mut rng);
    let logits_b = rand_logits(&mut rng);
    let target = rand_labels(&mut rng);
    let features_a = rand_features(&mut rng);
    let features_b = rand_features(&mut rng);

    // detached context, frozen for every closure below
    let p_a = softmax(&logits_a, 1.0).unwrap();
    let p_b = softmax(&logits_b, 1.0).unwrap();
    let pseudo_a = argmax_labels(&p_a);
    let pseudo_b = argmax_labels(&p_b);
    let mask = disagreement_mask(&p_a, &p_b, 0.6, CombineMode::Xor).unwrap();
    let mut efs_labels = pseudo_a.clone();
    for (v, lab) in efs_labels.data.as_mut_slice().iter_mut().enumerate() {
        if v % 4 == 0 {
            *lab = IGNORE;
        }
    }
    let ctx = une_context(&logits_a, &logits_b, 0.5).unwrap();
    let subsets = random_subsets(&mut rng);

    let la = logits_a.0.as_slice().to_vec();
    let lb = logits_b.0.as_slice().to_vec();
    let fa = features_a.0.as_slice().to_vec();
    let fb = features_b.0.as_slice().to_vec();

    let mut rows = Vec::new();
    let mut check = |name: &str, x0: &[f64], analytic: &[f64], f: &mut Scalar| {
        rows.push(check_closure(name, f, x0, analytic));
    };

    // supervised cross-entropy
    {
        let (_, g) = ce_loss_grad(&logits_a, &target).unwrap();
        let t = target.clone();
        let mut f: Scalar =
            Box::new(move |x| ce_loss_grad(&logits_from_flat(x), &t).unwrap().0);
        check("ce/d_logits_a", &la, g.as_slice(), &mut f);
        let (_, g) = ce_loss_grad(&logits_b, &target).unwrap();
        let t = target.clone();
        let mut f: Scalar =
            Box::new(move |x| ce_loss_grad(&logits_from_flat(x), &t).unwrap().0);
        check("ce/d_logits_b", &lb, g.as_slice(), &mut f);
    }

    // Dice
    {
        let (_, g) = dice_loss_grad(&logits_a, &target).unwrap();
        let t = target.clone();
        let mut f: Scalar =
            Box::new(move |x| dice_loss_grad(&logits_from_flat(x), &t).unwrap().0);
        check("dice/d_logits_a", &la, g.as_slice(), &mut f);
        let (_, g) = dice_loss_grad(&logits_b, &target).unwrap();
        let t = target.clone();
        let mut f: Scalar =
            Box::new(move |x| dice_loss_grad(&logits_from_flat(x), &t).unwrap().0);
        check("dice/d_logits_b", &lb, g.as_slice(), &mut f);
    }

    // masked consistency, both distance modes
    for (dist, tag) in [(CrDistance::Mse, "cr_mse"), (CrDistance::Kl, "cr_kl")] {
        let (_, ga, gb) =
            cr_loss_grad(&logits_a, &logits_b, &target, &mask, CR_EPSILON, dist).unwrap();
        {
            let (lbf, t, m) = (logits_b.clone(), target.clone(), mask.clone());
            let mut f: Scalar = Box::new(move |x| {
                cr_loss_grad(&logits_from_flat(x), &lbf, &t, &m, CR_EPSILON, dist)
                    .unwrap()
                    .0
            });
            check(&alloc::format!("{tag}/d_logits_a"), &la, ga.as_slice(), &mut f);
        }
        {
            let (laf, t, m) = (logits_a.clone(), target.clone(), mask.clone());
            let mut f: Scalar = Box::new(move |x| {
                cr_loss_grad(&laf, &logits_from_flat(x), &t, &m, CR_EPSILON, dist)
                    .unwrap()
                    .0
            });
            check(&alloc::format!("{tag}/d_logits_b"), &lb, gb.as_slice(), &mut f);
        }
    }

    // cross pseudo supervision (pseudo-labels frozen)
    {
        let (_, ga, gb) = cps_loss_grad(&logits_a, &logits_b, &pseudo_a, &pseudo_b).unwrap();
        let (lbf, qa, qb) = (logits_b.clone(), pseudo_a.clone(), pseudo_b.clone());
        let mut f: Scalar = Box::new(move |x| {
            cps_loss_grad(&logits_from_flat(x), &lbf, &qa, &qb).unwrap().0
        });
        check("cps/d_logits_a", &la, ga.as_slice(), &mut f);
        let (laf, qa, qb) = (logits_a.clone(), pseudo_a.clone(), pseudo_b.clone());
        let mut f: Scalar = Box::new(move |x| {
            cps_loss_grad(&laf, &logits_from_flat(x), &qa, &qb).unwrap().0
        });
        check("cps/d_logits_b", &lb, gb.as_slice(), &mut f);
    }

    // entropy-filtered supervision (ignore-bearing labels frozen)
    {
        let (_, g, _) = efs_ce_loss_grad(&logits_a, &efs_labels).unwrap();
        let e = efs_labels.clone();
        let mut f: Scalar =
            Box::new(move |x| efs_ce_loss_grad(&logits_from_flat(x), &e).unwrap().0);
        check("efs/d_logits_a", &la, g.as_slice(), &mut f);
        let (_, g, _) = efs_ce_loss_grad(&logits_b, &efs_labels).unwrap();
        let e = efs_labels.clone();
        let mut f: Scalar =
            Box::new(move |x| efs_ce_loss_grad(&logits_from_flat(x), &e).unwrap().0);
        check("efs/d_logits_b", &lb, g.as_slice(), &mut f);
    }

    // per-voxel KL map (mean reduction)
    {
        let (_, ga, gb) = kl_mean_grad(&logits_a, &logits_b).unwrap();
        let lbf = logits_b.clone();
        let mut f: Scalar =
            Box::new(move |x| kl_mean_grad(&logits_from_flat(x), &lbf).unwrap().0);
        check("kl/d_logits_a", &la, ga.as_slice(), &mut f);
        let laf = logits_a.clone();
        let mut f: Scalar =
            Box::new(move |x| kl_mean_grad(&laf, &logits_from_flat(x)).unwrap().0);
        check("kl/d_logits_b", &lb, gb.as_slice(), &mut f);
    }

    // uncertainty-weighted loss (soft targets and weights frozen)
    {
        let (_, ga, gb) = une_loss_grad(&logits_a, &logits_b, &ctx).unwrap();
        let (lbf, cf) = (logits_b.clone(), ctx.clone());
        let mut f: Scalar = Box::new(move |x| {
            une_loss_grad(&logits_from_flat(x), &lbf, &cf).unwrap().0
        });
        check("une/d_logits_a", &la, ga.as_slice(), &mut f);
        let (laf, cf) = (logits_a.clone(), ctx.clone());
        let mut f: Scalar = Box::new(move |x| {
            une_loss_grad(&laf, &logits_from_flat(x), &cf).unwrap().0
        });
        check("une/d_logits_b", &lb, gb.as_slice(), &mut f);
    }

    // prototype contrastive loss (subsets and assignments frozen; the
    // prototypes themselves carry gradient, recomputed from features)
    {
        let (_, ga, gb, _) = contrastive_loss_grad(
            &features_a,
            &features_b,
            &subsets,
            &pseudo_a,
            &pseudo_b,
            true,
        )
        .unwrap();
        let (fbf, ss, qa, qb) = (
            features_b.clone(),
            subsets.clone(),
            pseudo_a.clone(),
            pseudo_b.clone(),
        );
        let mut f: Scalar = Box::new(move |x| {
            contrastive_loss_grad(&features_from_flat(x), &fbf, &ss, &qa, &qb, true)
                .unwrap()
                .0
        });
        check("contrastive/d_features_a", &fa, ga.as_slice(), &mut f);
        let (faf, ss, qa, qb) = (
            features_a.clone(),
            subsets.clone(),
            pseudo_a.clone(),
            pseudo_b.clone(),
        );
        let mut f: Scalar = Box::new(move |x| {
            contrastive_loss_grad(&faf, &features_from_flat(x), &ss, &qa, &qb, true)
                .unwrap()
                .0
        });
        check("contrastive/d_features_b", &fb, gb.as_slice(), &mut f);
    }

    rows
}

fn random_subsets(rng: &mut impl Rng) -> ClassSubsets {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut un = Vec::new();
    for v in 0..S as u32 {
        match rng.random_range(0..3) {
            0 => fg.push(v),
            1 => bg.push(v),
            _ => un.push(v),
        }
    }
    // guarantee all three sets are populated
    if fg.is_empty() {
        fg.push(un.pop().expect("nonempty"));
    }
    if bg.is_empty() {
        bg.push(un.pop().expect("nonempty"));
    }
    if un.is_empty() {
        un.push(bg.pop().expect("nonempty"));
    }
    ClassSubsets {
        reliable_fg: fg,
        reliable_bg: bg,
        uncertain: un,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass_at_tolerance() {
        let rows = run_loss_checks(7);
        assert_eq!(rows.len(), 18);
        for row in &rows {
            assert!(
                row.pass,
                "{} failed with max rel err {}",
                row.name, row.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        // fixture: correct function, deliberately wrong gradient
        let x0 = [0.3, -0.7, 1.1];
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let analytic: Vec<f64> = x0.iter().map(|v| 2.0 * v * 1.05).collect();
        let row = check_closure("corrupted_square", &mut f, &x0, &analytic);
        assert!(!row.pass);
        assert_eq!(row.name, "corrupted_square");

        let correct: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let row = check_closure("square", &mut f, &x0, &correct);
        assert!(row.pass);
    }

    #[test]
    fn checks_are_deterministic_per_seed() {
        let a = run_loss_checks(3);
        let b = run_loss_checks(3);
        assert_eq!(a, b);
    }
}
