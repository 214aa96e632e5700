//! The optimization loop: schedules, SGD with momentum and weight decay,
//! deterministic batch-order derivation, and the single co-training step
//! that wires every loss to both subnets.
//!
//! `train_step` is a pure function of `(state, batches, config)` — identical
//! inputs produce identical successor states, which is what checkpoint
//! resume and the determinism acceptance check rely on.

use alloc::string::ToString;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{ChanGrid, Grid3};
use crate::loss::{
    ce_loss_grad, contrastive_loss_grad, cps_loss_grad, cr_loss_grad, dice_loss_grad,
    efs_ce_loss_grad, une_context, une_loss_grad, CrDistance, LossFlags, LossReport, Toggles,
};
use crate::net::{init_subnet, SubnetConfig, SubnetParams};
use crate::pseudo::{
    class_subsets, disagreement_mask, percentile_thresholds, CombineMode,
};
use crate::real::Real;
use crate::rng::{stream, tag};
use crate::synth::shuffle;
use crate::vox::{argmax_labels, entropy_map, softmax, LabelMask, LogitMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LrSchedule {
    StepDecay,
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LambdaCSchedule {
    /// `0.1 · e^{4(1 − t/t_max)²}` — decays from 0.1·e⁴ to 0.1.
    PaperLiteral,
    /// `0.1 · e^{−5(1 − t/t_max)²}` — the conventional ramp-up alternative.
    GaussianRampup,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub max_iters: u64,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub step_size: u64,
    pub decay_factor: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub crop_shape: [usize; 3],
    /// Confidence threshold λ of the disagreement mask.
    pub lambda: f64,
    /// Supervised weight of the consistency-regularization term.
    pub alpha: f64,
    /// Soft-target sharpening temperature.
    pub t_p: f64,
    /// Entropy percentile γ for the ignore rule and reliability mask.
    pub gamma_percentile: f64,
    pub lambda_c_schedule: LambdaCSchedule,
    pub combine_mode: CombineMode,
    pub cr_distance: CrDistance,
    pub contrastive_third_term: bool,
    /// Count the shared bidirectional unsupervised terms twice (once per
    /// subnet) instead of once.
    pub unsup_double_count: bool,
    pub toggles: Toggles,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 1500,
            base_lr: 0.01,
            lr_schedule: LrSchedule::StepDecay,
            step_size: 600,
            decay_factor: 0.1,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            crop_shape: [48, 48, 32],
            lambda: 0.6,
            alpha: 0.5,
            t_p: 0.5,
            gamma_percentile: 70.0,
            lambda_c_schedule: LambdaCSchedule::PaperLiteral,
            combine_mode: CombineMode::Xor,
            cr_distance: CrDistance::Mse,
            contrastive_third_term: true,
            unsup_double_count: false,
            toggles: Toggles::full(),
            seed: 1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// The settings reported for full-scale runs: 6000 iterations with a
    /// tenfold learning-rate decay every 2500 steps.
    pub fn paper_scale() -> Self {
        TrainConfig {
            max_iters: 6000,
            step_size: 2500,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::argument("max_iters must be >= 1"));
        }
        if self.base_lr < 0.0 {
            return Err(Error::argument("base_lr must be >= 0"));
        }
        if self.labeled_per_batch < 1 {
            return Err(Error::argument("labeled_per_batch must be >= 1"));
        }
        if self.toggles.uses_unlabeled() && self.unlabeled_per_batch < 1 {
            return Err(Error::argument(
                "unlabeled_per_batch must be >= 1 when unsupervised losses are enabled",
            ));
        }
        Ok(())
    }
}

/// Contrastive weight at iteration `t`.
pub fn lambda_c_at(t: u64, t_max: u64, mode: LambdaCSchedule) -> Result<f64> {
    if t > t_max {
        return Err(Error::argument("lambda_c_at: t exceeds t_max"));
    }
    let frac = 1.0 - t as f64 / t_max as f64;
    Ok(match mode {
        LambdaCSchedule::PaperLiteral => 0.1 * (4.0 * frac * frac).exp(),
        LambdaCSchedule::GaussianRampup => 0.1 * (-5.0 * frac * frac).exp(),
    })
}

/// Learning rate at iteration `t`.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::StepDecay => cfg.base_lr * cfg.decay_factor.powi((t / cfg.step_size) as i32),
        LrSchedule::Poly => {
            let frac = 1.0 - (t as f64 / cfg.max_iters as f64).min(1.0);
            cfg.base_lr * frac.powf(cfg.poly_power)
        }
    }
}

/// Both subnets' parameters plus optimizer slots and the iteration counter.
#[derive(Clone)]
pub struct TrainState<F: Real> {
    pub params_a: SubnetParams<F>,
    pub params_b: SubnetParams<F>,
    pub vel_a: Vec<F>,
    pub vel_b: Vec<F>,
    pub iter: u64,
    pub seed: u64,
    pub best_dice: Option<f64>,
}

impl<F: Real> TrainState<F> {
    pub fn new(cfg_a: &SubnetConfig, cfg_b: &SubnetConfig, seed: u64) -> Result<Self> {
        let params_a = init_subnet(cfg_a, seed)?;
        let params_b = init_subnet(cfg_b, seed)?;
        let vel_a = alloc::vec![F::zero(); params_a.param_count()];
        let vel_b = alloc::vec![F::zero(); params_b.param_count()];
        Ok(TrainState {
            params_a,
            params_b,
            vel_a,
            vel_b,
            iter: 0,
            seed,
            best_dice: None,
        })
    }
}

/// SGD with momentum; weight decay is applied directly to the parameters,
/// not through the momentum buffer, so a zero-gradient step shrinks every
/// parameter by exactly `(1 − lr·wd)`.
pub fn sgd_step<F: Real>(
    params: &mut [F],
    velocity: &mut [F],
    grads: &[F],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = F::of(lr);
    let mu = F::of(momentum);
    let wd = F::of(weight_decay);
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = mu * *v + g;
        *p = *p - lr * *v - lr * wd * *p;
    }
}

/// Batch-order derivation: position `t·per_batch + j` indexes a per-epoch
/// seeded shuffle of the pool. Pure function of `(seed, role, t)`, so
/// resuming at iteration `t` consumes exactly the same case sequence.
pub fn batch_indices(seed: u64, role: u64, t: u64, per_batch: usize, pool: usize) -> Vec<usize> {
    assert!(pool > 0);
    let mut out = Vec::with_capacity(per_batch);
    for j in 0..per_batch {
        let pos = t * per_batch as u64 + j as u64;
        let epoch = pos / pool as u64;
        let mut order: Vec<usize> = (0..pool).collect();
        let mut rng = stream(seed, &[tag::ORDER, role, epoch]);
        shuffle(&mut order, &mut rng);
        out.push(order[(pos % pool as u64) as usize]);
    }
    out
}

pub const ROLE_LABELED: u64 = 11;
pub const ROLE_UNLABELED: u64 = 12;

/// Crop-offset stream for batch slot `slot` at iteration `t`.
pub fn crop_stream(seed: u64, role: u64, t: u64, slot: usize) -> ChaCha8Rng {
    stream(seed, &[tag::CROP, role, t, slot as u64])
}

struct BatchForward<F: Real> {
    outputs: Vec<crate::net::SubnetOutput<F>>,
    caches: Vec<crate::net::ForwardCache<F>>,
    logits: LogitMap<F>,
    features: crate::vox::FeatureMap<F>,
    part_h: usize,
}

fn forward_batch<F: Real>(params: &SubnetParams<F>, volumes: &[&Volume<F>]) -> Result<BatchForward<F>> {
    let mut outputs = Vec::with_capacity(volumes.len());
    let mut caches = Vec::with_capacity(volumes.len());
    for v in volumes {
        let (out, cache) = params.forward(v)?;
        outputs.push(out);
        caches.push(cache);
    }
    let logit_parts: Vec<&ChanGrid<F>> = outputs.iter().map(|o| &o.logits.0).collect();
    let feat_parts: Vec<&ChanGrid<F>> = outputs.iter().map(|o| &o.features.0).collect();
    let logits = LogitMap(ChanGrid::stack_h(&logit_parts)?);
    let features = crate::vox::FeatureMap(ChanGrid::stack_h(&feat_parts)?);
    let part_h = volumes[0].shape()[0];
    Ok(BatchForward {
        outputs,
        caches,
        logits,
        features,
        part_h,
    })
}

fn stack_labels(labels: &[&LabelMask]) -> Result<LabelMask> {
    let parts: Vec<&Grid3<u8>> = labels.iter().map(|l| &l.data).collect();
    Ok(LabelMask {
        data: Grid3::stack_h(&parts)?,
        num_classes: labels[0].num_classes,
    })
}

fn add_scaled<F: Real>(acc: &mut ChanGrid<F>, g: &ChanGrid<F>, scale: f64) {
    let s = F::of(scale);
    for (a, &b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += s * b;
    }
}

/// One optimization step over a labeled and an unlabeled batch (already
/// cropped). Returns the loss report; the learning rate and λ_c come from
/// the schedules at `state.iter`.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    labeled: &[(Volume<F>, LabelMask)],
    unlabeled: &[Volume<F>],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::argument("train_step: empty labeled batch"));
    }
    let t = state.iter;
    if t >= cfg.max_iters {
        return Err(Error::argument("train_step: iteration beyond max_iters"));
    }
    let lr = lr_at(t, cfg);
    let lambda_c = lambda_c_at(t, cfg.max_iters, cfg.lambda_c_schedule)?;
    let toggles = cfg.toggles;
    let unsup_scale = if cfg.unsup_double_count { 2.0 } else { 1.0 };
    let mut flags = LossFlags::default();

    // ---- labeled batch through both subnets ----
    let vols: Vec<&Volume<F>> = labeled.iter().map(|(v, _)| v).collect();
    let labs: Vec<&LabelMask> = labeled.iter().map(|(_, l)| l).collect();
    let fwd_la = forward_batch(&state.params_a, &vols)?;
    let fwd_lb = forward_batch(&state.params_b, &vols)?;
    let y = stack_labels(&labs)?;

    let (ce_a, g_ce_a) = ce_loss_grad(&fwd_la.logits, &y)?;
    let (dice_a, g_dice_a) = dice_loss_grad(&fwd_la.logits, &y)?;
    let (ce_b, g_ce_b) = ce_loss_grad(&fwd_lb.logits, &y)?;
    let (dice_b, g_dice_b) = dice_loss_grad(&fwd_lb.logits, &y)?;
    let l_s_a = (ce_a + dice_a).as_f64();
    let l_s_b = (ce_b + dice_b).as_f64();

    let mut d_lab_a = g_ce_a;
    add_scaled(&mut d_lab_a, &g_dice_a, 1.0);
    let mut d_lab_b = g_ce_b;
    add_scaled(&mut d_lab_b, &g_dice_b, 1.0);

    let mut l_cr = 0.0;
    if toggles.cr {
        let p_la = softmax(&fwd_la.logits, F::one())?;
        let p_lb = softmax(&fwd_lb.logits, F::one())?;
        let mask = disagreement_mask(&p_la, &p_lb, cfg.lambda, cfg.combine_mode)?;
        flags.cr_mask_empty = mask.data.as_slice().iter().all(|&m| m == 0);
        let (cr, g_cr_a, g_cr_b) = cr_loss_grad(
            &fwd_la.logits,
            &fwd_lb.logits,
            &y,
            &mask,
            crate::loss::CR_EPSILON,
            cfg.cr_distance,
        )?;
        l_cr = cr.as_f64();
        // total carries 2α·l_cr (one α-weighted term per subnet)
        add_scaled(&mut d_lab_a, &g_cr_a, 2.0 * cfg.alpha);
        add_scaled(&mut d_lab_b, &g_cr_b, 2.0 * cfg.alpha);
    }

    // ---- unlabeled batch ----
    let mut l_cps = 0.0;
    let mut l_efs = 0.0;
    let mut l_une = 0.0;
    let mut l_c = 0.0;
    let mut unl: Option<(BatchForward<F>, BatchForward<F>, ChanGrid<F>, ChanGrid<F>, ChanGrid<F>, ChanGrid<F>)> =
        None;

    if toggles.uses_unlabeled() {
        if unlabeled.is_empty() {
            return Err(Error::argument("train_step: empty unlabeled batch"));
        }
        let uvols: Vec<&Volume<F>> = unlabeled.iter().collect();
        let fwd_ua = forward_batch(&state.params_a, &uvols)?;
        let fwd_ub = forward_batch(&state.params_b, &uvols)?;

        let p_ua = softmax(&fwd_ua.logits, F::one())?;
        let p_ub = softmax(&fwd_ub.logits, F::one())?;
        let pseudo_a = argmax_labels(&p_ua);
        let pseudo_b = argmax_labels(&p_ub);

        let c = fwd_ua.logits.0.channels();
        let shape = fwd_ua.logits.0.shape();
        let mut d_unl_a = ChanGrid::zeros(c, shape);
        let mut d_unl_b = ChanGrid::zeros(c, shape);
        let mut d_feat_a = ChanGrid::zeros(fwd_ua.features.0.channels(), shape);
        let mut d_feat_b = ChanGrid::zeros(fwd_ub.features.0.channels(), shape);

        if toggles.cps {
            let (v, g_a, g_b) =
                cps_loss_grad(&fwd_ua.logits, &fwd_ub.logits, &pseudo_a, &pseudo_b)?;
            l_cps = v.as_f64();
            add_scaled(&mut d_unl_a, &g_a, unsup_scale);
            add_scaled(&mut d_unl_b, &g_b, unsup_scale);
        }

        let need_thresholds = toggles.efs || toggles.pgl;
        let thresholds = if need_thresholds {
            let ent_a = entropy_map(&p_ua);
            let ent_b = entropy_map(&p_ub);
            let thr = percentile_thresholds(&ent_a, &ent_b, cfg.gamma_percentile)?;
            Some((ent_a, ent_b, thr))
        } else {
            None
        };

        if toggles.efs {
            let (ent_a, ent_b, thr) = thresholds.as_ref().expect("computed above");
            // cross direction: each net's retained argmax supervises the other
            let from_a = crate::pseudo::efs_pseudo_labels(&p_ua, ent_a, ent_b, thr)?;
            let from_b = crate::pseudo::efs_pseudo_labels(&p_ub, ent_a, ent_b, thr)?;
            let (v_b, g_b, ignore_b) = efs_ce_loss_grad(&fwd_ub.logits, &from_a)?;
            let (v_a, g_a, ignore_a) = efs_ce_loss_grad(&fwd_ua.logits, &from_b)?;
            flags.efs_all_ignore = ignore_a || ignore_b;
            l_efs = (v_a + v_b).as_f64();
            add_scaled(&mut d_unl_a, &g_a, unsup_scale);
            add_scaled(&mut d_unl_b, &g_b, unsup_scale);
        }

        if toggles.ue {
            let ctx = une_context(&fwd_ua.logits, &fwd_ub.logits, F::of(cfg.t_p))?;
            let (v, g_a, g_b) = une_loss_grad(&fwd_ua.logits, &fwd_ub.logits, &ctx)?;
            l_une = v.as_f64();
            add_scaled(&mut d_unl_a, &g_a, unsup_scale);
            add_scaled(&mut d_unl_b, &g_b, unsup_scale);
        }

        if toggles.pgl {
            let (ent_a, ent_b, thr) = thresholds.as_ref().expect("computed above");
            let mask = crate::pseudo::reliability_mask(&p_ua, &p_ub, ent_a, ent_b, thr)?;
            let subsets = class_subsets(&mask, &pseudo_a)?;
            let (v, g_a, g_b, cflags) = contrastive_loss_grad(
                &fwd_ua.features,
                &fwd_ub.features,
                &subsets,
                &pseudo_a,
                &pseudo_b,
                cfg.contrastive_third_term,
            )?;
            l_c = v.as_f64();
            flags.proto_fg_undefined = cflags.undefined_fg;
            flags.proto_bg_undefined = cflags.undefined_bg;
            flags.uncertain_empty = cflags.uncertain_empty;
            add_scaled(&mut d_feat_a, &g_a, lambda_c);
            add_scaled(&mut d_feat_b, &g_b, lambda_c);
        }

        unl = Some((fwd_ua, fwd_ub, d_unl_a, d_unl_b, d_feat_a, d_feat_b));
    }

    let report = LossReport::compose(
        l_s_a, l_s_b, l_cr, l_cps, l_efs, l_une, l_c, cfg.alpha, lambda_c, unsup_scale, toggles,
        flags,
    );
    if let Some(name) = report.first_non_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }

    // ---- backward through every (net, sample) forward ----
    let mut grads_a = alloc::vec![F::zero(); state.params_a.param_count()];
    let mut grads_b = alloc::vec![F::zero(); state.params_b.param_count()];

    backprop_batch(&state.params_a, &fwd_la, &d_lab_a, None, &mut grads_a)?;
    backprop_batch(&state.params_b, &fwd_lb, &d_lab_b, None, &mut grads_b)?;
    if let Some((fwd_ua, fwd_ub, d_unl_a, d_unl_b, d_feat_a, d_feat_b)) = unl {
        backprop_batch(&state.params_a, &fwd_ua, &d_unl_a, Some(&d_feat_a), &mut grads_a)?;
        backprop_batch(&state.params_b, &fwd_ub, &d_unl_b, Some(&d_feat_b), &mut grads_b)?;
    }

    sgd_step(
        state.params_a.data_mut(),
        &mut state.vel_a,
        &grads_a,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    sgd_step(
        state.params_b.data_mut(),
        &mut state.vel_b,
        &grads_b,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );

    for (name, data) in [
        ("params_a", state.params_a.data()),
        ("params_b", state.params_b.data()),
    ] {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("{name} after step {t}")));
        }
    }

    state.iter += 1;
    Ok(report)
}

/// Unstack batch-level gradients and run one backward per sample.
fn backprop_batch<F: Real>(
    params: &SubnetParams<F>,
    fwd: &BatchForward<F>,
    d_logits: &ChanGrid<F>,
    d_features: Option<&ChanGrid<F>>,
    grads: &mut [F],
) -> Result<()> {
    let n = fwd.outputs.len();
    let d_logit_parts = d_logits.unstack_h(n, fwd.part_h)?;
    let d_feat_parts = match d_features {
        Some(df) => Some(df.unstack_h(n, fwd.part_h)?),
        None => None,
    };
    for (i, cache) in fwd.caches.iter().enumerate() {
        let zero_feat;
        let d_feat = match &d_feat_parts {
            Some(parts) => &parts[i],
            None => {
                zero_feat = ChanGrid::zeros(
                    fwd.outputs[i].features.0.channels(),
                    fwd.outputs[i].features.0.shape(),
                );
                &zero_feat
            }
        };
        params.backward(cache, &d_logit_parts[i], d_feat, grads);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;
    use crate::synth::{generate_case, DatasetSpec, OrganStyle};

    fn tiny_nets() -> (SubnetConfig, SubnetConfig) {
        (
            SubnetConfig {
                arch: Arch::ResidualUnet,
                base_channels: 2,
                feature_dim: 4,
                num_classes: 2,
                depth: 2,
            },
            SubnetConfig {
                arch: Arch::VnetStyle,
                base_channels: 2,
                feature_dim: 4,
                num_classes: 2,
                depth: 2,
            },
        )
    }

    fn tiny_batch(seed: u64) -> (Vec<(Volume<f32>, LabelMask)>, Vec<Volume<f32>>) {
        let spec = DatasetSpec {
            num_cases: 4,
            volume_shape: [16, 16, 16],
            organ_style: OrganStyle::SmoothBlob,
            noise_sigma: 0.4,
            blur_sigma: 0.5,
            seed,
        };
        let cases: Vec<_> = (0..4).map(|i| generate_case(&spec, i).unwrap()).collect();
        let labeled = alloc::vec![
            (cases[0].volume.clone(), cases[0].label.clone()),
            (cases[1].volume.clone(), cases[1].label.clone()),
        ];
        let unlabeled = alloc::vec![cases[2].volume.clone(), cases[3].volume.clone()];
        (labeled, unlabeled)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            max_iters: 10,
            crop_shape: [16, 16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn lambda_c_schedule_endpoints() {
        let t_max = 6000;
        let start = lambda_c_at(0, t_max, LambdaCSchedule::PaperLiteral).unwrap();
        assert!((start - 0.1 * 4f64.exp()).abs() < 1e-12);
        assert!((start - 5.4598).abs() < 1e-4);
        let end = lambda_c_at(t_max, t_max, LambdaCSchedule::PaperLiteral).unwrap();
        assert!((end - 0.1).abs() < 1e-15);

        let ramp0 = lambda_c_at(0, t_max, LambdaCSchedule::GaussianRampup).unwrap();
        assert!((ramp0 - 0.1 * (-5f64).exp()).abs() < 1e-12);
        assert!((ramp0 - 0.000674).abs() < 1e-6);

        assert!(lambda_c_at(t_max + 1, t_max, LambdaCSchedule::PaperLiteral).is_err());
    }

    #[test]
    fn lr_schedules() {
        let cfg = TrainConfig {
            max_iters: 6000,
            base_lr: 0.01,
            step_size: 2500,
            decay_factor: 0.1,
            ..Default::default()
        };
        assert!((lr_at(0, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(2499, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(2500, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_at(5000, &cfg) - 0.0001).abs() < 1e-15);

        let poly = TrainConfig {
            lr_schedule: LrSchedule::Poly,
            max_iters: 1000,
            poly_power: 0.9,
            base_lr: 0.02,
            ..Default::default()
        };
        assert!((lr_at(0, &poly) - 0.02).abs() < 1e-15);
        let half = lr_at(500, &poly);
        assert!((half - 0.02 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((half / 0.02 - 0.5359).abs() < 1e-4);
    }

    #[test]
    fn weight_decay_only_step_shrinks_exactly() {
        let mut p = alloc::vec![1.0f64, -2.0, 0.5];
        let mut v = alloc::vec![0.0; 3];
        let g = alloc::vec![0.0; 3];
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.01);
        let k = 1.0 - 0.1 * 0.01;
        assert!((p[0] - k).abs() < 1e-15);
        assert!((p[1] + 2.0 * k).abs() < 1e-15);
        assert!((p[2] - 0.5 * k).abs() < 1e-15);
    }

    #[test]
    fn batch_indices_cycle_and_are_deterministic() {
        let a = batch_indices(5, ROLE_LABELED, 0, 2, 3);
        let b = batch_indices(5, ROLE_LABELED, 0, 2, 3);
        assert_eq!(a, b);
        // six consecutive positions cover the pool exactly twice
        let mut seen = alloc::vec![0usize; 3];
        for t in 0..3 {
            for idx in batch_indices(5, ROLE_LABELED, t, 2, 3) {
                seen[idx] += 1;
            }
        }
        assert_eq!(seen, alloc::vec![2, 2, 2]);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (cfg_a, cfg_b) = tiny_nets();
        let mut state: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 3).unwrap();
        let before_a = state.params_a.data().to_vec();
        let before_b = state.params_b.data().to_vec();
        let (labeled, unlabeled) = tiny_batch(17);
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..tiny_train_config()
        };
        let report = train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap();
        assert_eq!(state.params_a.data(), &before_a[..]);
        assert_eq!(state.params_b.data(), &before_b[..]);
        assert!(report.total.is_finite());
        assert_eq!(state.iter, 1);
    }

    #[test]
    fn step_is_deterministic() {
        let (cfg_a, cfg_b) = tiny_nets();
        let (labeled, unlabeled) = tiny_batch(23);
        let cfg = tiny_train_config();
        let mut s1: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 3).unwrap();
        let mut s2: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 3).unwrap();
        let r1 = train_step(&mut s1, &labeled, &unlabeled, &cfg).unwrap();
        let r2 = train_step(&mut s2, &labeled, &unlabeled, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1.params_a.data(), s2.params_a.data());
        assert_eq!(s1.params_b.data(), s2.params_b.data());
        assert_eq!(s1.vel_a, s2.vel_a);
    }

    #[test]
    fn supervised_only_ignores_unlabeled_contents() {
        let (cfg_a, cfg_b) = tiny_nets();
        let (labeled, unlabeled) = tiny_batch(29);
        let cfg = TrainConfig {
            toggles: Toggles::supervised_only(),
            ..tiny_train_config()
        };
        let mut s1: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 3).unwrap();
        let mut s2: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 3).unwrap();
        let zeros: Vec<Volume<f32>> = unlabeled
            .iter()
            .map(|v| Volume::new(Grid3::zeros(v.shape()), v.spacing))
            .collect();
        let r1 = train_step(&mut s1, &labeled, &unlabeled, &cfg).unwrap();
        let r2 = train_step(&mut s2, &labeled, &zeros, &cfg).unwrap();
        assert_eq!(s1.params_a.data(), s2.params_a.data());
        assert_eq!(s1.params_b.data(), s2.params_b.data());
        assert_eq!(r1.l_cps, 0.0);
        assert_eq!(r1.l_efs, 0.0);
        assert_eq!(r1.l_une, 0.0);
        assert_eq!(r1.l_c, 0.0);
        assert_eq!(r2.total, r1.total);
    }

    #[test]
    fn report_total_matches_recompute() {
        let (cfg_a, cfg_b) = tiny_nets();
        let (labeled, unlabeled) = tiny_batch(31);
        let cfg = tiny_train_config();
        let mut state: TrainState<f32> = TrainState::new(&cfg_a, &cfg_b, 7).unwrap();
        for _ in 0..3 {
            let report = train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap();
            assert!((report.total - report.recompute_total()).abs() < 1e-10);
            assert!(report.total.is_finite());
        }
    }
}
