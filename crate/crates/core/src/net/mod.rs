//! The two 3D encoder–decoder subnets and their shared inference contract.
//!
//! An architecture is compiled into a flat list of steps (conv, norm,
//! activation, skip save/add/concat) over a single parameter arena; forward
//! execution caches per-step activations and backward walks the list in
//! reverse, accumulating parameter gradients into a same-length arena. Two
//! toy architectures with distinct inductive biases are provided:
//!
//! * `residual-unet` — residual double-conv blocks, stride-2 down
//!   convolutions, transposed-conv upsampling with concatenated skips;
//! * `vnet-style` — channelwise-residual conv stacks (1–3 convs per level),
//!   elementwise-sum skip fusion, transposed-conv upsampling.
//!
//! Both emit logits (C channels) and a feature embedding (F channels) at
//! full input resolution from 1×1×1 heads on the penultimate decoder
//! output.

pub mod conv;
pub mod norm;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::ChanGrid;
use crate::real::Real;
use crate::rng::{stream, tag};
use crate::vox::{FeatureMap, LogitMap, Volume};

use conv::{
    conv3d_backward_input, conv3d_backward_params, conv3d_forward, convt3d_backward_input,
    convt3d_backward_params, convt3d_forward, ConvGeom, ConvTGeom,
};
use norm::{instance_norm_backward, instance_norm_forward, NormCache};

/// Negative slope of the leaky ReLU activations.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Arch {
    ResidualUnet,
    VnetStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubnetConfig {
    pub arch: Arch,
    pub base_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub depth: usize,
}

impl SubnetConfig {
    pub fn residual_unet() -> Self {
        SubnetConfig {
            arch: Arch::ResidualUnet,
            base_channels: 8,
            feature_dim: 16,
            num_classes: 2,
            depth: 3,
        }
    }

    pub fn vnet_style() -> Self {
        SubnetConfig {
            arch: Arch::VnetStyle,
            ..Self::residual_unet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(Error::argument("base_channels must be >= 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::argument("feature_dim must be >= 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::argument("num_classes must be >= 2"));
        }
        if self.depth < 2 {
            return Err(Error::argument("depth must be >= 2"));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TensorKind {
    /// Kaiming normal with the given fan-in.
    ConvWeight { fan_in: usize },
    /// Zero.
    Bias,
    /// One.
    Gamma,
}

#[derive(Clone, Debug)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvStep {
    geom: ConvGeom,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvTStep {
    geom: ConvTGeom,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormStep {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Conv(ConvStep),
    ConvT(ConvTStep),
    Norm(NormStep),
    Act,
    Push(usize),
    AddFrom(usize),
    CatFrom(usize),
}

#[derive(Clone, Debug)]
struct Plan {
    steps: Vec<Step>,
    n_slots: usize,
    head_logits: ConvStep,
    head_features: ConvStep,
}

struct PlanBuilder {
    steps: Vec<Step>,
    specs: Vec<TensorSpec>,
    offset: usize,
    channels: usize,
    slot_channels: Vec<usize>,
}

impl PlanBuilder {
    fn new(in_channels: usize) -> Self {
        PlanBuilder {
            steps: Vec::new(),
            specs: Vec::new(),
            offset: 0,
            channels: in_channels,
            slot_channels: Vec::new(),
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, kind: TensorKind) -> usize {
        let len: usize = shape.iter().product();
        self.specs.push(TensorSpec {
            name,
            offset: self.offset,
            shape,
            kind,
        });
        self.offset += len;
        self.specs.len() - 1
    }

    fn conv_step(&mut self, name: &str, geom: ConvGeom) -> ConvStep {
        let w = self.tensor(
            format!("{name}.w"),
            alloc::vec![geom.co, geom.ci, geom.k, geom.k, geom.k],
            TensorKind::ConvWeight {
                fan_in: geom.ci * geom.k * geom.k * geom.k,
            },
        );
        let b = self.tensor(format!("{name}.b"), alloc::vec![geom.co], TensorKind::Bias);
        ConvStep { geom, w, b }
    }

    fn conv(&mut self, name: &str, co: usize, k: usize, stride: usize, pad: usize) {
        let geom = ConvGeom {
            ci: self.channels,
            co,
            k,
            stride,
            pad,
        };
        let step = self.conv_step(name, geom);
        self.steps.push(Step::Conv(step));
        self.channels = co;
    }

    fn convt(&mut self, name: &str, co: usize) {
        let geom = ConvTGeom {
            ci: self.channels,
            co,
        };
        let w = self.tensor(
            format!("{name}.w"),
            alloc::vec![geom.ci, geom.co, conv::CONVT_K, conv::CONVT_K, conv::CONVT_K],
            TensorKind::ConvWeight {
                fan_in: geom.co * conv::CONVT_K.pow(3),
            },
        );
        let b = self.tensor(format!("{name}.b"), alloc::vec![co], TensorKind::Bias);
        self.steps.push(Step::ConvT(ConvTStep { geom, w, b }));
        self.channels = co;
    }

    fn norm(&mut self, name: &str) {
        let c = self.channels;
        let gamma = self.tensor(format!("{name}.g"), alloc::vec![c], TensorKind::Gamma);
        let beta = self.tensor(format!("{name}.b"), alloc::vec![c], TensorKind::Bias);
        self.steps.push(Step::Norm(NormStep { gamma, beta }));
    }

    fn act(&mut self) {
        self.steps.push(Step::Act);
    }

    fn push_slot(&mut self) -> usize {
        let slot = self.slot_channels.len();
        self.slot_channels.push(self.channels);
        self.steps.push(Step::Push(slot));
        slot
    }

    fn add_from(&mut self, slot: usize) {
        assert_eq!(
            self.slot_channels[slot], self.channels,
            "residual add requires matching channels"
        );
        self.steps.push(Step::AddFrom(slot));
    }

    fn cat_from(&mut self, slot: usize) {
        self.channels += self.slot_channels[slot];
        self.steps.push(Step::CatFrom(slot));
    }
}

fn res_block(b: &mut PlanBuilder, name: &str, ch: usize) {
    let s = b.push_slot();
    b.conv(&format!("{name}.conv1"), ch, 3, 1, 1);
    b.norm(&format!("{name}.norm1"));
    b.act();
    b.conv(&format!("{name}.conv2"), ch, 3, 1, 1);
    b.norm(&format!("{name}.norm2"));
    b.add_from(s);
    b.act();
}

fn vnet_block(b: &mut PlanBuilder, name: &str, ch: usize, n_convs: usize) {
    let s = b.push_slot();
    for i in 0..n_convs {
        b.conv(&format!("{name}.conv{i}"), ch, 3, 1, 1);
        b.norm(&format!("{name}.norm{i}"));
        b.act();
    }
    b.add_from(s);
}

fn build_plan(cfg: &SubnetConfig) -> (Plan, Vec<TensorSpec>) {
    let base = cfg.base_channels;
    let mut b = PlanBuilder::new(1);
    b.conv("stem.conv", base, 3, 1, 1);
    b.norm("stem.norm");
    b.act();

    let mut skips = Vec::new();
    match cfg.arch {
        Arch::ResidualUnet => {
            for l in 0..cfg.depth - 1 {
                let ch = base << l;
                res_block(&mut b, &format!("enc{l}"), ch);
                skips.push(b.push_slot());
                b.conv(&format!("down{l}.conv"), base << (l + 1), 2, 2, 0);
                b.norm(&format!("down{l}.norm"));
                b.act();
            }
            res_block(&mut b, "bottleneck", base << (cfg.depth - 1));
            for l in (0..cfg.depth - 1).rev() {
                let ch = base << l;
                b.convt(&format!("up{l}.tconv"), ch);
                b.norm(&format!("up{l}.norm"));
                b.act();
                b.cat_from(skips[l]);
                b.conv(&format!("dec{l}.conv"), ch, 3, 1, 1);
                b.norm(&format!("dec{l}.norm"));
                b.act();
            }
        }
        Arch::VnetStyle => {
            for l in 0..cfg.depth - 1 {
                let ch = base << l;
                vnet_block(&mut b, &format!("enc{l}"), ch, (l + 1).min(3));
                skips.push(b.push_slot());
                b.conv(&format!("down{l}.conv"), base << (l + 1), 2, 2, 0);
                b.norm(&format!("down{l}.norm"));
                b.act();
            }
            vnet_block(&mut b, "bottleneck", base << (cfg.depth - 1), 3);
            for l in (0..cfg.depth - 1).rev() {
                let ch = base << l;
                b.convt(&format!("up{l}.tconv"), ch);
                b.norm(&format!("up{l}.norm"));
                b.act();
                b.add_from(skips[l]);
                vnet_block(&mut b, &format!("dec{l}"), ch, (l + 1).min(2));
            }
        }
    }

    debug_assert_eq!(b.channels, base);
    let head_logits = b.conv_step(
        "head.logits",
        ConvGeom {
            ci: base,
            co: cfg.num_classes,
            k: 1,
            stride: 1,
            pad: 0,
        },
    );
    let head_features = b.conv_step(
        "head.features",
        ConvGeom {
            ci: base,
            co: cfg.feature_dim,
            k: 1,
            stride: 1,
            pad: 0,
        },
    );
    let plan = Plan {
        steps: b.steps,
        n_slots: b.slot_channels.len(),
        head_logits,
        head_features,
    };
    (plan, b.specs)
}

/// Logits plus feature embedding, both at input resolution.
#[derive(Clone, Debug)]
pub struct SubnetOutput<F> {
    pub logits: LogitMap<F>,
    pub features: FeatureMap<F>,
}

/// Activations saved by [`SubnetParams::forward`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<F> {
    acts: Vec<Arc<ChanGrid<F>>>,
    slot_act: Vec<usize>,
    norm_caches: Vec<NormCache<F>>,
}

/// One subnet's parameters: a flat arena plus the named-tensor index and the
/// compiled step plan.
#[derive(Clone, Debug)]
pub struct SubnetParams<F> {
    cfg: SubnetConfig,
    plan: Plan,
    specs: Vec<TensorSpec>,
    data: Vec<F>,
}

/// Kaiming-initialized subnet. Weights are drawn in declaration order from
/// a single derived stream, so identical `(config, seed)` pairs produce
/// identical parameter bytes; biases are zero, norm scales one.
pub fn init_subnet<F: Real>(cfg: &SubnetConfig, seed: u64) -> Result<SubnetParams<F>> {
    cfg.validate()?;
    let (plan, specs) = build_plan(cfg);
    let total = specs.iter().map(TensorSpec::len).sum();
    let mut data = alloc::vec![F::zero(); total];
    let mut rng = stream(seed, &[tag::INIT]);
    for spec in &specs {
        let slice = &mut data[spec.offset..spec.offset + spec.len()];
        match spec.kind {
            TensorKind::ConvWeight { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in slice {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = F::of(n * std);
                }
            }
            TensorKind::Bias => slice.fill(F::zero()),
            TensorKind::Gamma => slice.fill(F::one()),
        }
    }
    Ok(SubnetParams {
        cfg: *cfg,
        plan,
        specs,
        data,
    })
}

impl<F: Real> SubnetParams<F> {
    pub fn config(&self) -> &SubnetConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorSpec, &[F])> {
        let spec = self.specs.iter().find(|s| s.name == name)?;
        Some((spec, &self.data[spec.offset..spec.offset + spec.len()]))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let spec = self.specs.iter().find(|s| s.name == name)?;
        let (off, len) = (spec.offset, spec.len());
        Some(&mut self.data[off..off + len])
    }

    fn w(&self, idx: usize) -> &[F] {
        let s = &self.specs[idx];
        &self.data[s.offset..s.offset + s.len()]
    }

    fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.cfg.divisor();
        for (axis, len) in ['H', 'W', 'D'].into_iter().zip(shape) {
            if len % div != 0 || len == 0 {
                return Err(Error::Indivisible {
                    axis,
                    len,
                    divisor: div,
                });
            }
        }
        Ok(())
    }

    /// Full forward pass, keeping everything the backward pass needs.
    pub fn forward(&self, volume: &Volume<F>) -> Result<(SubnetOutput<F>, ForwardCache<F>)> {
        self.check_input(volume.shape())?;
        let input = ChanGrid::from_vec(1, volume.shape(), volume.data.as_slice().to_vec())?;
        let mut acts: Vec<Arc<ChanGrid<F>>> = alloc::vec![Arc::new(input)];
        let mut slot_act = alloc::vec![usize::MAX; self.plan.n_slots];
        let mut norm_caches = Vec::new();

        for step in &self.plan.steps {
            let cur = acts.last().expect("nonempty").clone();
            let next = match step {
                Step::Conv(c) => conv3d_forward(&c.geom, &cur, self.w(c.w), self.w(c.b)),
                Step::ConvT(c) => convt3d_forward(&c.geom, &cur, self.w(c.w), self.w(c.b)),
                Step::Norm(n) => {
                    let (out, cache) =
                        instance_norm_forward(&cur, self.w(n.gamma), self.w(n.beta));
                    norm_caches.push(cache);
                    out
                }
                Step::Act => leaky_relu(&cur),
                Step::Push(slot) => {
                    slot_act[*slot] = acts.len() - 1;
                    acts.push(cur);
                    continue;
                }
                Step::AddFrom(slot) => add_grids(&cur, &acts[slot_act[*slot]]),
                Step::CatFrom(slot) => cat_channels(&acts[slot_act[*slot]], &cur)?,
            };
            acts.push(Arc::new(next));
        }

        let trunk = acts.last().expect("nonempty");
        let logits = conv3d_forward(
            &self.plan.head_logits.geom,
            trunk,
            self.w(self.plan.head_logits.w),
            self.w(self.plan.head_logits.b),
        );
        let features = conv3d_forward(
            &self.plan.head_features.geom,
            trunk,
            self.w(self.plan.head_features.w),
            self.w(self.plan.head_features.b),
        );
        Ok((
            SubnetOutput {
                logits: LogitMap(logits),
                features: FeatureMap(features),
            },
            ForwardCache {
                acts,
                slot_act,
                norm_caches,
            },
        ))
    }

    /// Inference-only forward: keeps just the live activation and the saved
    /// skips.
    pub fn forward_infer(&self, volume: &Volume<F>) -> Result<SubnetOutput<F>> {
        self.check_input(volume.shape())?;
        let input = ChanGrid::from_vec(1, volume.shape(), volume.data.as_slice().to_vec())?;
        let mut cur = Arc::new(input);
        let mut saved: Vec<Option<Arc<ChanGrid<F>>>> = alloc::vec![None; self.plan.n_slots];

        for step in &self.plan.steps {
            let next = match step {
                Step::Conv(c) => conv3d_forward(&c.geom, &cur, self.w(c.w), self.w(c.b)),
                Step::ConvT(c) => convt3d_forward(&c.geom, &cur, self.w(c.w), self.w(c.b)),
                Step::Norm(n) => {
                    instance_norm_forward(&cur, self.w(n.gamma), self.w(n.beta)).0
                }
                Step::Act => leaky_relu(&cur),
                Step::Push(slot) => {
                    saved[*slot] = Some(cur.clone());
                    continue;
                }
                Step::AddFrom(slot) => {
                    let skip = saved[*slot].as_ref().expect("slot saved");
                    add_grids(&cur, skip)
                }
                Step::CatFrom(slot) => {
                    let skip = saved[*slot].take().expect("slot saved");
                    cat_channels(&skip, &cur)?
                }
            };
            cur = Arc::new(next);
        }
        let logits = conv3d_forward(
            &self.plan.head_logits.geom,
            &cur,
            self.w(self.plan.head_logits.w),
            self.w(self.plan.head_logits.b),
        );
        let features = conv3d_forward(
            &self.plan.head_features.geom,
            &cur,
            self.w(self.plan.head_features.w),
            self.w(self.plan.head_features.b),
        );
        Ok(SubnetOutput {
            logits: LogitMap(logits),
            features: FeatureMap(features),
        })
    }

    /// Reverse pass. `d_logits` / `d_features` are gradients with respect to
    /// the two head outputs; parameter gradients accumulate into `grads`
    /// (same layout as the arena) and the input gradient is returned.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_logits: &ChanGrid<F>,
        d_features: &ChanGrid<F>,
        grads: &mut [F],
    ) -> ChanGrid<F> {
        assert_eq!(grads.len(), self.data.len());
        let n = cache.acts.len();
        let trunk = &cache.acts[n - 1];
        let trunk_shape = trunk.shape();

        let mut d_trunk = self.conv_backward_into(
            &self.plan.head_logits,
            trunk,
            trunk_shape,
            d_logits,
            grads,
        );
        let d_from_features = self.conv_backward_into(
            &self.plan.head_features,
            trunk,
            trunk_shape,
            d_features,
            grads,
        );
        add_assign(&mut d_trunk, &d_from_features);

        let mut d_acts: Vec<Option<ChanGrid<F>>> = (0..n).map(|_| None).collect();
        d_acts[n - 1] = Some(d_trunk);
        let mut norm_idx = cache.norm_caches.len();

        for (i, step) in self.plan.steps.iter().enumerate().rev() {
            let g = d_acts[i + 1].take().expect("gradient present");
            let input = &cache.acts[i];
            match step {
                Step::Conv(c) => {
                    let din = self.conv_step_backward(c, input, &g, grads);
                    deposit(&mut d_acts[i], din);
                }
                Step::ConvT(c) => {
                    let (dw, dbias) = self.grad_slices(c.w, c.b, grads);
                    convt3d_backward_params(&c.geom, input, &g, dw, dbias);
                    let din = convt3d_backward_input(&c.geom, input.shape(), &g, self.w(c.w));
                    deposit(&mut d_acts[i], din);
                }
                Step::Norm(nrm) => {
                    norm_idx -= 1;
                    let (dg, db) = self.grad_slices(nrm.gamma, nrm.beta, grads);
                    let din = instance_norm_backward(
                        input,
                        &cache.norm_caches[norm_idx],
                        self.w(nrm.gamma),
                        &g,
                        dg,
                        db,
                    );
                    deposit(&mut d_acts[i], din);
                }
                Step::Act => {
                    let din = leaky_relu_backward(input, &g);
                    deposit(&mut d_acts[i], din);
                }
                Step::Push(_) => {
                    deposit(&mut d_acts[i], g);
                }
                Step::AddFrom(slot) => {
                    deposit(&mut d_acts[cache.slot_act[*slot]], g.clone());
                    deposit(&mut d_acts[i], g);
                }
                Step::CatFrom(slot) => {
                    let src = cache.slot_act[*slot];
                    let skip_c = cache.acts[src].channels();
                    let (g_skip, g_cur) = split_channels(&g, skip_c);
                    deposit(&mut d_acts[src], g_skip);
                    deposit(&mut d_acts[i], g_cur);
                }
            }
        }
        d_acts[0].take().expect("input gradient")
    }

    fn conv_step_backward(
        &self,
        c: &ConvStep,
        input: &ChanGrid<F>,
        g: &ChanGrid<F>,
        grads: &mut [F],
    ) -> ChanGrid<F> {
        let (dw, dbias) = self.grad_slices(c.w, c.b, grads);
        conv3d_backward_params(&c.geom, input, g, dw, dbias);
        conv3d_backward_input(&c.geom, input.shape(), g, self.w(c.w))
    }

    fn conv_backward_into(
        &self,
        c: &ConvStep,
        input: &ChanGrid<F>,
        ishape: [usize; 3],
        g: &ChanGrid<F>,
        grads: &mut [F],
    ) -> ChanGrid<F> {
        let (dw, dbias) = self.grad_slices(c.w, c.b, grads);
        conv3d_backward_params(&c.geom, input, g, dw, dbias);
        conv3d_backward_input(&c.geom, ishape, g, self.w(c.w))
    }

    /// Disjoint mutable slices of the gradient arena for a (weight, bias)
    /// tensor pair.
    fn grad_slices<'g>(
        &self,
        w_idx: usize,
        b_idx: usize,
        grads: &'g mut [F],
    ) -> (&'g mut [F], &'g mut [F]) {
        let ws = &self.specs[w_idx];
        let bs = &self.specs[b_idx];
        debug_assert!(ws.offset + ws.len() <= bs.offset || bs.offset + bs.len() <= ws.offset);
        if ws.offset < bs.offset {
            let (left, right) = grads.split_at_mut(bs.offset);
            (
                &mut left[ws.offset..ws.offset + ws.len()],
                &mut right[..bs.len()],
            )
        } else {
            let (left, right) = grads.split_at_mut(ws.offset);
            (
                &mut right[..ws.len()],
                &mut left[bs.offset..bs.offset + bs.len()],
            )
        }
    }
}

fn leaky_relu<F: Real>(x: &ChanGrid<F>) -> ChanGrid<F> {
    let slope = F::of(LEAKY_SLOPE);
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        if *v < F::zero() {
            *v = *v * slope;
        }
    }
    out
}

fn leaky_relu_backward<F: Real>(input: &ChanGrid<F>, g: &ChanGrid<F>) -> ChanGrid<F> {
    let slope = F::of(LEAKY_SLOPE);
    let mut out = g.clone();
    for (o, &x) in out.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x < F::zero() {
            *o = *o * slope;
        }
    }
    out
}

fn add_grids<F: Real>(a: &ChanGrid<F>, b: &ChanGrid<F>) -> ChanGrid<F> {
    let mut out = a.clone();
    add_assign(&mut out, b);
    out
}

fn add_assign<F: Real>(a: &mut ChanGrid<F>, b: &ChanGrid<F>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

fn deposit<F: Real>(slot: &mut Option<ChanGrid<F>>, g: ChanGrid<F>) {
    match slot {
        Some(acc) => add_assign(acc, &g),
        None => *slot = Some(g),
    }
}

fn cat_channels<F: Real>(first: &ChanGrid<F>, second: &ChanGrid<F>) -> Result<ChanGrid<F>> {
    if first.shape() != second.shape() {
        return Err(Error::shape("cat_channels", first.shape(), second.shape()));
    }
    let c = first.channels() + second.channels();
    let mut out = ChanGrid::zeros(c, first.shape());
    for ch in 0..first.channels() {
        out.channel_mut(ch).copy_from_slice(first.channel(ch));
    }
    for ch in 0..second.channels() {
        out.channel_mut(first.channels() + ch)
            .copy_from_slice(second.channel(ch));
    }
    Ok(out)
}

fn split_channels<F: Real>(g: &ChanGrid<F>, first_c: usize) -> (ChanGrid<F>, ChanGrid<F>) {
    let rest = g.channels() - first_c;
    let mut a = ChanGrid::zeros(first_c, g.shape());
    let mut b = ChanGrid::zeros(rest, g.shape());
    for ch in 0..first_c {
        a.channel_mut(ch).copy_from_slice(g.channel(ch));
    }
    for ch in 0..rest {
        b.channel_mut(ch).copy_from_slice(g.channel(first_c + ch));
    }
    (a, b)
}
