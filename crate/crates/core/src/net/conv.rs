//! 3D convolution kernels: forward, input gradient, weight gradient, plus
//! the stride-2 transposed convolution used for upsampling.
//!
//! Weight layouts: convolution `[co][ci][kh][kw][kd]`, transposed
//! convolution `[ci][co][kh][kw][kd]`. The stride-1 paths run per-row axpy /
//! dot loops over contiguous D-runs; strided variants use plain gather
//! loops (they only ever touch the coarse grids).

use crate::grid::ChanGrid;
use crate::par::par_chunks_mut;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.co * self.ci * self.k * self.k * self.k
    }

    pub fn out_shape(&self, input: [usize; 3]) -> [usize; 3] {
        core::array::from_fn(|a| (input[a] + 2 * self.pad - self.k) / self.stride + 1)
    }
}

#[inline]
fn axpy<F: Real>(out: &mut [F], a: F, x: &[F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Valid output range along one axis for a given kernel offset (stride 1):
/// all `o` with `o + kk − pad ∈ [0, len_in)`.
#[inline]
fn s1_range(len_in: usize, len_out: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = core::cmp::min(len_out, (len_in + pad).saturating_sub(kk));
    (lo.min(hi), hi)
}

pub fn conv3d_forward<F: Real>(
    geom: &ConvGeom,
    input: &ChanGrid<F>,
    weights: &[F],
    bias: &[F],
) -> ChanGrid<F> {
    debug_assert_eq!(input.channels(), geom.ci);
    debug_assert_eq!(weights.len(), geom.weight_len());
    let ishape = input.shape();
    let oshape = geom.out_shape(ishape);
    let mut out = ChanGrid::zeros(geom.co, oshape);
    let sp_out = oshape[0] * oshape[1] * oshape[2];
    let k3 = geom.k * geom.k * geom.k;

    par_chunks_mut(out.as_mut_slice(), sp_out, |co, out_slab| {
        out_slab.fill(bias[co]);
        for ci in 0..geom.ci {
            let in_slab = input.channel(ci);
            let w = &weights[(co * geom.ci + ci) * k3..][..k3];
            if geom.stride == 1 {
                conv_accum_s1(out_slab, in_slab, w, geom, ishape, oshape);
            } else {
                conv_accum_strided(out_slab, in_slab, w, geom, ishape, oshape);
            }
        }
    });
    out
}

fn conv_accum_s1<F: Real>(
    out_slab: &mut [F],
    in_slab: &[F],
    w: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    let k = geom.k;
    let pad = geom.pad;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for kh in 0..k {
        let (oh0, oh1) = s1_range(ih_n, oh_n, kh, pad);
        for kw in 0..k {
            let (ow0, ow1) = s1_range(iw_n, ow_n, kw, pad);
            for kd in 0..k {
                let (od0, od1) = s1_range(id_n, od_n, kd, pad);
                if od0 >= od1 {
                    continue;
                }
                let wv = w[(kh * k + kw) * k + kd];
                let run = od1 - od0;
                for oh in oh0..oh1 {
                    let ih = oh + kh - pad;
                    for ow in ow0..ow1 {
                        let iw = ow + kw - pad;
                        let obase = (oh * ow_n + ow) * od_n + od0;
                        let ibase = (ih * iw_n + iw) * id_n + (od0 + kd - pad);
                        axpy(
                            &mut out_slab[obase..obase + run],
                            wv,
                            &in_slab[ibase..ibase + run],
                        );
                    }
                }
            }
        }
    }
}

fn conv_accum_strided<F: Real>(
    out_slab: &mut [F],
    in_slab: &[F],
    w: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    let k = geom.k;
    let s = geom.stride;
    let pad = geom.pad as isize;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            for od in 0..od_n {
                let mut acc = F::zero();
                for kh in 0..k {
                    let ih = (oh * s + kh) as isize - pad;
                    if ih < 0 || ih >= ih_n as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * s + kw) as isize - pad;
                        if iw < 0 || iw >= iw_n as isize {
                            continue;
                        }
                        for kd in 0..k {
                            let id = (od * s + kd) as isize - pad;
                            if id < 0 || id >= id_n as isize {
                                continue;
                            }
                            let iidx = (ih as usize * iw_n + iw as usize) * id_n + id as usize;
                            acc += w[(kh * k + kw) * k + kd] * in_slab[iidx];
                        }
                    }
                }
                out_slab[(oh * ow_n + ow) * od_n + od] += acc;
            }
        }
    }
}

/// Gradient with respect to the convolution input.
pub fn conv3d_backward_input<F: Real>(
    geom: &ConvGeom,
    ishape: [usize; 3],
    grad_out: &ChanGrid<F>,
    weights: &[F],
) -> ChanGrid<F> {
    let oshape = grad_out.shape();
    let mut din = ChanGrid::zeros(geom.ci, ishape);
    let sp_in = ishape[0] * ishape[1] * ishape[2];
    let k3 = geom.k * geom.k * geom.k;

    par_chunks_mut(din.as_mut_slice(), sp_in, |ci, din_slab| {
        for co in 0..geom.co {
            let g_slab = grad_out.channel(co);
            let w = &weights[(co * geom.ci + ci) * k3..][..k3];
            if geom.stride == 1 {
                dinput_accum_s1(din_slab, g_slab, w, geom, ishape, oshape);
            } else {
                dinput_accum_strided(din_slab, g_slab, w, geom, ishape, oshape);
            }
        }
    });
    din
}

fn dinput_accum_s1<F: Real>(
    din_slab: &mut [F],
    g_slab: &[F],
    w: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    // d_in(i) += Σ w(k)·g(i − k + pad): same row structure with flipped
    // offsets.
    let k = geom.k;
    let pad = geom.pad;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for kh in 0..k {
        // valid input rows: oh = ih − kh + pad ∈ [0, oh_n)
        let ih0 = kh.saturating_sub(pad);
        let ih_end = core::cmp::min(ih_n, (oh_n + kh).saturating_sub(pad));
        for kw in 0..k {
            let iw0 = kw.saturating_sub(pad);
            let iw_end = core::cmp::min(iw_n, (ow_n + kw).saturating_sub(pad));
            for kd in 0..k {
                let id0 = kd.saturating_sub(pad);
                let id_end = core::cmp::min(id_n, (od_n + kd).saturating_sub(pad));
                if id0 >= id_end {
                    continue;
                }
                let wv = w[(kh * k + kw) * k + kd];
                let run = id_end - id0;
                for ih in ih0..ih_end {
                    let oh = ih + pad - kh;
                    for iw in iw0..iw_end {
                        let ow = iw + pad - kw;
                        let ibase = (ih * iw_n + iw) * id_n + id0;
                        let obase = (oh * ow_n + ow) * od_n + (id0 + pad - kd);
                        axpy(
                            &mut din_slab[ibase..ibase + run],
                            wv,
                            &g_slab[obase..obase + run],
                        );
                    }
                }
            }
        }
    }
}

fn dinput_accum_strided<F: Real>(
    din_slab: &mut [F],
    g_slab: &[F],
    w: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    let k = geom.k;
    let s = geom.stride;
    let pad = geom.pad as isize;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for ih in 0..ih_n {
        for iw in 0..iw_n {
            for id in 0..id_n {
                let mut acc = F::zero();
                for kh in 0..k {
                    let t = ih as isize + pad - kh as isize;
                    if t < 0 || t % s as isize != 0 {
                        continue;
                    }
                    let oh = (t / s as isize) as usize;
                    if oh >= oh_n {
                        continue;
                    }
                    for kw in 0..k {
                        let t = iw as isize + pad - kw as isize;
                        if t < 0 || t % s as isize != 0 {
                            continue;
                        }
                        let ow = (t / s as isize) as usize;
                        if ow >= ow_n {
                            continue;
                        }
                        for kd in 0..k {
                            let t = id as isize + pad - kd as isize;
                            if t < 0 || t % s as isize != 0 {
                                continue;
                            }
                            let od = (t / s as isize) as usize;
                            if od >= od_n {
                                continue;
                            }
                            acc += w[(kh * k + kw) * k + kd]
                                * g_slab[(oh * ow_n + ow) * od_n + od];
                        }
                    }
                }
                din_slab[(ih * iw_n + iw) * id_n + id] += acc;
            }
        }
    }
}

/// Gradients with respect to weights and bias, accumulated into the given
/// slices.
pub fn conv3d_backward_params<F: Real>(
    geom: &ConvGeom,
    input: &ChanGrid<F>,
    grad_out: &ChanGrid<F>,
    dw: &mut [F],
    db: &mut [F],
) {
    let ishape = input.shape();
    let oshape = grad_out.shape();
    let k = geom.k;
    let k3 = k * k * k;
    let per_co = geom.ci * k3;
    debug_assert_eq!(dw.len(), geom.weight_len());

    par_chunks_mut(dw, per_co, |co, dw_co| {
        let g_slab = grad_out.channel(co);
        for ci in 0..geom.ci {
            let in_slab = input.channel(ci);
            let dw_k = &mut dw_co[ci * k3..(ci + 1) * k3];
            if geom.stride == 1 {
                dweight_accum_s1(dw_k, in_slab, g_slab, geom, ishape, oshape);
            } else {
                dweight_accum_strided(dw_k, in_slab, g_slab, geom, ishape, oshape);
            }
        }
    });

    par_chunks_mut(db, 1, |co, db_co| {
        let mut acc = F::zero();
        for &g in grad_out.channel(co) {
            acc += g;
        }
        db_co[0] += acc;
    });
}

fn dweight_accum_s1<F: Real>(
    dw_k: &mut [F],
    in_slab: &[F],
    g_slab: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    let k = geom.k;
    let pad = geom.pad;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for kh in 0..k {
        let (oh0, oh1) = s1_range(ih_n, oh_n, kh, pad);
        for kw in 0..k {
            let (ow0, ow1) = s1_range(iw_n, ow_n, kw, pad);
            for kd in 0..k {
                let (od0, od1) = s1_range(id_n, od_n, kd, pad);
                if od0 >= od1 {
                    continue;
                }
                let run = od1 - od0;
                let mut acc = F::zero();
                for oh in oh0..oh1 {
                    let ih = oh + kh - pad;
                    for ow in ow0..ow1 {
                        let iw = ow + kw - pad;
                        let obase = (oh * ow_n + ow) * od_n + od0;
                        let ibase = (ih * iw_n + iw) * id_n + (od0 + kd - pad);
                        acc += dot(&g_slab[obase..obase + run], &in_slab[ibase..ibase + run]);
                    }
                }
                dw_k[(kh * k + kw) * k + kd] += acc;
            }
        }
    }
}

fn dweight_accum_strided<F: Real>(
    dw_k: &mut [F],
    in_slab: &[F],
    g_slab: &[F],
    geom: &ConvGeom,
    ishape: [usize; 3],
    oshape: [usize; 3],
) {
    let k = geom.k;
    let s = geom.stride;
    let pad = geom.pad as isize;
    let [ih_n, iw_n, id_n] = ishape;
    let [oh_n, ow_n, od_n] = oshape;
    for kh in 0..k {
        for kw in 0..k {
            for kd in 0..k {
                let mut acc = F::zero();
                for oh in 0..oh_n {
                    let ih = (oh * s + kh) as isize - pad;
                    if ih < 0 || ih >= ih_n as isize {
                        continue;
                    }
                    for ow in 0..ow_n {
                        let iw = (ow * s + kw) as isize - pad;
                        if iw < 0 || iw >= iw_n as isize {
                            continue;
                        }
                        for od in 0..od_n {
                            let id = (od * s + kd) as isize - pad;
                            if id < 0 || id >= id_n as isize {
                                continue;
                            }
                            acc += g_slab[(oh * ow_n + ow) * od_n + od]
                                * in_slab[(ih as usize * iw_n + iw as usize) * id_n + id as usize];
                        }
                    }
                }
                dw_k[(kh * k + kw) * k + kd] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// stride-2 transposed convolution (kernel 2, padding 0): exact 2× upsampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub ci: usize,
    pub co: usize,
}

pub const CONVT_K: usize = 2;

impl ConvTGeom {
    pub fn weight_len(&self) -> usize {
        self.ci * self.co * CONVT_K * CONVT_K * CONVT_K
    }

    pub fn out_shape(&self, input: [usize; 3]) -> [usize; 3] {
        core::array::from_fn(|a| input[a] * 2)
    }
}

pub fn convt3d_forward<F: Real>(
    geom: &ConvTGeom,
    input: &ChanGrid<F>,
    weights: &[F],
    bias: &[F],
) -> ChanGrid<F> {
    let ishape = input.shape();
    let oshape = geom.out_shape(ishape);
    let [ih_n, iw_n, id_n] = ishape;
    let [_, ow_n, od_n] = oshape;
    let k3 = CONVT_K * CONVT_K * CONVT_K;
    let mut out = ChanGrid::zeros(geom.co, oshape);
    let sp_out = oshape[0] * oshape[1] * oshape[2];

    par_chunks_mut(out.as_mut_slice(), sp_out, |co, out_slab| {
        out_slab.fill(bias[co]);
        for ci in 0..geom.ci {
            let in_slab = input.channel(ci);
            let w = &weights[(ci * geom.co + co) * k3..][..k3];
            for kh in 0..CONVT_K {
                for kw in 0..CONVT_K {
                    for kd in 0..CONVT_K {
                        let wv = w[(kh * CONVT_K + kw) * CONVT_K + kd];
                        for h in 0..ih_n {
                            let oh = 2 * h + kh;
                            for iw in 0..iw_n {
                                let ow = 2 * iw + kw;
                                let ibase = (h * iw_n + iw) * id_n;
                                let obase = (oh * ow_n + ow) * od_n + kd;
                                for d in 0..id_n {
                                    out_slab[obase + 2 * d] += wv * in_slab[ibase + d];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn convt3d_backward_input<F: Real>(
    geom: &ConvTGeom,
    ishape: [usize; 3],
    grad_out: &ChanGrid<F>,
    weights: &[F],
) -> ChanGrid<F> {
    let [ih_n, iw_n, id_n] = ishape;
    let [_, ow_n, od_n] = grad_out.shape();
    let k3 = CONVT_K * CONVT_K * CONVT_K;
    let mut din = ChanGrid::zeros(geom.ci, ishape);
    let sp_in = ishape[0] * ishape[1] * ishape[2];

    par_chunks_mut(din.as_mut_slice(), sp_in, |ci, din_slab| {
        for co in 0..geom.co {
            let g_slab = grad_out.channel(co);
            let w = &weights[(ci * geom.co + co) * k3..][..k3];
            for kh in 0..CONVT_K {
                for kw in 0..CONVT_K {
                    for kd in 0..CONVT_K {
                        let wv = w[(kh * CONVT_K + kw) * CONVT_K + kd];
                        for h in 0..ih_n {
                            let oh = 2 * h + kh;
                            for iw in 0..iw_n {
                                let ow = 2 * iw + kw;
                                let ibase = (h * iw_n + iw) * id_n;
                                let obase = (oh * ow_n + ow) * od_n + kd;
                                for d in 0..id_n {
                                    din_slab[ibase + d] += wv * g_slab[obase + 2 * d];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    din
}

pub fn convt3d_backward_params<F: Real>(
    geom: &ConvTGeom,
    input: &ChanGrid<F>,
    grad_out: &ChanGrid<F>,
    dw: &mut [F],
    db: &mut [F],
) {
    let [ih_n, iw_n, id_n] = input.shape();
    let [_, ow_n, od_n] = grad_out.shape();
    let k3 = CONVT_K * CONVT_K * CONVT_K;
    let per_ci = geom.co * k3;

    par_chunks_mut(dw, per_ci, |ci, dw_ci| {
        let in_slab = input.channel(ci);
        for co in 0..geom.co {
            let g_slab = grad_out.channel(co);
            let dw_k = &mut dw_ci[co * k3..(co + 1) * k3];
            for kh in 0..CONVT_K {
                for kw in 0..CONVT_K {
                    for kd in 0..CONVT_K {
                        let mut acc = F::zero();
                        for h in 0..ih_n {
                            let oh = 2 * h + kh;
                            for iw in 0..iw_n {
                                let ow = 2 * iw + kw;
                                let ibase = (h * iw_n + iw) * id_n;
                                let obase = (oh * ow_n + ow) * od_n + kd;
                                for d in 0..id_n {
                                    acc += in_slab[ibase + d] * g_slab[obase + 2 * d];
                                }
                            }
                        }
                        dw_k[(kh * CONVT_K + kw) * CONVT_K + kd] += acc;
                    }
                }
            }
        }
    });

    par_chunks_mut(db, 1, |co, db_co| {
        let mut acc = F::zero();
        for &g in grad_out.channel(co) {
            acc += g;
        }
        db_co[0] += acc;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: direct six-level loop.
    fn conv_reference(
        geom: &ConvGeom,
        input: &ChanGrid<f64>,
        w: &[f64],
        b: &[f64],
    ) -> ChanGrid<f64> {
        let ishape = input.shape();
        let oshape = geom.out_shape(ishape);
        let mut out = ChanGrid::zeros(geom.co, oshape);
        let k = geom.k;
        for co in 0..geom.co {
            for oh in 0..oshape[0] {
                for ow in 0..oshape[1] {
                    for od in 0..oshape[2] {
                        let mut acc = b[co];
                        for ci in 0..geom.ci {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for kd in 0..k {
                                        let ih = (oh * geom.stride + kh) as isize
                                            - geom.pad as isize;
                                        let iw = (ow * geom.stride + kw) as isize
                                            - geom.pad as isize;
                                        let id = (od * geom.stride + kd) as isize
                                            - geom.pad as isize;
                                        if ih < 0
                                            || iw < 0
                                            || id < 0
                                            || ih >= ishape[0] as isize
                                            || iw >= ishape[1] as isize
                                            || id >= ishape[2] as isize
                                        {
                                            continue;
                                        }
                                        let iv = input.channel(ci)
                                            [(ih as usize * ishape[1] + iw as usize) * ishape[2]
                                                + id as usize];
                                        let wv = w[(((co * geom.ci + ci) * k + kh) * k + kw) * k
                                            + kd];
                                        acc += wv * iv;
                                    }
                                }
                            }
                        }
                        let oi = (oh * oshape[1] + ow) * oshape[2] + od;
                        out.channel_mut(co)[oi] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_grid(c: usize, shape: [usize; 3], seed: u64) -> ChanGrid<f64> {
        let mut state = seed;
        let n = c * shape[0] * shape[1] * shape[2];
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state = crate::rng::splitmix64(state);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        ChanGrid::from_vec(c, shape, data).unwrap()
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        rand_grid(1, [1, 1, n], seed).as_slice().to_vec()
    }

    #[test]
    fn forward_matches_reference_s1() {
        let geom = ConvGeom {
            ci: 3,
            co: 2,
            k: 3,
            stride: 1,
            pad: 1,
        };
        let input = rand_grid(3, [4, 5, 6], 1);
        let w = rand_vec(geom.weight_len(), 2);
        let b = rand_vec(geom.co, 3);
        let fast = conv3d_forward(&geom, &input, &w, &b);
        let slow = conv_reference(&geom, &input, &w, &b);
        for (a, bb) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_reference_strided() {
        let geom = ConvGeom {
            ci: 2,
            co: 4,
            k: 2,
            stride: 2,
            pad: 0,
        };
        let input = rand_grid(2, [4, 6, 8], 4);
        let w = rand_vec(geom.weight_len(), 5);
        let b = rand_vec(geom.co, 6);
        let fast = conv3d_forward(&geom, &input, &w, &b);
        let slow = conv_reference(&geom, &input, &w, &b);
        assert_eq!(fast.shape(), [2, 3, 4]);
        for (a, bb) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_reference_k1() {
        let geom = ConvGeom {
            ci: 4,
            co: 3,
            k: 1,
            stride: 1,
            pad: 0,
        };
        let input = rand_grid(4, [3, 3, 5], 7);
        let w = rand_vec(geom.weight_len(), 8);
        let b = rand_vec(geom.co, 9);
        let fast = conv3d_forward(&geom, &input, &w, &b);
        let slow = conv_reference(&geom, &input, &w, &b);
        for (a, bb) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    /// Backward passes validated against finite differences of the forward.
    #[test]
    fn backward_matches_finite_differences() {
        for geom in [
            ConvGeom {
                ci: 2,
                co: 2,
                k: 3,
                stride: 1,
                pad: 1,
            },
            ConvGeom {
                ci: 2,
                co: 3,
                k: 2,
                stride: 2,
                pad: 0,
            },
            ConvGeom {
                ci: 3,
                co: 2,
                k: 1,
                stride: 1,
                pad: 0,
            },
        ] {
            let ishape = [4, 4, 4];
            let input = rand_grid(geom.ci, ishape, 11);
            let mut w = rand_vec(geom.weight_len(), 12);
            let b = rand_vec(geom.co, 13);
            let gout = rand_grid(geom.co, geom.out_shape(ishape), 14);

            // scalar objective: sum(forward ⊙ gout)
            let objective = |input: &ChanGrid<f64>, w: &[f64]| -> f64 {
                let out = conv3d_forward(&geom, input, w, &b);
                out.as_slice()
                    .iter()
                    .zip(gout.as_slice())
                    .map(|(a, g)| a * g)
                    .sum()
            };

            let din = conv3d_backward_input(&geom, ishape, &gout, &w);
            let mut dw = alloc::vec![0.0; geom.weight_len()];
            let mut db = alloc::vec![0.0; geom.co];
            conv3d_backward_params(&geom, &input, &gout, &mut dw, &mut db);

            let h = 1e-6;
            let mut inp = input.clone();
            for i in (0..inp.as_slice().len()).step_by(7) {
                let orig = inp.as_slice()[i];
                inp.as_mut_slice()[i] = orig + h;
                let up = objective(&inp, &w);
                inp.as_mut_slice()[i] = orig - h;
                let dn = objective(&inp, &w);
                inp.as_mut_slice()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - din.as_slice()[i]).abs() < 1e-6,
                    "din[{i}]: fd {fd} vs {}",
                    din.as_slice()[i]
                );
            }
            for i in 0..w.len() {
                let orig = w[i];
                w[i] = orig + h;
                let up = objective(&input, &w);
                w[i] = orig - h;
                let dn = objective(&input, &w);
                w[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]: fd {fd} vs {}", dw[i]);
            }
            // bias gradient: sum of gout per channel
            for co in 0..geom.co {
                let expect: f64 = gout.channel(co).iter().sum();
                assert!((db[co] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transposed_conv_round_trip_shapes_and_fd() {
        let geom = ConvTGeom { ci: 2, co: 3 };
        let ishape = [2, 3, 2];
        let input = rand_grid(geom.ci, ishape, 21);
        let mut w = rand_vec(geom.weight_len(), 22);
        let b = rand_vec(geom.co, 23);
        let out = convt3d_forward(&geom, &input, &w, &b);
        assert_eq!(out.shape(), [4, 6, 4]);

        let gout = rand_grid(geom.co, out.shape(), 24);
        let objective = |input: &ChanGrid<f64>, w: &[f64]| -> f64 {
            let out = convt3d_forward(&geom, input, w, &b);
            out.as_slice()
                .iter()
                .zip(gout.as_slice())
                .map(|(a, g)| a * g)
                .sum()
        };
        let din = convt3d_backward_input(&geom, ishape, &gout, &w);
        let mut dw = alloc::vec![0.0; geom.weight_len()];
        let mut db = alloc::vec![0.0; geom.co];
        convt3d_backward_params(&geom, &input, &gout, &mut dw, &mut db);

        let h = 1e-6;
        let mut inp = input.clone();
        for i in 0..inp.as_slice().len() {
            let orig = inp.as_slice()[i];
            inp.as_mut_slice()[i] = orig + h;
            let up = objective(&inp, &w);
            inp.as_mut_slice()[i] = orig - h;
            let dn = objective(&inp, &w);
            inp.as_mut_slice()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - din.as_slice()[i]).abs() < 1e-6);
        }
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let up = objective(&input, &w);
            w[i] = orig - h;
            let dn = objective(&input, &w);
            w[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for co in 0..geom.co {
            let expect: f64 = gout.channel(co).iter().sum();
            assert!((db[co] - expect).abs() < 1e-9);
        }
    }
}
