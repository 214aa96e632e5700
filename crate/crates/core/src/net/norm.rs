//! Instance normalization: per-channel mean/variance over the spatial
//! extent of a single sample. Batch statistics would couple the labeled and
//! unlabeled samples sharing a step, so batch norm is not an option here.

use alloc::vec::Vec;

use crate::grid::ChanGrid;
use crate::par::par_chunks_mut;
use crate::real::Real;

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<F> {
    pub mean: Vec<F>,
    pub inv_std: Vec<F>,
}

pub fn instance_norm_forward<F: Real>(
    input: &ChanGrid<F>,
    gamma: &[F],
    beta: &[F],
) -> (ChanGrid<F>, NormCache<F>) {
    let c = input.channels();
    let s = input.spatial_len();
    let inv_n = F::of(1.0 / s as f64);
    let eps = F::of(NORM_EPS);
    let mut out = ChanGrid::zeros(c, input.shape());
    let mut mean = alloc::vec![F::zero(); c];
    let mut inv_std = alloc::vec![F::zero(); c];

    // two-pass mean/variance per channel, then the affine transform
    for ch in 0..c {
        let slab = input.channel(ch);
        let mut m = F::zero();
        for &x in slab {
            m += x;
        }
        m *= inv_n;
        let mut var = F::zero();
        for &x in slab {
            let d = x - m;
            var += d * d;
        }
        var *= inv_n;
        mean[ch] = m;
        inv_std[ch] = F::one() / (var + eps).sqrt();
    }
    par_chunks_mut(out.as_mut_slice(), s, |ch, out_slab| {
        let slab = input.channel(ch);
        let (m, istd, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for (o, &x) in out_slab.iter_mut().zip(slab) {
            *o = g * (x - m) * istd + b;
        }
    });
    (out, NormCache { mean, inv_std })
}

/// Returns the input gradient and accumulates dγ/dβ.
pub fn instance_norm_backward<F: Real>(
    input: &ChanGrid<F>,
    cache: &NormCache<F>,
    gamma: &[F],
    grad_out: &ChanGrid<F>,
    d_gamma: &mut [F],
    d_beta: &mut [F],
) -> ChanGrid<F> {
    let c = input.channels();
    let s = input.spatial_len();
    let inv_n = F::of(1.0 / s as f64);
    let mut din = ChanGrid::zeros(c, input.shape());

    // dβ and dγ first (they need reductions over the slab)
    let mut sum_dy = alloc::vec![F::zero(); c];
    let mut sum_dy_xhat = alloc::vec![F::zero(); c];
    for ch in 0..c {
        let g_slab = grad_out.channel(ch);
        let x_slab = input.channel(ch);
        let (m, istd) = (cache.mean[ch], cache.inv_std[ch]);
        let mut sd = F::zero();
        let mut sdx = F::zero();
        for (&gy, &x) in g_slab.iter().zip(x_slab) {
            sd += gy;
            sdx += gy * (x - m) * istd;
        }
        sum_dy[ch] = sd;
        sum_dy_xhat[ch] = sdx;
        d_beta[ch] += sd;
        d_gamma[ch] += sdx;
    }

    // dx = γ·istd·(dy − mean(dy) − x̂·mean(dy·x̂))
    par_chunks_mut(din.as_mut_slice(), s, |ch, din_slab| {
        let g_slab = grad_out.channel(ch);
        let x_slab = input.channel(ch);
        let (m, istd, g) = (cache.mean[ch], cache.inv_std[ch], gamma[ch]);
        let mean_dy = sum_dy[ch] * inv_n;
        let mean_dy_xhat = sum_dy_xhat[ch] * inv_n;
        for ((o, &gy), &x) in din_slab.iter_mut().zip(g_slab).zip(x_slab) {
            let xhat = (x - m) * istd;
            *o = g * istd * (gy - mean_dy - xhat * mean_dy_xhat);
        }
    });
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_variance() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let x = ChanGrid::from_vec(2, [1, 3, 4], data).unwrap();
        let gamma = alloc::vec![1.0; 2];
        let beta = alloc::vec![0.0; 2];
        let (y, _) = instance_norm_forward(&x, &gamma, &beta);
        for ch in 0..2 {
            let slab = y.channel(ch);
            let n = slab.len() as f64;
            let mean: f64 = slab.iter().sum::<f64>() / n;
            let var: f64 = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = ChanGrid::from_vec(1, [1, 2, 2], alloc::vec![5.0f64; 4]).unwrap();
        let (y, _) = instance_norm_forward(&x, &[2.0], &[0.7]);
        for &v in y.channel(0) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let x = ChanGrid::from_vec(2, [1, 2, 4], data).unwrap();
        let mut gamma = alloc::vec![1.3, 0.8];
        let mut beta = alloc::vec![0.1, -0.2];
        let gout = ChanGrid::from_vec(
            2,
            [1, 2, 4],
            (0..16).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect(),
        )
        .unwrap();

        let objective = |x: &ChanGrid<f64>, gamma: &[f64], beta: &[f64]| -> f64 {
            let (y, _) = instance_norm_forward(x, gamma, beta);
            y.as_slice()
                .iter()
                .zip(gout.as_slice())
                .map(|(a, g)| a * g)
                .sum()
        };

        let (_, cache) = instance_norm_forward(&x, &gamma, &beta);
        let mut dg = alloc::vec![0.0; 2];
        let mut db = alloc::vec![0.0; 2];
        let din = instance_norm_backward(&x, &cache, &gamma, &gout, &mut dg, &mut db);

        let h = 1e-6;
        let mut xp = x.clone();
        for i in 0..16 {
            let orig = xp.as_slice()[i];
            xp.as_mut_slice()[i] = orig + h;
            let up = objective(&xp, &gamma, &beta);
            xp.as_mut_slice()[i] = orig - h;
            let dn = objective(&xp, &gamma, &beta);
            xp.as_mut_slice()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - din.as_slice()[i]).abs() < 1e-7,
                "din[{i}] {fd} vs {}",
                din.as_slice()[i]
            );
        }
        for ch in 0..2 {
            let orig = gamma[ch];
            gamma[ch] = orig + h;
            let up = objective(&x, &gamma, &beta);
            gamma[ch] = orig - h;
            let dn = objective(&x, &gamma, &beta);
            gamma[ch] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dg[ch]).abs() < 1e-7);

            let orig = beta[ch];
            beta[ch] = orig + h;
            let up = objective(&x, &gamma, &beta);
            beta[ch] = orig - h;
            let dn = objective(&x, &gamma, &beta);
            beta[ch] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - db[ch]).abs() < 1e-7);
        }
    }
}
