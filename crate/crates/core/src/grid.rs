//! Dense 3D grids.
//!
//! `Grid3<T>` is a scalar field over an H×W×D lattice; `ChanGrid<F>` adds a
//! leading channel axis (C×H×W×D). Memory is channel-major with the D axis
//! fastest: `index = ((c·H + h)·W + w)·D + d`. Convolution kernels rely on
//! contiguous D-runs, and batches are stacked along H (the outermost spatial
//! axis) so stacking is a plain buffer append per channel.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![T::default(); shape[0] * shape[1] * shape[2]],
        }
    }
}

impl<T: Copy> Grid3<T> {
    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::argument("grid data length does not match shape"));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.shape[1] + w) * self.shape[2] + d
    }

    /// Inverse of [`idx`](Self::idx).
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let d = index % self.shape[2];
        let rest = index / self.shape[2];
        (rest / self.shape[1], rest % self.shape[1], d)
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> T {
        self.data[self.idx(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, value: T) {
        let i = self.idx(h, w, d);
        self.data[i] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy the `crop`-shaped sub-grid starting at `offset`.
    pub fn crop(&self, offset: [usize; 3], crop: [usize; 3]) -> Result<Grid3<T>> {
        for a in 0..3 {
            if offset[a] + crop[a] > self.shape[a] {
                return Err(Error::argument("crop window exceeds grid extent"));
            }
        }
        let mut data = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
        for h in 0..crop[0] {
            for w in 0..crop[1] {
                let base = self.idx(offset[0] + h, offset[1] + w, offset[2]);
                data.extend_from_slice(&self.data[base..base + crop[2]]);
            }
        }
        Ok(Grid3 { shape: crop, data })
    }

    /// Concatenate along H. All parts must share W and D.
    pub fn stack_h(parts: &[&Grid3<T>]) -> Result<Grid3<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::argument("stack_h: empty part list"))?;
        let [_, w, d] = first.shape;
        let mut total_h = 0;
        for p in parts {
            if p.shape[1] != w || p.shape[2] != d {
                return Err(Error::shape("stack_h", first.shape, p.shape));
            }
            total_h += p.shape[0];
        }
        let mut data = Vec::with_capacity(total_h * w * d);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Grid3 {
            shape: [total_h, w, d],
            data,
        })
    }
}

impl<F: Real> Grid3<F> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Grid3<G> {
        self.map(|v| G::of(v.as_f64()))
    }
}

/// Channel-major stack of scalar fields (C×H×W×D).
#[derive(Clone, Debug, PartialEq)]
pub struct ChanGrid<F> {
    channels: usize,
    shape: [usize; 3],
    data: Vec<F>,
}

impl<F: Real> ChanGrid<F> {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self {
            channels,
            shape,
            data: vec![F::zero(); channels * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(channels: usize, shape: [usize; 3], data: Vec<F>) -> Result<Self> {
        if data.len() != channels * shape[0] * shape[1] * shape[2] {
            return Err(Error::argument(
                "channel grid data length does not match shape",
            ));
        }
        Ok(Self {
            channels,
            shape,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Number of voxels in one channel slab.
    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[F] {
        let s = self.spatial_len();
        &self.data[c * s..(c + 1) * s]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let s = self.spatial_len();
        &mut self.data[c * s..(c + 1) * s]
    }

    /// Value at channel `c`, voxel `v` (linear spatial index).
    #[inline]
    pub fn at(&self, c: usize, v: usize) -> F {
        self.data[c * self.spatial_len() + v]
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ChanGrid<G> {
        ChanGrid {
            channels: self.channels,
            shape: self.shape,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    /// Concatenate along H, channel by channel.
    pub fn stack_h(parts: &[&ChanGrid<F>]) -> Result<ChanGrid<F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::argument("stack_h: empty part list"))?;
        let c = first.channels;
        let [_, w, d] = first.shape;
        let mut total_h = 0;
        for p in parts {
            if p.channels != c || p.shape[1] != w || p.shape[2] != d {
                return Err(Error::shape("stack_h", first.shape, p.shape));
            }
            total_h += p.shape[0];
        }
        let mut out = ChanGrid::zeros(c, [total_h, w, d]);
        for ch in 0..c {
            let slab = out.channel_mut(ch);
            let mut at = 0;
            for p in parts {
                let src = p.channel(ch);
                slab[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(out)
    }

    /// Split a stacked grid back into `parts` pieces of `part_h` rows each.
    pub fn unstack_h(&self, parts: usize, part_h: usize) -> Result<Vec<ChanGrid<F>>> {
        if parts * part_h != self.shape[0] {
            return Err(Error::argument("unstack_h: row count mismatch"));
        }
        let sub = [part_h, self.shape[1], self.shape[2]];
        let sub_len = part_h * self.shape[1] * self.shape[2];
        let mut out = Vec::with_capacity(parts);
        for p in 0..parts {
            let mut piece = ChanGrid::zeros(self.channels, sub);
            for c in 0..self.channels {
                let src = &self.channel(c)[p * sub_len..(p + 1) * sub_len];
                piece.channel_mut(c).copy_from_slice(src);
            }
            out.push(piece);
        }
        Ok(out)
    }
}
