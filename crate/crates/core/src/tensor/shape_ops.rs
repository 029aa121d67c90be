//! Reshaping, permutation, slicing, padding and resampling of indices.
//!
//! Most of these are expressed as a gather through an index map: output
//! element `i` reads input element `map[i]` (or zero for [`NONE`]). The
//! backward rule scatters the output gradient through the same map.

use std::rc::Rc;

use super::broadcast::{broadcast_map, strides};
use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

const NONE: usize = usize::MAX;

/// Padding mode for [`Tensor::pad_last`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

impl Tensor {
    fn gather(&self, op: &'static str, out_shape: Vec<usize>, map: Vec<usize>) -> Result<Tensor> {
        let data: Vec<f32> = {
            let x = self.data();
            map.iter().map(|&i| if i == NONE { 0.0 } else { x[i] }).collect()
        };
        let map = Rc::new(map);
        let n_in = self.numel();
        Tensor::from_op(op, out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (&i, &gv) in map.iter().zip(g) {
                if i != NONE {
                    gx[i] += gv;
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            );
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Inserts a size-1 axis.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return shape_err("unsqueeze", format!("axis {axis} > rank {}", self.rank()));
        }
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    /// Removes a size-1 axis.
    pub fn squeeze(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() || self.dim(axis) != 1 {
            return shape_err("squeeze", format!("axis {axis} of {:?} is not 1", self.shape()));
        }
        let mut s = self.shape().to_vec();
        s.remove(axis);
        self.reshape(&s)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("invalid permutation {axes:?} for rank {rank}"));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.dim(a)).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = index_map(&out_shape, |idx| {
            idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum()
        });
        self.gather("permute", out_shape, map)
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        if a >= self.rank() || b >= self.rank() {
            return shape_err("transpose", format!("axes ({a},{b}) out of range"));
        }
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.dim(axis) {
            return shape_err(
                "narrow",
                format!("slice {start}+{len} on axis {axis} of {:?}", self.shape()),
            );
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let n = self.dim(axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * n + a) * inner;
                map.extend(base..base + inner);
            }
        }
        self.gather("narrow", out_shape, map)
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.dim(axis) {
            return shape_err("split", format!("sizes {sizes:?} on {:?}", self.shape()));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} >= rank {rank}"));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && (0..rank).all(|i| i == axis || t.dim(i) == first.dim(i));
            if !ok {
                return shape_err(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", t.shape(), first.shape()),
                );
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let bufs: Vec<_> = tensors.iter().map(|t| t.data()).collect();
            for o in 0..outer {
                for (buf, &s) in bufs.iter().zip(&sizes) {
                    data.extend_from_slice(&buf[o * s * inner..(o + 1) * s * inner]);
                }
            }
        }
        let inputs: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
        Tensor::from_op("concat", out_shape, data, inputs, move |g, _| {
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &s) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&g[pos..pos + s * inner]);
                    pos += s * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Pads the last axis. Reflect mode mirrors without repeating the edge
    /// sample and needs `left, right < len`.
    pub fn pad_last(&self, left: usize, right: usize, mode: PadMode) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::InvalidArgument("pad on scalar".into()))?;
        if mode == PadMode::Reflect && (left >= n || right >= n) {
            return shape_err(
                "pad_last",
                format!("reflect padding ({left},{right}) needs length > padding, got {n}"),
            );
        }
        if left == 0 && right == 0 {
            return Ok(self.clone());
        }
        let outer = self.numel() / n;
        let m = n + left + right;
        let mut map = Vec::with_capacity(outer * m);
        for o in 0..outer {
            for j in 0..m {
                let i = j as isize - left as isize;
                let src = if (0..n as isize).contains(&i) {
                    Some(i as usize)
                } else {
                    match mode {
                        PadMode::Zero => None,
                        PadMode::Reflect if i < 0 => Some((-i) as usize),
                        PadMode::Reflect => Some(2 * (n - 1) - i as usize),
                    }
                };
                map.push(src.map_or(NONE, |s| o * n + s));
            }
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = m;
        self.gather("pad_last", out_shape, map)
    }

    /// Broadcasts to a larger shape (right-aligned, size-1 axes expand).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let ok = shape.len() >= self.rank()
            && self
                .shape()
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &o)| s == o || s == 1);
        if !ok {
            return shape_err("broadcast_to", format!("{:?} -> {shape:?}", self.shape()));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let map = broadcast_map(shape, self.shape());
        self.gather("broadcast_to", shape.to_vec(), map)
    }

    /// Nearest-neighbour resampling of the trailing `sizes.len()` axes
    /// (source index `floor(dst * in / out)`).
    pub fn interpolate_nearest(&self, sizes: &[usize]) -> Result<Tensor> {
        let k = sizes.len();
        if k == 0 || k > self.rank() || sizes.contains(&0) {
            return shape_err("interpolate_nearest", format!("sizes {sizes:?} for {:?}", self.shape()));
        }
        let lead = self.rank() - k;
        let in_shape = self.shape();
        let mut out_shape = in_shape[..lead].to_vec();
        out_shape.extend_from_slice(sizes);
        let in_strides = strides(in_shape);
        let map = index_map(&out_shape, |idx| {
            let mut off = 0;
            for ax in 0..out_shape.len() {
                let src = if ax < lead {
                    idx[ax]
                } else {
                    idx[ax] * in_shape[ax] / out_shape[ax]
                };
                off += src * in_strides[ax];
            }
            off
        });
        self.gather("interpolate_nearest", out_shape.clone(), map)
    }
}

/// Builds a gather map by visiting every multi-index of `shape` in
/// row-major order.
fn index_map(shape: &[usize], f: impl Fn(&[usize]) -> usize) -> Vec<usize> {
    let total = numel(shape);
    let mut idx = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(total);
    for _ in 0..total {
        map.push(f(&idx));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
