use super::Tensor;
use crate::error::{shape_err, Result};

/// c[m,n] += a[m,k] * b[k,n], all row-major.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// c[m,k] += g[m,n] * b[k,n]^T
pub(crate) fn gemm_nt(g: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += super::conv::dot(grow, brow);
        }
    }
}

/// c[k,n] += a[m,k]^T * g[m,n]
pub(crate) fn gemm_tn(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(c, &g)| *c += av * g);
        }
    }
}

impl Tensor {
    /// Matrix product over the last two axes. Leading (batch) axes must
    /// match, or `other` may be a plain 2-D matrix shared by all batches.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("need rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if k != k2 || (!shared_rhs && batch_a != batch_b) {
            return shape_err("matmul", format!("incompatible shapes {sa:?} x {sb:?}"));
        }
        let batches: usize = batch_a.iter().product();
        let mut out = vec![0.0f32; batches * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for bi in 0..batches {
                let boff = if shared_rhs { 0 } else { bi * k * n };
                gemm_nn(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let (ta, tb) = (self.clone(), other.clone());
        Tensor::from_op("matmul", shape, out, vec![self.clone(), other.clone()], move |g, _| {
            let (a, b) = (ta.data(), tb.data());
            let ga = ta.requires_grad().then(|| {
                let mut ga = vec![0.0; a.len()];
                for bi in 0..batches {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[boff..boff + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                ga
            });
            let gb = tb.requires_grad().then(|| {
                let mut gb = vec![0.0; b.len()];
                for bi in 0..batches {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }
}
