//! Direct (loop-based) convolutions and transposed convolutions.
//!
//! 1-D convolutions run through the 2-D kernels with a unit height, which
//! is layout-identical. All loops have a fixed accumulation order, so
//! results are bit-reproducible.

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{shape_err, Result};

/// Hyperparameters of a 1-D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv1dSpec {
    pub fn padded(padding: usize) -> Self {
        Self { padding, ..Self::default() }
    }

    fn to_2d(self) -> Conv2dSpec {
        Conv2dSpec {
            stride: (1, self.stride),
            padding: (0, self.padding),
            dilation: (1, self.dilation),
            groups: self.groups,
        }
    }
}

/// Hyperparameters of a 2-D (transposed) convolution, as (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), dilation: (1, 1), groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn padded(ph: usize, pw: usize) -> Self {
        Self { padding: (ph, pw), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    s: (usize, usize),
    p: (usize, usize),
    d: (usize, usize),
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn off_h(&self, k: usize) -> isize {
        (k * self.d.0) as isize - self.p.0 as isize
    }
    fn off_w(&self, k: usize) -> isize {
        (k * self.d.1) as isize - self.p.1 as isize
    }
}

/// Output indices `o` in `[0, n_out)` with `0 <= o*s + off < n_in`.
#[inline]
fn valid(n_out: usize, n_in: usize, s: usize, off: isize) -> std::ops::Range<usize> {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let last = n_in as isize - 1 - off;
    if last < 0 {
        return 0..0;
    }
    let hi = n_out.min(last as usize / s + 1);
    if lo >= hi {
        0..0
    } else {
        lo..hi
    }
}

/// dst[o] += w * src[o*s + off]
#[inline]
fn gather_axpy(dst: &mut [f32], src: &[f32], w: f32, s: usize, off: isize) {
    let r = valid(dst.len(), src.len(), s, off);
    if r.is_empty() {
        return;
    }
    if s == 1 {
        let start = (r.start as isize + off) as usize;
        let n = r.len();
        dst[r].iter_mut().zip(&src[start..start + n]).for_each(|(d, &x)| *d += w * x);
    } else {
        for o in r {
            dst[o] += w * src[(o as isize * s as isize + off) as usize];
        }
    }
}

/// dst[o*s + off] += w * src[o]
#[inline]
fn scatter_axpy(dst: &mut [f32], src: &[f32], w: f32, s: usize, off: isize) {
    let r = valid(src.len(), dst.len(), s, off);
    if r.is_empty() {
        return;
    }
    if s == 1 {
        let start = (r.start as isize + off) as usize;
        let n = r.len();
        dst[start..start + n].iter_mut().zip(&src[r]).for_each(|(d, &x)| *d += w * x);
    } else {
        for o in r {
            dst[(o as isize * s as isize + off) as usize] += w * src[o];
        }
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// sum_o a[o] * b[o*s + off]
#[inline]
fn strided_dot(a: &[f32], b: &[f32], s: usize, off: isize) -> f32 {
    let r = valid(a.len(), b.len(), s, off);
    if r.is_empty() {
        return 0.0;
    }
    if s == 1 {
        let start = (r.start as isize + off) as usize;
        let n = r.len();
        dot(&a[r], &b[start..start + n])
    } else {
        r.map(|o| a[o] * b[(o as isize * s as isize + off) as usize]).sum()
    }
}

// ---- forward convolution kernels -------------------------------------------

fn conv_fwd(x: &[f32], wt: &[f32], bias: Option<&[f32]>, g: &Geom) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0f32; g.b * g.cout * out_plane];
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for b in 0..g.b {
        for co in 0..g.cout {
            let dst = &mut out[(b * g.cout + co) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[co]);
            }
            let ci0 = (co / cout_g) * cin_g;
            for cj in 0..cin_g {
                let src = &x[(b * g.cin + ci0 + cj) * in_plane..][..in_plane];
                let wbase = (co * cin_g + cj) * g.kh * g.kw;
                for kh in 0..g.kh {
                    let rows = valid(g.oh, g.h, g.s.0, g.off_h(kh));
                    for kw in 0..g.kw {
                        let w = wt[wbase + kh * g.kw + kw];
                        if w == 0.0 {
                            continue;
                        }
                        let offw = g.off_w(kw);
                        for oh in rows.clone() {
                            let ih = (oh as isize * g.s.0 as isize + g.off_h(kh)) as usize;
                            gather_axpy(
                                &mut dst[oh * g.ow..(oh + 1) * g.ow],
                                &src[ih * g.w..(ih + 1) * g.w],
                                w,
                                g.s.1,
                                offw,
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_bwd_input(gout: &[f32], wt: &[f32], g: &Geom) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut gx = vec![0.0f32; g.b * g.cin * in_plane];
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for b in 0..g.b {
        for co in 0..g.cout {
            let gsrc = &gout[(b * g.cout + co) * out_plane..][..out_plane];
            let ci0 = (co / cout_g) * cin_g;
            for cj in 0..cin_g {
                let dst = &mut gx[(b * g.cin + ci0 + cj) * in_plane..][..in_plane];
                let wbase = (co * cin_g + cj) * g.kh * g.kw;
                for kh in 0..g.kh {
                    let rows = valid(g.oh, g.h, g.s.0, g.off_h(kh));
                    for kw in 0..g.kw {
                        let w = wt[wbase + kh * g.kw + kw];
                        let offw = g.off_w(kw);
                        for oh in rows.clone() {
                            let ih = (oh as isize * g.s.0 as isize + g.off_h(kh)) as usize;
                            scatter_axpy(
                                &mut dst[ih * g.w..(ih + 1) * g.w],
                                &gsrc[oh * g.ow..(oh + 1) * g.ow],
                                w,
                                g.s.1,
                                offw,
                            );
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_bwd_weight(gout: &[f32], x: &[f32], g: &Geom) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut gw = vec![0.0f32; g.cout * cin_g * g.kh * g.kw];
    for co in 0..g.cout {
        let ci0 = (co / cout_g) * cin_g;
        for cj in 0..cin_g {
            let wbase = (co * cin_g + cj) * g.kh * g.kw;
            for kh in 0..g.kh {
                let rows = valid(g.oh, g.h, g.s.0, g.off_h(kh));
                for kw in 0..g.kw {
                    let offw = g.off_w(kw);
                    let mut acc = 0.0f32;
                    for b in 0..g.b {
                        let gsrc = &gout[(b * g.cout + co) * out_plane..][..out_plane];
                        let src = &x[(b * g.cin + ci0 + cj) * in_plane..][..in_plane];
                        for oh in rows.clone() {
                            let ih = (oh as isize * g.s.0 as isize + g.off_h(kh)) as usize;
                            acc += strided_dot(
                                &gsrc[oh * g.ow..(oh + 1) * g.ow],
                                &src[ih * g.w..(ih + 1) * g.w],
                                g.s.1,
                                offw,
                            );
                        }
                    }
                    gw[wbase + kh * g.kw + kw] = acc;
                }
            }
        }
    }
    gw
}

fn bias_grad(gout: &[f32], b: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut gb = vec![0.0f32; c];
    for bi in 0..b {
        for (ci, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(bi * c + ci) * plane..][..plane].iter().sum::<f32>();
        }
    }
    gb
}

// ---- ungrouped convolutions as im2col + GEMM -------------------------------

/// Columns `[cin*kh*kw, oh*ow]` of one batch element.
fn im2col(x: &[f32], g: &Geom) -> Vec<f32> {
    let (plane, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut cols = vec![0.0f32; g.cin * g.kh * g.kw * ohw];
    for ci in 0..g.cin {
        let src = &x[ci * plane..][..plane];
        for kh in 0..g.kh {
            let rows = valid(g.oh, g.h, g.s.0, g.off_h(kh));
            for kw in 0..g.kw {
                let r = (ci * g.kh + kh) * g.kw + kw;
                let dst = &mut cols[r * ohw..][..ohw];
                let offw = g.off_w(kw);
                for oh in rows.clone() {
                    let ih = (oh as isize * g.s.0 as isize + g.off_h(kh)) as usize;
                    let srow = &src[ih * g.w..(ih + 1) * g.w];
                    let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    let cr = valid(g.ow, g.w, g.s.1, offw);
                    if g.s.1 == 1 {
                        let st = (cr.start as isize + offw) as usize;
                        let n = cr.len();
                        drow[cr].copy_from_slice(&srow[st..st + n]);
                    } else {
                        for o in cr {
                            drow[o] = srow[(o as isize * g.s.1 as isize + offw) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds columns back onto an input-shaped buffer (adjoint of [`im2col`]).
fn col2im(cols: &[f32], dst: &mut [f32], g: &Geom) {
    let (plane, ohw) = (g.h * g.w, g.oh * g.ow);
    for ci in 0..g.cin {
        let out = &mut dst[ci * plane..][..plane];
        for kh in 0..g.kh {
            let rows = valid(g.oh, g.h, g.s.0, g.off_h(kh));
            for kw in 0..g.kw {
                let r = (ci * g.kh + kh) * g.kw + kw;
                let src = &cols[r * ohw..][..ohw];
                for oh in rows.clone() {
                    let ih = (oh as isize * g.s.0 as isize + g.off_h(kh)) as usize;
                    scatter_axpy(
                        &mut out[ih * g.w..(ih + 1) * g.w],
                        &src[oh * g.ow..(oh + 1) * g.ow],
                        1.0,
                        g.s.1,
                        g.off_w(kw),
                    );
                }
            }
        }
    }
}

fn conv_fwd_gemm(x: &[f32], wt: &[f32], bias: Option<&[f32]>, g: &Geom) -> Vec<f32> {
    let (plane, ohw, ck) = (g.cin * g.h * g.w, g.oh * g.ow, g.cin * g.kh * g.kw);
    let mut out = vec![0.0f32; g.b * g.cout * ohw];
    for b in 0..g.b {
        let dst = &mut out[b * g.cout * ohw..][..g.cout * ohw];
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(bias[co]);
            }
        }
        let cols = im2col(&x[b * plane..][..plane], g);
        gemm_nn(wt, &cols, dst, g.cout, ck, ohw);
    }
    out
}

fn conv_bwd_input_gemm(gout: &[f32], wt: &[f32], g: &Geom) -> Vec<f32> {
    let (plane, ohw, ck) = (g.cin * g.h * g.w, g.oh * g.ow, g.cin * g.kh * g.kw);
    let mut gx = vec![0.0f32; g.b * plane];
    let mut gcols = vec![0.0f32; ck * ohw];
    for b in 0..g.b {
        gcols.fill(0.0);
        gemm_tn(wt, &gout[b * g.cout * ohw..][..g.cout * ohw], &mut gcols, g.cout, ck, ohw);
        col2im(&gcols, &mut gx[b * plane..][..plane], g);
    }
    gx
}

fn conv_bwd_weight_gemm(gout: &[f32], x: &[f32], g: &Geom) -> Vec<f32> {
    let (plane, ohw, ck) = (g.cin * g.h * g.w, g.oh * g.ow, g.cin * g.kh * g.kw);
    let mut gw = vec![0.0f32; g.cout * ck];
    for b in 0..g.b {
        let cols = im2col(&x[b * plane..][..plane], g);
        gemm_nt(&gout[b * g.cout * ohw..][..g.cout * ohw], &cols, &mut gw, g.cout, ck, ohw);
    }
    gw
}

/// Forward and adjoint kernels, picking the GEMM path when ungrouped.
fn fwd(x: &[f32], wt: &[f32], bias: Option<&[f32]>, g: &Geom) -> Vec<f32> {
    if g.groups == 1 {
        conv_fwd_gemm(x, wt, bias, g)
    } else {
        conv_fwd(x, wt, bias, g)
    }
}

fn bwd_input(gout: &[f32], wt: &[f32], g: &Geom) -> Vec<f32> {
    if g.groups == 1 {
        conv_bwd_input_gemm(gout, wt, g)
    } else {
        conv_bwd_input(gout, wt, g)
    }
}

fn bwd_weight(gout: &[f32], x: &[f32], g: &Geom) -> Vec<f32> {
    if g.groups == 1 {
        conv_bwd_weight_gemm(gout, x, g)
    } else {
        conv_bwd_weight(gout, x, g)
    }
}

/// A transposed convolution is the adjoint of the convolution that maps its
/// output back to its input; this returns that convolution's geometry.
fn adjoint_geom(t: &Geom) -> Geom {
    Geom {
        b: t.b, cin: t.cout, h: t.oh, w: t.ow, cout: t.cin, kh: t.kh, kw: t.kw, oh: t.h, ow: t.w,
        s: t.s, p: t.p, d: t.d, groups: 1,
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], b: usize, c: usize, plane: usize) {
    for bi in 0..b {
        for (ci, &v) in bias.iter().enumerate().take(c) {
            out[(bi * c + ci) * plane..][..plane].iter_mut().for_each(|o| *o += v);
        }
    }
}

// ---- tensor-level ops ------------------------------------------------------

fn check_bias(op: &'static str, bias: Option<&Tensor>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c] => shape_err(op, format!("bias shape {:?}, expected [{c}]", b.shape())),
        _ => Ok(()),
    }
}

fn out_len(op: &'static str, n: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
    if s == 0 || d == 0 {
        return shape_err(op, "stride and dilation must be positive");
    }
    let span = d * (k - 1) + 1;
    if n + 2 * p < span {
        return shape_err(
            op,
            format!("input length {n} (+2*{p} padding) shorter than kernel span {span}"),
        );
    }
    Ok((n + 2 * p - span) / s + 1)
}

fn conv_generic(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: Geom,
    out_shape: Vec<usize>,
) -> Result<Tensor> {
    let data = {
        let bd = bias.map(|b| b.data());
        fwd(&x.data(), &w.data(), bd.as_deref().map(|v| v.as_slice()), &g)
    };
    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (tx, tw, tb) = (x.clone(), w.clone(), bias.cloned());
    Tensor::from_op(op, out_shape, data, inputs, move |gout, _| {
        let gx = tx.requires_grad().then(|| bwd_input(gout, &tw.data(), &g));
        let gw = tw.requires_grad().then(|| bwd_weight(gout, &tx.data(), &g));
        let mut grads = vec![gx, gw];
        if let Some(b) = &tb {
            grads.push(b.requires_grad().then(|| bias_grad(gout, g.b, g.cout, g.oh * g.ow)));
        }
        grads
    })
}

fn convt_generic(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: Geom,
    out_shape: Vec<usize>,
) -> Result<Tensor> {
    let a = adjoint_geom(&g);
    let mut data = conv_bwd_input_gemm(&x.data(), &w.data(), &a);
    if let Some(b) = bias {
        add_bias(&mut data, &b.data(), g.b, g.cout, g.oh * g.ow);
    }
    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (tx, tw, tb) = (x.clone(), w.clone(), bias.cloned());
    Tensor::from_op(op, out_shape, data, inputs, move |gout, _| {
        let gx = tx.requires_grad().then(|| conv_fwd_gemm(gout, &tw.data(), None, &a));
        let gw = tw.requires_grad().then(|| conv_bwd_weight_gemm(&tx.data(), gout, &a));
        let mut grads = vec![gx, gw];
        if let Some(b) = &tb {
            grads.push(b.requires_grad().then(|| bias_grad(gout, g.b, g.cout, g.oh * g.ow)));
        }
        grads
    })
}

impl Tensor {
    /// Cross-correlation of `[B, C_in, L]` with weight `[C_out, C_in/groups, K]`.
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv1dSpec) -> Result<Tensor> {
        const OP: &str = "conv1d";
        if self.rank() != 3 || weight.rank() != 3 {
            return shape_err(OP, format!("input {:?}, weight {:?}: both must be rank 3", self.shape(), weight.shape()));
        }
        let (b, cin, l) = (self.dim(0), self.dim(1), self.dim(2));
        let (cout, cin_g, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return shape_err(
                OP,
                format!("C_in={cin}, C_out={cout}, weight C_in/groups={cin_g}, groups={groups}"),
            );
        }
        check_bias(OP, bias, cout)?;
        let ol = out_len(OP, l, k, spec.stride, spec.padding, spec.dilation)?;
        let s2 = spec.to_2d();
        let g = Geom {
            b, cin, h: 1, w: l, cout, kh: 1, kw: k, oh: 1, ow: ol,
            s: s2.stride, p: s2.padding, d: s2.dilation, groups,
        };
        conv_generic(OP, self, weight, bias, g, vec![b, cout, ol])
    }

    /// Cross-correlation of `[B, C_in, H, W]` with weight `[C_out, C_in/groups, KH, KW]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        const OP: &str = "conv2d";
        if self.rank() != 4 || weight.rank() != 4 {
            return shape_err(OP, format!("input {:?}, weight {:?}: both must be rank 4", self.shape(), weight.shape()));
        }
        let (b, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (cout, cin_g, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return shape_err(
                OP,
                format!("C_in={cin}, C_out={cout}, weight C_in/groups={cin_g}, groups={groups}"),
            );
        }
        check_bias(OP, bias, cout)?;
        let oh = out_len(OP, h, kh, spec.stride.0, spec.padding.0, spec.dilation.0)?;
        let ow = out_len(OP, w, kw, spec.stride.1, spec.padding.1, spec.dilation.1)?;
        let g = Geom {
            b, cin, h, w, cout, kh, kw, oh, ow,
            s: spec.stride, p: spec.padding, d: spec.dilation, groups,
        };
        conv_generic(OP, self, weight, bias, g, vec![b, cout, oh, ow])
    }

    /// Depthwise 2-D convolution: weight `[C, 1, KH, KW]`, one filter per channel.
    pub fn depthwise_conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        if self.rank() != 4 {
            return shape_err("depthwise_conv2d", format!("input {:?} must be rank 4", self.shape()));
        }
        self.conv2d(weight, bias, Conv2dSpec { groups: self.dim(1), ..spec })
    }

    /// Transposed 1-D convolution with weight `[C_in, C_out, K]`;
    /// `L_out = (L_in - 1) * stride - 2 * padding + K`.
    pub fn conv_transpose1d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv1dSpec) -> Result<Tensor> {
        const OP: &str = "conv_transpose1d";
        if self.rank() != 3 || weight.rank() != 3 {
            return shape_err(OP, format!("input {:?}, weight {:?}: both must be rank 3", self.shape(), weight.shape()));
        }
        let (b, cin, l) = (self.dim(0), self.dim(1), self.dim(2));
        let (wcin, cout, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
        if wcin != cin || spec.groups != 1 || spec.dilation != 1 || spec.stride == 0 {
            return shape_err(OP, format!("input C={cin}, weight {:?}, spec {spec:?}", weight.shape()));
        }
        check_bias(OP, bias, cout)?;
        let full = (l - 1) * spec.stride + k;
        if full <= 2 * spec.padding {
            return shape_err(OP, format!("padding {} leaves no output", spec.padding));
        }
        let ol = full - 2 * spec.padding;
        let g = Geom {
            b, cin, h: 1, w: l, cout, kh: 1, kw: k, oh: 1, ow: ol,
            s: (1, spec.stride), p: (0, spec.padding), d: (1, 1), groups: 1,
        };
        convt_generic(OP, self, weight, bias, g, vec![b, cout, ol])
    }

    /// Transposed 2-D convolution with weight `[C_in, C_out, KH, KW]`.
    pub fn conv_transpose2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        const OP: &str = "conv_transpose2d";
        if self.rank() != 4 || weight.rank() != 4 {
            return shape_err(OP, format!("input {:?}, weight {:?}: both must be rank 4", self.shape(), weight.shape()));
        }
        let (b, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (wcin, cout, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if wcin != cin || spec.groups != 1 || spec.dilation != (1, 1) || spec.stride.0 == 0 || spec.stride.1 == 0 {
            return shape_err(OP, format!("input C={cin}, weight {:?}, spec {spec:?}", weight.shape()));
        }
        check_bias(OP, bias, cout)?;
        let fh = (h - 1) * spec.stride.0 + kh;
        let fw = (w - 1) * spec.stride.1 + kw;
        if fh <= 2 * spec.padding.0 || fw <= 2 * spec.padding.1 {
            return shape_err(OP, "padding leaves no output");
        }
        let (oh, ow) = (fh - 2 * spec.padding.0, fw - 2 * spec.padding.1);
        let g = Geom {
            b, cin, h, w, cout, kh, kw, oh, ow,
            s: spec.stride, p: spec.padding, d: (1, 1), groups: 1,
        };
        convt_generic(OP, self, weight, bias, g, vec![b, cout, oh, ow])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1.0, -2.0, 3.0, 0.5], &[1, 1, 4]).unwrap();
        let w = Tensor::new(vec![1.0], &[1, 1, 1]).unwrap();
        let b = Tensor::new(vec![0.0], &[1]).unwrap();
        let y = x.conv1d(&w, Some(&b), Conv1dSpec::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 3, 5]);
        let w = Tensor::ones(&[2, 3, 3]);
        let b = Tensor::new(vec![0.5, -1.5], &[2]).unwrap();
        let y = x.conv1d(&w, Some(&b), Conv1dSpec::padded(1)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 5]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if (i / 5) % 2 == 0 { 0.5 } else { -1.5 });
        }
    }

    #[test]
    fn transposed_duplicates() {
        let x = Tensor::new(vec![2.0, 3.0], &[1, 1, 2]).unwrap();
        let w = Tensor::ones(&[1, 1, 2]);
        let spec = Conv1dSpec { stride: 2, ..Default::default() };
        let y = x.conv_transpose1d(&w, None, spec).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn output_length_formula() {
        let x = Tensor::zeros(&[1, 2, 10]);
        let w = Tensor::zeros(&[4, 1, 3]);
        let spec = Conv1dSpec { stride: 2, padding: 2, dilation: 2, groups: 2 };
        let y = x.conv1d(&w, None, spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, (10 + 4 - 2 * 2 - 1) / 2 + 1]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 3, 4]);
        assert!(x.conv1d(&Tensor::zeros(&[2, 2, 1]), None, Conv1dSpec::default()).is_err());
        assert!(x.conv1d(&Tensor::zeros(&[2, 3, 9]), None, Conv1dSpec::default()).is_err());
        let spec = Conv1dSpec { groups: 2, ..Default::default() };
        assert!(x.conv1d(&Tensor::zeros(&[2, 1, 1]), None, spec).is_err());
        let bad_bias = Tensor::zeros(&[3]);
        assert!(x.conv1d(&Tensor::zeros(&[2, 3, 1]), Some(&bad_bias), Conv1dSpec::default()).is_err());
    }

    #[test]
    fn depthwise_identity() {
        let x = Tensor::new((0..18).map(|v| v as f32).collect(), &[1, 2, 3, 3]).unwrap();
        let w = Tensor::ones(&[2, 1, 1, 1]);
        let y = x.depthwise_conv2d(&w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = crate::SeededRng::seed_from_u64(5);
        let g = Geom {
            b: 2, cin: 3, h: 5, w: 11, cout: 4, kh: 2, kw: 3, oh: 0, ow: 0,
            s: (2, 3), p: (1, 2), d: (1, 2), groups: 1,
        };
        let g = Geom { oh: (5 + 2 - 2) / 2 + 1, ow: (11 + 4 - 5) / 3 + 1, ..g };
        let x = Tensor::randn(&[g.b * g.cin * g.h * g.w], &mut rng).to_vec();
        let w = Tensor::randn(&[g.cout * g.cin * g.kh * g.kw], &mut rng).to_vec();
        let bias = [0.1, -0.2, 0.3, 0.0];
        let go = Tensor::randn(&[g.b * g.cout * g.oh * g.ow], &mut rng).to_vec();
        let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5);
        assert!(close(&conv_fwd_gemm(&x, &w, Some(&bias), &g), &conv_fwd(&x, &w, Some(&bias), &g)));
        assert!(close(&conv_bwd_input_gemm(&go, &w, &g), &conv_bwd_input(&go, &w, &g)));
        assert!(close(&conv_bwd_weight_gemm(&go, &x, &g), &conv_bwd_weight(&go, &x, &g)));
    }

    #[test]
    fn transposed_matches_scatter_definition() {
        use rand::SeedableRng;
        let mut rng = crate::SeededRng::seed_from_u64(6);
        let (cin, cout, l, k, s, p) = (3, 2, 7, 4, 2, 1);
        let x = Tensor::randn(&[1, cin, l], &mut rng);
        let w = Tensor::randn(&[cin, cout, k], &mut rng);
        let spec = Conv1dSpec { stride: s, padding: p, ..Default::default() };
        let y = x.conv_transpose1d(&w, None, spec).unwrap();
        let ol = (l - 1) * s + k - 2 * p;
        let mut want = vec![0.0f32; cout * ol];
        let (xd, wd) = (x.to_vec(), w.to_vec());
        for ci in 0..cin {
            for co in 0..cout {
                for i in 0..l {
                    for kk in 0..k {
                        let o = (i * s + kk) as isize - p as isize;
                        if o >= 0 && (o as usize) < ol {
                            want[co * ol + o as usize] += xd[ci * l + i] * wd[(ci * cout + co) * k + kk];
                        }
                    }
                }
            }
        }
        assert!(y.to_vec().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn transposed_2d_shape() {
        let x = Tensor::zeros(&[2, 4, 3, 5]);
        let w = Tensor::zeros(&[4, 6, 2, 2]);
        let spec = Conv2dSpec { stride: (2, 2), ..Default::default() };
        assert_eq!(x.conv_transpose2d(&w, None, spec).unwrap().shape(), &[2, 6, 6, 10]);
    }
}
