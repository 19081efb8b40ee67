//! CPU kernels with hand-written backward passes: convolution, fused group
//! norm and fused SiLU.
//!
//! candle's CPU conv has a slow transposed convolution for the input
//! gradient, and its composed norm and activation backward passes allocate
//! one temporary per primitive. Convolution here is either plain loops over
//! contiguous rows (large stride-1 maps, few channels) or im2col plus one
//! matrix product with an explicit col2im adjoint.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[b, c, h, wd], &[o, ci, k, k2]) = (x, w) else {
            candle_core::bail!("conv expects 4-d input and weight, got {x:?} and {w:?}")
        };
        if ci != c || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            candle_core::bail!(
                "conv geometry mismatch: input {x:?}, weight {w:?}, stride {stride}, pad {pad}"
            )
        }
        Ok(Self {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    /// Output rows/cols `[lo, hi)` whose input index `out * stride + tap - pad`
    /// lies in `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(tap).div_ceil(s);
        let hi = if len + self.pad < tap + 1 {
            0
        } else {
            ((len + self.pad - tap - 1) / s + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

trait Elem: Copy + Default + AddAssign + Mul<Output = Self> + 'static {
    const ONE: Self;
}
impl Elem for f32 {
    const ONE: Self = 1.0;
}
impl Elem for f64 {
    const ONE: Self = 1.0;
}

/// Calls `f(in_row_offset, out_row_offset, n, in_col0)` for every output row
/// segment touched by tap `(ki, kj)`; columns step by `stride` in the input.
#[inline]
fn for_rows(g: &Geometry, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (oy0, oy1) = g.valid(ki, g.h, g.ho);
    let (ox0, ox1) = g.valid(kj, g.w, g.wo);
    if ox1 <= ox0 {
        return;
    }
    for oy in oy0..oy1 {
        let iy = oy * g.stride + ki - g.pad;
        let ix0 = ox0 * g.stride + kj - g.pad;
        f(iy * g.w, oy * g.wo + ox0, ox1 - ox0, ix0);
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut y = vec![T::default(); g.b * g.o * ohw];
    for b in 0..g.b {
        for o in 0..g.o {
            let yp = &mut y[(b * g.o + o) * ohw..][..ohw];
            for c in 0..g.c {
                let xp = &x[(b * g.c + c) * hw..][..hw];
                let wk = &w[(o * g.c + c) * kk..][..kk];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = wk[ki * g.k + kj];
                        for_rows(g, ki, kj, |xi, yi, n, ix0| {
                            let xr = &xp[xi..];
                            let yr = &mut yp[yi..yi + n];
                            if g.stride == 1 {
                                for (yv, xv) in yr.iter_mut().zip(&xr[ix0..ix0 + n]) {
                                    *yv += wv * *xv;
                                }
                            } else {
                                for (t, yv) in yr.iter_mut().enumerate() {
                                    *yv += wv * xr[ix0 + t * g.stride];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

fn grad_input<T: Elem>(g: &Geometry, dy: &[T], w: &[T]) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut dx = vec![T::default(); g.b * g.c * hw];
    for b in 0..g.b {
        for c in 0..g.c {
            let xp = &mut dx[(b * g.c + c) * hw..][..hw];
            for o in 0..g.o {
                let yp = &dy[(b * g.o + o) * ohw..][..ohw];
                let wk = &w[(o * g.c + c) * kk..][..kk];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = wk[ki * g.k + kj];
                        for_rows(g, ki, kj, |xi, yi, n, ix0| {
                            let yr = &yp[yi..yi + n];
                            let xr = &mut xp[xi..];
                            if g.stride == 1 {
                                for (xv, yv) in xr[ix0..ix0 + n].iter_mut().zip(yr) {
                                    *xv += wv * *yv;
                                }
                            } else {
                                for (t, yv) in yr.iter().enumerate() {
                                    xr[ix0 + t * g.stride] += wv * *yv;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    dx
}

fn grad_weight<T: Elem>(g: &Geometry, dy: &[T], x: &[T]) -> Vec<T> {
    let (hw, ohw, kk) = (g.h * g.w, g.ho * g.wo, g.k * g.k);
    let mut dw = vec![T::default(); g.o * g.c * kk];
    for b in 0..g.b {
        for o in 0..g.o {
            let yp = &dy[(b * g.o + o) * ohw..][..ohw];
            for c in 0..g.c {
                let xp = &x[(b * g.c + c) * hw..][..hw];
                let wk = &mut dw[(o * g.c + c) * kk..][..kk];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let mut acc = T::default();
                        for_rows(g, ki, kj, |xi, yi, n, ix0| {
                            let yr = &yp[yi..yi + n];
                            let xr = &xp[xi..];
                            if g.stride == 1 {
                                for (yv, xv) in yr.iter().zip(&xr[ix0..ix0 + n]) {
                                    acc += *yv * *xv;
                                }
                            } else {
                                for (t, yv) in yr.iter().enumerate() {
                                    acc += *yv * xr[ix0 + t * g.stride];
                                }
                            }
                        });
                        wk[ki * g.k + kj] += acc;
                    }
                }
            }
        }
    }
    dw
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv kernel needs contiguous inputs"),
    }
}

/// Which product the op computes from its two operands.
#[derive(Debug, Clone, Copy)]
enum Mode {
    /// `(x, w) -> y`
    Forward,
    /// `(dy, w) -> dx` for an input of shape `(h, w)`.
    Input { h: usize, w: usize },
    /// `(dy, x) -> dw` for a kernel of side `k`.
    Weight { k: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvOp {
    stride: usize,
    pad: usize,
    mode: Mode,
}

impl ConvOp {
    fn run<T: Elem>(
        &self,
        a: &[T],
        al: &Layout,
        b: &[T],
        bl: &Layout,
    ) -> candle_core::Result<(Vec<T>, Shape)> {
        let (a, b) = (slice(a, al)?, slice(b, bl)?);
        match self.mode {
            Mode::Forward => {
                let g = Geometry::new(al.dims(), bl.dims(), self.stride, self.pad)?;
                Ok((forward(&g, a, b), Shape::from((g.b, g.o, g.ho, g.wo))))
            }
            Mode::Input { h, w } => {
                let (&[bs, _, _, _], &[_, c, _, _]) = (al.dims(), bl.dims()) else {
                    candle_core::bail!("conv input gradient expects 4-d operands")
                };
                let g = Geometry::new(&[bs, c, h, w], bl.dims(), self.stride, self.pad)?;
                if al.dims() != [g.b, g.o, g.ho, g.wo] {
                    candle_core::bail!("conv output gradient has shape {:?}", al.dims())
                }
                Ok((grad_input(&g, a, b), Shape::from((g.b, g.c, g.h, g.w))))
            }
            Mode::Weight { k } => {
                let (&[_, o, _, _], &[_, c, _, _]) = (al.dims(), bl.dims()) else {
                    candle_core::bail!("conv weight gradient expects 4-d operands")
                };
                let g = Geometry::new(bl.dims(), &[o, c, k, k], self.stride, self.pad)?;
                if al.dims() != [g.b, g.o, g.ho, g.wo] {
                    candle_core::bail!("conv output gradient has shape {:?}", al.dims())
                }
                Ok((grad_weight(&g, a, b), Shape::from((o, c, k, k))))
            }
        }
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (v, s) = self.run(a, l1, b, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (v, s) = self.run(a, l1, b, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => candle_core::bail!("conv kernel supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let k = w.dim(2)?;
        // candle asks for both gradients even when an operand is a constant
        let dx = x
            .track_op()
            .then(|| {
                grad.apply_op2_no_bwd(
                    &w.contiguous()?,
                    &ConvOp {
                        mode: Mode::Input { h, w: wd },
                        ..*self
                    },
                )
            })
            .transpose()?;
        let dw = w
            .track_op()
            .then(|| {
                grad.apply_op2_no_bwd(
                    &x.contiguous()?,
                    &ConvOp {
                        mode: Mode::Weight { k },
                        ..*self
                    },
                )
            })
            .transpose()?;
        Ok((dx, dw))
    }
}

/// Differentiable 2-d cross-correlation of `x (B, C, H, W)` with
/// `w (O, C, k, k)`, no bias. Spatial kernels over very few input channels
/// on large maps use the direct loops; everything else goes through im2col.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let g = Geometry::new(x.dims(), w.dims(), stride, pad)?;
    if g.k > 1 && stride == 1 && g.ho * g.wo > 1024 && g.c * g.k * g.k <= 32 {
        conv2d_direct(x, w, stride, pad)
    } else {
        conv2d_gemm(x, w, stride, pad)
    }
}

fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(
        &w.contiguous()?,
        ConvOp {
            stride,
            pad,
            mode: Mode::Forward,
        },
    )
}

/// im2col for one image: `(C, H, W)` into `(C * k * k, Ho * Wo)`. Padding
/// positions are left untouched, so `out` must start zeroed.
fn unfold_one<T: Elem>(g: &Geometry, x: &[T], out: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for c in 0..g.c {
        let xp = &x[c * hw..][..hw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut out[((c * g.k + ki) * g.k + kj) * ohw..][..ohw];
                for_rows(g, ki, kj, |xi, yi, n, ix0| {
                    let xr = &xp[xi + ix0..];
                    if g.stride == 1 {
                        row[yi..yi + n].copy_from_slice(&xr[..n]);
                    } else {
                        for (t, v) in row[yi..yi + n].iter_mut().enumerate() {
                            *v = xr[t * g.stride];
                        }
                    }
                });
            }
        }
    }
}

/// Adjoint of [`unfold_one`], accumulated into `x`.
fn fold_one<T: Elem>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for c in 0..g.c {
        let xp = &mut x[c * hw..][..hw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * ohw..][..ohw];
                for_rows(g, ki, kj, |xi, yi, n, ix0| {
                    let xr = &mut xp[xi + ix0..];
                    for (t, v) in row[yi..yi + n].iter().enumerate() {
                        xr[t * g.stride] += *v;
                    }
                });
            }
        }
    }
}

/// A row-major view with explicit strides; a transpose is a stride swap.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len());
        }
    }
}

/// `dst (m, n) = [dst +] lhs (m, k) · rhs (k, n)` with row-major `dst`.
fn matmul_into<T: Elem>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    lhs: View<T>,
    rhs: View<T>,
) {
    assert!(dst.len() >= m * n);
    lhs.check(m, k);
    rhs.check(k, n);
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.data.as_ptr(),
            lhs.cs as isize,
            lhs.rs as isize,
            rhs.data.as_ptr(),
            rhs.cs as isize,
            rhs.rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

impl Geometry {
    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Runs `f(b, cols_b)` with each image's column matrix.
fn each_columns<T: Elem>(g: &Geometry, x: &[T], mut f: impl FnMut(usize, &[T])) {
    let chw = g.c * g.h * g.w;
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::default(); g.ckk() * g.ho * g.wo]
    };
    for b in 0..g.b {
        let xb = &x[b * chw..][..chw];
        if g.pointwise() {
            f(b, xb);
        } else {
            cols.fill(T::default());
            unfold_one(g, xb, &mut cols);
            f(b, &cols);
        }
    }
}

fn gemm_forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.ho * g.wo);
    let mut y = vec![T::default(); g.b * g.o * ohw];
    each_columns(g, x, |b, cols| {
        let yb = &mut y[b * g.o * ohw..][..g.o * ohw];
        matmul_into(
            (g.o, ohw, ckk),
            yb,
            false,
            View::rows(w, ckk),
            View::rows(cols, ohw),
        );
    });
    y
}

/// `dW = sum_b gy_b · cols_b^T`.
fn gemm_grad_weight<T: Elem>(g: &Geometry, x: &[T], gy: &[T]) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.ho * g.wo);
    let mut gw = vec![T::default(); g.o * ckk];
    each_columns(g, x, |b, cols| {
        let gyb = &gy[b * g.o * ohw..][..g.o * ohw];
        matmul_into(
            (g.o, ckk, ohw),
            &mut gw,
            b > 0,
            View::rows(gyb, ohw),
            View::rows(cols, ohw).t(),
        );
    });
    gw
}

/// `dx_b = fold(W^T · gy_b)`.
fn gemm_grad_input<T: Elem>(g: &Geometry, w: &[T], gy: &[T]) -> Vec<T> {
    let (ckk, ohw, chw) = (g.ckk(), g.ho * g.wo, g.c * g.h * g.w);
    let mut gx = vec![T::default(); g.b * chw];
    let mut gcols = vec![T::default(); if g.pointwise() { 0 } else { ckk * ohw }];
    for b in 0..g.b {
        let gyb = &gy[b * g.o * ohw..][..g.o * ohw];
        let gxb = &mut gx[b * chw..][..chw];
        let wt = View::rows(w, ckk).t();
        if g.pointwise() {
            matmul_into((ckk, ohw, g.o), gxb, false, wt, View::rows(gyb, ohw));
        } else {
            matmul_into((ckk, ohw, g.o), &mut gcols, false, wt, View::rows(gyb, ohw));
            fold_one(g, &gcols, gxb);
        }
    }
    gx
}

/// Convolution as per-image im2col and a matrix product.
#[derive(Debug, Clone, Copy)]
struct ConvGemm {
    stride: usize,
    pad: usize,
}

/// One half of [`ConvGemm`]'s backward: the first operand is the weight
/// (input gradient) or the input (weight gradient), the second `dy`.
#[derive(Debug, Clone, Copy)]
struct ConvGemmGrad {
    g: Geometry,
    wrt_input: bool,
}

impl CustomOp2 for ConvGemm {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(gemm_forward(&g, slice(x, l1)?, slice(w, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(gemm_forward(&g, slice(x, l1)?, slice(w, l2)?))
            }
            _ => candle_core::bail!("conv expects matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.b, g.o, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let gy = grad.contiguous()?;
        let gx = x
            .track_op()
            .then(|| w.apply_op2_no_bwd(&gy, &ConvGemmGrad { g, wrt_input: true }))
            .transpose()?;
        let gw = w
            .track_op()
            .then(|| {
                x.apply_op2_no_bwd(
                    &gy,
                    &ConvGemmGrad {
                        g,
                        wrt_input: false,
                    },
                )
            })
            .transpose()?;
        Ok((gx, gw))
    }
}

impl CustomOp2 for ConvGemmGrad {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.g;
        let want = [g.b, g.o, g.ho, g.wo];
        if l2.dims() != want {
            candle_core::bail!("conv grad expects {want:?}, got {:?}", l2.dims())
        }
        let shape = if self.wrt_input {
            Shape::from((g.b, g.c, g.h, g.w))
        } else {
            Shape::from((g.o, g.c, g.k, g.k))
        };
        macro_rules! run {
            ($a:expr, $gy:expr) => {
                if self.wrt_input {
                    gemm_grad_input(g, $a, $gy)
                } else {
                    gemm_grad_weight(g, $a, $gy)
                }
            };
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(gy)) => {
                CpuStorage::F32(run!(slice(a, l1)?, slice(gy, l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(gy)) => {
                CpuStorage::F64(run!(slice(a, l1)?, slice(gy, l2)?))
            }
            _ => candle_core::bail!("conv grad expects matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }
}

fn conv2d_gemm(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, ConvGemm { stride, pad })
}

/// Fused group normalisation `(B, C, ...)` with per-channel affine.
#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

/// Per-group statistics: the group's channel range and `1 / std`.
fn group_stats<T: WithF64>(
    x: &[T],
    c: usize,
    groups: usize,
    spatial: usize,
    eps: f64,
) -> Vec<(f64, f64)> {
    let per = c / groups * spatial;
    x.chunks(per)
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|v| v.f()).sum::<f64>() / n;
            let var = g.iter().map(|v| (v.f() - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

trait WithF64: Copy {
    fn f(self) -> f64;
    fn of(v: f64) -> Self;
}
impl WithF64 for f32 {
    fn f(self) -> f64 {
        self as f64
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}
impl WithF64 for f64 {
    fn f(self) -> f64 {
        self
    }
    fn of(v: f64) -> Self {
        v
    }
}

fn gn_dims(l: &Layout, groups: usize) -> candle_core::Result<(usize, usize, usize)> {
    let d = l.dims();
    if d.len() < 2 || groups == 0 || !d[1].is_multiple_of(groups) {
        candle_core::bail!("group norm over {d:?} with {groups} groups")
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

fn gn_forward<T: WithF64>(
    op: &GroupNormOp,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    spatial: usize,
) -> Vec<T> {
    let stats = group_stats(x, c, op.groups, spatial, op.eps);
    let cpg = c / op.groups;
    let mut y = Vec::with_capacity(x.len());
    for (plane, xs) in x.chunks(spatial).enumerate() {
        let ch = plane % c;
        let (mean, inv) = stats[plane / cpg];
        let (g, b) = (gamma[ch].f(), beta[ch].f());
        y.extend(xs.iter().map(|v| T::of((v.f() - mean) * inv * g + b)));
    }
    y
}

/// Returns `dx` followed by `dgamma` and `dbeta`, flattened.
fn gn_backward<T: WithF64>(
    op: &GroupNormOp,
    x: &[T],
    gamma: &[T],
    dy: &[T],
    c: usize,
    spatial: usize,
) -> Vec<T> {
    let stats = group_stats(x, c, op.groups, spatial, op.eps);
    let cpg = c / op.groups;
    let per = cpg * spatial;
    let mut dx = Vec::with_capacity(x.len() + 2 * c);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (gi, (xg, dyg)) in x.chunks(per).zip(dy.chunks(per)).enumerate() {
        let (mean, inv) = stats[gi];
        let c0 = (gi * cpg) % c;
        // means of dxhat and dxhat * xhat over the group
        let (mut m1, mut m2) = (0.0, 0.0);
        for (k, (xv, gv)) in xg.iter().zip(dyg).enumerate() {
            let ch = c0 + k / spatial;
            let xh = (xv.f() - mean) * inv;
            let d = gv.f() * gamma[ch].f();
            m1 += d;
            m2 += d * xh;
            dgamma[ch] += gv.f() * xh;
            dbeta[ch] += gv.f();
        }
        let n = per as f64;
        m1 /= n;
        m2 /= n;
        for (k, (xv, gv)) in xg.iter().zip(dyg).enumerate() {
            let ch = c0 + k / spatial;
            let xh = (xv.f() - mean) * inv;
            let d = gv.f() * gamma[ch].f();
            dx.push(T::of(inv * (d - m1 - xh * m2)));
        }
    }
    dx.extend(dgamma.into_iter().map(T::of));
    dx.extend(dbeta.into_iter().map(T::of));
    dx
}

impl candle_core::CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "fused-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, spatial) = gn_dims(l1, self.groups)?;
        if l2.dims() != [c] || l3.dims() != [c] {
            candle_core::bail!(
                "group norm affine shapes {:?} {:?} for {c} channels",
                l2.dims(),
                l3.dims()
            )
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(gn_forward(
                    self,
                    slice(x, l1)?,
                    slice(g, l2)?,
                    slice(b, l3)?,
                    c,
                    spatial,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(gn_forward(
                    self,
                    slice(x, l1)?,
                    slice(g, l2)?,
                    slice(b, l3)?,
                    c,
                    spatial,
                ))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.dim(0)?;
        let n = x.elem_count();
        let packed = x.apply_op3_no_bwd(
            &gamma.contiguous()?,
            &grad.contiguous()?,
            &GroupNormGrad(*self),
        )?;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dg = packed.narrow(0, n, c)?;
        let db = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

#[derive(Debug, Clone, Copy)]
struct GroupNormGrad(GroupNormOp);

impl candle_core::CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "fused-group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, spatial) = gn_dims(l1, self.0.groups)?;
        let n = l1.shape().elem_count() + 2 * c;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => {
                CpuStorage::F32(gn_backward(
                    &self.0,
                    slice(x, l1)?,
                    slice(g, l2)?,
                    slice(d, l3)?,
                    c,
                    spatial,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => {
                CpuStorage::F64(gn_backward(
                    &self.0,
                    slice(x, l1)?,
                    slice(g, l2)?,
                    slice(d, l3)?,
                    c,
                    spatial,
                ))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(n)))
    }
}

/// Differentiable group norm over `(B, C, ...)`.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        GroupNormOp { groups, eps },
    )
}

/// Fused `x * sigmoid(x)`.
#[derive(Debug, Clone, Copy)]
struct SiluOp;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl candle_core::CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(
                slice(x, l)?
                    .iter()
                    .map(|&v| v / (1.0 + (-v).exp()))
                    .collect(),
            ),
            CpuStorage::F64(x) => {
                CpuStorage::F64(slice(x, l)?.iter().map(|&v| v * sigmoid(v)).collect())
            }
            _ => candle_core::bail!("silu supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

#[derive(Debug, Clone, Copy)]
struct SiluGrad;

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                slice(x, l1)?
                    .iter()
                    .zip(slice(g, l2)?)
                    .map(|(&v, &d)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        d * s * (1.0 + v * (1.0 - s))
                    })
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                slice(x, l1)?
                    .iter()
                    .zip(slice(g, l2)?)
                    .map(|(&v, &d)| {
                        let s = sigmoid(v);
                        d * s * (1.0 + v * (1.0 - s))
                    })
                    .collect(),
            ),
            _ => candle_core::bail!("silu supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Differentiable SiLU.
pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SiluOp)
}

/// Space-to-depth and its inverse; each is the other's adjoint.
#[derive(Debug, Clone, Copy)]
struct Unshuffle {
    r: usize,
    inverse: bool,
}

impl Unshuffle {
    /// `(b, c, h, w)` of the spatial side.
    fn run<T: Copy + Default>(
        &self,
        v: &[T],
        (b, c, h, w): (usize, usize, usize, usize),
    ) -> Vec<T> {
        let r = self.r;
        let (ho, wo) = (h / r, w / r);
        let mut out = vec![T::default(); v.len()];
        for bc in 0..b * c {
            let base = bc * h * w;
            for y in 0..h {
                let (yo, i) = (y / r, y % r);
                for x in 0..w {
                    let (xo, j) = (x / r, x % r);
                    let spatial = base + y * w + x;
                    let packed = base + ((i * r + j) * ho + yo) * wo + xo;
                    if self.inverse {
                        out[spatial] = v[packed];
                    } else {
                        out[packed] = v[spatial];
                    }
                }
            }
        }
        out
    }
}

impl candle_core::CustomOp1 for Unshuffle {
    fn name(&self) -> &'static str {
        "pixel-unshuffle"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let r = self.r;
        let (b, c, h, w) = if self.inverse {
            let (b, c, h, w) = l.shape().dims4()?;
            (b, c / (r * r), h * r, w * r)
        } else {
            l.shape().dims4()?
        };
        let out_shape = if self.inverse {
            Shape::from((b, c, h, w))
        } else {
            Shape::from((b, c * r * r, h / r, w / r))
        };
        let dims = (b, c, h, w);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(slice(v, l)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(slice(v, l)?, dims)),
            _ => candle_core::bail!("pixel unshuffle supports f32 or f64"),
        };
        Ok((out, out_shape))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let op = Unshuffle {
            inverse: !self.inverse,
            ..*self
        };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// `(B, C, H, W)` to `(B, C·r·r, H/r, W/r)`; `H` and `W` must divide by `r`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Unshuffle { r, inverse: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_candle_forward_and_backward() {
        // candle's own convolution is the oracle
        for &(c, o, k, s, p, h) in &[
            (3, 4, 3, 1, 1, 7),
            (2, 5, 3, 2, 1, 8),
            (4, 2, 1, 1, 0, 5),
            (3, 3, 3, 2, 1, 7),
            (2, 2, 3, 1, 0, 6),
        ] {
            let xv = Var::from_tensor(&rand(&[2, c, h, h], 1)).unwrap();
            let wv = Var::from_tensor(&rand(&[o, c, k, k], 2)).unwrap();
            let gy = |t: &Tensor| rand(t.dims(), 3).mul(t).unwrap().sum_all().unwrap();
            let theirs = xv.as_tensor().conv2d(wv.as_tensor(), p, s, 1, 1).unwrap();
            let g2 = gy(&theirs).backward().unwrap();
            for f in [conv2d, conv2d_direct, conv2d_gemm] {
                let ours = f(xv.as_tensor(), wv.as_tensor(), s, p).unwrap();
                assert_eq!(ours.dims(), theirs.dims());
                assert!(max_diff(&ours, &theirs) < 1e-12);
                let g1 = gy(&ours).backward().unwrap();
                for v in [&xv, &wv] {
                    let a = g1.get(v.as_tensor()).unwrap();
                    let b = g2.get(v.as_tensor()).unwrap();
                    assert!(
                        max_diff(a, b) < 1e-10,
                        "grad mismatch for {:?}",
                        (c, o, k, s, p, h)
                    );
                }
            }
        }
    }

    #[test]
    fn f32_path_and_bad_shapes() {
        let x = rand(&[1, 2, 4, 4], 5).to_dtype(DType::F32).unwrap();
        let w = rand(&[3, 2, 3, 3], 6).to_dtype(DType::F32).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 1).unwrap().dims(), &[1, 3, 4, 4]);
        let bad = rand(&[3, 5, 3, 3], 6).to_dtype(DType::F32).unwrap();
        assert!(conv2d(&x, &bad, 1, 1).is_err());
        assert!(conv2d(&x, &w.to_dtype(DType::F64).unwrap(), 1, 1).is_err());
    }

    #[test]
    fn group_norm_matches_composed_ops() {
        let x = Var::from_tensor(&rand(&[2, 6, 3, 4], 11)).unwrap();
        let g = Var::from_tensor(&rand(&[6], 12)).unwrap();
        let b = Var::from_tensor(&rand(&[6], 13)).unwrap();
        let w = rand(&[2, 6, 3, 4], 14);
        let ours = group_norm(x.as_tensor(), g.as_tensor(), b.as_tensor(), 3, 1e-5).unwrap();
        let gn =
            candle_nn::GroupNorm::new(g.as_tensor().clone(), b.as_tensor().clone(), 6, 3, 1e-5)
                .unwrap();
        let theirs = candle_core::Module::forward(&gn, x.as_tensor()).unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let g1 = (&ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&theirs * &w)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &g, &b] {
            assert!(
                max_diff(
                    g1.get(v.as_tensor()).unwrap(),
                    g2.get(v.as_tensor()).unwrap()
                ) < 1e-10
            );
        }
    }

    #[test]
    fn silu_matches_candle() {
        let x = Var::from_tensor(&(rand(&[3, 5], 21) * 4.0).unwrap()).unwrap();
        let w = rand(&[3, 5], 22);
        let ours = silu(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().silu().unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-14);
        let g1 = (&ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&theirs * &w)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        assert!(
            max_diff(
                g1.get(x.as_tensor()).unwrap(),
                g2.get(x.as_tensor()).unwrap()
            ) < 1e-12
        );
    }

    #[test]
    fn unshuffle_matches_permute() {
        let (b, c, h, w, r) = (2, 3, 6, 4, 2);
        let x = Var::from_tensor(&rand(&[b, c, h, w], 31)).unwrap();
        let gy = rand(&[b, c * r * r, h / r, w / r], 32);
        let ours = pixel_unshuffle(x.as_tensor(), r).unwrap();
        let theirs = x
            .as_tensor()
            .reshape(&[b, c, h / r, r, w / r, r][..])
            .unwrap()
            .permute([0, 1, 3, 5, 2, 4])
            .unwrap()
            .reshape((b, c * r * r, h / r, w / r))
            .unwrap();
        assert_eq!(max_diff(&ours, &theirs), 0.0);
        let g1 = (&ours * &gy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = (&theirs * &gy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(
            max_diff(
                g1.get(x.as_tensor()).unwrap(),
                g2.get(x.as_tensor()).unwrap()
            ),
            0.0
        );
    }
}
