//! Dense tensors and the differentiable operations the network is built from.
//!
//! Every operation comes as a forward function plus a `*_backward` function
//! that takes the same inputs and the upstream gradient. There is no tape:
//! the network keeps whatever inputs it needs and calls the backward pass in
//! reverse order itself.
//!
//! Rank-3 tensors are `[C, H, W]`, rank-4 kernels are `[C_out, C_in / groups,
//! h, w]`, all row-major.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{bail, Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn erf(self) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        check_span(a.len(), m, k, a_strides);
        check_span(b.len(), k, n, b_strides);
        check_span(c.len(), m, n, c_strides);
        // SAFETY: extents checked against slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            )
        }
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        check_span(a.len(), m, k, a_strides);
        check_span(b.len(), k, n, b_strides);
        check_span(c.len(), m, n, c_strides);
        // SAFETY: extents checked against slice lengths above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            )
        }
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Row-major dense tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            bail!(Dimension, "rank {} outside 1..=4", dims.len());
        }
        if dims.contains(&0) {
            bail!(Dimension, "zero extent in {dims:?}");
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            bail!(Dimension, "dims {dims:?} need {n} values, got {}", data.len());
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("valid dims")
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect()).expect("valid dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} to {dims:?}", self.dims);
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            bail!(Dimension, "shape mismatch {:?} vs {:?}", self.dims, other.dims);
        }
        Ok(())
    }

    /// `[C, H, W]` extents, failing for other ranks.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => bail!(Dimension, "expected [C,H,W], got {:?}", self.dims),
        }
    }

    /// Contiguous slice of the leading-axis entry `i`.
    pub fn slab(&self, i: usize) -> &[T] {
        let n = self.data.len() / self.dims[0];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.data.len() / self.dims[0];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Gathers leading-axis entries in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            bail!(Argument, "empty selection");
        }
        let lead = self.dims[0];
        let n = self.data.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= lead {
                bail!(Dimension, "index {i} outside leading extent {lead}");
            }
            data.extend_from_slice(self.slab(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Self::new(&dims, data)
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let tail = &first.dims[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                bail!(Dimension, "concat trailing dims {:?} vs {tail:?}", &p.dims[1..]);
            }
            lead += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = lead;
        Self::new(&dims, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Self {
            stride: 1,
            padding,
            groups: channels,
        }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let (c_in, h, w) = x.chw()?;
        let [c_out, cig, kh, kw] = k.dims[..] else {
            bail!(Dimension, "kernel must be rank 4, got {:?}", k.dims);
        };
        if spec.stride == 0 || spec.groups == 0 {
            bail!(Argument, "stride and groups must be positive: {spec:?}");
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            bail!(
                Dimension,
                "groups {} must divide C_in {c_in} and C_out {c_out}",
                spec.groups
            );
        }
        if cig != c_in / spec.groups {
            bail!(
                Dimension,
                "kernel expects {cig} input channels per group, input gives {}",
                c_in / spec.groups
            );
        }
        let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > hp || kw > wp {
            bail!(EmptyOutput, "kernel {kh}x{kw} exceeds padded input {hp}x{wp}");
        }
        Ok(Self {
            h,
            w,
            c_out,
            kh,
            kw,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
            cig,
            cog: c_out / spec.groups,
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// One input and one output channel per group at unit stride.
    fn is_depthwise(&self) -> bool {
        self.cig == 1 && self.cog == 1 && self.spec.stride == 1
    }

    /// Output columns `ox` whose input column `ox + kx - p` is inside the plane.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let p = self.spec.padding;
        let lo = p.saturating_sub(kx).min(self.wo);
        let hi = (self.w + p).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    /// Direct depthwise correlation, skipping the column buffer.
    fn depthwise_forward<T: Real>(&self, x: &[T], k: &[T], out: &mut [T]) {
        let (h, w, p) = (self.h, self.w, self.spec.padding);
        let (kh, kw, ho, wo) = (self.kh, self.kw, self.ho, self.wo);
        for c in 0..self.c_out {
            let plane = &x[c * h * w..][..h * w];
            let kern = &k[c * kh * kw..][..kh * kw];
            let dst = &mut out[c * ho * wo..][..ho * wo];
            for oy in 0..ho {
                let line = &mut dst[oy * wo..][..wo];
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let src = &plane[(iy - p) * w..][..w];
                    for kx in 0..kw {
                        let (lo, hi) = self.valid_cols(kx);
                        if lo == hi {
                            continue;
                        }
                        let wgt = kern[ky * kw + kx];
                        let off = lo + kx - p;
                        for (o, &v) in line[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
    }

    fn depthwise_backward<T: Real>(&self, x: &[T], k: &[T], dy: &[T], dx: &mut [T], dk: &mut [T]) {
        let (h, w, p) = (self.h, self.w, self.spec.padding);
        let (kh, kw, ho, wo) = (self.kh, self.kw, self.ho, self.wo);
        for c in 0..self.c_out {
            let plane = &x[c * h * w..][..h * w];
            let dplane = &mut dx[c * h * w..][..h * w];
            let kern = &k[c * kh * kw..][..kh * kw];
            let dkern = &mut dk[c * kh * kw..][..kh * kw];
            let g = &dy[c * ho * wo..][..ho * wo];
            for oy in 0..ho {
                let line = &g[oy * wo..][..wo];
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let row = (iy - p) * w;
                    for kx in 0..kw {
                        let (lo, hi) = self.valid_cols(kx);
                        if lo == hi {
                            continue;
                        }
                        let off = row + lo + kx - p;
                        let n = hi - lo;
                        let gl = &line[lo..hi];
                        let mut acc = T::zero();
                        for (&a, &b) in gl.iter().zip(&plane[off..off + n]) {
                            acc += a * b;
                        }
                        dkern[ky * kw + kx] += acc;
                        let wgt = kern[ky * kw + kx];
                        for (d, &a) in dplane[off..off + n].iter_mut().zip(gl) {
                            *d += wgt * a;
                        }
                    }
                }
            }
        }
    }

    fn col_rows(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    /// Unfolds group `g` of `x` into `[cig*kh*kw, ho*wo]`.
    fn im2col<T: Real>(&self, x: &[T], g: usize, cols: &mut [T]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let hw_out = self.ho * self.wo;
        for ci in 0..self.cig {
            let plane = &x[(g * self.cig + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw_out..][..hw_out];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let line = &mut dst[oy * self.wo..][..self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into `dx`.
    fn col2im<T: Real>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let hw_out = self.ho * self.wo;
        for ci in 0..self.cig {
            let plane = &mut dx[(g * self.cig + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw_out..][..hw_out];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let geo = ConvGeom::new(x, k, spec)?;
    let hw_out = geo.ho * geo.wo;
    let rows = geo.col_rows();
    let mut out = vec![T::zero(); geo.c_out * hw_out];
    if geo.is_depthwise() {
        geo.depthwise_forward(&x.data, &k.data, &mut out);
        return Tensor::new(&[geo.c_out, geo.ho, geo.wo], out);
    }
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw_out]
    };
    for g in 0..spec.groups {
        let b: &[T] = if geo.is_pointwise() {
            &x.data[g * geo.cig * hw_out..][..geo.cig * hw_out]
        } else {
            geo.im2col(&x.data, g, &mut cols);
            &cols
        };
        let a = &k.data[g * geo.cog * rows..][..geo.cog * rows];
        let c = &mut out[g * geo.cog * hw_out..][..geo.cog * hw_out];
        T::gemm(
            geo.cog,
            rows,
            hw_out,
            a,
            (rows as isize, 1),
            b,
            (hw_out as isize, 1),
            T::zero(),
            c,
            (hw_out as isize, 1),
        );
    }
    Tensor::new(&[geo.c_out, geo.ho, geo.wo], out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geo = ConvGeom::new(x, k, spec)?;
    if dy.dims != [geo.c_out, geo.ho, geo.wo] {
        bail!(
            Dimension,
            "upstream gradient {:?} vs conv output {:?}",
            dy.dims,
            [geo.c_out, geo.ho, geo.wo]
        );
    }
    let hw_out = geo.ho * geo.wo;
    let rows = geo.col_rows();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    if geo.is_depthwise() {
        geo.depthwise_backward(&x.data, &k.data, &dy.data, &mut dx, &mut dk);
        return Ok((Tensor::new(&x.dims, dx)?, Tensor::new(&k.dims, dk)?));
    }
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw_out] };
    for g in 0..spec.groups {
        let dyg = &dy.data[g * geo.cog * hw_out..][..geo.cog * hw_out];
        let kg = &k.data[g * geo.cog * rows..][..geo.cog * rows];
        let dkg = &mut dk[g * geo.cog * rows..][..geo.cog * rows];
        if geo.is_pointwise() {
            let xg = &x.data[g * geo.cig * hw_out..][..geo.cig * hw_out];
            // dK = dY · Xᵀ
            T::gemm(
                geo.cog,
                hw_out,
                rows,
                dyg,
                (hw_out as isize, 1),
                xg,
                (1, hw_out as isize),
                T::zero(),
                dkg,
                (rows as isize, 1),
            );
            // dX = Kᵀ · dY
            let dxg = &mut dx[g * geo.cig * hw_out..][..geo.cig * hw_out];
            T::gemm(
                rows,
                geo.cog,
                hw_out,
                kg,
                (1, rows as isize),
                dyg,
                (hw_out as isize, 1),
                T::zero(),
                dxg,
                (hw_out as isize, 1),
            );
        } else {
            geo.im2col(&x.data, g, &mut cols);
            T::gemm(
                geo.cog,
                hw_out,
                rows,
                dyg,
                (hw_out as isize, 1),
                &cols,
                (1, hw_out as isize),
                T::zero(),
                dkg,
                (rows as isize, 1),
            );
            T::gemm(
                rows,
                geo.cog,
                hw_out,
                kg,
                (1, rows as isize),
                dyg,
                (hw_out as isize, 1),
                T::zero(),
                &mut cols,
                (hw_out as isize, 1),
            );
            geo.col2im(&cols, g, &mut dx);
        }
    }
    Ok((
        Tensor::new(&x.dims, dx)?,
        Tensor::new(&k.dims, dk)?,
    ))
}

/// Adds a per-channel bias to a `[C, H, W]` map in place.
pub fn add_channel_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (c, _, _) = x.chw()?;
    if bias.numel() != c {
        bail!(Dimension, "bias of {} for {c} channels", bias.numel());
    }
    for (ch, &b) in bias.data.iter().enumerate() {
        for v in x.slab_mut(ch) {
            *v += b;
        }
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, _, _) = dy.chw()?;
    Ok(Tensor::from_fn(&[c], |ch| dy.slab(ch).iter().copied().sum()))
}

/// Depth-to-space: `[r²C, H, W] -> [C, rH, rW]`, with input channel
/// `c·r² + i·r + j` landing at output offset `(i, j)` inside each `r×r` cell.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (cin, h, w) = x.chw()?;
    if r == 0 || cin % (r * r) != 0 {
        bail!(Dimension, "{cin} channels not divisible by r²={}", r * r);
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    for co in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = x.slab(co * r * r + i * r + j);
                for y in 0..h {
                    let dst = &mut out[(co * oh + y * r + i) * ow..][..ow];
                    for (xx, &v) in src[y * w..][..w].iter().enumerate() {
                        dst[xx * r + j] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Space-to-depth; the exact inverse permutation of [`pixel_shuffle`] and
/// therefore also its backward pass.
pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, oh, ow) = y.chw()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        bail!(Dimension, "spatial dims {oh}x{ow} not divisible by {r}");
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![T::zero(); y.numel()];
    for co in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst = &mut out[(co * r * r + i * r + j) * h * w..][..h * w];
                for yy in 0..h {
                    let src = &y.data[(co * oh + yy * r + i) * ow..][..ow];
                    for xx in 0..w {
                        dst[yy * w + xx] = src[xx * r + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * r * r, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Elementwise `gelu` (exact erf form) or logistic `sigmoid`.
pub fn pointwise_activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => x.map(gelu),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

pub fn pointwise_activation_backward<T: Real>(
    x: &Tensor<T>,
    kind: Activation,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    match kind {
        Activation::Gelu => x.zip_map(dy, |v, g| gelu_grad(v) * g),
        Activation::Sigmoid => x.zip_map(dy, |v, g| {
            let s = sigmoid(v);
            s * (T::one() - s) * g
        }),
    }
}

fn expect_channel_params<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        bail!(
            Dimension,
            "affine params {}/{} for {c} channels",
            gamma.numel(),
            beta.numel()
        );
    }
    Ok(())
}

/// Per-pixel mean and inverse std over the channel axis.
fn channel_moments<T: Real>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let (c, h, w) = x.chw().expect("rank checked by caller");
    let hw = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut mean = vec![T::zero(); hw];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(x.slab(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![T::zero(); hw];
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(x.slab(ch)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std = var.into_iter().map(|s| T::one() / (s * inv_c + eps).sqrt()).collect();
    (mean, inv_std)
}

/// Layer normalization over the channel axis at every spatial location.
pub fn layer_norm_channels<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, _, _) = x.chw()?;
    expect_channel_params(c, gamma, beta)?;
    let (mean, inv_std) = channel_moments(x, eps);
    let mut out = x.clone();
    for ch in 0..c {
        let (g, b) = (gamma.data[ch], beta.data[ch]);
        for ((v, &m), &is) in out.slab_mut(ch).iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * is * g + b;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_channels_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.chw()?;
    x.expect_same_dims(dy)?;
    let hw = h * w;
    let (mean, inv_std) = channel_moments(x, eps);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    // per-pixel sums of g and g·x̂ where g = dy·gamma
    let mut sum_g = vec![T::zero(); hw];
    let mut sum_gx = vec![T::zero(); hw];
    for ch in 0..c {
        let gm = gamma.data[ch];
        for p in 0..hw {
            let xhat = (x.slab(ch)[p] - mean[p]) * inv_std[p];
            let d = dy.slab(ch)[p];
            dgamma[ch] += d * xhat;
            dbeta[ch] += d;
            sum_g[p] += d * gm;
            sum_gx[p] += d * gm * xhat;
        }
    }
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let gm = gamma.data[ch];
        let out = dx.slab_mut(ch);
        for p in 0..hw {
            let xhat = (x.slab(ch)[p] - mean[p]) * inv_std[p];
            let g = dy.slab(ch)[p] * gm;
            out[p] = inv_std[p] * (g - sum_g[p] * inv_c - xhat * sum_gx[p] * inv_c);
        }
    }
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

fn grn_norms<T: Real>(x: &Tensor<T>, eps: T) -> (Vec<T>, T) {
    let c = x.dims[0];
    let norms: Vec<T> = (0..c)
        .map(|ch| x.slab(ch).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    let denom = norms.iter().copied().sum::<T>() / T::of(c as f64) + eps;
    (norms, denom)
}

/// Global response normalization:
/// `y = gamma·(x·n/(mean(n)+eps)) + beta + x` with `n` the per-channel spatial L2 norm.
pub fn grn<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, _, _) = x.chw()?;
    expect_channel_params(c, gamma, beta)?;
    let (norms, denom) = grn_norms(x, eps);
    let mut out = x.clone();
    for ch in 0..c {
        let scale = gamma.data[ch] * norms[ch] / denom + T::one();
        let b = beta.data[ch];
        for v in out.slab_mut(ch) {
            *v = *v * scale + b;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn grn_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.chw()?;
    x.expect_same_dims(dy)?;
    let (norms, denom) = grn_norms(x, eps);
    let inv_c = T::one() / T::of(c as f64);
    // a_c = Σ_p dy·x, the gradient reaching the gate n_c/denom before gamma
    let dot: Vec<T> = (0..c)
        .map(|ch| x.slab(ch).iter().zip(dy.slab(ch)).map(|(&a, &b)| a * b).sum())
        .collect();
    let dgamma: Vec<T> = (0..c).map(|ch| dot[ch] * norms[ch] / denom).collect();
    let dbeta: Vec<T> = (0..c).map(|ch| dy.slab(ch).iter().copied().sum()).collect();
    let a: Vec<T> = (0..c).map(|ch| gamma.data[ch] * dot[ch]).collect();
    let cross = (0..c).map(|ch| a[ch] * norms[ch]).sum::<T>() * inv_c / (denom * denom);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let direct = gamma.data[ch] * norms[ch] / denom + T::one();
        let dnorm = a[ch] / denom - cross;
        let via_norm = if norms[ch] > T::zero() {
            dnorm / norms[ch]
        } else {
            T::zero()
        };
        for ((o, &xv), &d) in dx.slab_mut(ch).iter_mut().zip(x.slab(ch)).zip(dy.slab(ch)) {
            *o = d * direct + via_norm * xv;
        }
    }
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Deterministic probe weights used to reduce an op output to a scalar.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 1.0) * 12.9898;
            0.5 + (t.sin() * 43758.5453).fract().abs()
        })
        .collect()
}

/// Checks analytic gradients against central finite differences.
///
/// The op output is reduced through `L = Σ wᵢ yᵢ` with fixed probe weights;
/// `backward` receives `∂L/∂y` and must return one gradient per input. The
/// step actually realised in floating point (`(x+eps) − (x−eps)`) is used as
/// the divisor. Relative error is taken per element against
/// `max(|analytic|, |numeric|)`, floored at 1e-3 of the largest analytic
/// gradient of that input so exact zeros do not divide by zero.
pub fn grad_check<F, B>(
    name: &str,
    inputs: &[Tensor<f64>],
    forward: F,
    backward: B,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    if inputs.iter().any(|t| !t.all_finite()) {
        bail!(Argument, "{name}: non-finite input to gradient check");
    }
    let y = forward(inputs)?;
    let probe = Tensor::new(y.dims(), probe_weights(y.numel()))?;
    let analytic = backward(inputs, &probe)?;
    if analytic.len() != inputs.len() {
        bail!(
            Argument,
            "{name}: backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        );
    }
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        inputs[slot].expect_same_dims(grad)?;
        if !grad.all_finite() {
            bail!(Numeric, "{name}: non-finite analytic gradient for input {slot}");
        }
        let floor = 1e-3 * grad.max_abs();
        for i in 0..inputs[slot].numel() {
            let x0 = inputs[slot].data[i];
            work[slot].data[i] = x0 + eps;
            let xp = work[slot].data[i];
            let yp = forward(&work)?;
            work[slot].data[i] = x0 - eps;
            let xm = work[slot].data[i];
            let ym = forward(&work)?;
            work[slot].data[i] = x0;
            let step = xp - xm;
            let numeric = yp
                .data
                .iter()
                .zip(&ym.data)
                .zip(&probe.data)
                .map(|((a, b), w)| w * ((a - b) / step))
                .sum::<f64>();
            if !numeric.is_finite() {
                bail!(Numeric, "{name}: non-finite finite difference for input {slot}");
            }
            let a = grad.data[i];
            let scale = a.abs().max(numeric.abs()).max(floor);
            if scale > 0.0 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}
