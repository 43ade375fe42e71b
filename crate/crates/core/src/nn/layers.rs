//! Forward and backward passes of the primitive layers: 2D convolution
//! (im2col + GEMM), batch normalization, ReLU and nearest-neighbour 2x
//! upsampling. Batched work is split per sample with rayon; reductions
//! across samples are summed in sample order so results do not depend on
//! the thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_direct(&self) -> bool {
        self.stride == 1 && self.kernel == 3 && self.pad == 1
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `0..w`.
    fn valid_range(&self, offset: usize, w: usize, wo: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.pad as isize;
        // Smallest ox with ox*s + shift >= 0.
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // Largest ox with ox*s + shift <= w - 1, exclusive bound.
        let top = w as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        (lo.clamp(0, wo as isize) as usize, hi.clamp(0, wo as isize) as usize)
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, ho);
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = g.valid_range(kx, w, wo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * w..(iy + 1) * w];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = ox_lo + kx - g.pad;
                        line[ox_lo..ox_hi].copy_from_slice(&src[start..start + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, ho);
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = g.valid_range(kx, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut dxc[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

/// Output channels computed together by the 3x3 kernels.
const OB: usize = 4;
/// Positions per accumulator row in the forward kernel.
const LANES: usize = 16;
/// Positions per accumulator row in the weight-gradient kernel.
const DW_LANES: usize = 8;

#[inline(always)]
fn madd<T: Real, const FUSED: bool>(acc: T, a: T, b: T) -> T {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

/// `wide[o][pos] = sum over (ci, ky, kx) of wt[ci][ky][kx][o] *
/// src[ci * plane + ky * wp + kx + pos]` for `pos < span`, rounded up to
/// whole `LANES` blocks. `wt` holds `ocp` (a multiple of `OB`) output slots.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv3_kernel<T: Real, const FUSED: bool>(
    src: &[T],
    c: usize,
    plane: usize,
    wp: usize,
    wt: &[T],
    out_c: usize,
    ocp: usize,
    span: usize,
    wide: &mut [T],
) {
    let stride = span_blocks(span, LANES);
    assert!(c == 0 || src.len() >= (c - 1) * plane + 2 * wp + 2 + stride, "padded input too short");
    assert!(wt.len() >= c * 9 * ocp && ocp >= out_c.div_ceil(OB) * OB, "arranged weights too short");
    assert!(wide.len() >= out_c * stride, "output buffer too short");
    let offs: [usize; 9] = std::array::from_fn(|t| (t / 3) * wp + t % 3);
    for o0 in (0..out_c).step_by(OB) {
        for start in (0..span).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; OB];
            for ci in 0..c {
                // SAFETY: the largest offset read is
                // (c-1)*plane + 2*wp + 2 + stride - 1 for the input and
                // c*9*ocp - 1 for the weights, both asserted above.
                unsafe {
                    let xbase = src.as_ptr().add(ci * plane + start);
                    let wbase = wt.as_ptr().add(ci * 9 * ocp + o0);
                    for (t, &off) in offs.iter().enumerate() {
                        let x = xbase.add(off);
                        let wv = wbase.add(t * ocp);
                        for (ob, row) in acc.iter_mut().enumerate() {
                            let w = *wv.add(ob);
                            for (l, a) in row.iter_mut().enumerate() {
                                *a = madd::<T, FUSED>(*a, w, *x.add(l));
                            }
                        }
                    }
                }
            }
            for (ob, row) in acc.iter().enumerate().take(out_c - o0) {
                wide[(o0 + ob) * stride + start..][..LANES].copy_from_slice(row);
            }
        }
    }
}

/// `dw[o][ci][ky][kx] += sum over pos < span of g[o][pos] *
/// src[ci * plane + ky * wp + kx + pos]`; `g` rows are `gstride` long and
/// zero past `span`, with zero rows up to a multiple of `OB`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv3_dw_kernel<T: Real, const FUSED: bool>(
    src: &[T],
    c: usize,
    plane: usize,
    wp: usize,
    g: &[T],
    gstride: usize,
    out_c: usize,
    span: usize,
    dw: &mut [T],
) {
    let rows = out_c.div_ceil(OB) * OB;
    assert!(gstride >= span_blocks(span, DW_LANES) && g.len() >= rows * gstride, "gradient buffer too short");
    assert!(c == 0 || src.len() >= (c - 1) * plane + 2 * wp + 2 + gstride, "padded input too short");
    for ci in 0..c {
        for ky in 0..3 {
            for o0 in (0..out_c).step_by(OB) {
                let nb = OB.min(out_c - o0);
                let mut acc = [[[T::zero(); DW_LANES]; 3]; OB];
                for start in (0..span).step_by(DW_LANES) {
                    // SAFETY: reads stay below (c-1)*plane + 2*wp + 2 + gstride
                    // in `src` and rows*gstride in `g`, both asserted above.
                    unsafe {
                        let x = src.as_ptr().add(ci * plane + ky * wp + start);
                        for (ob, per_kx) in acc.iter_mut().enumerate() {
                            let gv = g.as_ptr().add((o0 + ob) * gstride + start);
                            for (kx, lanes) in per_kx.iter_mut().enumerate() {
                                for (l, a) in lanes.iter_mut().enumerate() {
                                    *a = madd::<T, FUSED>(*a, *gv.add(l), *x.add(kx + l));
                                }
                            }
                        }
                    }
                }
                for (ob, per_kx) in acc.iter().enumerate().take(nb) {
                    for (kx, lanes) in per_kx.iter().enumerate() {
                        dw[(((o0 + ob) * c + ci) * 3 + ky) * 3 + kx] += lanes.iter().copied().sum::<T>();
                    }
                }
            }
        }
    }
}

fn span_blocks(span: usize, lanes: usize) -> usize {
    span.div_ceil(lanes) * lanes
}

fn fma_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv3_avx2<T: Real>(src: &[T], c: usize, plane: usize, wp: usize, wt: &[T], out_c: usize, ocp: usize, span: usize, wide: &mut [T]) {
    conv3_kernel::<T, true>(src, c, plane, wp, wt, out_c, ocp, span, wide)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv3_dw_avx2<T: Real>(src: &[T], c: usize, plane: usize, wp: usize, g: &[T], gstride: usize, out_c: usize, span: usize, dw: &mut [T]) {
    conv3_dw_kernel::<T, true>(src, c, plane, wp, g, gstride, out_c, span, dw)
}

/// Buffers for the direct 3x3 stride-1 convolution of one sample.
///
/// Input planes are stored zero-padded to `(h + 2) x (w + 2)` and outputs
/// computed on a grid of the padded width, so each kernel tap reads a plain
/// contiguous window; the two extra columns per row are dropped afterwards.
struct Direct<T> {
    fused: bool,
    padded: Vec<T>,
    wide: Vec<T>,
    wt: Vec<T>,
}

impl<T: Real> Direct<T> {
    fn new() -> Self {
        Self {
            fused: fma_available(),
            padded: Vec::new(),
            wide: Vec::new(),
            wt: Vec::new(),
        }
    }

    /// Zero-pads `c` planes of `h x w` into `self.padded`, with slack at the
    /// end for whole-block reads.
    fn pad(&mut self, xs: &[T], c: usize, h: usize, w: usize) {
        let (hp, wp) = (h + 2, w + 2);
        self.padded.clear();
        self.padded.resize(c * hp * wp + LANES.max(DW_LANES) + 2, T::zero());
        for ci in 0..c {
            for y in 0..h {
                let dst = (ci * hp + y + 1) * wp + 1;
                self.padded[dst..dst + w].copy_from_slice(&xs[(ci * h + y) * w..(ci * h + y + 1) * w]);
            }
        }
    }

    /// Rearranges `[o][ci][ky][kx]` weights to `[ci][ky][kx][o]`, flipping
    /// taps and swapping the channel roles when `transpose` is set.
    fn arrange(&mut self, weight: &[T], out_c: usize, c: usize, transpose: bool) -> (usize, usize) {
        let (rows, cols) = if transpose { (out_c, c) } else { (c, out_c) };
        let ocp = cols.div_ceil(OB) * OB;
        self.wt.clear();
        self.wt.resize(rows * 9 * ocp, T::zero());
        for o in 0..out_c {
            for ci in 0..c {
                for t in 0..9 {
                    let v = weight[(o * c + ci) * 9 + t];
                    let (r, col, tap) = if transpose { (o, ci, 8 - t) } else { (ci, o, t) };
                    self.wt[(r * 9 + tap) * ocp + col] = v;
                }
            }
        }
        (ocp, cols)
    }

    fn run(&mut self, c: usize, h: usize, w: usize, out_c: usize, ocp: usize, dst: &mut [T]) {
        let wp = w + 2;
        let plane = (h + 2) * wp;
        let span = (h - 1) * wp + w;
        let stride = span_blocks(span, LANES);
        self.wide.clear();
        self.wide.resize(out_c * stride, T::zero());
        let (src, wt, wide) = (&self.padded, &self.wt, &mut self.wide);
        if self.fused {
            #[cfg(target_arch = "x86_64")]
            // SAFETY: the CPU supports avx2 and fma, checked in `fma_available`.
            unsafe {
                conv3_avx2(src, c, plane, wp, wt, out_c, ocp, span, wide)
            }
        } else {
            conv3_kernel::<T, false>(src, c, plane, wp, wt, out_c, ocp, span, wide);
        }
        for o in 0..out_c {
            for y in 0..h {
                dst[(o * h + y) * w..(o * h + y + 1) * w]
                    .copy_from_slice(&self.wide[o * stride + y * wp..o * stride + y * wp + w]);
            }
        }
    }

    fn forward(&mut self, xs: &[T], c: usize, h: usize, w: usize, weight: &[T], out_c: usize, dst: &mut [T]) {
        self.pad(xs, c, h, w);
        let (ocp, _) = self.arrange(weight, out_c, c, false);
        self.run(c, h, w, out_c, ocp, dst);
    }

    /// Accumulates the weight gradient into `dw` and writes the input
    /// gradient into `dx` when given. The input gradient is itself a 3x3
    /// convolution of the output gradient with flipped, transposed weights.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        xs: &[T],
        ds: &[T],
        c: usize,
        h: usize,
        w: usize,
        weight: &[T],
        out_c: usize,
        dw: &mut [T],
        dx: Option<&mut [T]>,
    ) {
        let wp = w + 2;
        let plane = (h + 2) * wp;
        let span = (h - 1) * wp + w;
        let gstride = span_blocks(span, DW_LANES);
        // Output gradient on the padded-width grid, zero in the gaps.
        let mut g = vec![T::zero(); out_c.div_ceil(OB) * OB * gstride];
        for o in 0..out_c {
            for y in 0..h {
                g[o * gstride + y * wp..o * gstride + y * wp + w]
                    .copy_from_slice(&ds[(o * h + y) * w..(o * h + y + 1) * w]);
            }
        }
        self.pad(xs, c, h, w);
        if self.fused {
            #[cfg(target_arch = "x86_64")]
            // SAFETY: the CPU supports avx2 and fma, checked in `fma_available`.
            unsafe {
                conv3_dw_avx2(&self.padded, c, plane, wp, &g, gstride, out_c, span, dw)
            }
        } else {
            conv3_dw_kernel::<T, false>(&self.padded, c, plane, wp, &g, gstride, out_c, span, dw);
        }
        if let Some(dx) = dx {
            self.pad(ds, out_c, h, w);
            let (ocp, _) = self.arrange(weight, out_c, c, true);
            self.run(out_c, h, w, c, ocp, dx);
        }
    }
}

/// Samples per unit of parallel work in the backward pass. Weight gradients
/// are summed within a group in sample order and across groups in group
/// order, so the result does not depend on how many threads run.
const SAMPLE_GROUP: usize = 4;

/// `weight` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_c: usize,
    g: ConvGeom,
) -> Tensor<T> {
    let (ho, wo) = g.output_size(x.h, x.w);
    let ckk = x.c * g.kernel * g.kernel;
    assert_eq!(weight.len(), out_c * ckk, "conv weight shape");
    let mut out = Tensor::zeros(x.n, out_c, ho, wo);
    let out_len = out.sample_len();
    let col_len = if g.is_pointwise() || g.is_direct() { 0 } else { ckk * ho * wo };
    out.data.par_chunks_mut(out_len).enumerate().for_each_init(
        || (vec![T::zero(); col_len], Direct::new()),
        |(buf, direct), (s, dst)| {
            let xs = x.sample(s);
            if g.is_direct() {
                direct.forward(xs, x.c, x.h, x.w, weight, out_c, dst);
                if let Some(b) = bias {
                    for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += b[o]);
                    }
                }
                return;
            }
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, x.c, x.h, x.w, g, buf);
                buf
            };
            T::gemm(out_c, ckk, ho * wo, weight, false, cols, false, T::zero(), dst);
            if let Some(b) = bias {
                for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        },
    );
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let out_c = dout.c;
    let plane = dout.h * dout.w;
    let ckk = x.c * g.kernel * g.kernel;
    let x_len = x.sample_len();
    let mut dx_data = if need_dx { vec![T::zero(); x.data.len()] } else { Vec::new() };
    let groups = x.n.div_ceil(SAMPLE_GROUP);
    let mut dx_chunks: Vec<Option<&mut [T]>> = if need_dx {
        dx_data.chunks_mut(SAMPLE_GROUP * x_len).map(Some).collect()
    } else {
        (0..groups).map(|_| None).collect()
    };
    let partial: Vec<(Vec<T>, Vec<T>)> = dx_chunks
        .par_iter_mut()
        .enumerate()
        .map(|(grp, dx_grp)| {
            let mut dw = vec![T::zero(); out_c * ckk];
            let mut db = vec![T::zero(); out_c];
            let im2col_len = if g.is_pointwise() || g.is_direct() { 0 } else { ckk * plane };
            let mut cols_buf = vec![T::zero(); im2col_len];
            let mut dcols_buf = vec![T::zero(); if need_dx { im2col_len } else { 0 }];
            let mut direct = Direct::new();
            let first = grp * SAMPLE_GROUP;
            for s in first..(first + SAMPLE_GROUP).min(x.n) {
                let xs = x.sample(s);
                let ds = dout.sample(s);
                if g.is_direct() {
                    for (b, c) in db.iter_mut().zip(ds.chunks(plane)) {
                        *b += c.iter().copied().sum::<T>();
                    }
                    let dxs = dx_grp
                        .as_deref_mut()
                        .map(|d| &mut d[(s - first) * x_len..(s - first + 1) * x_len]);
                    direct.backward(xs, ds, x.c, x.h, x.w, weight, out_c, &mut dw, dxs);
                    continue;
                }
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, x.c, x.h, x.w, g, &mut cols_buf);
                    &cols_buf
                };
                T::gemm(out_c, plane, ckk, ds, false, cols, true, T::one(), &mut dw);
                for (b, c) in db.iter_mut().zip(ds.chunks(plane)) {
                    *b += c.iter().copied().sum::<T>();
                }
                if let Some(dx_grp) = dx_grp.as_deref_mut() {
                    let dxs = &mut dx_grp[(s - first) * x_len..(s - first + 1) * x_len];
                    if g.is_pointwise() {
                        T::gemm(ckk, out_c, plane, weight, true, ds, false, T::zero(), dxs);
                    } else {
                        T::gemm(ckk, out_c, plane, weight, true, ds, false, T::zero(), &mut dcols_buf);
                        col2im(&dcols_buf, x.c, x.h, x.w, g, dxs);
                    }
                }
            }
            (dw, db)
        })
        .collect();
    drop(dx_chunks);

    let mut parts = partial.into_iter();
    let (mut dweight, mut dbias) = parts.next().unwrap_or_else(|| (vec![T::zero(); out_c * ckk], vec![T::zero(); out_c]));
    for (dw, db) in parts {
        dweight.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        dbias.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
    }
    ConvGrads {
        dx: need_dx.then(|| Tensor::from_vec(x.n, x.c, x.h, x.w, dx_data)),
        dweight,
        dbias,
    }
}

/// `sum of f(a[i], b[i])` in f64, accumulated in eight interleaved lanes
/// so the reduction vectorizes.
#[inline(always)]
fn sum8<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| f(x, y)).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += f(x[l], y[l]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Saved state of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

impl<T: Real> BnCache<T> {
    /// Batch variance with Bessel's correction, for running estimates.
    pub fn unbiased_var(&self) -> Vec<T> {
        let m = (self.xhat.n * self.xhat.plane()) as f64;
        let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        self.var
            .iter()
            .map(|&v| T::from_f64_lossy(v.as_f64() * corr))
            .collect()
    }
}

pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    offset: &[T],
    eps: f64,
) -> (Tensor<T>, BnCache<T>) {
    let plane = x.plane();
    let m = (x.n * plane) as f64;
    let mut sum = vec![0.0f64; x.c];
    for (idx, chunk) in x.data.chunks(plane).enumerate() {
        sum[idx % x.c] += sum8(chunk, chunk, |v, _| v.as_f64());
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; x.c];
    for (idx, chunk) in x.data.chunks(plane).enumerate() {
        let mu = mean[idx % x.c];
        sq[idx % x.c] += sum8(chunk, chunk, |v, _| (v.as_f64() - mu).powi(2));
    }
    let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (idx, (hc, yc)) in xhat.data.chunks_mut(plane).zip(y.data.chunks_mut(plane)).enumerate() {
        let c = idx % x.c;
        let (mu, is, a, b) = (mean_t[c], inv_std[c], scale[c], offset[c]);
        for (h, yv) in hc.iter_mut().zip(yc.iter_mut()) {
            *h = (*h - mu) * is;
            *yv = a * *h + b;
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean: mean_t,
            var: var.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        },
    )
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    offset: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Tensor<T> {
    let plane = x.plane();
    let mut y = x.clone();
    let coef: Vec<(T, T)> = (0..x.c)
        .map(|c| {
            let is = T::from_f64_lossy(1.0 / (running_var[c].as_f64() + eps).sqrt());
            (scale[c] * is, offset[c] - scale[c] * is * running_mean[c])
        })
        .collect();
    for (idx, chunk) in y.data.chunks_mut(plane).enumerate() {
        let (a, b) = coef[idx % x.c];
        chunk.iter_mut().for_each(|v| *v = a * *v + b);
    }
    y
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dscale: Vec<T>,
    pub doffset: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(dy: &Tensor<T>, cache: &BnCache<T>, scale: &[T]) -> BnGrads<T> {
    let xhat = &cache.xhat;
    let plane = dy.plane();
    let m = (dy.n * plane) as f64;
    let mut sdy = vec![0.0f64; dy.c];
    let mut sdyx = vec![0.0f64; dy.c];
    for (idx, (gc, hc)) in dy.data.chunks(plane).zip(xhat.data.chunks(plane)).enumerate() {
        let c = idx % dy.c;
        sdy[c] += sum8(gc, gc, |g, _| g.as_f64());
        sdyx[c] += sum8(gc, hc, |g, h| g.as_f64() * h.as_f64());
    }
    let mut dx = dy.clone();
    for (idx, (dc, hc)) in dx.data.chunks_mut(plane).zip(xhat.data.chunks(plane)).enumerate() {
        let c = idx % dy.c;
        let k = scale[c].as_f64() * cache.inv_std[c].as_f64() / m;
        let (a, b, e) = (
            T::from_f64_lossy(k * m),
            T::from_f64_lossy(k * sdy[c]),
            T::from_f64_lossy(k * sdyx[c]),
        );
        for (d, &h) in dc.iter_mut().zip(hc) {
            *d = a * *d - b - e * h;
        }
    }
    BnGrads {
        dx,
        dscale: sdyx.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        doffset: sdy.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    }
}

pub fn relu<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    x
}

/// Zeroes the gradient wherever the ReLU output was not positive.
pub fn relu_backward<T: Real>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &y) in dy.data.iter_mut().zip(&out.data) {
        *g = if y > T::zero() { *g } else { T::zero() };
    }
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}
