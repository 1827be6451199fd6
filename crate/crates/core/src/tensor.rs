//! Dense row-major `f32` tensors and the handful of kernels everything else
//! is built from.
//!
//! Every reduction runs in a fixed order, so a given row of output is
//! bit-identical no matter how many other rows share the call. Tree
//! verification relies on this: a row scored inside a large block must equal
//! the same row scored on its own.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.fill(value);
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }
}

// ---------------------------------------------------------------------------
// Thread cap
// ---------------------------------------------------------------------------

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Number of threads kernels may use. Reads `SPECDEC_THREADS` on first use
/// and falls back to the number of available cores.
pub fn max_threads() -> usize {
    let cached = MAX_THREADS.load(Ordering::Relaxed);
    if cached != 0 {
        return cached;
    }
    let n = std::env::var("SPECDEC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    MAX_THREADS.store(n, Ordering::Relaxed);
    n
}

pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

const PARALLEL_MIN_MACS: usize = 1 << 21;

/// Splits `out` into row chunks and runs `f(first_row, chunk)` on each,
/// possibly on several threads. Rows never straddle chunks, so per-row
/// results do not depend on the split.
fn for_row_chunks<F>(out: &mut [f32], rows: usize, cols: usize, macs: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let threads = max_threads().min(rows.div_ceil(4).max(1));
    if threads <= 1 || macs < PARALLEL_MIN_MACS || cols == 0 {
        f(0, out);
        return;
    }
    // Chunk boundaries stay on multiples of 4 rows to keep the tile shape.
    let per = rows.div_ceil(threads).div_ceil(4) * 4;
    std::thread::scope(|s| {
        for (ci, chunk) in out.chunks_mut(per * cols).enumerate() {
            let f = &f;
            s.spawn(move || f(ci * per, chunk));
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

const TILE_ROWS: usize = 8;
const LANES: usize = 16;
const STRIPS: usize = 4;

/// `c = a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
///
/// Every output element is accumulated over `k` strictly left to right with
/// fused multiply-adds.
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_row_chunks(c, m, n, m * k * n, |row0, chunk| {
        let rows = chunk.len() / n.max(1);
        tiled_product(
            |i, p| a[(row0 + i) * k + p],
            b,
            n,
            chunk,
            rows,
            k,
            n,
            false,
        );
    });
}

/// `c += aᵀ · b` for `a` (m×k), `b` (m×n), `c` (k×n). Used for weight
/// gradients; each element accumulates over the `m` rows in order.
pub fn gemm_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_row_chunks(c, k, n, m * k * n, |row0, chunk| {
        let rows = chunk.len() / n.max(1);
        tiled_product(
            |i, p| a[p * k + row0 + i],
            b,
            n,
            chunk,
            rows,
            m,
            n,
            true,
        );
    });
}

/// `c = a · b` where row `p` of `b` starts at `b[p * ldb]`. Single-threaded;
/// meant for small products such as attention over a cache.
pub fn gemm_ldb(a: &[f32], b: &[f32], ldb: usize, c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    debug_assert_eq!(c.len(), m * n);
    tiled_product(|i, p| a[i * k + p], b, ldb, c, m, k, n, false);
}

/// `c = a · bᵀ` for `a` (m×k), `b` (n×k), `c` (m×n).
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm(a, &bt, c, m, k, n);
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Shared micro-kernel: `c[i][j] (+)= Σ_p lhs(i, p) · b[p][j]`, summed over
/// `p` in increasing order with one fused multiply-add per term. Rows of the
/// left operand are packed in pairs and multiplied against column strips of
/// `b` with the accumulators held in registers. Every path performs the same
/// operations in the same order, so results do not depend on the row count.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tiled_product<L>(
    lhs: L,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    rows: usize,
    inner: usize,
    n: usize,
    accumulate: bool,
) where
    L: Fn(usize, usize) -> f32,
{
    if !accumulate {
        c[..rows * n].fill(0.0);
    }
    if n == 0 || inner == 0 {
        return;
    }
    let mut panel = vec![0f32; inner * TILE_ROWS];
    let mut i = 0;
    while i < rows {
        let r = (rows - i).min(TILE_ROWS);
        for p in 0..inner {
            for q in 0..r {
                panel[p * r + q] = lhs(i + q, p);
            }
        }
        let panel = &panel[..inner * r];
        let out = &mut c[i * n..(i + r) * n];
        match r {
            8 => row_block::<8>(panel, b, ldb, out, n),
            7 => row_block::<7>(panel, b, ldb, out, n),
            6 => row_block::<6>(panel, b, ldb, out, n),
            5 => row_block::<5>(panel, b, ldb, out, n),
            4 => row_block::<4>(panel, b, ldb, out, n),
            3 => row_block::<3>(panel, b, ldb, out, n),
            2 => row_block::<2>(panel, b, ldb, out, n),
            _ => row_block::<1>(panel, b, ldb, out, n),
        }
        i += r;
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
fn row_block<const R: usize>(panel: &[f32], b: &[f32], ldb: usize, c: &mut [f32], n: usize) {
    simd::row_block::<R>(panel, b, ldb, c, n);
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
fn row_block<const R: usize>(panel: &[f32], b: &[f32], ldb: usize, c: &mut [f32], n: usize) {
    portable_row_block::<R>(panel, b, ldb, c, n);
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod simd {
    use std::arch::x86_64::*;

    use super::LANES;

    pub(super) fn row_block<const R: usize>(panel: &[f32], b: &[f32], ldb: usize, c: &mut [f32], n: usize) {
        let inner = panel.len() / R;
        assert!(c.len() >= R * n && panel.len() == inner * R);
        assert!(inner == 0 || b.len() >= (inner - 1) * ldb + n);
        let mut j = 0;
        // SAFETY: the assertions above bound every load and store below;
        // partial vectors use masked accesses that never touch memory
        // outside the masked lanes.
        unsafe {
            // Narrower strips for tall tiles keep the accumulators in registers.
            if R <= 2 {
                while j + 4 * LANES <= n {
                    strip::<R, 4>(panel, b, ldb, c, n, j, inner, !0);
                    j += 4 * LANES;
                }
            } else {
                while j + 2 * LANES <= n {
                    strip::<R, 2>(panel, b, ldb, c, n, j, inner, !0);
                    j += 2 * LANES;
                }
            }
            while j + LANES <= n {
                strip::<R, 1>(panel, b, ldb, c, n, j, inner, !0);
                j += LANES;
            }
            if j < n {
                let mask: __mmask16 = (1u16 << (n - j)) - 1;
                strip::<R, 1>(panel, b, ldb, c, n, j, inner, mask);
            }
        }
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn strip<const R: usize, const S: usize>(
        panel: &[f32],
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        n: usize,
        j: usize,
        inner: usize,
        last: __mmask16,
    ) {
        let mask = |s: usize| if s + 1 == S { last } else { !0 };
        let cp = c.as_mut_ptr();
        let mut acc = [[_mm512_setzero_ps(); S]; R];
        for r in 0..R {
            for s in 0..S {
                acc[r][s] = _mm512_maskz_loadu_ps(mask(s), cp.add(r * n + j + s * LANES));
            }
        }
        let ap = panel.as_ptr();
        let mut bp = b.as_ptr().add(j);
        for p in 0..inner {
            let mut bv = [_mm512_setzero_ps(); S];
            for s in 0..S {
                bv[s] = _mm512_maskz_loadu_ps(mask(s), bp.add(s * LANES));
            }
            for r in 0..R {
                let a = _mm512_set1_ps(*ap.add(p * R + r));
                for s in 0..S {
                    acc[r][s] = _mm512_fmadd_ps(a, bv[s], acc[r][s]);
                }
            }
            if p + 1 < inner {
                bp = bp.add(ldb);
            }
        }
        for r in 0..R {
            for s in 0..S {
                _mm512_mask_storeu_ps(cp.add(r * n + j + s * LANES), mask(s), acc[r][s]);
            }
        }
    }
}

#[cfg_attr(all(target_arch = "x86_64", target_feature = "avx512f"), allow(dead_code))]
#[inline(always)]
fn fma_lanes(acc: &mut [f32; LANES], a: f32, b: &[f32; LANES]) {
    for q in 0..LANES {
        acc[q] = a.mul_add(b[q], acc[q]);
    }
}

#[cfg_attr(all(target_arch = "x86_64", target_feature = "avx512f"), allow(dead_code))]
#[inline(always)]
fn strip<const R: usize, const S: usize>(panel: &[f32], b: &[f32], ldb: usize, c: &mut [f32], n: usize, j: usize) {
    let mut acc = [[[0f32; LANES]; S]; R];
    for r in 0..R {
        for s in 0..S {
            let o = r * n + j + s * LANES;
            acc[r][s].copy_from_slice(&c[o..o + LANES]);
        }
    }
    for (ap, brow) in panel.chunks_exact(R).zip(b.chunks(ldb)) {
        let ap: &[f32; R] = ap.try_into().unwrap();
        let bs = &brow[j..j + S * LANES];
        for s in 0..S {
            let bt: &[f32; LANES] = bs[s * LANES..(s + 1) * LANES].try_into().unwrap();
            for r in 0..R {
                fma_lanes(&mut acc[r][s], ap[r], bt);
            }
        }
    }
    for r in 0..R {
        for s in 0..S {
            let o = r * n + j + s * LANES;
            c[o..o + LANES].copy_from_slice(&acc[r][s]);
        }
    }
}

#[cfg_attr(all(target_arch = "x86_64", target_feature = "avx512f"), allow(dead_code))]
fn portable_row_block<const R: usize>(panel: &[f32], b: &[f32], ldb: usize, c: &mut [f32], n: usize) {
    let mut j = 0;
    while j + STRIPS * LANES <= n {
        strip::<R, STRIPS>(panel, b, ldb, c, n, j);
        j += STRIPS * LANES;
    }
    while j + LANES <= n {
        strip::<R, 1>(panel, b, ldb, c, n, j);
        j += LANES;
    }
    if j < n {
        for (ap, brow) in panel.chunks_exact(R).zip(b.chunks(ldb)) {
            for (r, &av) in ap.iter().enumerate() {
                for (x, &bv) in c[r * n + j..r * n + n].iter_mut().zip(&brow[j..]) {
                    *x = av.mul_add(bv, *x);
                }
            }
        }
    }
}

/// Dot product with eight fixed interleaved partial sums, combined in a
/// fixed order. Deterministic, though not left to right.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// ---------------------------------------------------------------------------
// Tensor-level kernels
// ---------------------------------------------------------------------------

/// Standard matrix product of `a` (…×k, leading dims flattened) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 || a.shape.is_empty() {
        return Err(Error::Shape(format!(
            "matmul expects (…×k)·(k×n), got {:?}·{:?}",
            a.shape, b.shape
        )));
    }
    let (k, n) = (b.shape[0], b.shape[1]);
    if a.cols() != k {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?}·{:?}",
            a.shape, b.shape
        )));
    }
    let m = a.rows();
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// Per-row layer normalisation over the last dimension.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::Shape("layernorm over an empty dimension".into()));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layernorm width {} but gain/bias have {}/{}",
            d,
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        layernorm_row(x.row(r), gain.data(), bias.data(), eps, out.row_mut(r));
    }
    Ok(out)
}

/// Normalises one row and returns `1/sqrt(var + eps)` for reuse in backward.
#[inline]
pub fn layernorm_row(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let d = x.len() as f32;
    let mut sum = 0.0;
    for &v in x {
        sum += v;
    }
    let mean = sum / d;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    let inv = 1.0 / (var / d + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
    inv
}

/// [`layernorm_row`] that also keeps the normalised input for backward.
/// Produces bit-identical `out`.
#[inline]
pub fn layernorm_row_cached(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    eps: f32,
    out: &mut [f32],
    xhat: &mut [f32],
) -> f32 {
    let d = x.len() as f32;
    let mut sum = 0.0;
    for &v in x {
        sum += v;
    }
    let mean = sum / d;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    let inv = 1.0 / (var / d + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    inv
}

/// Backward of [`layernorm_row`] given the normalised input `xhat`.
/// Accumulates into `dgain`/`dbias` and writes the input gradient to `dx`.
#[inline]
pub fn layernorm_row_backward(
    xhat: &[f32],
    inv: f32,
    gain: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) {
    let d = xhat.len() as f32;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for i in 0..xhat.len() {
        let g = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        mean_g += g;
        mean_gx += g * xhat[i];
    }
    mean_g /= d;
    mean_gx /= d;
    for i in 0..xhat.len() {
        let g = dy[i] * gain[i];
        dx[i] = inv * (g - mean_g - xhat[i] * mean_gx);
    }
}

/// `e^x` by range reduction and a degree-6 polynomial, within 2 ulp of the
/// correctly rounded result. Branch-free, so loops over it vectorise.
/// Underflows to zero below -87.
#[inline(always)]
pub fn exp_fast(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let xc = x.clamp(-87.0, 88.0);
    let n = (xc * std::f32::consts::LOG2_E).round_ties_even();
    let r = n.mul_add(-LN2_LO, n.mul_add(-LN2_HI, xc));
    let mut p = 1.987_569_2e-4f32;
    p = p.mul_add(r, 1.398_2e-3);
    p = p.mul_add(r, 8.333_452e-3);
    p = p.mul_add(r, 4.166_579_6e-2);
    p = p.mul_add(r, 1.666_666_5e-1);
    p = p.mul_add(r, 5.000_000_1e-1);
    let e = (p * r).mul_add(r, r) + 1.0;
    // SAFETY: `n` is integral and within [-126, 127] after the clamp, so
    // the conversion is exact; the unchecked form keeps the loop vectorised.
    let ni: i32 = unsafe { n.to_int_unchecked() };
    let scale = f32::from_bits(((ni + 127) as u32) << 23);
    if x < -87.0 {
        0.0
    } else {
        e * scale
    }
}

/// Rational approximation of tanh, accurate to a few ulp in f32. Unlike
/// libm's `tanhf` it has no branches and vectorises.
#[inline(always)]
pub fn tanh_fast(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A1: f32 = 4.893_524_6e-3;
    const A3: f32 = 6.372_619e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297e-8;
    const A9: f32 = -8.604_672e-11;
    const A11: f32 = 2.000_188e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347e-4;
    const B6: f32 = 1.198_258_4e-6;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let p = x * (A1 + x2 * (A3 + x2 * (A5 + x2 * (A7 + x2 * (A9 + x2 * (A11 + x2 * A13))))));
    let q = B0 + x2 * (B2 + x2 * (B4 + x2 * B6));
    p / q
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GeLU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_fast(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh_fast(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

/// Row-wise softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    if x.cols() == 0 {
        return out;
    }
    for r in 0..x.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[inline]
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise log-softmax, written into `out`.
#[inline]
pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = max_lanes(row);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = exp_fast(v - max);
    }
    let lse = max + sum_lanes(out).ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

const REDUCE_LANES: usize = 16;

/// Maximum over 16 interleaved lanes. NaNs are ignored.
pub fn max_lanes(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; REDUCE_LANES];
    let chunks = xs.chunks_exact(REDUCE_LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    for (a, &v) in acc.iter_mut().zip(rest) {
        *a = if v > *a { v } else { *a };
    }
    acc.iter().fold(f32::NEG_INFINITY, |m, &v| if v > m { v } else { m })
}

/// Sum over 16 interleaved lanes, folded pairwise in a fixed order.
pub fn sum_lanes(xs: &[f32]) -> f32 {
    let mut acc = [0f32; REDUCE_LANES];
    let chunks = xs.chunks_exact(REDUCE_LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    for (a, &v) in acc.iter_mut().zip(rest) {
        *a += v;
    }
    let mut width = REDUCE_LANES / 2;
    while width > 0 {
        for q in 0..width {
            acc[q] += acc[q + width];
        }
        width /= 2;
    }
    acc[0]
}

/// Gathers rows of an embedding table.
pub fn embedding(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (rows, d) = (table.rows(), table.cols());
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= rows {
            return Err(Error::Range(format!("id {id} outside table of {rows} rows")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Index of the maximum; ties go to the lowest index.
#[inline]
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}
