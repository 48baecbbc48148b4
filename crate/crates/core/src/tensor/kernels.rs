//! Raw numeric kernels behind the tape ops. No shape checking happens here;
//! callers in `tape.rs` validate before dispatching.

use super::Real;

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op` optionally
/// transposes. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_trans: bool,
    b: &[Real],
    b_trans: bool,
    beta: Real,
    c: &mut [Real],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    backend::gemm(m, k, n, a, a_trans, b, b_trans, beta, c);
}

#[cfg(feature = "openblas")]
mod backend {
    use std::os::raw::c_int;
    use std::sync::Once;

    use super::Real;

    const ROW_MAJOR: c_int = 101;
    const NO_TRANS: c_int = 111;
    const TRANS: c_int = 112;

    #[link(name = "openblas")]
    extern "C" {
        fn openblas_set_num_threads(n: c_int);
        #[cfg(not(feature = "f32"))]
        fn cblas_dgemm(
            order: c_int,
            ta: c_int,
            tb: c_int,
            m: c_int,
            n: c_int,
            k: c_int,
            alpha: f64,
            a: *const f64,
            lda: c_int,
            b: *const f64,
            ldb: c_int,
            beta: f64,
            c: *mut f64,
            ldc: c_int,
        );
        #[cfg(feature = "f32")]
        fn cblas_sgemm(
            order: c_int,
            ta: c_int,
            tb: c_int,
            m: c_int,
            n: c_int,
            k: c_int,
            alpha: f32,
            a: *const f32,
            lda: c_int,
            b: *const f32,
            ldb: c_int,
            beta: f32,
            c: *mut f32,
            ldc: c_int,
        );
    }

    static SINGLE_THREADED: Once = Once::new();

    #[allow(clippy::too_many_arguments)]
    pub fn gemm(m: usize, k: usize, n: usize, a: &[Real], a_trans: bool, b: &[Real], b_trans: bool, beta: Real, c: &mut [Real]) {
        // Threaded BLAS reductions can reorder sums; parallelism lives above this layer.
        // SAFETY: plain FFI call with no pointer arguments.
        SINGLE_THREADED.call_once(|| unsafe { openblas_set_num_threads(1) });
        let (ta, lda) = if a_trans { (TRANS, m) } else { (NO_TRANS, k) };
        let (tb, ldb) = if b_trans { (TRANS, k) } else { (NO_TRANS, n) };
        #[cfg(not(feature = "f32"))]
        let f = cblas_dgemm;
        #[cfg(feature = "f32")]
        let f = cblas_sgemm;
        // SAFETY: leading dimensions match the asserted buffer extents.
        unsafe {
            f(
                ROW_MAJOR,
                ta,
                tb,
                m as c_int,
                n as c_int,
                k as c_int,
                1.0,
                a.as_ptr(),
                lda as c_int,
                b.as_ptr(),
                ldb as c_int,
                beta,
                c.as_mut_ptr(),
                n as c_int,
            )
        }
    }
}

#[cfg(not(feature = "openblas"))]
mod backend {
    use super::Real;

    #[allow(clippy::too_many_arguments)]
    pub fn gemm(m: usize, k: usize, n: usize, a: &[Real], a_trans: bool, b: &[Real], b_trans: bool, beta: Real, c: &mut [Real]) {
        let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
        #[cfg(not(feature = "f32"))]
        let f = matrixmultiply::dgemm;
        #[cfg(feature = "f32")]
        let f = matrixmultiply::sgemm;
        // SAFETY: the strides address exactly the asserted buffer extents.
        unsafe {
            f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

/// Geometry of a stride-1, same-padded convolution. 2-D convolutions use a
/// leading spatial extent and kernel depth of 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub spatial: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeom {
    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }
}

#[inline]
fn shifted(i: usize, d: usize, pad: usize, extent: usize) -> Option<usize> {
    let j = (i + d).checked_sub(pad)?;
    (j < extent).then_some(j)
}

/// Visit every contiguous span (output offset, length, source offset) of the
/// im2col matrix; spans outside the input are reported with `None`.
fn for_each_span(g: &ConvGeom, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let [sd, sh, sw] = g.spatial;
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let s = g.voxels();
    for c in 0..g.c_in {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((c * kd + dz) * kh + dy) * kw + dx;
                    let x0 = pw.saturating_sub(dx).min(sw);
                    let x1 = (sw + pw).saturating_sub(dx).min(sw);
                    for z in 0..sd {
                        let iz = shifted(z, dz, pd, sd);
                        for y in 0..sh {
                            let iy = shifted(y, dy, ph, sh);
                            let out = row * s + (z * sh + y) * sw;
                            match (iz, iy) {
                                (Some(iz), Some(iy)) if x1 > x0 => {
                                    if x0 > 0 {
                                        f(out, x0, None);
                                    }
                                    let src = c * s + (iz * sh + iy) * sw + (x0 + dx - pw);
                                    f(out + x0, x1 - x0, Some(src));
                                    if x1 < sw {
                                        f(out + x1, sw - x1, None);
                                    }
                                }
                                _ => f(out, sw, None),
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col(x: &[Real], g: &ConvGeom) -> Vec<Real> {
    let mut cols = vec![0.0; g.c_in * g.taps() * g.voxels()];
    for_each_span(g, |out, len, src| {
        if let Some(src) = src {
            cols[out..out + len].copy_from_slice(&x[src..src + len]);
        }
    });
    cols
}

pub fn col2im_add(cols: &[Real], g: &ConvGeom, dx: &mut [Real]) {
    for_each_span(g, |out, len, src| {
        if let Some(src) = src {
            for (d, &c) in dx[src..src + len].iter_mut().zip(&cols[out..out + len]) {
                *d += c;
            }
        }
    });
}

pub fn conv_forward(x: &[Real], w: &[Real], bias: Option<&[Real]>, g: &ConvGeom) -> Vec<Real> {
    let s = g.voxels();
    let kk = g.c_in * g.taps();
    let mut out = vec![0.0; g.c_out * s];
    if g.is_pointwise() {
        gemm(g.c_out, kk, s, w, false, x, false, 0.0, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(g.c_out, kk, s, w, false, &cols, false, 0.0, &mut out);
    }
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(s).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub dx: Option<Vec<Real>>,
    pub dw: Option<Vec<Real>>,
    pub db: Option<Vec<Real>>,
}

pub fn conv_backward(
    x: &[Real],
    w: &[Real],
    grad: &[Real],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let s = g.voxels();
    let kk = g.c_in * g.taps();
    let cols_owned;
    let cols: &[Real] = if g.is_pointwise() {
        x
    } else if need.1 {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };
    let dw = need.1.then(|| {
        let mut dw = vec![0.0; g.c_out * kk];
        gemm(g.c_out, s, kk, grad, false, cols, true, 0.0, &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0; kk * s];
            gemm(kk, g.c_out, s, w, true, grad, false, 0.0, &mut dx);
            dx
        } else {
            let mut dcols = vec![0.0; kk * s];
            gemm(kk, g.c_out, s, w, true, grad, false, 0.0, &mut dcols);
            let mut dx = vec![0.0; g.c_in * s];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    let db = need
        .2
        .then(|| grad.chunks_exact(s).map(|row| row.iter().sum()).collect());
    ConvGrads { dx, dw, db }
}

/// Per-group statistics of a `[C, S]` buffer.
pub fn group_stats(x: &[Real], groups: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let n = x.len() / groups;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for chunk in x.chunks_exact(n) {
        let m = chunk.iter().sum::<Real>() / n as Real;
        let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / n as Real;
        mean.push(m);
        rstd.push(1.0 / (var + eps).sqrt());
    }
    (mean, rstd)
}

/// Softmax over the middle axis of an `[outer, len, inner]` view, in place.
pub fn softmax_in_place(x: &mut [Real], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * len + d) * inner + i;
            let mut max = Real::NEG_INFINITY;
            for d in 0..len {
                max = max.max(x[at(d)]);
            }
            let mut total = 0.0;
            for d in 0..len {
                let e = (x[at(d)] - max).exp();
                x[at(d)] = e;
                total += e;
            }
            for d in 0..len {
                x[at(d)] /= total;
            }
        }
    }
}
