//! Forward and backward kernels for convolution and dense layers.
//!
//! Convolution is lowered to GEMM through an im2col buffer, one sample at a
//! time. Weight gradients are accumulated sample by sample in batch order, so
//! results do not depend on how the work is scheduled.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Output columns `ow` whose input column `ow*sw + kj - pw` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pw { 0 } else { (g.pw - kj).div_ceil(g.sw) };
    let hi = if g.w + g.pw > kj {
        ((g.w + g.pw - kj - 1) / g.sw + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolls one sample into `cols`, whose rows are `ld` apart; the sample's
/// positions occupy the first `positions()` entries of each row.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld..row * ld + p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.sw + kj - g.pw;
                    if g.sw == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.sw)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld..row * ld + p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.sw + kj - g.pw;
                    let line = &src[oh * g.wo + lo..oh * g.wo + hi];
                    for (d, s) in dst[first..].iter_mut().step_by(g.sw).zip(line) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Unrolled input, one `[C·KH·KW, P]` block per sample. Pointwise
/// convolutions need no unrolling and get an empty buffer.
pub(crate) fn unroll<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        return Vec::new();
    }
    let block = g.col_rows() * g.positions();
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); g.n * block];
    for (xn, cn) in x.chunks_exact(in_len).zip(cols.chunks_exact_mut(block)) {
        im2col(g, xn, cn, g.positions());
    }
    cols
}

fn sample_cols<'c, T>(g: &ConvGeom, x: &'c [T], cols: &'c [T], n: usize) -> &'c [T] {
    if g.is_pointwise() {
        let len = g.c * g.h * g.w;
        &x[n * len..(n + 1) * len]
    } else {
        let len = g.col_rows() * g.positions();
        &cols[n * len..(n + 1) * len]
    }
}

/// Returns the output and the unrolled input, which the backward pass reuses.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let (rows, p) = (g.col_rows(), g.positions());
    let out_len = g.k * p;
    let cols = unroll(g, x);
    let mut out = vec![T::zero(); g.n * out_len];
    for n in 0..g.n {
        let src = sample_cols(g, x, &cols, n);
        let on = &mut out[n * out_len..(n + 1) * out_len];
        for (k, line) in on.chunks_exact_mut(p).enumerate() {
            line.fill(b[k]);
        }
        T::gemm(g.k, rows, p, T::one(), w, rows as isize, 1, src, p as isize, 1, T::one(), on, p as isize, 1);
    }
    (out, cols)
}

/// Accumulates into whichever of `dx`, `dw`, `db` are requested, sample by
/// sample in batch order. `x` and `cols` are the forward input and the
/// unrolled input returned by [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    cols: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, p) = (g.col_rows(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * p;
    let mut dcols = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); rows * p]
    } else {
        Vec::new()
    };
    let recompute = cols.is_empty() && !g.is_pointwise();
    let mut scratch = if recompute { vec![T::zero(); rows * p] } else { Vec::new() };
    for n in 0..g.n {
        let dn = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (k, line) in dn.chunks_exact(p).enumerate() {
                db[k] += line.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW[K×R] += dout[K×P] · colsᵀ[P×R]
            let src = if recompute {
                im2col(g, &x[n * in_len..(n + 1) * in_len], &mut scratch, p);
                &scratch
            } else {
                sample_cols(g, x, cols, n)
            };
            T::gemm(g.k, p, rows, T::one(), dn, p as isize, 1, src, 1, p as isize, T::one(), dw, rows as isize, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols[R×P] = Wᵀ[R×K] · dout[K×P]
            if g.is_pointwise() {
                T::gemm(rows, g.k, p, T::one(), w, 1, rows as isize, dn, p as isize, 1, T::one(), dxn, p as isize, 1);
            } else {
                T::gemm(rows, g.k, p, T::one(), w, 1, rows as isize, dn, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im_add(g, &dcols, p, dxn);
            }
        }
    }
}

/// `out[N×G] = x[N×F] · wᵀ + b`
pub(crate) fn linear_forward<T: Scalar>(n: usize, f: usize, g: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    T::gemm(
        n,
        f,
        g,
        T::one(),
        x,
        f as isize,
        1,
        w,
        1,
        f as isize,
        T::one(),
        &mut out,
        g as isize,
        1,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    n: usize,
    f: usize,
    g: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(
            n,
            g,
            f,
            T::one(),
            dout,
            g as isize,
            1,
            w,
            f as isize,
            1,
            T::one(),
            dx,
            f as isize,
            1,
        );
    }
    if let Some(dw) = dw {
        T::gemm(
            g,
            n,
            f,
            T::one(),
            dout,
            1,
            g as isize,
            x,
            f as isize,
            1,
            T::one(),
            dw,
            f as isize,
            1,
        );
    }
    if let Some(db) = db {
        for row in dout.chunks_exact(g) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
        }
    }
}
