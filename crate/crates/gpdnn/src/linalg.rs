//! Raw float64 kernels: gemm, Cholesky (forward and reverse-mode), triangular
//! solves, and the im2col convolution/pooling loops. Everything here operates
//! on plain slices; the tape in `graph` wraps these with gradient plumbing.

use crate::error::{Error, Result};

/// C = alpha * op(A) * op(B) + beta * C, row-major contiguous storage.
/// `ta`/`tb` select the transposed reading: with `ta`, `a` is stored [k, m].
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix (only the
/// lower triangle of `a` is read). Returns L with the strict upper zeroed.
pub fn cholesky_factor(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPosDef { pivot: i, jitter: 0.0 });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve op(L) X = B in place for lower-triangular L; B is [n, ncols]
/// row-major. `transpose` solves the upper system L^T X = B instead.
pub fn solve_triangular(l: &[f64], n: usize, b: &mut [f64], ncols: usize, transpose: bool) -> Result<()> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * ncols);
    for i in 0..n {
        if l[i * n + i] == 0.0 {
            return Err(Error::SingularTriangular { index: i });
        }
    }
    if !transpose {
        for i in 0..n {
            let (head, tail) = b.split_at_mut(i * ncols);
            let row_i = &mut tail[..ncols];
            for j in 0..i {
                let lij = l[i * n + j];
                if lij != 0.0 {
                    let row_j = &head[j * ncols..(j + 1) * ncols];
                    for (x, &y) in row_i.iter_mut().zip(row_j) {
                        *x -= lij * y;
                    }
                }
            }
            let d = l[i * n + i];
            for x in row_i.iter_mut() {
                *x /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            let (head, tail) = b.split_at_mut((i + 1) * ncols);
            let row_i = &mut head[i * ncols..];
            for j in (i + 1)..n {
                let lji = l[j * n + i]; // (L^T)_{ij}
                if lji != 0.0 {
                    let row_j = &tail[(j - i - 1) * ncols..(j - i) * ncols];
                    for (x, &y) in row_i.iter_mut().zip(row_j) {
                        *x -= lji * y;
                    }
                }
            }
            let d = l[i * n + i];
            for x in row_i.iter_mut() {
                *x /= d;
            }
        }
    }
    Ok(())
}

/// Reverse-mode Cholesky: given L = chol(A) and the gradient `grad_l` w.r.t.
/// L, return the (symmetrized) gradient w.r.t. A. Differentiation-of-Cholesky
/// method: S = L^{-T} Phi(L^T grad_l) L^{-1} with Phi = lower triangle with
/// halved diagonal; grad_A = (S + S^T)/2.
pub fn cholesky_backward(l: &[f64], n: usize, grad_l: &[f64]) -> Result<Vec<f64>> {
    let mut p = vec![0.0; n * n];
    // P = Phi(L^T grad_l)
    gemm(true, false, n, n, n, 1.0, l, grad_l, 0.0, &mut p);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[i * n + j] = 0.0;
            } else if j == i {
                p[i * n + j] *= 0.5;
            }
        }
    }
    // X = L^{-T} P
    solve_triangular(l, n, &mut p, n, true)?;
    // S = X L^{-1}  =>  S^T = L^{-T} X^T
    let mut xt = transpose_square(&p, n);
    solve_triangular(l, n, &mut xt, n, true)?;
    // xt now holds S^T; symmetrize.
    let mut grad_a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            grad_a[i * n + j] = 0.5 * (xt[j * n + i] + xt[i * n + j]);
        }
    }
    Ok(grad_a)
}

pub fn transpose_square(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Stride-1 convolution geometry; NHWC activations, [kh, kw, cin, cout]
/// weights (so the flattened weight matrix is [kh*kw*cin, cout]).
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad: Padding,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        match self.pad {
            Padding::Same => (self.h, self.w),
            Padding::Valid => (self.h + 1 - self.kh, self.w + 1 - self.kw),
        }
    }

    /// Top/left pad; SAME splits k-1 with the extra pixel on bottom/right.
    fn pads(&self) -> (usize, usize) {
        match self.pad {
            Padding::Same => ((self.kh - 1) / 2, (self.kw - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }
}

const COL_CHUNK_BYTES: usize = 32 << 20;

fn images_per_chunk(rows_per_img: usize, k: usize, batch: usize) -> usize {
    (COL_CHUNK_BYTES / (rows_per_img * k * 8)).clamp(1, batch.max(1))
}

fn im2col(
    img: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let k = kh * kw * cin;
    debug_assert_eq!(col.len(), ho * wo * k);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut col[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            let mut off = 0;
            for ky in 0..kh {
                let y = (oy + ky) as isize - pad_t as isize;
                for kx in 0..kw {
                    let x = (ox + kx) as isize - pad_l as isize;
                    let dst = &mut row[off..off + cin];
                    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                        let src = ((y as usize) * w + x as usize) * cin;
                        dst.copy_from_slice(&img[src..src + cin]);
                    } else {
                        dst.fill(0.0);
                    }
                    off += cin;
                }
            }
        }
    }
}

fn col2im_add(
    col: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let k = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &col[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            let mut off = 0;
            for ky in 0..kh {
                let y = (oy + ky) as isize - pad_t as isize;
                for kx in 0..kw {
                    let x = (ox + kx) as isize - pad_l as isize;
                    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                        let dst = ((y as usize) * w + x as usize) * cin;
                        for c in 0..cin {
                            img[dst + c] += row[off + c];
                        }
                    }
                    off += cin;
                }
            }
        }
    }
}

/// x: [batch, h, w, cin]; weight: [kh, kw, cin, cout]; bias: [cout].
/// Returns [batch, ho, wo, cout].
pub fn conv2d_forward(d: &ConvDims, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ho, wo) = d.out_hw();
    let (pad_t, pad_l) = d.pads();
    let k = d.kh * d.kw * d.cin;
    let rows = ho * wo;
    let img_len = d.h * d.w * d.cin;
    let chunk = images_per_chunk(rows, k, d.batch);
    let mut col = vec![0.0; chunk * rows * k];
    let mut out = vec![0.0; d.batch * rows * d.cout];
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        for i in 0..nb {
            im2col(
                &x[(b0 + i) * img_len..(b0 + i + 1) * img_len],
                d.h,
                d.w,
                d.cin,
                d.kh,
                d.kw,
                pad_t,
                pad_l,
                ho,
                wo,
                &mut col[i * rows * k..(i + 1) * rows * k],
            );
        }
        gemm(
            false,
            false,
            nb * rows,
            k,
            d.cout,
            1.0,
            &col[..nb * rows * k],
            weight,
            0.0,
            &mut out[b0 * rows * d.cout..(b0 + nb) * rows * d.cout],
        );
        b0 += nb;
    }
    for row in out.chunks_exact_mut(d.cout) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

/// Gradients of conv2d. `need_dx` skips the input gradient when the input is
/// a constant (training-time batches).
pub fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = d.out_hw();
    let (pad_t, pad_l) = d.pads();
    let k = d.kh * d.kw * d.cin;
    let rows = ho * wo;
    let img_len = d.h * d.w * d.cin;
    let chunk = images_per_chunk(rows, k, d.batch);
    let mut col = vec![0.0; chunk * rows * k];
    let mut dcol = if need_dx { vec![0.0; chunk * rows * k] } else { Vec::new() };
    let mut dw = vec![0.0; k * d.cout];
    let mut db = vec![0.0; d.cout];
    let mut dx = if need_dx { Some(vec![0.0; d.batch * img_len]) } else { None };
    for row in dout.chunks_exact(d.cout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        for i in 0..nb {
            im2col(
                &x[(b0 + i) * img_len..(b0 + i + 1) * img_len],
                d.h,
                d.w,
                d.cin,
                d.kh,
                d.kw,
                pad_t,
                pad_l,
                ho,
                wo,
                &mut col[i * rows * k..(i + 1) * rows * k],
            );
        }
        let dout_chunk = &dout[b0 * rows * d.cout..(b0 + nb) * rows * d.cout];
        // dW += col^T dY
        gemm(true, false, k, nb * rows, d.cout, 1.0, &col[..nb * rows * k], dout_chunk, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcol = dY W^T
            gemm(false, true, nb * rows, d.cout, k, 1.0, dout_chunk, weight, 0.0, &mut dcol[..nb * rows * k]);
            for i in 0..nb {
                col2im_add(
                    &dcol[i * rows * k..(i + 1) * rows * k],
                    d.h,
                    d.w,
                    d.cin,
                    d.kh,
                    d.kw,
                    pad_t,
                    pad_l,
                    ho,
                    wo,
                    &mut dx[(b0 + i) * img_len..(b0 + i + 1) * img_len],
                );
            }
        }
        b0 += nb;
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2; ties resolve to the first (row-major)
/// element. Returns (output, flat argmax index into x per output element).
pub fn maxpool2d_forward(
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    pad: Padding,
    x: &[f64],
) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let (ho, wo) = match pad {
        Padding::Same => ((h + 1) / 2, (w + 1) / 2),
        Padding::Valid => (h / 2, w / 2),
    };
    let mut out = vec![0.0; batch * ho * wo * c];
    let mut arg = vec![0u32; batch * ho * wo * c];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2usize {
                        let y = oy * 2 + dy;
                        if y >= h {
                            continue;
                        }
                        for dx in 0..2usize {
                            let x_ = ox * 2 + dx;
                            if x_ >= w {
                                continue;
                            }
                            let idx = ((b * h + y) * w + x_) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = ((b * ho + oy) * wo + ox) * c + ch;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg, ho, wo)
}

pub fn maxpool2d_backward(x_len: usize, arg: &[u32], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x_len];
    for (&a, &g) in arg.iter().zip(dout) {
        dx[a as usize] += g;
    }
    dx
}
