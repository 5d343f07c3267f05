//! Raw compute loops shared by graph forward and backward passes.
//!
//! Every reduction has a fixed summation order per output element, so results
//! are bit-identical regardless of the thread cap.

use crate::scalar::Scalar;
use std::sync::atomic::{AtomicUsize, Ordering};

static THREAD_CAP: AtomicUsize = AtomicUsize::new(0);

/// Maximum number of threads forward kernels may use.
///
/// Initialized from `PAIRFORGE_THREADS` on first call (default 1).
pub fn thread_cap() -> usize {
    let cur = THREAD_CAP.load(Ordering::Relaxed);
    if cur != 0 {
        return cur;
    }
    let n = std::env::var("PAIRFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1);
    THREAD_CAP.store(n, Ordering::Relaxed);
    n
}

pub fn set_thread_cap(n: usize) {
    THREAD_CAP.store(n.max(1), Ordering::Relaxed);
}

/// Run `f` over disjoint row-chunks of `out`, possibly on several threads.
/// `f(row0, rows)` must only depend on the chunk's own rows.
fn par_row_chunks<S, F>(out: &mut [S], rows: usize, row_len: usize, f: F)
where
    S: Scalar,
    F: Fn(usize, &mut [S]) + Sync,
{
    let threads = thread_cap().min(rows).max(1);
    if threads == 1 {
        f(0, out);
        return;
    }
    let chunk_rows = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (i, chunk) in out.chunks_mut(chunk_rows * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || f(i * chunk_rows, chunk));
        }
    });
}

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    par_row_chunks(out, m, n, |row0, chunk| {
        for (li, row) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + li;
            row.fill(S::zero());
            for p in 0..k {
                let a_ip = a[i * k + p];
                let b_row = &b[p * n..p * n + n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    });
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        for j in 0..n {
            let b_row = &b[j * k..j * k + k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let b_row = &b[i * n..i * n + n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let o_row = &mut out[p * n..p * n + n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Cross-correlation. x [B,Ci,H,W], kernel [Co,Ci,k,k], out [B,Co,Ho,Wo].
pub fn conv2d_fwd<S: Scalar>(x: &[S], kernel: &[S], d: &ConvDims, out: &mut [S]) {
    let plane_out = d.h_out * d.w_out;
    let planes = d.batch * d.c_out;
    par_row_chunks(out, planes, plane_out, |plane0, chunk| {
        for (lp, plane) in chunk.chunks_mut(plane_out).enumerate() {
            let p = plane0 + lp;
            let b = p / d.c_out;
            let co = p % d.c_out;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let mut acc = S::zero();
                    for ci in 0..d.c_in {
                        let x_base = (b * d.c_in + ci) * d.h * d.w;
                        let k_base = ((co * d.c_in + ci) * d.k) * d.k;
                        for r in 0..d.k {
                            let ih = (oh * d.stride + r) as isize - d.pad as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row = x_base + ih as usize * d.w;
                            for c in 0..d.k {
                                let iw = (ow * d.stride + c) as isize - d.pad as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += x[row + iw as usize] * kernel[k_base + r * d.k + c];
                            }
                        }
                    }
                    plane[oh * d.w_out + ow] = acc;
                }
            }
        }
    });
}

/// dx += adjoint of conv2d_fwd w.r.t. x. Scatter over output positions.
pub fn conv2d_bwd_input<S: Scalar>(dout: &[S], kernel: &[S], d: &ConvDims, dx: &mut [S]) {
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o_base = (b * d.c_out + co) * d.h_out * d.w_out;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let g = dout[o_base + oh * d.w_out + ow];
                    for ci in 0..d.c_in {
                        let x_base = (b * d.c_in + ci) * d.h * d.w;
                        let k_base = ((co * d.c_in + ci) * d.k) * d.k;
                        for r in 0..d.k {
                            let ih = (oh * d.stride + r) as isize - d.pad as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row = x_base + ih as usize * d.w;
                            for c in 0..d.k {
                                let iw = (ow * d.stride + c) as isize - d.pad as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                dx[row + iw as usize] += g * kernel[k_base + r * d.k + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dk += adjoint of conv2d_fwd w.r.t. kernel.
pub fn conv2d_bwd_kernel<S: Scalar>(dout: &[S], x: &[S], d: &ConvDims, dk: &mut [S]) {
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let k_base = ((co * d.c_in + ci) * d.k) * d.k;
            for r in 0..d.k {
                for c in 0..d.k {
                    let mut acc = S::zero();
                    for b in 0..d.batch {
                        let o_base = (b * d.c_out + co) * d.h_out * d.w_out;
                        let x_base = (b * d.c_in + ci) * d.h * d.w;
                        for oh in 0..d.h_out {
                            let ih = (oh * d.stride + r) as isize - d.pad as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row = x_base + ih as usize * d.w;
                            for ow in 0..d.w_out {
                                let iw = (ow * d.stride + c) as isize - d.pad as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += dout[o_base + oh * d.w_out + ow] * x[row + iw as usize];
                            }
                        }
                    }
                    dk[k_base + r * d.k + c] += acc;
                }
            }
        }
    }
}

/// Transposed convolution. x [B,Ci,H,W], kernel [Ci,Co,k,k], out [B,Co,Ho,Wo]
/// with Ho = (H−1)·stride − 2·pad + k. Adjoint of conv2d_fwd on the same
/// kernel buffer read in the other layout.
pub fn convt2d_fwd<S: Scalar>(x: &[S], kernel: &[S], d: &ConvDims, out: &mut [S]) {
    out.fill(S::zero());
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let x_base = (b * d.c_in + ci) * d.h * d.w;
            for ih in 0..d.h {
                for iw in 0..d.w {
                    let v = x[x_base + ih * d.w + iw];
                    for co in 0..d.c_out {
                        let o_base = (b * d.c_out + co) * d.h_out * d.w_out;
                        let k_base = ((ci * d.c_out + co) * d.k) * d.k;
                        for r in 0..d.k {
                            let oh = (ih * d.stride + r) as isize - d.pad as isize;
                            if oh < 0 || oh >= d.h_out as isize {
                                continue;
                            }
                            let o_row = o_base + oh as usize * d.w_out;
                            for c in 0..d.k {
                                let ow = (iw * d.stride + c) as isize - d.pad as isize;
                                if ow < 0 || ow >= d.w_out as isize {
                                    continue;
                                }
                                out[o_row + ow as usize] += v * kernel[k_base + r * d.k + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dx += adjoint of convt2d_fwd w.r.t. x (a plain gather correlation).
pub fn convt2d_bwd_input<S: Scalar>(dout: &[S], kernel: &[S], d: &ConvDims, dx: &mut [S]) {
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let x_base = (b * d.c_in + ci) * d.h * d.w;
            for ih in 0..d.h {
                for iw in 0..d.w {
                    let mut acc = S::zero();
                    for co in 0..d.c_out {
                        let o_base = (b * d.c_out + co) * d.h_out * d.w_out;
                        let k_base = ((ci * d.c_out + co) * d.k) * d.k;
                        for r in 0..d.k {
                            let oh = (ih * d.stride + r) as isize - d.pad as isize;
                            if oh < 0 || oh >= d.h_out as isize {
                                continue;
                            }
                            let o_row = o_base + oh as usize * d.w_out;
                            for c in 0..d.k {
                                let ow = (iw * d.stride + c) as isize - d.pad as isize;
                                if ow < 0 || ow >= d.w_out as isize {
                                    continue;
                                }
                                acc += dout[o_row + ow as usize] * kernel[k_base + r * d.k + c];
                            }
                        }
                    }
                    dx[x_base + ih * d.w + iw] += acc;
                }
            }
        }
    }
}

/// dk += adjoint of convt2d_fwd w.r.t. kernel.
pub fn convt2d_bwd_kernel<S: Scalar>(dout: &[S], x: &[S], d: &ConvDims, dk: &mut [S]) {
    for ci in 0..d.c_in {
        for co in 0..d.c_out {
            let k_base = ((ci * d.c_out + co) * d.k) * d.k;
            for r in 0..d.k {
                for c in 0..d.k {
                    let mut acc = S::zero();
                    for b in 0..d.batch {
                        let x_base = (b * d.c_in + ci) * d.h * d.w;
                        let o_base = (b * d.c_out + co) * d.h_out * d.w_out;
                        for ih in 0..d.h {
                            let oh = (ih * d.stride + r) as isize - d.pad as isize;
                            if oh < 0 || oh >= d.h_out as isize {
                                continue;
                            }
                            let o_row = o_base + oh as usize * d.w_out;
                            for iw in 0..d.w {
                                let ow = (iw * d.stride + c) as isize - d.pad as isize;
                                if ow < 0 || ow >= d.w_out as isize {
                                    continue;
                                }
                                acc += x[x_base + ih * d.w + iw] * dout[o_row + ow as usize];
                            }
                        }
                    }
                    dk[k_base + r * d.k + c] += acc;
                }
            }
        }
    }
}
