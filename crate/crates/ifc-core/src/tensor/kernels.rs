//! Raw f64 kernels shared by forward ops and their backward passes.
//!
//! Loops are laid out so the inner dimension is contiguous; rustc vectorizes
//! these well at opt-level 3.

/// out[n x m] += a[n x k] * b[k x m]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let row_out = &mut out[i * m..(i + 1) * m];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let row_b = &b[l * m..(l + 1) * m];
            for j in 0..m {
                row_out[j] += a_il * row_b[j];
            }
        }
    }
}

/// out[n x k] += g[n x m] * b[k x m]^T  (i.e. g . b^T)
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row_g = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let row_b = &b[l * m..(l + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += row_g[j] * row_b[j];
            }
            out[i * k + l] += acc;
        }
    }
}

/// out[k x m] += a[n x k]^T * g[n x m]
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row_g = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let row_out = &mut out[l * m..(l + 1) * m];
            for j in 0..m {
                row_out[j] += a_il * row_g[j];
            }
        }
    }
}

pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Cross-correlation forward: out[b, co, oy, ox] = sum x[b, ci, oy*s-p+ky, ox*s-p+kx] * w[co, ci, ky, kx] + bias[co]
///
/// Nine (or one) scalar-broadcast passes per channel pair, each running
/// contiguously over output columns.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64], d: &Conv2dDims) {
    let (h, wd, k, s, p) = (d.h, d.w, d.k, d.stride, d.padding);
    let p = p as isize;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + co) * d.h_out * d.w_out..][..d.h_out * d.w_out];
            let bias_v = bias.map_or(0.0, |bv| bv[co]);
            out_plane.fill(bias_v);
            for ci in 0..d.c_in {
                let x_plane = &x[(b * d.c_in + ci) * h * wd..][..h * wd];
                let w_base = (co * d.c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..d.h_out {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * wd..][..wd];
                            let out_row = &mut out_plane[oy * d.w_out..][..d.w_out];
                            // Valid ox where ix = ox*s + kx - p stays in bounds.
                            let ox_lo = if (kx as isize) < p {
                                ((p - kx as isize) as usize).div_ceil(s)
                            } else {
                                0
                            };
                            let ox_hi_excl = {
                                // largest ox with ox*s <= wd - 1 - kx + p
                                let top = wd as isize - 1 - kx as isize + p;
                                if top < 0 {
                                    0
                                } else {
                                    (top as usize / s + 1).min(d.w_out)
                                }
                            };
                            if s == 1 {
                                let shift = kx as isize - p;
                                for ox in ox_lo..ox_hi_excl {
                                    out_row[ox] += wv * x_row[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi_excl {
                                    let ix = (ox * s) as isize + kx as isize - p;
                                    out_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input/weight/bias gradients for conv2d, with the same
/// row-contiguous structure as the forward pass.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g_out: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
    d: &Conv2dDims,
) {
    let (h, wd, k, s, p) = (d.h, d.w, d.k, d.stride, d.padding);
    let p = p as isize;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g_plane = &g_out[(b * d.c_out + co) * d.h_out * d.w_out..][..d.h_out * d.w_out];
            if let Some(db) = dbias.as_deref_mut() {
                db[co] += g_plane.iter().sum::<f64>();
            }
            for ci in 0..d.c_in {
                let x_plane = &x[(b * d.c_in + ci) * h * wd..][..h * wd];
                let w_base = (co * d.c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        let mut dw_acc = 0.0;
                        for oy in 0..d.h_out {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_row = &g_plane[oy * d.w_out..][..d.w_out];
                            let x_row = &x_plane[iy as usize * wd..][..wd];
                            let ox_lo = if (kx as isize) < p {
                                ((p - kx as isize) as usize).div_ceil(s)
                            } else {
                                0
                            };
                            let ox_hi_excl = {
                                let top = wd as isize - 1 - kx as isize + p;
                                if top < 0 {
                                    0
                                } else {
                                    (top as usize / s + 1).min(d.w_out)
                                }
                            };
                            if dw.is_some() {
                                if s == 1 {
                                    let shift = kx as isize - p;
                                    for ox in ox_lo..ox_hi_excl {
                                        dw_acc += g_row[ox] * x_row[(ox as isize + shift) as usize];
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi_excl {
                                        let ix = (ox * s) as isize + kx as isize - p;
                                        dw_acc += g_row[ox] * x_row[ix as usize];
                                    }
                                }
                            }
                            if let Some(dxb) = dx.as_deref_mut() {
                                if wv != 0.0 {
                                    let dx_plane = &mut dxb[(b * d.c_in + ci) * h * wd..][..h * wd];
                                    let dx_row = &mut dx_plane[iy as usize * wd..][..wd];
                                    if s == 1 {
                                        let shift = kx as isize - p;
                                        for ox in ox_lo..ox_hi_excl {
                                            dx_row[(ox as isize + shift) as usize] += wv * g_row[ox];
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi_excl {
                                            let ix = (ox * s) as isize + kx as isize - p;
                                            dx_row[ix as usize] += wv * g_row[ox];
                                        }
                                    }
                                }
                            }
                        }
                        if let Some(dwb) = dw.as_deref_mut() {
                            dwb[w_base + ky * k + kx] += dw_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over contiguous rows of length `cols`.
pub fn softmax_rows(x: &[f64], out: &mut [f64], cols: usize) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *y = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}
