//! Differentiable primitives. Each op validates its contract, computes the
//! forward value, counts multiply-adds where the ledger convention applies,
//! and registers a backward closure on the tape.

use std::rc::Rc;

use super::kernels::{self, Conv2dDims};
use super::{FlopKind, GradBuf, Tensor};
use crate::error::{Error, Result};

fn check_same_graph(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if !a.graph().same_graph(b.graph()) {
        return Err(Error::contract(op, "operands belong to different graphs"));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    /// Batched matrix product `[.., n, k] x [.., k, m] -> [.., n, m]`.
    /// Leading extents must match exactly. Counts `batch * n * k * m`
    /// multiply-adds.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        check_same_graph("matmul", self, rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() {
            return Err(Error::shape(
                "matmul",
                format!("ranks must match and be >= 2, got {:?} x {:?}", sa, sb),
            ));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible {:?} x {:?}", sa, sb),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[n, m]);

        let a_val = self.value_rc();
        let b_val = rhs.value_rc();
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            kernels::matmul_acc(
                &a_val[bi * n * k..(bi + 1) * n * k],
                &b_val[bi * k * m..(bi + 1) * k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        self.graph()
            .count_flops(FlopKind::MatMul, (batch * n * k * m) as u128);

        let (a_id, b_id) = (self.id(), rhs.id());
        let (a_ng, b_ng) = (self.needs_grad(), rhs.needs_grad());
        let (a_len, b_len) = (a_val.len(), b_val.len());
        Tensor::new_op(
            self.graph(),
            out_shape,
            out,
            &[self, rhs],
            "matmul",
            move |g, gb: &mut GradBuf| {
                if a_ng {
                    let da = gb.accum(a_id, a_len);
                    for bi in 0..batch {
                        kernels::matmul_bt_acc(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &b_val[bi * k * m..(bi + 1) * k * m],
                            &mut da[bi * n * k..(bi + 1) * n * k],
                            n,
                            k,
                            m,
                        );
                    }
                }
                if b_ng {
                    let db = gb.accum(b_id, b_len);
                    for bi in 0..batch {
                        kernels::matmul_at_acc(
                            &a_val[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut db[bi * k * m..(bi + 1) * k * m],
                            n,
                            k,
                            m,
                        );
                    }
                }
            },
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        check_same_graph("add", self, rhs)?;
        check_same_shape("add", self, rhs)?;
        let out = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        let (a_id, b_id) = (self.id(), rhs.id());
        let (a_ng, b_ng) = (self.needs_grad(), rhs.needs_grad());
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self, rhs], "add", move |g, gb| {
            if a_ng {
                let da = gb.accum(a_id, len);
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if b_ng {
                let db = gb.accum(b_id, len);
                for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        check_same_graph("sub", self, rhs)?;
        check_same_shape("sub", self, rhs)?;
        let out = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        let (a_id, b_id) = (self.id(), rhs.id());
        let (a_ng, b_ng) = (self.needs_grad(), rhs.needs_grad());
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self, rhs], "sub", move |g, gb| {
            if a_ng {
                let da = gb.accum(a_id, len);
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if b_ng {
                let db = gb.accum(b_id, len);
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        check_same_graph("mul", self, rhs)?;
        check_same_shape("mul", self, rhs)?;
        let a_val = self.value_rc();
        let b_val = rhs.value_rc();
        let out = a_val.iter().zip(b_val.iter()).map(|(x, y)| x * y).collect();
        let (a_id, b_id) = (self.id(), rhs.id());
        let (a_ng, b_ng) = (self.needs_grad(), rhs.needs_grad());
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self, rhs], "mul", move |g, gb| {
            if a_ng {
                let da = gb.accum(a_id, len);
                for i in 0..len {
                    da[i] += g[i] * b_val[i];
                }
            }
            if b_ng {
                let db = gb.accum(b_id, len);
                for i in 0..len {
                    db[i] += g[i] * a_val[i];
                }
            }
        })
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        check_same_graph("div", self, rhs)?;
        check_same_shape("div", self, rhs)?;
        let a_val = self.value_rc();
        let b_val = rhs.value_rc();
        let out = a_val.iter().zip(b_val.iter()).map(|(x, y)| x / y).collect();
        let (a_id, b_id) = (self.id(), rhs.id());
        let (a_ng, b_ng) = (self.needs_grad(), rhs.needs_grad());
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self, rhs], "div", move |g, gb| {
            if a_ng {
                let da = gb.accum(a_id, len);
                for i in 0..len {
                    da[i] += g[i] / b_val[i];
                }
            }
            if b_ng {
                let db = gb.accum(b_id, len);
                for i in 0..len {
                    db[i] -= g[i] * a_val[i] / (b_val[i] * b_val[i]);
                }
            }
        })
    }

    /// Broadcast-add a vector over the last dimension.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        check_same_graph("add_row", self, row)?;
        let c = *self.shape().last().ok_or_else(|| Error::shape("add_row", "rank 0 input"))?;
        if row.shape() != [c] {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} does not match last extent {}", row.shape(), c),
            ));
        }
        let row_val = row.value_rc();
        let out = self.with_data(|a| {
            let mut o = a.to_vec();
            for chunk in o.chunks_exact_mut(c) {
                for (v, r) in chunk.iter_mut().zip(row_val.iter()) {
                    *v += r;
                }
            }
            o
        });
        let (a_id, r_id) = (self.id(), row.id());
        let (a_ng, r_ng) = (self.needs_grad(), row.needs_grad());
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self, row], "add_row", move |g, gb| {
            if a_ng {
                let da = gb.accum(a_id, len);
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if r_ng {
                let dr = gb.accum(r_id, c);
                for chunk in g.chunks_exact(c) {
                    for (d, gv) in dr.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
            }
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = self.with_data(|a| a.iter().map(|x| x * c).collect());
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "scale", move |g, gb| {
            let da = gb.accum(a_id, len);
            for (d, gv) in da.iter_mut().zip(g) {
                *d += gv * c;
            }
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.with_data(|a| a.iter().map(|x| x + c).collect());
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "add_scalar", move |g, gb| {
            let da = gb.accum(a_id, len);
            for (d, gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let a_val = self.value_rc();
        let out = a_val.iter().map(|x| x.max(0.0)).collect();
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "relu", move |g, gb| {
            let da = gb.accum(a_id, len);
            for i in 0..len {
                if a_val[i] > 0.0 {
                    da[i] += g[i];
                }
            }
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                })
                .collect()
        });
        let y_val = Rc::new(out.clone());
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "sigmoid", move |g, gb| {
            let da = gb.accum(a_id, len);
            for i in 0..len {
                da[i] += g[i] * y_val[i] * (1.0 - y_val[i]);
            }
        })
    }

    /// Natural log with the argument clamped from below.
    pub fn ln_clamped(&self, min: f64) -> Result<Tensor> {
        let a_val = self.value_rc();
        let out = a_val.iter().map(|&x| x.max(min).ln()).collect();
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "ln", move |g, gb| {
            let da = gb.accum(a_id, len);
            for i in 0..len {
                if a_val[i] > min {
                    da[i] += g[i] / a_val[i];
                }
            }
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.with_data(|a| a.iter().sum());
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(self.graph(), vec![1], vec![s], &[self], "sum_all", move |g, gb| {
            let da = gb.accum(a_id, len);
            for d in da.iter_mut() {
                *d += g[0];
            }
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let len = self.numel();
        if len == 0 {
            return Err(Error::contract("mean_all", "empty tensor"));
        }
        let s: f64 = self.with_data(|a| a.iter().sum::<f64>() / len as f64);
        let a_id = self.id();
        Tensor::new_op(self.graph(), vec![1], vec![s], &[self], "mean_all", move |g, gb| {
            let da = gb.accum(a_id, len);
            let gv = g[0] / len as f64;
            for d in da.iter_mut() {
                *d += gv;
            }
        })
    }

    /// View with a new shape over the same values (no copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let a_id = self.id();
        let len = self.numel();
        let value = self.value_rc();
        let needs = self.graph().is_recording() && self.needs_grad();
        // Shares the value buffer; backward just forwards the gradient.
        let node = super::Node {
            shape: shape.to_vec(),
            value,
            grad: None,
            requires_grad: false,
            needs_grad: needs,
            back: if needs {
                Some(Box::new(move |g: &[f64], gb: &mut GradBuf| {
                    let da = gb.accum(a_id, len);
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }) as super::BackFn)
            } else {
                None
            },
        };
        Ok(self.graph().push(node))
    }

    /// Materialized axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(
                "permute",
                format!("invalid axes {:?} for rank {}", axes, rank),
            ));
        }
        let in_shape = self.shape().to_vec();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel = self.numel();

        let gather = |src: &[f64], dst: &mut [f64]| {
            let mut coord = vec![0usize; rank];
            let mut src_idx = 0usize;
            for slot in dst.iter_mut().take(numel) {
                *slot = src[src_idx];
                for d in (0..rank).rev() {
                    coord[d] += 1;
                    src_idx += map_strides[d];
                    if coord[d] < out_shape[d] {
                        break;
                    }
                    src_idx -= coord[d] * map_strides[d];
                    coord[d] = 0;
                }
            }
        };

        let mut out = vec![0.0; numel];
        self.with_data(|a| gather(a, &mut out));

        let a_id = self.id();
        let out_shape_c = out_shape.clone();
        let map_strides_c = map_strides.clone();
        Tensor::new_op(self.graph(), out_shape, out, &[self], "permute", move |g, gb| {
            let da = gb.accum(a_id, numel);
            // Scatter: inverse of the forward gather.
            let mut coord = vec![0usize; rank];
            let mut src_idx = 0usize;
            for gv in g.iter().take(numel) {
                da[src_idx] += gv;
                for d in (0..rank).rev() {
                    coord[d] += 1;
                    src_idx += map_strides_c[d];
                    if coord[d] < out_shape_c[d] {
                        break;
                    }
                    src_idx -= coord[d] * map_strides_c[d];
                    coord[d] = 0;
                }
            }
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::contract("narrow", format!("axis {} out of rank {}", axis, rank)));
        }
        let (outer, axis_len, inner) = axis_split(self.shape(), axis);
        if start + len > axis_len || len == 0 {
            return Err(Error::contract(
                "narrow",
                format!("window {}..{} out of extent {}", start, start + len, axis_len),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        self.with_data(|a| {
            for o in 0..outer {
                let src = (o * axis_len + start) * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&a[src..src + len * inner]);
            }
        });
        let a_id = self.id();
        let total = self.numel();
        Tensor::new_op(self.graph(), out_shape, out, &[self], "narrow", move |g, gb| {
            let da = gb.accum(a_id, total);
            for o in 0..outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                for i in 0..len * inner {
                    da[dst + i] += g[src + i];
                }
            }
        })
    }

    /// Concatenate along `axis`. All parts must share every other extent.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::contract("concat", format!("axis {} out of rank {}", axis, rank)));
        }
        let mut axis_total = 0usize;
        for p in parts {
            check_same_graph("concat", first, p)?;
            if p.shape().len() != rank {
                return Err(Error::shape("concat", "rank mismatch"));
            }
            for (d, (a, b)) in first.shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("extent {} mismatch: {} vs {}", d, a, b),
                    ));
                }
            }
            axis_total += p.shape()[axis];
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let plen = p.shape()[axis];
            p.with_data(|a| {
                for o in 0..outer {
                    let dst = (o * axis_total + offset) * inner;
                    let src = o * plen * inner;
                    out[dst..dst + plen * inner].copy_from_slice(&a[src..src + plen * inner]);
                }
            });
            spans.push((p.id(), p.needs_grad(), offset, plen, p.numel()));
            offset += plen;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::new_op(first.graph(), out_shape, out, &refs, "concat", move |g, gb| {
            for &(id, ng, off, plen, numel) in &spans {
                if !ng {
                    continue;
                }
                let da = gb.accum(id, numel);
                for o in 0..outer {
                    let src = (o * axis_total + off) * inner;
                    let dst = o * plen * inner;
                    for i in 0..plen * inner {
                        da[dst + i] += g[src + i];
                    }
                }
            }
        })
    }

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let cols = *self
            .shape()
            .last()
            .ok_or_else(|| Error::contract("softmax", "rank 0 input"))?;
        if cols == 0 {
            return Err(Error::contract("softmax", "empty last dimension"));
        }
        let len = self.numel();
        let mut out = vec![0.0; len];
        self.with_data(|a| kernels::softmax_rows(a, &mut out, cols));
        let y_val = Rc::new(out.clone());
        let a_id = self.id();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "softmax", move |g, gb| {
            let da = gb.accum(a_id, len);
            for r in 0..len / cols {
                let o = r * cols;
                let mut dot = 0.0;
                for j in 0..cols {
                    dot += g[o + j] * y_val[o + j];
                }
                for j in 0..cols {
                    da[o + j] += y_val[o + j] * (g[o + j] - dot);
                }
            }
        })
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        check_same_graph("layer_norm", self, gamma)?;
        check_same_graph("layer_norm", self, beta)?;
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::contract("layer_norm", "rank 0 input"))?;
        if c == 0 {
            return Err(Error::contract("layer_norm", "zero-length normalization axis"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must match last extent {}",
                    gamma.shape(),
                    beta.shape(),
                    c
                ),
            ));
        }
        let len = self.numel();
        let rows = len / c;
        let g_val = gamma.value_rc();
        let b_val = beta.value_rc();
        let mut out = vec![0.0; len];
        let mut xhat = vec![0.0; len];
        let mut inv_std = vec![0.0; rows];
        self.with_data(|a| {
            for r in 0..rows {
                let o = r * c;
                let mean = a[o..o + c].iter().sum::<f64>() / c as f64;
                let var = a[o..o + c].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let xh = (a[o + j] - mean) * is;
                    xhat[o + j] = xh;
                    out[o + j] = xh * g_val[j] + b_val[j];
                }
            }
        });
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let (x_id, g_id, b_id) = (self.id(), gamma.id(), beta.id());
        let (x_ng, g_ng, b_ng) = (self.needs_grad(), gamma.needs_grad(), beta.needs_grad());
        Tensor::new_op(
            self.graph(),
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            "layer_norm",
            move |g, gb| {
                if g_ng {
                    let dg = gb.accum(g_id, c);
                    for r in 0..rows {
                        let o = r * c;
                        for j in 0..c {
                            dg[j] += g[o + j] * xhat[o + j];
                        }
                    }
                }
                if b_ng {
                    let db = gb.accum(b_id, c);
                    for r in 0..rows {
                        let o = r * c;
                        for j in 0..c {
                            db[j] += g[o + j];
                        }
                    }
                }
                if x_ng {
                    let dx = gb.accum(x_id, len);
                    let n = c as f64;
                    for r in 0..rows {
                        let o = r * c;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..c {
                            let dxh = g[o + j] * g_val[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[o + j];
                        }
                        for j in 0..c {
                            let dxh = g[o + j] * g_val[j];
                            dx[o + j] +=
                                inv_std[r] * (dxh - sum_dxh / n - xhat[o + j] * sum_dxh_xh / n);
                        }
                    }
                }
            },
        )
    }

    /// 2-D cross-correlation over `[batch, c_in, h, w]` with kernel
    /// `[c_out, c_in, k, k]`, `k` in {1, 3}. Counts
    /// `out_elems * c_in * k^2` multiply-adds.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        check_same_graph("conv2d", self, weight)?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {:?} and {:?}", xs, ws),
            ));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::contract("conv2d", format!("kernel must be 1x1 or 3x3, got {}x{}", k, k2)));
        }
        if wc_in != c_in {
            return Err(Error::shape("conv2d", format!("input channels {} vs weight {}", c_in, wc_in)));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            check_same_graph("conv2d", self, b)?;
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs c_out {}", b.shape(), c_out)));
            }
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::contract("conv2d", "non-positive output extent"));
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let dims = Conv2dDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        };

        let x_val = self.value_rc();
        let w_val = weight.value_rc();
        let b_val = bias.map(|b| b.value_rc());
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        kernels::conv2d_forward(&x_val, &w_val, b_val.as_deref().map(|v| v.as_slice()), &mut out, &dims);
        self.graph().count_flops(
            FlopKind::Conv2d,
            (batch * c_out * h_out * w_out * c_in * k * k) as u128,
        );

        let (x_id, w_id) = (self.id(), weight.id());
        let (x_ng, w_ng) = (self.needs_grad(), weight.needs_grad());
        let bias_meta = bias.map(|b| (b.id(), b.needs_grad()));
        let (x_len, w_len) = (x_val.len(), w_val.len());
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::new_op(
            self.graph(),
            vec![batch, c_out, h_out, w_out],
            out,
            &parents,
            "conv2d",
            move |g, gb| {
                // GradBuf hands out one buffer at a time, so stage locally.
                let mut dx = if x_ng { Some(vec![0.0; x_len]) } else { None };
                let mut dw = if w_ng { Some(vec![0.0; w_len]) } else { None };
                let mut db = match bias_meta {
                    Some((_, true)) => Some(vec![0.0; dims.c_out]),
                    _ => None,
                };
                kernels::conv2d_backward(
                    &x_val,
                    &w_val,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    &dims,
                );
                if let Some(dx) = dx {
                    let buf = gb.accum(x_id, x_len);
                    for (d, v) in buf.iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if let Some(dw) = dw {
                    let buf = gb.accum(w_id, w_len);
                    for (d, v) in buf.iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
                if let (Some(db), Some((b_id, _))) = (db, bias_meta) {
                    let buf = gb.accum(b_id, dims.c_out);
                    for (d, v) in buf.iter_mut().zip(&db) {
                        *d += v;
                    }
                }
            },
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of `[batch, c, h, w]`.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected 4-d input, got {:?}", xs)));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; batch * c * h2 * w2];
        self.with_data(|a| {
            for bc in 0..batch * c {
                let src = bc * h * w;
                let dst = bc * h2 * w2;
                for y in 0..h2 {
                    let sy = y / 2;
                    for x in 0..w2 {
                        out[dst + y * w2 + x] = a[src + sy * w + x / 2];
                    }
                }
            }
        });
        let a_id = self.id();
        let len = self.numel();
        Tensor::new_op(
            self.graph(),
            vec![batch, c, h2, w2],
            out,
            &[self],
            "upsample2x",
            move |g, gb| {
                let da = gb.accum(a_id, len);
                for bc in 0..batch * c {
                    let src = bc * h * w;
                    let dst = bc * h2 * w2;
                    for y in 0..h2 {
                        let sy = y / 2;
                        for x in 0..w2 {
                            da[src + sy * w + x / 2] += g[dst + y * w2 + x];
                        }
                    }
                }
            },
        )
    }

    /// Fused scaled dot-product attention for one head:
    /// `softmax(q k^T * scale) v` over 2-d inputs `q [nq, d]`, `k/v [nk, d]`.
    ///
    /// Keeps the probability matrix off the tape unless the graph records
    /// gradients or `capture_probs` asks for it, so large-token attention
    /// stays within memory during instrumented inference. The optional probs
    /// tensor is observation-only: no gradient flows through it.
    pub fn scaled_dot_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        scale: f64,
        capture_probs: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        check_same_graph("sdpa", q, k)?;
        check_same_graph("sdpa", q, v)?;
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
            return Err(Error::shape(
                "sdpa",
                format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
            ));
        }
        let (nq, d) = (qs[0], qs[1]);
        let nk = ks[0];
        if nk == 0 {
            return Err(Error::contract("sdpa", "no keys to attend over"));
        }
        let q_val = q.value_rc();
        let k_val = k.value_rc();
        let v_val = v.value_rc();

        let mut probs = vec![0.0; nq * nk];
        {
            // q . k^T with k transposed once so the inner loop is contiguous.
            let mut k_t = vec![0.0; d * nk];
            for j in 0..nk {
                for l in 0..d {
                    k_t[l * nk + j] = k_val[j * d + l];
                }
            }
            kernels::matmul_acc(&q_val, &k_t, &mut probs, nq, d, nk);
            for v in probs.iter_mut() {
                *v *= scale;
            }
        }
        {
            let scores = std::mem::replace(&mut probs, vec![0.0; nq * nk]);
            kernels::softmax_rows(&scores, &mut probs, nk);
        }
        if !probs.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite { op: "sdpa" });
        }
        let mut out = vec![0.0; nq * d];
        kernels::matmul_acc(&probs, &v_val, &mut out, nq, nk, d);
        q.graph()
            .count_flops(FlopKind::MatMul, 2 * (nq * nk * d) as u128);

        let recording = q.graph().is_recording()
            && (q.needs_grad() || k.needs_grad() || v.needs_grad());
        let probs_rc = if recording || capture_probs {
            Some(Rc::new(probs))
        } else {
            None
        };

        let (q_id, k_id, v_id) = (q.id(), k.id(), v.id());
        let (q_ng, k_ng, v_ng) = (q.needs_grad(), k.needs_grad(), v.needs_grad());
        let probs_back = probs_rc.clone();
        let out_t = Tensor::new_op(
            q.graph(),
            vec![nq, d],
            out,
            &[q, k, v],
            "sdpa",
            move |g, gb| {
                let probs = probs_back.as_ref().expect("probs retained on recording graphs");
                // dv = probs^T . g
                if v_ng {
                    let dv = gb.accum(v_id, nk * d);
                    kernels::matmul_at_acc(probs, g, dv, nq, nk, d);
                }
                if q_ng || k_ng {
                    // dprobs = g . v^T, then softmax backward per row.
                    let mut dscores = vec![0.0; nq * nk];
                    kernels::matmul_bt_acc(g, &v_val, &mut dscores, nq, nk, d);
                    for i in 0..nq {
                        let p = &probs[i * nk..(i + 1) * nk];
                        let row = &mut dscores[i * nk..(i + 1) * nk];
                        let mut dot = 0.0;
                        for j in 0..nk {
                            dot += row[j] * p[j];
                        }
                        for j in 0..nk {
                            row[j] = p[j] * (row[j] - dot) * scale;
                        }
                    }
                    if q_ng {
                        let dq = gb.accum(q_id, nq * d);
                        kernels::matmul_acc(&dscores, &k_val, dq, nq, nk, d);
                    }
                    if k_ng {
                        let dk = gb.accum(k_id, nk * d);
                        kernels::matmul_at_acc(&dscores, &q_val, dk, nq, nk, d);
                    }
                }
            },
        )?;
        let probs_t = match probs_rc {
            Some(rc) if capture_probs => {
                Some(q.graph().adopt_value(vec![nq, nk], rc))
            }
            _ => None,
        };
        Ok((out_t, probs_t))
    }

    /// Inverted dropout; identity when `p == 0`. The mask comes from the
    /// graph's seeded RNG, so a fixed seed reproduces the run exactly.
    pub fn dropout(&self, p: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract("dropout", format!("rate {} outside [0, 1)", p)));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let len = self.numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Rc<Vec<f64>> = Rc::new(
            self.graph()
                .draw_uniform(len)
                .into_iter()
                .map(|u| if u < p { 0.0 } else { keep })
                .collect(),
        );
        let out = self.with_data(|a| a.iter().zip(mask.iter()).map(|(x, m)| x * m).collect());
        let a_id = self.id();
        Tensor::new_op(self.graph(), self.shape().to_vec(), out, &[self], "dropout", move |g, gb| {
            let da = gb.accum(a_id, len);
            for i in 0..len {
                da[i] += g[i] * mask[i];
            }
        })
    }
}
