//! Differentiable operations on [`Var`].
//!
//! Backward closures capture cloned input values; gradient contributions are
//! emitted through a sink callback keyed by parent node id.

use super::{Tensor, Var};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

/// A [n,k] x B [k,m] -> [n,m]
fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

/// A [n,k] x B^T where B is [m,k] -> [n,m]
fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(&[n, m], out)
}

/// A^T x B where A is [k,n], B is [k,m] -> [n,m]
fn matmul_tn_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * n..(p + 1) * n];
        let brow = &bd[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(&[m, n], out)
}

fn softmax_rows_raw(x: &Tensor) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &x.data()[r * m..(r + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * m + c] = e;
            s += e;
        }
        for c in 0..m {
            out[r * m + c] /= s;
        }
    }
    Tensor::new(&[n, m], out)
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        value: Tensor,
        back: impl Fn(&Tensor, &mut dyn FnMut(usize, Tensor)) + 'static,
    ) -> Var<'t> {
        assert!(std::ptr::eq(self.tape(), other.tape()), "vars from different tapes");
        self.push_unary(value, back)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            sink(pa, g.clone());
            sink(pb, g.clone());
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            sink(pa, g.clone());
            let mut ng = g.clone();
            for v in ng.data_mut() {
                *v = -*v;
            }
            sink(pb, ng);
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            let da = Tensor::new(g.shape(), g.data().iter().zip(b.data()).map(|(g, y)| g * y).collect());
            let db = Tensor::new(g.shape(), g.data().iter().zip(a.data()).map(|(g, x)| g * x).collect());
            sink(pa, da);
            sink(pb, db);
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            let da = Tensor::new(g.shape(), g.data().iter().zip(b.data()).map(|(g, y)| g / y).collect());
            let db = Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect(),
            );
            sink(pa, da);
            sink(pb, db);
        })
    }

    /// Add a rank-1 bias over the last axis of a rank-2 tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (n, m) = (x.rows(), x.cols());
        assert_eq!(b.shape(), &[m], "bias shape {:?} vs cols {m}", b.shape());
        let mut out = x.data().to_vec();
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] += b.data()[c];
            }
        }
        let (pa, pb) = (self.id(), bias.id());
        self.binary(bias, Tensor::new(&[n, m], out), move |g, sink| {
            sink(pa, g.clone());
            let mut db = vec![0.0; m];
            for r in 0..n {
                for c in 0..m {
                    db[c] += g.data()[r * m + c];
                }
            }
            sink(pb, Tensor::new(&[m], db));
        })
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|x| x * k).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            sink(pa, Tensor::new(g.shape(), g.data().iter().map(|v| v * k).collect()));
        })
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|x| x + k).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| sink(pa, g.clone()))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = matmul_raw(&a, &b);
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            sink(pa, matmul_nt_raw(g, &b));
            sink(pb, matmul_tn_raw(&a, g));
        })
    }

    pub fn t(&self) -> Var<'t> {
        let a = self.value();
        let out = transpose_raw(&a);
        let pa = self.id();
        self.push_unary(out, move |g, sink| sink(pa, transpose_raw(g)))
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x.max(0.0)).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let da = Tensor::new(
                g.shape(),
                g.data().iter().zip(a.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            );
            sink(pa, da);
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let a = self.value();
        let out =
            Tensor::new(a.shape(), a.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect());
        let pa = self.id();
        let y = out.clone();
        self.push_unary(out, move |g, sink| {
            let da = Tensor::new(
                g.shape(),
                g.data().iter().zip(y.data()).map(|(g, &y)| g * y * (1.0 - y)).collect(),
            );
            sink(pa, da);
        })
    }

    pub fn ln(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x.ln()).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let da =
                Tensor::new(g.shape(), g.data().iter().zip(a.data()).map(|(g, &x)| g / x).collect());
            sink(pa, da);
        })
    }

    pub fn exp(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x.exp()).collect());
        let y = out.clone();
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let da =
                Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(g, &y)| g * y).collect());
            sink(pa, da);
        })
    }

    pub fn abs(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x.abs()).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let da = Tensor::new(
                g.shape(),
                g.data().iter().zip(a.data()).map(|(g, &x)| g * x.signum()).collect(),
            );
            sink(pa, da);
        })
    }

    /// Clamp to [lo, hi]; gradient passes on the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x.clamp(lo, hi)).collect());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let da = Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(a.data())
                    .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                    .collect(),
            );
            sink(pa, da);
        })
    }

    /// Elementwise minimum; on ties the gradient goes to `self`.
    pub fn emin(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "emin");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x.min(y)).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            let mut da = vec![0.0; g.numel()];
            let mut db = vec![0.0; g.numel()];
            for i in 0..g.numel() {
                if a.data()[i] <= b.data()[i] {
                    da[i] = g.data()[i];
                } else {
                    db[i] = g.data()[i];
                }
            }
            sink(pa, Tensor::new(g.shape(), da));
            sink(pb, Tensor::new(g.shape(), db));
        })
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn emax(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "emax");
        let out = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect());
        let (pa, pb) = (self.id(), other.id());
        self.binary(other, out, move |g, sink| {
            let mut da = vec![0.0; g.numel()];
            let mut db = vec![0.0; g.numel()];
            for i in 0..g.numel() {
                if a.data()[i] >= b.data()[i] {
                    da[i] = g.data()[i];
                } else {
                    db[i] = g.data()[i];
                }
            }
            sink(pa, Tensor::new(g.shape(), da));
            sink(pb, Tensor::new(g.shape(), db));
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor::scalar(a.data().iter().sum());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let gv = g.item();
            sink(pa, Tensor::new(a.shape(), vec![gv; a.numel()]));
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let n = a.numel() as f64;
        let out = Tensor::scalar(a.data().iter().sum::<f64>() / n);
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            let gv = g.item() / n;
            sink(pa, Tensor::new(a.shape(), vec![gv; a.numel()]));
        })
    }

    /// Mean over rows: [n,m] -> [1,m].
    pub fn mean0(&self) -> Var<'t> {
        let a = self.value();
        let (n, m) = (a.rows(), a.cols());
        let mut out = vec![0.0; m];
        for r in 0..n {
            for c in 0..m {
                out[c] += a.data()[r * m + c];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let pa = self.id();
        self.push_unary(Tensor::new(&[1, m], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    da[r * m + c] = g.data()[c] / n as f64;
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    /// Sum over the last axis: [n,m] -> [n,1].
    pub fn sum1(&self) -> Var<'t> {
        let a = self.value();
        let (n, m) = (a.rows(), a.cols());
        let out: Vec<f64> = (0..n).map(|r| a.data()[r * m..(r + 1) * m].iter().sum()).collect();
        let pa = self.id();
        self.push_unary(Tensor::new(&[n, 1], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    da[r * m + c] = g.data()[r];
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let y = softmax_rows_raw(&x);
        let (n, m) = (x.rows(), x.cols());
        let pa = self.id();
        let yc = y.clone();
        self.push_unary(y, move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                let yr = &yc.data()[r * m..(r + 1) * m];
                let gr = &g.data()[r * m..(r + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..m {
                    da[r * m + c] = yr[c] * (gr[c] - dot);
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        let sm = softmax_rows_raw(&x);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &x.data()[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for c in 0..m {
                out[r * m + c] = row[c] - lse;
            }
        }
        let pa = self.id();
        self.push_unary(Tensor::new(&[n, m], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                let gr = &g.data()[r * m..(r + 1) * m];
                let gsum: f64 = gr.iter().sum();
                for c in 0..m {
                    da[r * m + c] = gr[c] - sm.data()[r * m + c] * gsum;
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    /// y[i] = x[i, idx[i]] for a rank-2 input; output is rank-1.
    pub fn pick_per_row(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        assert_eq!(idx.len(), n, "pick_per_row index count");
        for &j in idx {
            assert!(j < m, "pick_per_row index {j} out of {m}");
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| x.at2(r, c)).collect();
        let pa = self.id();
        let idx = idx.to_vec();
        self.push_unary(Tensor::new(&[n], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for (r, &c) in idx.iter().enumerate() {
                da[r * m + c] = g.data()[r];
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in idx {
            assert!(r < n, "gather_rows index {r} out of {n}");
            out.extend_from_slice(&x.data()[r * m..(r + 1) * m]);
        }
        let pa = self.id();
        let idx = idx.to_vec();
        let k = idx.len();
        self.push_unary(Tensor::new(&[k, m], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..m {
                    da[r * m + c] += g.data()[i * m + c];
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        assert!(start + len <= n, "slice_rows {start}+{len} out of {n}");
        let out = x.data()[start * m..(start + len) * m].to_vec();
        let pa = self.id();
        self.push_unary(Tensor::new(&[len, m], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            da[start * m..(start + len) * m].copy_from_slice(g.data());
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        assert!(start + len <= m, "slice_cols {start}+{len} out of {m}");
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x.data()[r * m + start..r * m + start + len]);
        }
        let pa = self.id();
        self.push_unary(Tensor::new(&[n, len], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..len {
                    da[r * m + start + c] = g.data()[r * len + c];
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let old = x.shape().to_vec();
        let out = Tensor::new(shape, x.data().to_vec());
        let pa = self.id();
        self.push_unary(out, move |g, sink| {
            sink(pa, Tensor::new(&old, g.data().to_vec()));
        })
    }

    /// Row-wise x / max(||x||, eps). A zero row maps to zero.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &x.data()[r * m..(r + 1) * m];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = nrm;
            let den = nrm.max(eps);
            for c in 0..m {
                out[r * m + c] = row[c] / den;
            }
        }
        let pa = self.id();
        self.push_unary(Tensor::new(&[n, m], out), move |g, sink| {
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                let row = &x.data()[r * m..(r + 1) * m];
                let gr = &g.data()[r * m..(r + 1) * m];
                let nrm = norms[r];
                if nrm > eps {
                    let dot: f64 = row.iter().zip(gr).map(|(x, g)| x * g).sum();
                    for c in 0..m {
                        da[r * m + c] = gr[c] / nrm - row[c] * dot / (nrm * nrm * nrm);
                    }
                } else {
                    for c in 0..m {
                        da[r * m + c] = gr[c] / eps;
                    }
                }
            }
            sink(pa, Tensor::new(&[n, m], da));
        })
    }

    /// Row-wise layer norm with affine parameters.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.shape(), &[m], "layer_norm gamma shape");
        assert_eq!(bt.shape(), &[m], "layer_norm beta shape");
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &x.data()[r * m..(r + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let xh = (row[c] - mu) * is;
                xhat[r * m + c] = xh;
                out[r * m + c] = gm.data()[c] * xh + bt.data()[c];
            }
        }
        let (px, pg, pb) = (self.id(), gamma.id(), beta.id());
        assert!(std::ptr::eq(self.tape(), gamma.tape()) && std::ptr::eq(self.tape(), beta.tape()));
        self.push_unary(Tensor::new(&[n, m], out), move |g, sink| {
            let mut dgamma = vec![0.0; m];
            let mut dbeta = vec![0.0; m];
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let gr = &g.data()[r * m..(r + 1) * m];
                let xh = &xhat[r * m..(r + 1) * m];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for c in 0..m {
                    dgamma[c] += gr[c] * xh[c];
                    dbeta[c] += gr[c];
                    let dxh = gr[c] * gm.data()[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[c];
                }
                mean_dxh /= m as f64;
                mean_dxh_xh /= m as f64;
                for c in 0..m {
                    let dxh = gr[c] * gm.data()[c];
                    dx[r * m + c] = (dxh - mean_dxh - xh[c] * mean_dxh_xh) * inv_std[r];
                }
            }
            sink(px, Tensor::new(&[n, m], dx));
            sink(pg, Tensor::new(&[m], dgamma));
            sink(pb, Tensor::new(&[m], dbeta));
        })
    }

    /// 2-D convolution on a [c_in, h, w] input with weight [c_out, c_in*k*k]
    /// and bias [c_out], producing [c_out, h', w'].
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, k: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "conv2d input must be [c,h,w]");
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let wt = weight.value();
        let bt = bias.value();
        let cout = wt.rows();
        assert_eq!(wt.cols(), cin * k * k, "conv2d weight cols");
        assert_eq!(bt.shape(), &[cout], "conv2d bias shape");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(&x, cin, h, w, k, stride, pad, oh, ow);
        let out2d = matmul_raw(&wt, &cols);
        let mut out = out2d.data().to_vec();
        for o in 0..cout {
            for s in 0..oh * ow {
                out[o * oh * ow + s] += bt.data()[o];
            }
        }
        let (px, pw, pb) = (self.id(), weight.id(), bias.id());
        assert!(std::ptr::eq(self.tape(), weight.tape()) && std::ptr::eq(self.tape(), bias.tape()));
        self.push_unary(Tensor::new(&[cout, oh, ow], out), move |g, sink| {
            let g2d = Tensor::new(&[cout, oh * ow], g.data().to_vec());
            let dw = matmul_nt_raw(&g2d, &cols);
            let mut db = vec![0.0; cout];
            for o in 0..cout {
                db[o] = g2d.data()[o * oh * ow..(o + 1) * oh * ow].iter().sum();
            }
            let dcols = matmul_tn_raw(&wt, &g2d);
            let dx = col2im(&dcols, cin, h, w, k, stride, pad, oh, ow);
            sink(px, dx);
            sink(pw, dw);
            sink(pb, Tensor::new(&[cout], db));
        })
    }
}

/// Concatenate rank-2 vars along axis 0.
pub fn concat_rows<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "concat_rows of nothing");
    let vals: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let m = vals[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for v in &vals {
        assert_eq!(v.cols(), m, "concat_rows column mismatch");
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id()).collect();
    let row_counts: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
    vars[0].push_unary(Tensor::new(&[rows, m], data), move |g, sink| {
        let mut offset = 0;
        for (i, &r) in row_counts.iter().enumerate() {
            let chunk = g.data()[offset * m..(offset + r) * m].to_vec();
            sink(ids[i], Tensor::new(&[r, m], chunk));
            offset += r;
        }
    })
}

/// Concatenate rank-2 vars along axis 1.
pub fn concat_cols<'t>(vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty(), "concat_cols of nothing");
    let vals: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let n = vals[0].rows();
    let col_counts: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
    let total: usize = col_counts.iter().sum();
    let mut data = vec![0.0; n * total];
    for r in 0..n {
        let mut offset = 0;
        for v in &vals {
            assert_eq!(v.rows(), n, "concat_cols row mismatch");
            let m = v.cols();
            data[r * total + offset..r * total + offset + m]
                .copy_from_slice(&v.data()[r * m..(r + 1) * m]);
            offset += m;
        }
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id()).collect();
    vars[0].push_unary(Tensor::new(&[n, total], data), move |g, sink| {
        let mut offset = 0;
        for (i, &m) in col_counts.iter().enumerate() {
            let mut chunk = vec![0.0; n * m];
            for r in 0..n {
                chunk[r * m..(r + 1) * m]
                    .copy_from_slice(&g.data()[r * total + offset..r * total + offset + m]);
            }
            sink(ids[i], Tensor::new(&[n, m], chunk));
            offset += m;
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let mut cols = vec![0.0; cin * k * k * oh * ow];
    let sites = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x.data()[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                        cols[row * sites + oy * ow + ox] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[cin * k * k, sites], cols)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Tensor,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let mut dx = vec![0.0; cin * h * w];
    let sites = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            dx[(c * h + iy as usize) * w + ix as usize] +=
                                dcols.data()[row * sites + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cin, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use super::*;

    #[test]
    fn matmul_small_known_values() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul_raw(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let b = Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let nt = matmul_nt_raw(&a, &transpose_raw(&b));
        let tn = matmul_tn_raw(&transpose_raw(&a), &b);
        let plain = matmul_raw(&a, &b);
        for (x, y) in plain.data().iter().zip(nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in plain.data().iter().zip(tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = softmax_rows_raw(&x);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = Tensor::new(&[1, 2], vec![1000.0, 1000.0]);
        let y = softmax_rows_raw(&x);
        assert!((y.at2(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let cat = concat_rows(&[a, b]);
        let back = cat.slice_rows(1, 2);
        assert_eq!(back.value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let loss = cat.mul(&cat).sum();
        let g = tape.backward(loss);
        assert_eq!(g.wrt(a).data(), &[2.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = table.gather_rows(&[1, 1, 0]);
        let loss = picked.sum();
        let g = tape.backward(loss);
        assert_eq!(g.wrt(table).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        // 1x1 kernel with weight 2, bias 1: y = 2x + 1
        let w = tape.leaf(Tensor::new(&[1, 1], vec![2.0]));
        let b = tape.leaf(Tensor::new(&[1], vec![1.0]));
        let y = x.conv2d(&w, &b, 1, 1, 0);
        assert_eq!(y.value().shape(), &[1, 3, 3]);
        assert_eq!(y.value().data()[0], 3.0);
        assert_eq!(y.value().data()[8], 19.0);
        let g = tape.backward(y.sum());
        assert_eq!(g.wrt(b).data(), &[9.0]);
        assert_eq!(g.wrt(w).data(), &[45.0]);
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[4, 2 * 9]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = x.conv2d(&w, &b, 3, 2, 1);
        assert_eq!(y.value().shape(), &[4, 4, 4]);
    }
}
