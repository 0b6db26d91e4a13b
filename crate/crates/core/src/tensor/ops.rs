//! Differentiable operations, recorded on the [`Tape`].
//!
//! Every op is a pure function of immutable inputs; the backward closure
//! captures Arc'd activations, never mutable state. Gradient conventions:
//! matmul dA = G·Bᵀ, dB = Aᵀ·G; softmax dx = y⊙(g − Σg⊙y); layernorm
//! dx = (g − mean(g) − y·mean(g⊙y))/σ.

use std::sync::Arc;

use super::{sc, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

fn shape_err<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

// ── raw matmul kernels (shared with scan and model code) ──────────────

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
pub(crate) fn mm_tn_acc<F: Scalar>(a: &[F], g: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    // ── elementwise binary ─────────────────────────────────────────────

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        require_same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (pa, pb) = (a.node_id(), b.node_id());
        Ok(self.record(data, a.shape().to_vec(), &[a, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = pa {
                    out.push((p, g.to_vec()));
                }
                if let Some(p) = pb {
                    out.push((p, g.to_vec()));
                }
                out
            })
        }))
    }

    pub fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        require_same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let (pa, pb) = (a.node_id(), b.node_id());
        Ok(self.record(data, a.shape().to_vec(), &[a, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = pa {
                    out.push((p, g.to_vec()));
                }
                if let Some(p) = pb {
                    out.push((p, g.iter().map(|&x| -x).collect()));
                }
                out
            })
        }))
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        require_same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (pa, pb) = (a.node_id(), b.node_id());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(data, a.shape().to_vec(), &[a, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = pa {
                    out.push((p, g.iter().zip(db.iter()).map(|(&g, &y)| g * y).collect()));
                }
                if let Some(p) = pb {
                    out.push((p, g.iter().zip(da.iter()).map(|(&g, &x)| g * x).collect()));
                }
                out
            })
        }))
    }

    /// x + b with b broadcast over all leading axes (bias add on the last dim).
    pub fn add_bias(&self, x: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let d = *x.shape().last().ok_or_else(|| shape_err("add_bias", x, b))?;
        if b.shape() != [d] {
            return Err(shape_err("add_bias", x, b));
        }
        let bd = b.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let (px, pb) = (x.node_id(), b.node_id());
        Ok(self.record(data, x.shape().to_vec(), &[x, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = px {
                    out.push((p, g.to_vec()));
                }
                if let Some(p) = pb {
                    let mut gb = vec![F::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    out.push((p, gb));
                }
                out
            })
        }))
    }

    /// x * g with g broadcast over all leading axes (per-feature gain on the
    /// last dim); the multiplicative twin of `add_bias`.
    pub fn scale_features(&self, x: &Tensor<F>, g: &Tensor<F>) -> Result<Tensor<F>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("scale_features", x, g))?;
        if g.shape() != [d] {
            return Err(shape_err("scale_features", x, g));
        }
        let gd = g.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i % d])
            .collect();
        let (px, pg) = (x.node_id(), g.node_id());
        let (dx, dg) = (x.data_arc(), g.data_arc());
        Ok(self.record(data, x.shape().to_vec(), &[x, g], || {
            Box::new(move |grad| {
                let mut out = Vec::new();
                if let Some(p) = px {
                    out.push((
                        p,
                        grad.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * dg[i % d])
                            .collect(),
                    ));
                }
                if let Some(p) = pg {
                    let mut gg = vec![F::zero(); d];
                    for (i, &gv) in grad.iter().enumerate() {
                        gg[i % d] += gv * dx[i];
                    }
                    out.push((p, gg));
                }
                out
            })
        }))
    }

    /// Row-wise scaling: row i of `x` multiplied by `w[i]`.
    pub fn mul_rows(&self, x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
        let n = x.shape()[0];
        if w.shape() != [n] {
            return Err(shape_err("mul_rows", x, w));
        }
        let rl = x.numel() / n;
        let wd = w.data();
        let mut data = x.data().to_vec();
        for i in 0..n {
            for v in &mut data[i * rl..(i + 1) * rl] {
                *v = *v * wd[i];
            }
        }
        let (px, pw) = (x.node_id(), w.node_id());
        let (dx, dw) = (x.data_arc(), w.data_arc());
        Ok(self.record(data, x.shape().to_vec(), &[x, w], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = px {
                    let mut gx = g.to_vec();
                    for i in 0..n {
                        for v in &mut gx[i * rl..(i + 1) * rl] {
                            *v = *v * dw[i];
                        }
                    }
                    out.push((p, gx));
                }
                if let Some(p) = pw {
                    let mut gw = vec![F::zero(); n];
                    for i in 0..n {
                        let mut acc = F::zero();
                        for j in 0..rl {
                            acc += g[i * rl + j] * dx[i * rl + j];
                        }
                        gw[i] = acc;
                    }
                    out.push((p, gw));
                }
                out
            })
        }))
    }

    /// x + s·mask, with s a single-element tensor and mask a same-shape
    /// pattern (used for learnable additive attention gates).
    pub fn add_scaled(&self, x: &Tensor<F>, mask: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>> {
        require_same_shape("add_scaled", x, mask)?;
        if s.numel() != 1 {
            return Err(Error::Shape {
                op: "add_scaled scale",
                lhs: s.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let sv = s.data()[0];
        let data = x
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&xv, &mv)| xv + sv * mv)
            .collect();
        let (px, ps) = (x.node_id(), s.node_id());
        let dm = mask.data_arc();
        Ok(self.record(data, x.shape().to_vec(), &[x, mask, s], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = px {
                    out.push((p, g.to_vec()));
                }
                if let Some(p) = ps {
                    let acc = g.iter().zip(dm.iter()).map(|(&gv, &mv)| gv * mv).sum::<F>();
                    out.push((p, vec![acc]));
                }
                out
            })
        }))
    }

    /// a·x + b, elementwise with scalar coefficients.
    pub fn affine(&self, x: &Tensor<F>, a: f64, b: f64) -> Result<Tensor<F>> {
        let (fa, fb) = (sc::<F>(a), sc::<F>(b));
        let data = x.data().iter().map(|&v| fa * v + fb).collect();
        let px = x.node_id();
        Ok(self.record(data, x.shape().to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => vec![(p, g.iter().map(|&v| fa * v).collect())],
                None => vec![],
            })
        }))
    }

    pub fn scale(&self, x: &Tensor<F>, a: f64) -> Result<Tensor<F>> {
        self.affine(x, a, 0.0)
    }

    // ── unary activations ──────────────────────────────────────────────

    fn unary(
        &self,
        x: &Tensor<F>,
        f: impl Fn(F) -> F,
        df: impl Fn(F) -> F + 'static,
    ) -> Tensor<F> {
        let data = x.data().iter().map(|&v| f(v)).collect();
        let px = x.node_id();
        let dx = x.data_arc();
        self.record(data, x.shape().to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => vec![(
                    p,
                    g.iter().zip(dx.iter()).map(|(&g, &x)| g * df(x)).collect(),
                )],
                None => vec![],
            })
        })
    }

    pub fn exp(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(x, |v| v.exp(), |v| v.exp()))
    }

    /// Natural log; callers guarantee positive inputs (e.g. softmax outputs).
    pub fn ln(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(x, |v| v.ln(), |v| v.recip()))
    }

    pub fn tanh(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(
            x,
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                F::one() - t * t
            },
        ))
    }

    pub fn sigmoid(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(x, sigmoid_val, |v| {
            let s = sigmoid_val(v);
            s * (F::one() - s)
        }))
    }

    pub fn silu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(
            x,
            |v| v * sigmoid_val(v),
            |v| {
                let s = sigmoid_val(v);
                s * (F::one() + v * (F::one() - s))
            },
        ))
    }

    /// GELU, tanh approximation (both value and derivative use the same form,
    /// so finite differences agree with the analytic gradient).
    pub fn gelu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(x, gelu_val, gelu_grad))
    }

    /// Numerically stable softplus; derivative is the logistic sigmoid.
    pub fn softplus(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.unary(x, softplus_val, sigmoid_val))
    }

    // ── matmul family ──────────────────────────────────────────────────

    /// a[m,k] · b[k,n] -> [m,n]
    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut data = vec![F::zero(); m * n];
        mm_acc(a.data(), b.data(), m, k, n, &mut data);
        let (pa, pb) = (a.node_id(), b.node_id());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(data, vec![m, n], &[a, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = pa {
                    let mut ga = vec![F::zero(); m * k];
                    mm_nt_acc(g, &db, m, n, k, &mut ga); // G[m,n] · Bᵀ
                    out.push((p, ga));
                }
                if let Some(p) = pb {
                    let mut gb = vec![F::zero(); k * n];
                    mm_tn_acc(&da, g, m, k, n, &mut gb); // Aᵀ · G
                    out.push((p, gb));
                }
                out
            })
        }))
    }

    /// Batched matmul: a[B,m,k] · b[B,k,n] -> [B,m,n]
    pub fn bmm(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape().len() != 3
            || b.shape().len() != 3
            || a.shape()[0] != b.shape()[0]
            || a.shape()[2] != b.shape()[1]
        {
            return Err(shape_err("bmm", a, b));
        }
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        let mut data = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            mm_acc(
                &a.data()[i * m * k..],
                &b.data()[i * k * n..],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let (pa, pb) = (a.node_id(), b.node_id());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(data, vec![bs, m, n], &[a, b], || {
            Box::new(move |g| {
                let mut out = Vec::new();
                if let Some(p) = pa {
                    let mut ga = vec![F::zero(); bs * m * k];
                    for i in 0..bs {
                        mm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((p, ga));
                }
                if let Some(p) = pb {
                    let mut gb = vec![F::zero(); bs * k * n];
                    for i in 0..bs {
                        mm_tn_acc(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    out.push((p, gb));
                }
                out
            })
        }))
    }

    /// Batched matmul against transposed rhs: a[B,m,k] · b[B,n,k]ᵀ -> [B,m,n]
    pub fn bmm_nt(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape().len() != 3
            || b.shape().len() != 3
            || a.shape()[0] != b.shape()[0]
            || a.shape()[2] != b.shape()[2]
        {
            return Err(shape_err("bmm_nt", a, b));
        }
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[1];
        let mut data = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            mm_nt_acc(
                &a.data()[i * m * k..],
                &b.data()[i * n * k..],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let (pa, pb) = (a.node_id(), b.node_id());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(data, vec![bs, m, n], &[a, b], || {
            Box::new(move |g| {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let mut out = Vec::new();
                if let Some(p) = pa {
                    let mut ga = vec![F::zero(); bs * m * k];
                    for i in 0..bs {
                        mm_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((p, ga));
                }
                if let Some(p) = pb {
                    let mut gb = vec![F::zero(); bs * n * k];
                    for i in 0..bs {
                        mm_tn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut gb[i * n * k..(i + 1) * n * k],
                        );
                    }
                    out.push((p, gb));
                }
                out
            })
        }))
    }

    // ── shape ops ──────────────────────────────────────────────────────

    /// Zero-copy on values; gradient passes through unchanged.
    pub fn reshape(&self, x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let px = x.node_id();
        Ok(self.record(x.data().to_vec(), shape.to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => vec![(p, g.to_vec())],
                None => vec![],
            })
        }))
    }

    /// Axis permutation; an exact bijection on elements.
    pub fn permute(&self, x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
        let ndim = x.shape().len();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: x.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let data = permute_data(x.data(), x.shape(), perm);
        let mut inv = vec![0usize; ndim];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let px = x.node_id();
        let gshape = out_shape.clone();
        Ok(self.record(data, out_shape, &[x], || {
            Box::new(move |g| match px {
                Some(p) => vec![(p, permute_data(g, &gshape, &inv))],
                None => vec![],
            })
        }))
    }

    /// Gather rows by index; index -1 yields a zero row. Backward scatter-adds.
    pub fn gather_rows(&self, x: &Tensor<F>, idx: &[isize]) -> Result<Tensor<F>> {
        let n = x.shape()[0];
        let rl = x.numel() / n;
        let m = idx.len();
        let mut data = vec![F::zero(); m * rl];
        for (i, &ix) in idx.iter().enumerate() {
            if ix >= 0 {
                let ix = ix as usize;
                debug_assert!(ix < n, "gather index out of range");
                data[i * rl..(i + 1) * rl].copy_from_slice(&x.data()[ix * rl..(ix + 1) * rl]);
            }
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = m;
        let px = x.node_id();
        let idx: Arc<Vec<isize>> = Arc::new(idx.to_vec());
        let total = x.numel();
        Ok(self.record(data, out_shape, &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); total];
                    for (i, &ix) in idx.iter().enumerate() {
                        if ix >= 0 {
                            let ix = ix as usize;
                            for j in 0..rl {
                                gx[ix * rl + j] += g[i * rl + j];
                            }
                        }
                    }
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }

    /// Concatenate along axis 0; trailing dims must agree.
    pub fn concat_rows(&self, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0usize;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(shape_err("concat_rows", first, p));
            }
            rows += p.shape()[0];
        }
        let rl: usize = tail.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(rows * rl);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[0] = rows;
        let meta: Vec<(Option<usize>, usize)> = parts
            .iter()
            .map(|p| (p.node_id(), p.numel()))
            .collect();
        Ok(self.record(data, out_shape, parts, || {
            Box::new(move |g| {
                let mut out = Vec::new();
                let mut off = 0usize;
                for &(pid, len) in &meta {
                    if let Some(p) = pid {
                        out.push((p, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
                out
            })
        }))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn narrow_rows(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        let n = x.shape()[0];
        if start + len > n {
            return Err(Error::Shape {
                op: "narrow_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rl = x.numel() / n;
        let data = x.data()[start * rl..(start + len) * rl].to_vec();
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = len;
        let px = x.node_id();
        let total = x.numel();
        Ok(self.record(data, out_shape, &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); total];
                    gx[start * rl..(start + len) * rl].copy_from_slice(g);
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }

    // ── normalization & softmax ────────────────────────────────────────

    /// Row softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax_rows on 0-d tensor".into()))?;
        let data = softmax_rows_data(x.data(), d);
        let px = x.node_id();
        let y = Arc::new(data.clone());
        Ok(self.record(data, x.shape().to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); g.len()];
                    for r in 0..g.len() / d {
                        let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mut dot = F::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for j in 0..d {
                            gx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }

    /// Normalize the last axis to zero mean / unit variance, with an epsilon
    /// inside the square root so constant rows map to zeros. Affine gain/bias
    /// are applied separately by callers.
    pub fn layer_norm(&self, x: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on 0-d tensor".into()))?;
        let rows = x.numel() / d;
        let feps = sc::<F>(eps);
        let fd = sc::<F>(d as f64);
        let mut data = vec![F::zero(); x.numel()];
        let mut inv_sigma = vec![F::zero(); rows];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<F>() / fd;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / fd;
            let inv = (var + feps).sqrt().recip();
            inv_sigma[r] = inv;
            for j in 0..d {
                data[r * d + j] = (xr[j] - mean) * inv;
            }
        }
        let px = x.node_id();
        let y = Arc::new(data.clone());
        let inv_sigma = Arc::new(inv_sigma);
        Ok(self.record(data, x.shape().to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); g.len()];
                    for r in 0..g.len() / d {
                        let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mut gmean = F::zero();
                        let mut gymean = F::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            gmean += gv;
                            gymean += gv * yv;
                        }
                        gmean /= fd;
                        gymean /= fd;
                        for j in 0..d {
                            gx[r * d + j] = inv_sigma[r] * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }

    /// Rows scaled to unit L2 norm; `eps` guards zero rows.
    pub fn l2_normalize_rows(&self, x: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let n = x.shape()[0];
        let d = x.numel() / n;
        let feps = sc::<F>(eps);
        let mut data = vec![F::zero(); x.numel()];
        let mut inv_r = vec![F::zero(); n];
        for i in 0..n {
            let xr = &x.data()[i * d..(i + 1) * d];
            let norm = (xr.iter().map(|&v| v * v).sum::<F>() + feps).sqrt();
            let inv = norm.recip();
            inv_r[i] = inv;
            for j in 0..d {
                data[i * d + j] = xr[j] * inv;
            }
        }
        let px = x.node_id();
        let y = Arc::new(data.clone());
        let inv_r = Arc::new(inv_r);
        Ok(self.record(data, x.shape().to_vec(), &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); g.len()];
                    for i in 0..g.len() / d {
                        let (gr, yr) = (&g[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
                        let mut dot = F::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for j in 0..d {
                            gx[i * d + j] = inv_r[i] * (gr[j] - yr[j] * dot);
                        }
                    }
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let s = x.data().iter().copied().sum::<F>();
        let px = x.node_id();
        let n = x.numel();
        Ok(self.record(vec![s], vec![1], &[x], || {
            Box::new(move |g| match px {
                Some(p) => vec![(p, vec![g[0]; n])],
                None => vec![],
            })
        }))
    }

    pub fn mean_all(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = x.numel();
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    /// Column means of a [n, d] tensor -> [d].
    pub fn mean_axis0(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "mean_axis0 expects 2-d input, got {:?}",
                x.shape()
            )));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let fn_ = sc::<F>(n as f64);
        let mut data = vec![F::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] += x.data()[i * d + j];
            }
        }
        for v in &mut data {
            *v /= fn_;
        }
        let px = x.node_id();
        Ok(self.record(data, vec![d], &[x], || {
            Box::new(move |g| match px {
                Some(p) => {
                    let mut gx = vec![F::zero(); n * d];
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] = g[j] / fn_;
                        }
                    }
                    vec![(p, gx)]
                }
                None => vec![],
            })
        }))
    }
}

// ── scalar math shared with non-tape code ──────────────────────────────

pub(crate) fn sigmoid_val<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        (F::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus_val<F: Scalar>(v: F) -> F {
    // ln(1+e^x) = max(x,0) + ln(1+e^-|x|)
    let cap = sc::<F>(30.0);
    if v > cap {
        v
    } else if v < -cap {
        v.exp()
    } else {
        (F::one() + v.exp()).ln()
    }
}

fn gelu_val<F: Scalar>(v: F) -> F {
    let k0 = sc::<F>(0.7978845608028654); // sqrt(2/pi)
    let k1 = sc::<F>(0.044715);
    let half = sc::<F>(0.5);
    let u = k0 * (v + k1 * v * v * v);
    half * v * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(v: F) -> F {
    let k0 = sc::<F>(0.7978845608028654);
    let k1 = sc::<F>(0.044715);
    let half = sc::<F>(0.5);
    let u = k0 * (v + k1 * v * v * v);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    let du = k0 * (F::one() + sc::<F>(3.0) * k1 * v * v);
    half * (F::one() + t) + half * v * sech2 * du
}

pub(crate) fn softmax_rows_data<F: Scalar>(x: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..x.len() / d {
        let xr = &x[r * d..(r + 1) * d];
        let mx = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        for o in &mut out[r * d..(r + 1) * d] {
            *o /= z;
        }
    }
    out
}

fn permute_data<F: Copy>(src: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let ndim = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut sstr = vec![1usize; ndim];
    for i in (0..ndim.saturating_sub(1)).rev() {
        sstr[i] = sstr[i + 1] * shape[i + 1];
    }
    let ostr_src: Vec<usize> = perm.iter().map(|&p| sstr[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; ndim];
    let mut soff = 0usize;
    for _ in 0..n {
        out.push(src[soff]);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            soff += ostr_src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            soff -= ostr_src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64s(data, shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape: Tape<f64> = Tape::new();
        let i2 = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let c = tape.matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_projector() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
        let v = t64(&[5.0, 7.0], &[2, 1]);
        let c = tape.matmul(&p, &v).unwrap();
        assert_eq!(c.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape: Tape<f64> = Tape::new();
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        match tape.matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[0.0, 0.0, 0.0, 0.0], &[1, 4]);
        let y = tape.softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stability_limit() {
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[1000.0, 0.0], &[1, 2]);
        let y = tape.softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-6);
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // independent 64-bit evaluation of exp/sum for row [1,2,3]
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[1.0, 2.0, 3.0], &[1, 3]);
        let y = tape.softmax_rows(&x).unwrap();
        let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        let row_sum: f64 = y.data().iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[3.0, 3.0, 3.0, 3.0], &[1, 4]);
        let y = tape.layer_norm(&x, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn permute_roundtrip_exact() {
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = t64(&data, &[2, 3, 4]);
        let y = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = tape.permute(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn reshape_roundtrip_bitwise() {
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = tape.reshape(&x, &[3, 2]).unwrap();
        let z = tape.reshape(&y, &[2, 3]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn gather_rows_with_zero_fill_and_scatter_grad() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = tape.gather_rows(&x, &[1, -1, 0, 1]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        // row 0 used once, row 1 used twice
        assert_eq!(g.wrt(&x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = tape.concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let back = tape.narrow_rows(&c, 1, 2).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn mean_axis0_values() {
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let m = tape.mean_axis0(&x).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
    }
}
