//! Differentiable operations recorded on the [`Graph`] tape.

use super::{same_shape, Graph, Grads, Tensor, Var};
use crate::error::{CvfError, Result};

/// Probabilities inside logarithms are clamped here before taking the log.
pub const LOG_EPS: f64 = 1e-12;

impl Graph {
    /// 2D convolution over a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(CvfError::Shape(format!(
                "conv2d expects x[C,H,W], w[Co,Ci,k,k], b[Co]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(CvfError::Shape(format!(
                "conv2d input channels {} vs kernel C_in {}",
                c_in, ws[1]
            )));
        }
        if ws[3] != k || k % 2 == 0 {
            return Err(CvfError::Shape(format!(
                "conv2d kernel must be square with odd size, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if bs[0] != c_out {
            return Err(CvfError::Shape("conv2d bias length != C_out".into()));
        }
        if !(stride == 1 || stride == 2) {
            return Err(CvfError::InvalidArgument("conv2d stride must be 1 or 2".into()));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(CvfError::Shape("conv2d input smaller than kernel".into()));
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (wd + 2 * padding - k) / stride + 1;

        let forward = |xv: &[f64], wv: &[f64], bv: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c_out * h_out * w_out];
            for co in 0..c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bv[co];
                        for ci in 0..c_in {
                            for kh in 0..k {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[(ci * h + ih as usize) * wd + iw as usize]
                                        * wv[((co * c_in + ci) * k + kh) * k + kw];
                                }
                            }
                        }
                        out[(co * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
            out
        };
        let out = forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::new(vec![c_out, h_out, w_out], out)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.record(
            "conv2d",
            vec![x, w, b],
            out,
            Box::new(move |ts: &[Tensor], og: &[f64], grads: &mut Grads| {
                let xv = ts[xi].data();
                let wv = ts[wi].data();
                for co in 0..c_out {
                    for oh in 0..h_out {
                        for ow in 0..w_out {
                            let g = og[(co * h_out + oh) * w_out + ow];
                            if g == 0.0 {
                                continue;
                            }
                            grads.accum(bi, co, g);
                            for ci in 0..c_in {
                                for kh in 0..k {
                                    let ih = (oh * stride + kh) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..k {
                                        let iw = (ow * stride + kw) as isize - padding as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        let x_idx = (ci * h + ih as usize) * wd + iw as usize;
                                        let w_idx = ((co * c_in + ci) * k + kh) * k + kw;
                                        grads.accum(xi, x_idx, g * wv[w_idx]);
                                        grads.accum(wi, w_idx, g * xv[x_idx]);
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Affine map of a batch of row vectors: [N,D] x [D,E] + [E] -> [N,E].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(CvfError::Shape(format!(
                "linear expects x[N,D], w[D,E], b[E]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * e];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                for j in 0..e {
                    let mut acc = bv[j];
                    for p in 0..d {
                        acc += xv[i * d + p] * wv[p * e + j];
                    }
                    out[i * e + j] = acc;
                }
            }
        }
        let out = Tensor::new(vec![n, e], out)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.record(
            "linear",
            vec![x, w, b],
            out,
            Box::new(move |ts, og, grads| {
                let xv = ts[xi].data();
                let wv = ts[wi].data();
                for i in 0..n {
                    for j in 0..e {
                        let g = og[i * e + j];
                        if g == 0.0 {
                            continue;
                        }
                        grads.accum(bi, j, g);
                        for p in 0..d {
                            grads.accum(xi, i * d + p, g * wv[p * e + j]);
                            grads.accum(wi, p * e + j, g * xv[i * d + p]);
                        }
                    }
                }
            }),
        ))
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let xi = x.0;
        let oi = self.tensors.len(); // id the output will receive
        self.record(
            op,
            vec![x],
            Tensor { shape, data: out },
            Box::new(move |ts, og, grads| {
                let xv = ts[xi].data();
                let yv = ts[oi].data();
                for (idx, &g) in og.iter().enumerate() {
                    grads.accum(xi, idx, g * df(xv[idx], yv[idx]));
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sin_op(&mut self, x: Var) -> Var {
        self.unary("sin", x, f64::sin, |v, _| v.cos())
    }

    /// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(
            "smooth_l1",
            x,
            |v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 },
            |v, _| if v.abs() < 1.0 { v } else { v.signum() },
        )
    }

    /// Natural log with inputs clamped to `LOG_EPS`; clamp events are counted
    /// on the graph.
    pub fn ln_clamped(&mut self, x: Var) -> Var {
        let n_clamped = self.value(x).data().iter().filter(|&&v| v < LOG_EPS).count();
        self.clamp_warnings += n_clamped as u64;
        self.unary(
            "ln_clamped",
            x,
            |v| v.max(LOG_EPS).ln(),
            |v, _| 1.0 / v.max(LOG_EPS),
        )
    }

    /// Elementwise x^p for a constant exponent (inputs assumed >= 0).
    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        self.unary(
            "pow_const",
            x,
            move |v| v.powf(p),
            move |v, _| {
                if v == 0.0 && p < 1.0 {
                    0.0
                } else {
                    p * v.powf(p - 1.0)
                }
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let (ai, bi) = (a.0, b.0);
        Ok(self.record(
            "add",
            vec![a, b],
            Tensor { shape, data: out },
            Box::new(move |_, og, grads| {
                for (idx, &g) in og.iter().enumerate() {
                    grads.accum(ai, idx, g);
                    grads.accum(bi, idx, g);
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let (ai, bi) = (a.0, b.0);
        Ok(self.record(
            "sub",
            vec![a, b],
            Tensor { shape, data: out },
            Box::new(move |_, og, grads| {
                for (idx, &g) in og.iter().enumerate() {
                    grads.accum(ai, idx, g);
                    grads.accum(bi, idx, -g);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (ai, bi) = (a.0, b.0);
        Ok(self.record(
            "mul",
            vec![a, b],
            Tensor { shape, data: out },
            Box::new(move |ts, og, grads| {
                let av = ts[ai].data();
                let bv = ts[bi].data();
                for (idx, &g) in og.iter().enumerate() {
                    grads.accum(ai, idx, g * bv[idx]);
                    grads.accum(bi, idx, g * av[idx]);
                }
            }),
        ))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary("mul_const", x, move |v| v * c, move |_, _| c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary("add_const", x, move |v| v + c, |_, _| 1.0)
    }

    /// Concatenate along axis 0; trailing shapes must agree. For [C,H,W]
    /// feature maps this is channel-wise concatenation.
    pub fn concat_axis0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(CvfError::Shape(format!(
                "concat_axis0: trailing dims differ, {sa:?} vs {sb:?}"
            )));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let (ai, bi) = (a.0, b.0);
        let split = self.value(a).numel();
        Ok(self.record(
            "concat_axis0",
            vec![a, b],
            Tensor { shape, data },
            Box::new(move |_, og, grads| {
                for (idx, &g) in og.iter().enumerate() {
                    if idx < split {
                        grads.accum(ai, idx, g);
                    } else {
                        grads.accum(bi, idx - split, g);
                    }
                }
            }),
        ))
    }

    /// Concatenate several 1-D vectors into one.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CvfError::InvalidArgument("concat_flat of nothing".into()));
        }
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            offsets.push((p.0, data.len(), self.value(p).numel()));
            data.extend_from_slice(self.value(p).data());
        }
        let shape = vec![data.len()];
        Ok(self.record(
            "concat_flat",
            parts.to_vec(),
            Tensor { shape, data },
            Box::new(move |_, og, grads| {
                for &(id, off, len) in &offsets {
                    for k in 0..len {
                        grads.accum(id, k, og[off + k]);
                    }
                }
            }),
        ))
    }

    /// Columnwise maximum over the rows of an [N,D] set.
    pub fn max_over_set(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(CvfError::Shape(format!("max_over_set expects [N,D], got {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut arg = vec![0usize; d];
        for i in 0..n {
            for j in 0..d {
                let v = xv[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let xi = x.0;
        Ok(self.record(
            "max_over_set",
            vec![x],
            Tensor::new(vec![d], out)?,
            Box::new(move |_, og, grads| {
                for j in 0..d {
                    grads.accum(xi, arg[j] * d + j, og[j]);
                }
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let xi = x.0;
        let n = self.value(x).numel();
        self.record(
            "sum_all",
            vec![x],
            Tensor::scalar(s),
            Box::new(move |_, og, grads| {
                for idx in 0..n {
                    grads.accum(xi, idx, og[0]);
                }
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum();
        let xi = x.0;
        let inv = 1.0 / n as f64;
        self.record(
            "mean_all",
            vec![x],
            Tensor::scalar(s * inv),
            Box::new(move |_, og, grads| {
                for idx in 0..n {
                    grads.accum(xi, idx, og[0] * inv);
                }
            }),
        )
    }

    /// Multiply a [C,H,W] feature map by a [1,H,W] map broadcast over
    /// channels.
    pub fn mul_broadcast_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xs, as_) = (self.value(x).shape().to_vec(), self.value(a).shape().to_vec());
        if xs.len() != 3 || as_ != [1, xs[1], xs[2]] {
            return Err(CvfError::Shape(format!(
                "mul_broadcast_channel expects x[C,H,W], a[1,H,W]; got {xs:?}, {as_:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let xv = self.value(x).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = xv[ch * hw + p] * av[p];
            }
        }
        let (xi, ai) = (x.0, a.0);
        Ok(self.record(
            "mul_broadcast_channel",
            vec![x, a],
            Tensor::new(xs.clone(), out)?,
            Box::new(move |ts, og, grads| {
                let xv = ts[xi].data();
                let av = ts[ai].data();
                for ch in 0..c {
                    for p in 0..hw {
                        let g = og[ch * hw + p];
                        grads.accum(xi, ch * hw + p, g * av[p]);
                        grads.accum(ai, p, g * xv[ch * hw + p]);
                    }
                }
            }),
        ))
    }

    /// Gather flat indices of `x` into a vector.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(CvfError::InvalidArgument(format!(
                "select index {bad} out of range {n}"
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| xv.data()[i]).collect();
        let xi = x.0;
        let idxs = indices.to_vec();
        Ok(self.record(
            "select",
            vec![x],
            Tensor::new(vec![idxs.len()], out)?,
            Box::new(move |_, og, grads| {
                for (k, &i) in idxs.iter().enumerate() {
                    grads.accum(xi, i, og[k]);
                }
            }),
        ))
    }

    /// Transpose an [N,M] matrix to [M,N].
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(CvfError::Shape(format!("transpose2d expects [N,M], got {xs:?}")));
        }
        let (n, m) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xv[i * m + j];
            }
        }
        let xi = x.0;
        Ok(self.record(
            "transpose2d",
            vec![x],
            Tensor::new(vec![m, n], out)?,
            Box::new(move |_, og, grads| {
                for i in 0..n {
                    for j in 0..m {
                        grads.accum(xi, i * m + j, og[j * n + i]);
                    }
                }
            }),
        ))
    }

    /// View the same data under a new shape with matching element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(CvfError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let data = self.value(x).data().to_vec();
        let xi = x.0;
        Ok(self.record(
            "reshape",
            vec![x],
            Tensor { shape, data },
            Box::new(move |_, og, grads| {
                for (idx, &g) in og.iter().enumerate() {
                    grads.accum(xi, idx, g);
                }
            }),
        ))
    }
}
