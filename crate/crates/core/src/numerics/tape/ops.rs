use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::complex::{exprel, Complex};
use crate::numerics::tensor::Tensor;

/// Geometry of a depthwise convolution over a `[B·T × C]` input.
#[derive(Clone, Debug, Default)]
pub struct ConvOptions {
    /// Length of each sequence in the batch; rows are split into blocks of
    /// this size and never mix.
    pub seq_len: usize,
    /// Number of future frames visible to each output (0 = causal).
    pub right: usize,
    /// Frames immediately preceding the input, `[P × C]`, used in place of
    /// zero padding. Only valid for a single sequence.
    pub prefix: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ScanOptions {
    pub seq_len: usize,
    /// Initial hidden state `[H × N]` (single sequence only).
    pub init: Option<Vec<Complex>>,
}

/// Keys and values from earlier frames for streaming attention, `[P × C]`.
#[derive(Clone, Debug)]
pub struct AttentionPrefix {
    pub keys: Tensor,
    pub values: Tensor,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn cplx(data: &[f64], i: usize) -> Complex {
    Complex::new(data[2 * i], data[2 * i + 1])
}

fn split_complex(shape: &[usize], what: &str) -> Result<usize> {
    match shape.last() {
        Some(2) => Ok(shape.iter().product::<usize>() / 2),
        _ => Err(Error::invalid(format!(
            "{what}: expected a complex array with trailing axis 2, got {shape:?}"
        ))),
    }
}

fn seq_count(rows: usize, seq_len: usize, what: &str) -> Result<usize> {
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::invalid(format!(
            "{what}: {rows} rows do not split into sequences of length {seq_len}"
        )));
    }
    Ok(rows / seq_len)
}

impl Tape {
    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let g = self.requires_grad(a);
        Ok(self.push(value, op, g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v * sigmoid(v), Op::Swish(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        let g = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), g))
    }

    fn row_broadcast(&self, x: Var, r: Var, what: &str) -> Result<()> {
        self.check(x)?;
        self.check(r)?;
        let cols = self.value(x).cols();
        if self.value(r).len() != cols {
            return Err(Error::invalid(format!(
                "{what}: row vector of length {} does not match {cols} columns",
                self.value(r).len()
            )));
        }
        Ok(())
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(x, bias, "add_row")?;
        let b = self.value(bias).data();
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.grad_any(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), g))
    }

    /// Multiplies every row of `x` elementwise by the vector `scale`.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.row_broadcast(x, scale, "mul_row")?;
        let s = self.value(scale).data();
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i % cols])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.grad_any(&[x, scale]);
        Ok(self.push(value, Op::MulRow(x, scale), g))
    }

    /// `[R × K] · [K × C]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::invalid(format!(
                "matmul: cannot multiply {:?} by {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), (k, 1), wv.data(), (n, 1), &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        let g = self.grad_any(&[x, w]);
        Ok(self.push(value, Op::MatMul(x, w), g))
    }

    /// `out[i, j] = a[i] · b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .flat_map(|&p| bv.iter().map(move |&q| p * q))
            .collect();
        let value = Tensor::matrix(av.len(), bv.len(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Outer(a, b), g))
    }

    /// Gated linear unit: splits the columns into halves `(a, b)` and returns
    /// `a ⊙ sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let cols = xv.cols();
        if !cols.is_multiple_of(2) || xv.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "glu: needs an even number of columns, got shape {:?}",
                xv.shape()
            )));
        }
        let half = cols / 2;
        let mut data = Vec::with_capacity(xv.rows() * half);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            for j in 0..half {
                data.push(row[j] * sigmoid(row[half + j]));
            }
        }
        let value = Tensor::matrix(xv.rows(), half, data)?;
        let g = self.requires_grad(x);
        Ok(self.push(value, Op::Glu(x), g))
    }

    /// Normalises each row to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.requires_grad(x);
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, g))
    }

    /// Normalises each column over all rows with the batch statistics.
    /// Returns the normalised values plus the per-column mean and biased
    /// variance that were used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 || xv.is_empty() {
            return Err(Error::invalid("batch_norm: empty batch"));
        }
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..rows {
            for ((v, m), is) in xv.row(r).iter().zip(&mean).zip(&inv_std) {
                data.push((v - m) * is);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.requires_grad(x);
        let out = self.push(value, Op::BatchNorm { x, inv_std }, g);
        Ok((out, mean, var))
    }

    /// Per-channel convolution: `out[t, c] = Σ_j kernel[c, j] · x[t + right − j, c]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, opts: ConvOptions) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (rows, ch) = (xv.rows(), xv.cols());
        let taps = kv.cols();
        if kv.shape().len() != 2 || kv.rows() != ch || taps == 0 {
            return Err(Error::invalid(format!(
                "depthwise_conv: kernel {:?} does not match {ch} channels",
                kv.shape()
            )));
        }
        let nseq = seq_count(rows, opts.seq_len, "depthwise_conv")?;
        let prefix_rows = match &opts.prefix {
            Some(_) if nseq != 1 => {
                return Err(Error::invalid(format!(
                    "depthwise_conv: prefix given for {nseq} sequences; only one is supported"
                )))
            }
            Some(p) if p.cols() != ch && !p.is_empty() => {
                return Err(Error::invalid("depthwise_conv: prefix width mismatch"))
            }
            Some(p) => p.len() / ch,
            None => 0,
        };
        // kernel transposed to [taps × ch] so the inner loop is contiguous
        let kt = transpose(kv.data(), ch, taps);
        let t_len = opts.seq_len;
        let mut out = vec![0.0; rows * ch];
        let xd = xv.data();
        let pd = opts.prefix.as_ref().map(|p| p.data());
        for s in 0..nseq {
            let base = s * t_len;
            for t in 0..t_len {
                let o = &mut out[(base + t) * ch..(base + t + 1) * ch];
                for j in 0..taps {
                    let src = t as isize + opts.right as isize - j as isize;
                    let row: &[f64] = if src >= t_len as isize {
                        continue;
                    } else if src >= 0 {
                        let i = base + src as usize;
                        &xd[i * ch..(i + 1) * ch]
                    } else {
                        let p = prefix_rows as isize + src;
                        if p < 0 {
                            continue;
                        }
                        let p = p as usize;
                        &pd.expect("prefix_rows > 0 implies a prefix")[p * ch..(p + 1) * ch]
                    };
                    let kr = &kt[j * ch..(j + 1) * ch];
                    for ((acc, &xv), &kw) in o.iter_mut().zip(row).zip(kr) {
                        *acc += kw * xv;
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, ch, out)?;
        let g = self.grad_any(&[x, kernel]);
        Ok(self.push(value, Op::DepthwiseConv { x, kernel, opts }, g))
    }

    /// Packs two equally shaped real arrays into one complex array.
    pub fn pack(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape(re, im, "pack")?;
        let (a, b) = (self.value(re), self.value(im));
        let mut shape = a.shape().to_vec();
        shape.push(2);
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .flat_map(|(&x, &y)| [x, y])
            .collect();
        let value = Tensor::new(shape, data)?;
        let g = self.grad_any(&[re, im]);
        Ok(self.push(value, Op::Pack(re, im), g))
    }

    fn part(&mut self, z: Var, which: usize) -> Result<Var> {
        self.check(z)?;
        let zv = self.value(z);
        split_complex(zv.shape(), "re/im")?;
        let shape = zv.shape()[..zv.shape().len() - 1].to_vec();
        let data = zv.data().chunks_exact(2).map(|p| p[which]).collect();
        let value = Tensor::new(shape, data)?;
        let g = self.requires_grad(z);
        let op = if which == 0 { Op::Re(z) } else { Op::Im(z) };
        Ok(self.push(value, op, g))
    }

    pub fn re(&mut self, z: Var) -> Result<Var> {
        self.part(z, 0)
    }

    pub fn im(&mut self, z: Var) -> Result<Var> {
        self.part(z, 1)
    }

    fn complex_map(
        &mut self,
        z: Var,
        f: impl Fn(Complex) -> Complex,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        self.check(z)?;
        let zv = self.value(z);
        let n = split_complex(zv.shape(), what)?;
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let w = f(cplx(zv.data(), i));
            data.push(w.re);
            data.push(w.im);
        }
        let value = Tensor::new(zv.shape().to_vec(), data)?;
        let g = self.requires_grad(z);
        Ok(self.push(value, op, g))
    }

    pub fn cexp(&mut self, z: Var) -> Result<Var> {
        self.complex_map(z, |w| w.exp(), Op::CExp(z), "cexp")
    }

    /// `(e^z − 1)/z`, evaluated stably near zero.
    pub fn cexprel(&mut self, z: Var) -> Result<Var> {
        self.complex_map(z, exprel, Op::CExpRel(z), "cexprel")
    }

    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cmul")?;
        let n = split_complex(self.value(a).shape(), "cmul")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let w = cplx(x, i) * cplx(y, i);
            data.push(w.re);
            data.push(w.im);
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::CMul(a, b), g))
    }

    /// Scales row `h` of a complex `[H × N]` array by the real `r[h]`.
    pub fn cscale_rows(&mut self, z: Var, r: Var) -> Result<Var> {
        self.check(z)?;
        self.check(r)?;
        let zv = self.value(z);
        let rv = self.value(r).data();
        if zv.shape().len() != 3 || zv.shape()[2] != 2 || zv.shape()[0] != rv.len() {
            return Err(Error::invalid(format!(
                "cscale_rows: {:?} cannot be scaled by {} row factors",
                zv.shape(),
                rv.len()
            )));
        }
        let per_row = 2 * zv.shape()[1];
        let data = zv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i / per_row])
            .collect();
        let value = Tensor::new(zv.shape().to_vec(), data)?;
        let g = self.grad_any(&[z, r]);
        Ok(self.push(value, Op::CScaleRows(z, r), g))
    }

    fn ssm_dims(&self, a_bar: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(a_bar).shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::invalid(format!(
                "{what}: expected complex [H × N × 2] weights, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `K[h, k] = Re Σ_n w[h, n] · a_bar[h, n]^k` for `k < len`.
    pub fn ssm_kernel(&mut self, w: Var, a_bar: Var, len: usize) -> Result<Var> {
        self.same_shape(w, a_bar, "ssm_kernel")?;
        let (h, n) = self.ssm_dims(a_bar, "ssm_kernel")?;
        if len == 0 {
            return Err(Error::invalid(
                "ssm_kernel: kernel length must be at least 1",
            ));
        }
        let (wd, ad) = (self.value(w).data(), self.value(a_bar).data());
        let mut out = vec![0.0; h * len];
        for hi in 0..h {
            let row = &mut out[hi * len..(hi + 1) * len];
            for ni in 0..n {
                let a = cplx(ad, hi * n + ni);
                let mut p = cplx(wd, hi * n + ni);
                for slot in row.iter_mut() {
                    *slot += p.re;
                    p *= a;
                }
            }
        }
        let value = Tensor::matrix(h, len, out)?;
        let g = self.grad_any(&[w, a_bar]);
        Ok(self.push(value, Op::SsmKernel { w, a_bar, len }, g))
    }

    /// Diagonal state-space recurrence over each channel of `u`:
    /// `x_t = a_bar ⊙ x_{t−1} + b_bar · u_t`, `y_t = Re Σ_n c ⊙ x_t`.
    pub fn ssm_scan(
        &mut self,
        a_bar: Var,
        b_bar: Var,
        c: Var,
        u: Var,
        opts: ScanOptions,
    ) -> Result<Var> {
        self.same_shape(a_bar, b_bar, "ssm_scan")?;
        self.same_shape(a_bar, c, "ssm_scan")?;
        self.check(u)?;
        let (h, n) = self.ssm_dims(a_bar, "ssm_scan")?;
        let uv = self.value(u);
        if uv.cols() != h || uv.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "ssm_scan: input {:?} does not have {h} channels",
                uv.shape()
            )));
        }
        let rows = uv.rows();
        let nseq = seq_count(rows, opts.seq_len, "ssm_scan")?;
        if let Some(init) = &opts.init {
            if nseq != 1 || init.len() != h * n {
                return Err(Error::invalid(
                    "ssm_scan: initial state needs a single sequence and H × N entries",
                ));
            }
        }
        let hn = h * n;
        let a: Vec<Complex> = (0..hn).map(|i| cplx(self.value(a_bar).data(), i)).collect();
        let b: Vec<Complex> = (0..hn).map(|i| cplx(self.value(b_bar).data(), i)).collect();
        let cc: Vec<Complex> = (0..hn).map(|i| cplx(self.value(c).data(), i)).collect();
        let ud = uv.data();
        let mut states = vec![Complex::new(0.0, 0.0); rows * hn];
        let mut final_state = Vec::with_capacity(nseq * hn);
        let mut out = vec![0.0; rows * h];
        for s in 0..nseq {
            let mut x = opts
                .init
                .clone()
                .unwrap_or_else(|| vec![Complex::new(0.0, 0.0); hn]);
            for t in 0..opts.seq_len {
                let r = s * opts.seq_len + t;
                for hi in 0..h {
                    let uu = ud[r * h + hi];
                    let mut y = 0.0;
                    for ni in 0..n {
                        let i = hi * n + ni;
                        let xi = a[i] * x[i] + b[i] * uu;
                        x[i] = xi;
                        y += cc[i].re * xi.re - cc[i].im * xi.im;
                    }
                    out[r * h + hi] = y;
                }
                states[r * hn..(r + 1) * hn].copy_from_slice(&x);
            }
            final_state.extend_from_slice(&x);
        }
        let value = Tensor::matrix(rows, h, out)?;
        let g = self.grad_any(&[a_bar, b_bar, c, u]);
        let op = Op::SsmScan {
            a_bar,
            b_bar,
            c,
            u,
            seq_len: opts.seq_len,
            states,
            init: opts.init,
            final_state,
        };
        Ok(self.push(value, op, g))
    }

    /// Causal single-head scaled dot-product attention over `[B·T × C]`
    /// queries, keys and values. Query `t` sees keys `0..=t` of its own
    /// sequence plus every prefix key.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        prefix: Option<AttentionPrefix>,
    ) -> Result<Var> {
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        let (rows, ch) = (self.value(q).rows(), self.value(q).cols());
        let nseq = seq_count(rows, seq_len, "causal_attention")?;
        let p = match &prefix {
            Some(pre) => {
                if nseq != 1 || pre.keys.len() != pre.values.len() || pre.keys.len() % ch != 0 {
                    return Err(Error::invalid(
                        "causal_attention: malformed key/value prefix",
                    ));
                }
                pre.keys.len() / ch
            }
            None => 0,
        };
        let width = p + seq_len;
        let scale = 1.0 / (ch as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let key_row = |s: usize, j: usize| -> &[f64] {
            if j < p {
                &prefix.as_ref().unwrap().keys.data()[j * ch..(j + 1) * ch]
            } else {
                let r = s * seq_len + j - p;
                &kd[r * ch..(r + 1) * ch]
            }
        };
        let val_row = |s: usize, j: usize| -> &[f64] {
            if j < p {
                &prefix.as_ref().unwrap().values.data()[j * ch..(j + 1) * ch]
            } else {
                let r = s * seq_len + j - p;
                &vd[r * ch..(r + 1) * ch]
            }
        };
        let mut probs = vec![0.0; rows * width];
        let mut out = vec![0.0; rows * ch];
        for s in 0..nseq {
            for t in 0..seq_len {
                let r = s * seq_len + t;
                let qr = &qd[r * ch..(r + 1) * ch];
                let visible = p + t + 1;
                let pr = &mut probs[r * width..r * width + visible];
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in pr.iter_mut().enumerate() {
                    let sc = dot(qr, key_row(s, j)) * scale;
                    *slot = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for slot in pr.iter_mut() {
                    *slot = (*slot - max).exp();
                    z += *slot;
                }
                let o = &mut out[r * ch..(r + 1) * ch];
                for (j, slot) in pr.iter_mut().enumerate() {
                    *slot /= z;
                    for (acc, &vv) in o.iter_mut().zip(val_row(s, j)) {
                        *acc += *slot * vv;
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, ch, out)?;
        let g = self.grad_any(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            seq_len,
            prefix,
            probs,
        };
        Ok(self.push(value, op, g))
    }

    /// Mean cross-entropy of `softmax(logits)` against class labels; `None`
    /// targets are ignored. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let pr = &mut probs[r * classes..(r + 1) * classes];
            for (p, v) in pr.iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(t) = *target {
                if t >= classes {
                    return Err(Error::invalid(format!(
                        "softmax_cross_entropy: label {t} out of range for {classes} classes"
                    )));
                }
                loss += -(row[t] - max - z.ln());
                count += 1;
            }
        }
        let value = Tensor::scalar(if count > 0 { loss / count as f64 } else { 0.0 });
        let g = self.requires_grad(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(value, op, g))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `c = a · b + beta · c` for row-major views with explicit `(row, col)`
/// strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
