use super::ops::{cplx, gemm, sigmoid};
use super::{Node, Op, Var};
use crate::numerics::complex::{exprel_derivative, Complex};

struct Adjoints<'a> {
    nodes: &'a [Node],
    grads: Vec<Option<Vec<f64>>>,
}

impl Adjoints<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.index()].value.len();
        self.grads[v.index()].get_or_insert_with(|| vec![0.0; len])
    }

    /// Adds `f(i)` to element `i` of `v`'s adjoint.
    fn acc(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        for (i, g) in self.slot(v).iter_mut().enumerate() {
            *g += f(i);
        }
    }

    fn acc_vec(&mut self, v: Var, delta: &[f64]) {
        if !self.wants(v) {
            return;
        }
        for (g, d) in self.slot(v).iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.index()].value.data()
    }
}

fn put(buf: &mut [f64], i: usize, z: Complex) {
    buf[2 * i] += z.re;
    buf[2 * i + 1] += z.im;
}

pub(super) fn run(nodes: &[Node], output: Var) -> Vec<Option<Vec<f64>>> {
    let mut adj = Adjoints {
        nodes,
        grads: vec![None; nodes.len()],
    };
    adj.grads[output.index()] = Some(vec![1.0]);

    for idx in (0..=output.index()).rev() {
        let node = &nodes[idx];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = adj.grads[idx].take() else {
            continue;
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                adj.acc_vec(*a, &g);
                adj.acc_vec(*b, &g);
            }
            Op::Sub(a, b) => {
                adj.acc_vec(*a, &g);
                adj.acc(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (x, y) = (adj.val(*a).to_vec(), adj.val(*b).to_vec());
                adj.acc(*a, |i| g[i] * y[i]);
                adj.acc(*b, |i| g[i] * x[i]);
            }
            Op::Scale(a, s) => adj.acc(*a, |i| g[i] * s),
            Op::Exp(a) => adj.acc(*a, |i| g[i] * out[i]),
            Op::Sin(a) => {
                let x = adj.val(*a).to_vec();
                adj.acc(*a, |i| g[i] * x[i].cos());
            }
            Op::Cos(a) => {
                let x = adj.val(*a).to_vec();
                adj.acc(*a, |i| -g[i] * x[i].sin());
            }
            Op::Sigmoid(a) => adj.acc(*a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Swish(a) => {
                let x = adj.val(*a).to_vec();
                adj.acc(*a, |i| {
                    let s = sigmoid(x[i]);
                    g[i] * (s + x[i] * s * (1.0 - s))
                });
            }
            Op::Sum(a) => adj.acc(*a, |_| g[0]),
            Op::AddRow(x, b) => {
                adj.acc_vec(*x, &g);
                if adj.wants(*b) {
                    let cols = adj.val(*b).len();
                    let mut gb = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                    adj.acc_vec(*b, &gb);
                }
            }
            Op::MulRow(x, s) => {
                let sv = adj.val(*s).to_vec();
                let cols = sv.len();
                adj.acc(*x, |i| g[i] * sv[i % cols]);
                if adj.wants(*s) {
                    let xv = adj.val(*x);
                    let mut gs = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        gs[i % cols] += gi * xv[i];
                    }
                    adj.acc_vec(*s, &gs);
                }
            }
            Op::MatMul(x, w) => {
                let xt = &nodes[x.index()].value;
                let wt = &nodes[w.index()].value;
                let (m, k, n) = (xt.rows(), xt.cols(), wt.cols());
                if adj.wants(*x) {
                    // gx = g · wᵀ
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, &g, (n, 1), wt.data(), (1, n), &mut gx, 0.0);
                    adj.acc_vec(*x, &gx);
                }
                if adj.wants(*w) {
                    // gw = xᵀ · g
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, xt.data(), (1, k), &g, (n, 1), &mut gw, 0.0);
                    adj.acc_vec(*w, &gw);
                }
            }
            Op::Outer(a, b) => {
                let (av, bv) = (adj.val(*a).to_vec(), adj.val(*b).to_vec());
                let n = bv.len();
                if adj.wants(*a) {
                    let ga: Vec<f64> = (0..av.len())
                        .map(|i| (0..n).map(|j| g[i * n + j] * bv[j]).sum())
                        .collect();
                    adj.acc_vec(*a, &ga);
                }
                if adj.wants(*b) {
                    let gb: Vec<f64> = (0..n)
                        .map(|j| (0..av.len()).map(|i| g[i * n + j] * av[i]).sum())
                        .collect();
                    adj.acc_vec(*b, &gb);
                }
            }
            Op::Glu(x) => {
                let xt = &nodes[x.index()].value;
                let (rows, cols) = (xt.rows(), xt.cols());
                let half = cols / 2;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = xt.row(r);
                    for j in 0..half {
                        let s = sigmoid(row[half + j]);
                        let go = g[r * half + j];
                        gx[r * cols + j] = go * s;
                        gx[r * cols + half + j] = go * row[j] * s * (1.0 - s);
                    }
                }
                adj.acc_vec(*x, &gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &out[r * cols..(r + 1) * cols];
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        gx[r * cols + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                adj.acc_vec(*x, &gx);
            }
            Op::BatchNorm { x, inv_std } => {
                let cols = inv_std.len();
                let rows = node.value.rows();
                let mut mg = vec![0.0; cols];
                let mut mgy = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let i = r * cols + j;
                        mg[j] += g[i];
                        mgy[j] += g[i] * out[i];
                    }
                }
                let n = rows as f64;
                adj.acc(*x, |i| {
                    let j = i % cols;
                    inv_std[j] * (g[i] - mg[j] / n - out[i] * mgy[j] / n)
                });
            }
            Op::DepthwiseConv { x, kernel, opts } => {
                conv_backward(&mut adj, &g, *x, *kernel, opts);
            }
            Op::Pack(re, im) => {
                adj.acc(*re, |i| g[2 * i]);
                adj.acc(*im, |i| g[2 * i + 1]);
            }
            Op::Re(z) => adj.acc(*z, |i| if i % 2 == 0 { g[i / 2] } else { 0.0 }),
            Op::Im(z) => adj.acc(*z, |i| if i % 2 == 1 { g[i / 2] } else { 0.0 }),
            Op::CMul(a, b) => {
                let (x, y) = (adj.val(*a).to_vec(), adj.val(*b).to_vec());
                let n = x.len() / 2;
                // holomorphic: G_a = G · conj(b), G_b = G · conj(a)
                let mut ga = vec![0.0; x.len()];
                let mut gb = vec![0.0; x.len()];
                for i in 0..n {
                    let gi = cplx(&g, i);
                    put(&mut ga, i, gi * cplx(&y, i).conj());
                    put(&mut gb, i, gi * cplx(&x, i).conj());
                }
                adj.acc_vec(*a, &ga);
                adj.acc_vec(*b, &gb);
            }
            Op::CExp(z) => {
                let mut gz = vec![0.0; g.len()];
                for i in 0..g.len() / 2 {
                    put(&mut gz, i, cplx(&g, i) * cplx(out, i).conj());
                }
                adj.acc_vec(*z, &gz);
            }
            Op::CExpRel(z) => {
                let zv = adj.val(*z).to_vec();
                let mut gz = vec![0.0; g.len()];
                for i in 0..g.len() / 2 {
                    let d = exprel_derivative(cplx(&zv, i));
                    put(&mut gz, i, cplx(&g, i) * d.conj());
                }
                adj.acc_vec(*z, &gz);
            }
            Op::CScaleRows(z, r) => {
                let zt = &nodes[z.index()].value;
                let per_row = 2 * zt.shape()[1];
                let rv = adj.val(*r).to_vec();
                adj.acc(*z, |i| g[i] * rv[i / per_row]);
                if adj.wants(*r) {
                    let zd = zt.data();
                    let mut gr = vec![0.0; rv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        gr[i / per_row] += gi * zd[i];
                    }
                    adj.acc_vec(*r, &gr);
                }
            }
            Op::SsmKernel { w, a_bar, len } => {
                let (wd, ad) = (adj.val(*w).to_vec(), adj.val(*a_bar).to_vec());
                let hn = wd.len() / 2;
                let n = nodes[a_bar.index()].value.shape()[1];
                let mut gw = vec![0.0; wd.len()];
                let mut ga = vec![0.0; ad.len()];
                for i in 0..hn {
                    let h = i / n;
                    let gk = &g[h * len..(h + 1) * len];
                    let a = cplx(&ad, i);
                    let wi = cplx(&wd, i);
                    // K_k = Re(w a^k): G_w += g_k conj(a^k), G_a += g_k conj(k w a^{k-1})
                    let mut p = Complex::new(1.0, 0.0);
                    let mut p_prev = Complex::new(0.0, 0.0);
                    let mut sw = Complex::new(0.0, 0.0);
                    let mut sa = Complex::new(0.0, 0.0);
                    for (k, &gv) in gk.iter().enumerate() {
                        sw += p.conj() * gv;
                        if k > 0 {
                            sa += (wi * p_prev * k as f64).conj() * gv;
                        }
                        p_prev = p;
                        p *= a;
                    }
                    put(&mut gw, i, sw);
                    put(&mut ga, i, sa);
                }
                adj.acc_vec(*w, &gw);
                adj.acc_vec(*a_bar, &ga);
            }
            Op::SsmScan {
                a_bar,
                b_bar,
                c,
                u,
                seq_len,
                states,
                init,
                ..
            } => {
                scan_backward(
                    &mut adj,
                    &g,
                    [*a_bar, *b_bar, *c, *u],
                    *seq_len,
                    states,
                    init.as_deref(),
                );
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                prefix,
                probs,
            } => {
                attention_backward(&mut adj, &g, [*q, *k, *v], *seq_len, prefix.as_ref(), probs);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count > 0 {
                    let classes = nodes[logits.index()].value.cols();
                    let scale = g[0] / *count as f64;
                    adj.acc(*logits, |i| {
                        let r = i / classes;
                        match targets[r] {
                            Some(t) => {
                                let onehot = if i % classes == t { 1.0 } else { 0.0 };
                                scale * (probs[i] - onehot)
                            }
                            None => 0.0,
                        }
                    });
                }
            }
        }
        adj.grads[idx] = Some(g);
    }
    adj.grads
}

fn conv_backward(adj: &mut Adjoints, g: &[f64], x: Var, kernel: Var, opts: &super::ConvOptions) {
    let xt = &adj.nodes[x.index()].value;
    let kt = &adj.nodes[kernel.index()].value;
    let (rows, ch) = (xt.rows(), xt.cols());
    let taps = kt.cols();
    let t_len = opts.seq_len;
    let nseq = rows / t_len;
    let prefix_rows = opts.prefix.as_ref().map_or(0, |p| p.len() / ch.max(1));
    let kd = kt.data();
    let xd = xt.data();
    let want_x = adj.wants(x);
    let want_k = adj.wants(kernel);
    let mut gx = if want_x {
        vec![0.0; rows * ch]
    } else {
        Vec::new()
    };
    // accumulate the kernel gradient transposed ([taps × ch]) for contiguity
    let mut gkt = if want_k {
        vec![0.0; taps * ch]
    } else {
        Vec::new()
    };
    let kt_t = super::ops::transpose(kd, ch, taps);
    for s in 0..nseq {
        let base = s * t_len;
        for t in 0..t_len {
            let go = &g[(base + t) * ch..(base + t + 1) * ch];
            for j in 0..taps {
                let src = t as isize + opts.right as isize - j as isize;
                if src >= t_len as isize {
                    continue;
                }
                let xrow: &[f64] = if src >= 0 {
                    let i = base + src as usize;
                    if want_x {
                        let kr = &kt_t[j * ch..(j + 1) * ch];
                        for ((gxv, &gv), &kw) in gx[i * ch..(i + 1) * ch].iter_mut().zip(go).zip(kr)
                        {
                            *gxv += gv * kw;
                        }
                    }
                    &xd[i * ch..(i + 1) * ch]
                } else {
                    let p = prefix_rows as isize + src;
                    if p < 0 {
                        continue;
                    }
                    let p = p as usize;
                    &opts.prefix.as_ref().expect("prefix").data()[p * ch..(p + 1) * ch]
                };
                if want_k {
                    for ((gk, &gv), &xv) in gkt[j * ch..(j + 1) * ch].iter_mut().zip(go).zip(xrow) {
                        *gk += gv * xv;
                    }
                }
            }
        }
    }
    if want_x {
        adj.acc_vec(x, &gx);
    }
    if want_k {
        let gk = super::ops::transpose(&gkt, taps, ch);
        adj.acc_vec(kernel, &gk);
    }
}

fn scan_backward(
    adj: &mut Adjoints,
    g: &[f64],
    [a_bar, b_bar, c, u]: [Var; 4],
    seq_len: usize,
    states: &[Complex],
    init: Option<&[Complex]>,
) {
    let shape = adj.nodes[a_bar.index()].value.shape();
    let (h, n) = (shape[0], shape[1]);
    let hn = h * n;
    let a: Vec<Complex> = (0..hn).map(|i| cplx(adj.val(a_bar), i)).collect();
    let b: Vec<Complex> = (0..hn).map(|i| cplx(adj.val(b_bar), i)).collect();
    let cc: Vec<Complex> = (0..hn).map(|i| cplx(adj.val(c), i)).collect();
    let ud = adj.val(u).to_vec();
    let rows = ud.len() / h;
    let nseq = rows / seq_len;
    let zero = Complex::new(0.0, 0.0);
    let mut ga = vec![zero; hn];
    let mut gb = vec![zero; hn];
    let mut gc = vec![zero; hn];
    let mut gu = vec![0.0; rows * h];
    for s in 0..nseq {
        // adjoint of x_t, carried backwards through x_{t+1} = a x_t + ...
        let mut lam = vec![zero; hn];
        for t in (0..seq_len).rev() {
            let r = s * seq_len + t;
            for hi in 0..h {
                let gy = g[r * h + hi];
                let uu = ud[r * h + hi];
                let mut gu_acc = 0.0;
                for ni in 0..n {
                    let i = hi * n + ni;
                    let x_t = states[r * hn + i];
                    let x_prev = if t > 0 {
                        states[(r - 1) * hn + i]
                    } else {
                        init.map_or(zero, |s0| s0[i])
                    };
                    let l = lam[i] * a[i].conj() + cc[i].conj() * gy;
                    gc[i] += x_t.conj() * gy;
                    ga[i] += l * x_prev.conj();
                    gb[i] += l * uu;
                    gu_acc += l.re * b[i].re + l.im * b[i].im;
                    lam[i] = l;
                }
                gu[r * h + hi] = gu_acc;
            }
        }
    }
    let flat = |v: &[Complex]| -> Vec<f64> { v.iter().flat_map(|z| [z.re, z.im]).collect() };
    adj.acc_vec(a_bar, &flat(&ga));
    adj.acc_vec(b_bar, &flat(&gb));
    adj.acc_vec(c, &flat(&gc));
    adj.acc_vec(u, &gu);
}

fn attention_backward(
    adj: &mut Adjoints,
    g: &[f64],
    [q, k, v]: [Var; 3],
    seq_len: usize,
    prefix: Option<&super::AttentionPrefix>,
    probs: &[f64],
) {
    let qt = &adj.nodes[q.index()].value;
    let (rows, ch) = (qt.rows(), qt.cols());
    let (qd, kd, vd) = (qt.data(), adj.val(k), adj.val(v));
    let p = prefix.map_or(0, |pre| pre.keys.len() / ch);
    let width = p + seq_len;
    let scale = 1.0 / (ch as f64).sqrt();
    let nseq = rows / seq_len;
    let mut gq = vec![0.0; rows * ch];
    let mut gk = vec![0.0; rows * ch];
    let mut gv = vec![0.0; rows * ch];
    let mut dp = vec![0.0; width];
    for s in 0..nseq {
        let key = |j: usize| -> &[f64] {
            if j < p {
                &prefix.expect("prefix").keys.data()[j * ch..(j + 1) * ch]
            } else {
                let r = s * seq_len + j - p;
                &kd[r * ch..(r + 1) * ch]
            }
        };
        let value = |j: usize| -> &[f64] {
            if j < p {
                &prefix.expect("prefix").values.data()[j * ch..(j + 1) * ch]
            } else {
                let r = s * seq_len + j - p;
                &vd[r * ch..(r + 1) * ch]
            }
        };
        for t in 0..seq_len {
            let r = s * seq_len + t;
            let go = &g[r * ch..(r + 1) * ch];
            let pr = &probs[r * width..r * width + p + t + 1];
            let mut weighted = 0.0;
            for (j, &pj) in pr.iter().enumerate() {
                dp[j] = super::ops::dot(go, value(j));
                weighted += pj * dp[j];
                if j >= p {
                    let kr = s * seq_len + j - p;
                    for (gvv, &gg) in gv[kr * ch..(kr + 1) * ch].iter_mut().zip(go) {
                        *gvv += pj * gg;
                    }
                }
            }
            for (j, &pj) in pr.iter().enumerate() {
                let ds = pj * (dp[j] - weighted) * scale;
                for (gqv, &kv) in gq[r * ch..(r + 1) * ch].iter_mut().zip(key(j)) {
                    *gqv += ds * kv;
                }
                if j >= p {
                    let kr = s * seq_len + j - p;
                    for (gkv, &qv) in gk[kr * ch..(kr + 1) * ch]
                        .iter_mut()
                        .zip(&qd[r * ch..(r + 1) * ch])
                    {
                        *gkv += ds * qv;
                    }
                }
            }
        }
    }
    adj.acc_vec(q, &gq);
    adj.acc_vec(k, &gk);
    adj.acc_vec(v, &gv);
}
