use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Worst relative disagreement between the tape gradient and central
/// differences with step 1e-5.
fn fd_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-5);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contract an arbitrary-shaped node to a scalar with fixed, non-uniform
/// weights so every output element influences the loss differently.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let shape = tape.value(v).shape().to_vec();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0)
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x), vec![6.0]);
}

#[test]
fn real_part_of_complex_exponential() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.leaf(Tensor::scalar(std::f64::consts::FRAC_PI_2));
    let z = tape.pack(x, y).unwrap();
    let e = tape.cexp(z).unwrap();
    let re = tape.re(e).unwrap();
    let f = tape.sum(re).unwrap();
    let g = tape.backward(f).unwrap();
    // ∂/∂x Re(e^{x+iy}) = e^x cos y = cos(π/2)
    assert!(g.wrt(x)[0].abs() < 1e-15);
    // ∂/∂y = -e^x sin y = -1
    assert!((g.wrt(y)[0] + 1.0).abs() < 1e-15);
}

#[test]
fn unused_nodes_have_exactly_zero_adjoint() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
    let _dead = tape.exp(unused).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), vec![0.0; 3]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar_outputs() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.leaf(Tensor::scalar(1.0));
    let y = b.leaf(Tensor::scalar(1.0));
    assert!(matches!(a.backward(y), Err(Error::InvalidArgument(_))));
    let v = a.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(a.backward(v).is_err());
    assert!(a.backward(x).is_ok());
}

#[test]
fn topological_order_holds() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let y = tape.exp(x).unwrap();
    let z = tape.mul(y, x).unwrap();
    assert!(x.index() < y.index() && y.index() < z.index());
}

#[test]
fn glu_rejects_odd_width() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    assert!(tape.glu(x).is_err());
}

macro_rules! fd_case {
    ($name:ident, $shapes:expr, $scale:expr, $build:expr) => {
        #[test]
        fn $name() {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let build: Box<Build> = Box::new($build);
            for _ in 0..3 {
                let inputs: Vec<Tensor> = $shapes
                    .iter()
                    .map(|s: &Vec<usize>| rand_tensor(&mut rng, s, $scale))
                    .collect();
                let err = fd_error(&*build, &inputs);
                assert!(err < 1e-4, "relative error {err}");
            }
        }
    };
}

fd_case!(
    fd_add_sub_mul,
    [vec![3, 2], vec![3, 2]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.mul(b, v[1])?;
        weighted_sum(t, c)
    }
);

fd_case!(fd_elementwise, [vec![5]], 1.5, |t: &mut Tape, v: &[Var]| {
    let a = t.exp(v[0])?;
    let b = t.sin(v[0])?;
    let c = t.cos(a)?;
    let d = t.sigmoid(b)?;
    let e = t.swish(c)?;
    let f = t.add(d, e)?;
    let g = t.scale(f, -0.7)?;
    weighted_sum(t, g)
});

fd_case!(
    fd_row_broadcasts,
    [vec![4, 3], vec![3], vec![3]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.mul_row(v[0], v[1])?;
        let b = t.add_row(a, v[2])?;
        let c = t.mul(b, b)?;
        weighted_sum(t, c)
    }
);

fd_case!(
    fd_matmul,
    [vec![4, 3], vec![3, 5]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.matmul(v[0], v[1])?;
        let b = t.swish(a)?;
        weighted_sum(t, b)
    }
);

fd_case!(
    fd_outer,
    [vec![3], vec![4]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.outer(v[0], v[1])?;
        let b = t.mul(a, a)?;
        weighted_sum(t, b)
    }
);

fd_case!(fd_glu, [vec![3, 6]], 2.0, |t: &mut Tape, v: &[Var]| {
    let a = t.glu(v[0])?;
    weighted_sum(t, a)
});

fd_case!(
    fd_layer_norm,
    [vec![3, 5]],
    2.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.layer_norm(v[0], 1e-5)?;
        let b = t.swish(a)?;
        weighted_sum(t, b)
    }
);

fd_case!(
    fd_batch_norm,
    [vec![6, 3]],
    2.0,
    |t: &mut Tape, v: &[Var]| {
        let (a, _, _) = t.batch_norm(v[0], 1e-5)?;
        let b = t.swish(a)?;
        weighted_sum(t, b)
    }
);

fd_case!(
    fd_depthwise_conv_causal,
    [vec![10, 3], vec![3, 4]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let opts = ConvOptions {
            seq_len: 5,
            right: 0,
            prefix: None,
        };
        let a = t.depthwise_conv(v[0], v[1], opts)?;
        let b = t.swish(a)?;
        weighted_sum(t, b)
    }
);

fd_case!(
    fd_depthwise_conv_centered_with_prefix,
    [vec![6, 2], vec![2, 5]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let prefix = Tensor::matrix(3, 2, vec![0.5, -0.25, 1.0, 0.3, -0.7, 0.2]).unwrap();
        let opts = ConvOptions {
            seq_len: 6,
            right: 2,
            prefix: Some(prefix),
        };
        let a = t.depthwise_conv(v[0], v[1], opts)?;
        let b = t.mul(a, a)?;
        weighted_sum(t, b)
    }
);

fd_case!(
    fd_complex_ops,
    [vec![2, 3], vec![2, 3], vec![2, 3], vec![2, 3], vec![2]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let z = t.pack(v[0], v[1])?;
        let w = t.pack(v[2], v[3])?;
        let e = t.cexp(z)?;
        let r = t.cexprel(w)?;
        let m = t.cmul(e, r)?;
        let s = t.cscale_rows(m, v[4])?;
        let re = t.re(s)?;
        let im = t.im(s)?;
        let q = t.mul(re, im)?;
        let total = t.add(q, re)?;
        weighted_sum(t, total)
    }
);

fd_case!(
    fd_cexprel_near_zero,
    [vec![4], vec![4]],
    1e-3,
    |t: &mut Tape, v: &[Var]| {
        let z = t.pack(v[0], v[1])?;
        let r = t.cexprel(z)?;
        let re = t.re(r)?;
        let im = t.im(r)?;
        let s = t.add(re, im)?;
        weighted_sum(t, s)
    }
);

fd_case!(
    fd_ssm_kernel,
    [vec![2, 3, 2], vec![2, 3, 2]],
    0.8,
    |t: &mut Tape, v: &[Var]| {
        let k = t.ssm_kernel(v[0], v[1], 7)?;
        weighted_sum(t, k)
    }
);

fd_case!(
    fd_ssm_scan,
    [vec![2, 3, 2], vec![2, 3, 2], vec![2, 3, 2], vec![8, 2]],
    0.8,
    |t: &mut Tape, v: &[Var]| {
        let opts = ScanOptions {
            seq_len: 4,
            init: None,
        };
        let y = t.ssm_scan(v[0], v[1], v[2], v[3], opts)?;
        let y2 = t.mul(y, y)?;
        weighted_sum(t, y2)
    }
);

fd_case!(
    fd_ssm_scan_with_initial_state,
    [vec![1, 2, 2], vec![1, 2, 2], vec![1, 2, 2], vec![5, 1]],
    0.8,
    |t: &mut Tape, v: &[Var]| {
        let opts = ScanOptions {
            seq_len: 5,
            init: Some(vec![Complex::new(0.3, -0.2), Complex::new(-1.0, 0.5)]),
        };
        let y = t.ssm_scan(v[0], v[1], v[2], v[3], opts)?;
        weighted_sum(t, y)
    }
);

fd_case!(
    fd_attention,
    [vec![6, 4], vec![6, 4], vec![6, 4]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let a = t.causal_attention(v[0], v[1], v[2], 3, None)?;
        weighted_sum(t, a)
    }
);

fd_case!(
    fd_attention_with_prefix,
    [vec![3, 2], vec![3, 2], vec![3, 2]],
    1.0,
    |t: &mut Tape, v: &[Var]| {
        let prefix = AttentionPrefix {
            keys: Tensor::matrix(2, 2, vec![0.1, -0.4, 0.9, 0.3]).unwrap(),
            values: Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 0.2]).unwrap(),
        };
        let a = t.causal_attention(v[0], v[1], v[2], 3, Some(prefix))?;
        weighted_sum(t, a)
    }
);

fd_case!(
    fd_cross_entropy,
    [vec![5, 4]],
    2.0,
    |t: &mut Tape, v: &[Var]| {
        t.softmax_cross_entropy(v[0], &[Some(1), None, Some(3), Some(0), Some(1)])
    }
);

/// Three stacked layers touching every primitive, checked at random points.
#[test]
fn random_three_layer_composition() {
    let build: Box<Build> = Box::new(|t: &mut Tape, v: &[Var]| {
        // layer 1: linear + norm + gating
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.layer_norm(h, 1e-5)?;
        let h = t.glu(h)?; // [8 × 2]
                           // layer 2: state-space scan and convolution, built from complex leaves
        let re = t.exp(v[3])?;
        let re = t.neg(re)?;
        let a = t.pack(re, v[4])?; // [2 × 1 × 2] after outer
        let dt = t.exp(v[5])?;
        let zr = t.outer(dt, re)?;
        let zi = t.outer(dt, v[4])?;
        let z = t.pack(zr, zi)?;
        let a_bar = t.cexp(z)?;
        let b_bar = t.cexprel(z)?;
        let b_bar = t.cscale_rows(b_bar, dt)?;
        let _ = a;
        let y = t.ssm_scan(
            a_bar,
            b_bar,
            v[6],
            h,
            ScanOptions {
                seq_len: 4,
                init: None,
            },
        )?;
        let w = t.cmul(v[6], b_bar)?;
        let k = t.ssm_kernel(w, a_bar, 3)?;
        let y2 = t.depthwise_conv(
            h,
            k,
            ConvOptions {
                seq_len: 4,
                right: 0,
                prefix: None,
            },
        )?;
        let y = t.add(y, y2)?;
        let (y, _, _) = t.batch_norm(y, 1e-5)?;
        let y = t.swish(y)?;
        // layer 3: attention, elementwise and loss
        let att = t.causal_attention(y, y, y, 4, None)?;
        let s = t.sigmoid(att)?;
        let c = t.cos(s)?;
        let sn = t.sin(c)?;
        let m = t.mul(sn, y)?;
        let m = t.mul_row(m, v[7])?;
        let d = t.sub(m, y)?;
        let d = t.scale(d, 0.5)?;
        let ce = t.softmax_cross_entropy(
            d,
            &[
                Some(0),
                Some(1),
                None,
                Some(1),
                Some(0),
                Some(0),
                Some(1),
                None,
            ],
        )?;
        let re_part = t.re(w)?;
        let reg = t.sum(re_part)?;
        let reg = t.scale(reg, 0.01)?;
        t.add(ce, reg)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shapes: [&[usize]; 8] = [&[8, 3], &[3, 4], &[4], &[1], &[1], &[2], &[2, 1, 2], &[2]];
    for _ in 0..5 {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| rand_tensor(&mut rng, s, 1.0))
            .collect();
        let err = fd_error(&*build, &inputs);
        assert!(err < 1e-4, "composition relative error {err}");
    }
}
