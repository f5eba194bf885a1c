use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::max_relative_error;
use crate::s4d::materialize_kernel;

fn input(t: usize, h: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TimeSeries::new(
        t,
        h,
        (0..t * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn s4() -> S4DConfig {
    S4DConfig::new(S4DScheme::Lin, 4)
}

fn module_spec(approach: Approach, h: usize, context: Context) -> ConvModuleSpec {
    match approach {
        Approach::Baseline => ConvModuleSpec::baseline(h, 4, context),
        Approach::Dir => ConvModuleSpec::dir(h, s4(), context),
        Approach::Com => ConvModuleSpec::com(h, 2, s4(), context),
        Approach::Rep => ConvModuleSpec::rep(h, 8, s4(), context),
    }
}

/// Two modules in one store, the second's shared weights copied from the
/// first (matching names after the module prefix).
fn pair(a: &ConvModuleSpec, b: &ConvModuleSpec, seed: u64) -> (ParamStore, ConvModule, ConvModule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ma = ConvModule::new(a, &mut store, "a", &mut rng).unwrap();
    let mb = ConvModule::new(b, &mut store, "b", &mut rng).unwrap();
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    for name in names.iter().filter(|n| n.starts_with("a.")) {
        if let Some(dst) = store.id(&format!("b.{}", &name[2..])) {
            let src = store.id(name).unwrap();
            if store.get(src).shape() == store.get(dst).shape() {
                let v = store.get(src).clone();
                store.set(dst, v).unwrap();
            }
        }
    }
    (store, ma, mb)
}

fn single(spec: &ConvModuleSpec, seed: u64) -> (ParamStore, ConvModule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = ConvModule::new(spec, &mut store, "m", &mut rng).unwrap();
    (store, m)
}

#[test]
fn glu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 4, vec![3.0, -2.0, 0.0, 50.0]).unwrap());
    let y = tape.glu(x).unwrap();
    let y = tape.value(y).data();
    assert_eq!(y[0], 1.5);
    assert!((y[1] + 2.0).abs() < 1e-12);
    let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 7.0]).unwrap());
    let z = tape.glu(z).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0]);
}

fn conv(x: &[f64], kernel: &[f64], context: Context) -> Vec<f64> {
    let spec = ConvModuleSpec::baseline(1, kernel.len(), context);
    let mut store = ParamStore::new();
    let k = store.add(
        "k",
        Tensor::matrix(1, kernel.len(), kernel.to_vec()).unwrap(),
        true,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut module = ConvModule::new(&spec, &mut store, "m", &mut rng).unwrap();
    module.kernel = Some(k);
    let mut f = Forward::eval(&store, x.len());
    let xv = f.input(Tensor::matrix(x.len(), 1, x.to_vec()).unwrap());
    let kv = f.param(k);
    let y = module.depthwise(&mut f, xv, kv, None).unwrap();
    f.tape.value(y).data().to_vec()
}

#[test]
fn depthwise_examples() {
    assert_eq!(
        conv(&[1.0, 2.0, 3.0], &[2.0, 1.0], Context::Online),
        vec![2.0, 5.0, 8.0]
    );
    assert_eq!(
        conv(&[1.0, -2.0, 3.0], &[0.5], Context::Offline),
        vec![0.5, -1.0, 1.5]
    );
    // Offline k=3: one past and one future tap.
    assert_eq!(
        conv(&[1.0, 2.0, 3.0], &[1.0, 10.0, 100.0], Context::Offline),
        vec![12.0, 123.0, 230.0]
    );
}

#[test]
fn offline_even_kernel_split() {
    // k=4: left 2, right 1. Impulse at t=3 shows up at t = 2..=5.
    let mut x = vec![0.0; 8];
    x[3] = 1.0;
    let y = conv(&x, &[1.0, 2.0, 3.0, 4.0], Context::Offline);
    assert_eq!(y, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
}

#[test]
fn long_offline_kernel_sees_future_online_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x2 = x.clone();
    x2[40] += 1.0;
    let (a, b) = (
        conv(&x, &k, Context::Online),
        conv(&x2, &k, Context::Online),
    );
    assert_eq!(&a[..40], &b[..40]);
    let (a, b) = (
        conv(&x, &k, Context::Offline),
        conv(&x2, &k, Context::Offline),
    );
    assert_ne!(&a[..40], &b[..40]);
}

#[test]
fn spec_validation_names_fields() {
    let field = |s: ConvModuleSpec| match s.validate() {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(
        field(ConvModuleSpec::rep(8, 0, s4(), Context::Online)),
        "rep_left_context"
    );
    assert_eq!(
        field(ConvModuleSpec::com(8, 0, s4(), Context::Online)),
        "kernel_size"
    );
    assert_eq!(
        field(ConvModuleSpec::baseline(8, 0, Context::Online)),
        "kernel_size"
    );
    let mut b = ConvModuleSpec::baseline(8, 3, Context::Online);
    b.s4d = Some(s4());
    assert_eq!(field(b), "s4d");
    let mut d = ConvModuleSpec::dir(8, s4(), Context::Online);
    d.s4d = None;
    assert_eq!(field(d), "s4d");
    assert_eq!(field(ConvModuleSpec::dir(0, s4(), Context::Online)), "h");
    for a in Approach::ALL {
        module_spec(a, 4, Context::Online).validate().unwrap();
    }
}

#[test]
fn zero_projection_is_identity() {
    for a in Approach::ALL {
        let (mut store, m) = single(&module_spec(a, 6, Context::Online), 1);
        m.zero_residual_projection(&mut store);
        let x = input(20, 6, 2);
        for training in [false, true] {
            assert_eq!(m.apply(&store, &x, training).unwrap(), x, "{a}");
        }
    }
}

#[test]
fn rep_with_long_context_matches_dir() {
    let t = 24;
    let (store, dir, rep) = pair(
        &ConvModuleSpec::dir(6, s4(), Context::Online),
        &ConvModuleSpec::rep(6, t, s4(), Context::Online),
        4,
    );
    let x = input(t, 6, 5);
    let a = dir.apply(&store, &x, false).unwrap();
    let b = rep.apply(&store, &x, false).unwrap();
    assert!(max_relative_error(b.data(), a.data()) < 1e-8);
    let (store, dir, rep) = pair(
        &ConvModuleSpec::dir(6, s4(), Context::Online),
        &ConvModuleSpec::rep(6, 3 * t, s4(), Context::Online),
        4,
    );
    let a = dir.apply(&store, &x, false).unwrap();
    let b = rep.apply(&store, &x, false).unwrap();
    assert!(max_relative_error(b.data(), a.data()) < 1e-8);
}

#[test]
fn com_with_delta_kernel_matches_dir_exactly() {
    let (mut store, dir, com) = pair(
        &ConvModuleSpec::dir(5, s4(), Context::Online),
        &ConvModuleSpec::com(5, 3, s4(), Context::Online),
        6,
    );
    let kid = com.kernel.unwrap();
    let mut delta = vec![0.0; 15];
    for h in 0..5 {
        delta[h * 3] = 1.0;
    }
    store
        .set(kid, Tensor::matrix(5, 3, delta).unwrap())
        .unwrap();
    let x = input(30, 5, 7);
    assert_eq!(
        dir.apply(&store, &x, false).unwrap(),
        com.apply(&store, &x, false).unwrap()
    );
}

#[test]
fn baseline_with_copied_kernel_matches_rep_exactly() {
    let l = 7;
    let (mut store, rep, base) = pair(
        &ConvModuleSpec::rep(5, l, s4(), Context::Online),
        &ConvModuleSpec::baseline(5, l, Context::Online),
        8,
    );
    let p = rep.s4.as_ref().unwrap().params(&store);
    let mut k = materialize_kernel(&p, l).unwrap();
    for h in 0..5 {
        k.data_mut()[h * l] += p.d[h] * 1.0;
    }
    store.set(base.kernel.unwrap(), k).unwrap();
    let x = input(25, 5, 9);
    assert_eq!(
        rep.apply(&store, &x, false).unwrap(),
        base.apply(&store, &x, false).unwrap()
    );
}

#[test]
fn online_modules_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for a in Approach::ALL {
        let (store, m) = single(&module_spec(a, 4, Context::Online), 11);
        let x = input(40, 4, 12);
        let y = m.apply(&store, &x, false).unwrap();
        for _ in 0..10 {
            let t0 = rng.random_range(0..40);
            let mut v = x.clone().into_tensor();
            for i in t0 * 4..v.len() {
                v.data_mut()[i] += rng.random_range(-1.0..1.0);
            }
            let y2 = m
                .apply(&store, &TimeSeries::try_from(v).unwrap(), false)
                .unwrap();
            assert_eq!(&y.data()[..t0 * 4], &y2.data()[..t0 * 4], "{a} t0={t0}");
        }
    }
}

#[test]
fn eval_is_independent_of_batch_composition() {
    for a in Approach::ALL {
        let (store, m) = single(&module_spec(a, 4, Context::Online), 13);
        let (x1, x2) = (input(16, 4, 1), input(16, 4, 2));
        let alone = m.apply(&store, &x1, false).unwrap();
        let mut f = Forward::eval(&store, 16);
        let mut both = x1.data().to_vec();
        both.extend_from_slice(x2.data());
        let xv = f.input(Tensor::matrix(32, 4, both).unwrap());
        let y = m.forward(&mut f, xv, None).unwrap();
        assert_eq!(&f.tape.value(y).data()[..64], alone.data(), "{a}");
    }
}

#[test]
fn training_mode_reports_running_stat_updates() {
    let (mut store, m) = single(&module_spec(Approach::Dir, 3, Context::Online), 2);
    let x = input(10, 3, 3);
    let mut f = Forward::train(&store, 10);
    let xv = f.input(x.as_tensor().clone());
    m.forward(&mut f, xv, None).unwrap();
    let updates = f.bn_updates.clone();
    assert_eq!(updates.len(), 1);
    drop(f);
    let before = store.get(m.batch_norm.running_mean).clone();
    apply_bn_updates(&mut store, &updates);
    let after = store.get(m.batch_norm.running_mean);
    for ((b, a), bm) in before
        .data()
        .iter()
        .zip(after.data())
        .zip(&updates[0].batch_mean)
    {
        assert!((a - (0.99 * b + 0.01 * bm)).abs() < 1e-15);
    }
    // Eval forwards never touch the running statistics.
    let v = store.version();
    m.apply(&store, &x, false).unwrap();
    assert_eq!(store.version(), v);
}

#[test]
fn empty_training_batch_is_rejected() {
    let (store, m) = single(&module_spec(Approach::Baseline, 3, Context::Online), 2);
    let mut f = Forward::train(&store, 1);
    let xv = f.input(Tensor::zeros(vec![0, 3]));
    assert!(m.forward(&mut f, xv, None).is_err());
}

#[test]
fn encoder_with_zero_projections_is_near_identity() {
    let spec = EncoderSpec::uniform(ConvModuleSpec::baseline(8, 4, Context::Online), 1, false);
    let mut enc = build_encoder(&spec, 0).unwrap();
    enc.zero_residual_projections();
    // Rows already normalised, so the final layer norm only rescales by
    // 1/sqrt(1 + eps).
    let x = input(12, 8, 4).into_tensor();
    let mut data = Vec::new();
    for r in 0..12 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        data.extend(row.iter().map(|v| (v - mean) / sd));
    }
    let x = TimeSeries::new(12, 8, data).unwrap();
    let y = enc.eval(&x).unwrap();
    let err = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn encoder_rejects_inconsistent_widths() {
    let mut spec = EncoderSpec::uniform(ConvModuleSpec::dir(8, s4(), Context::Online), 2, false);
    spec.blocks[1].h = 6;
    assert!(build_encoder(&spec, 0).is_err());
    spec.blocks.clear();
    assert!(build_encoder(&spec, 0).is_err());
}

#[test]
fn encoder_parameter_count_matches_enumeration() {
    let (h, n) = (64, 4);
    let spec = EncoderSpec::uniform(
        ConvModuleSpec::dir(h, S4DConfig::new(S4DScheme::Real, n), Context::Online),
        2,
        false,
    );
    let enc = build_encoder(&spec, 0).unwrap();
    let ff = 2 * h + (h * 4 * h + 4 * h) + (4 * h * h + h);
    let s4 = n + 2 * h * n + h + h;
    let module = 2 * h + (h * 2 * h + 2 * h) + s4 + 2 * h + (h * h + h);
    let block = ff + module + 2 * h;
    assert_eq!(enc.store().trainable_scalars(), 2 * block);
}

#[test]
fn online_encoder_is_causal_for_every_variant() {
    for a in Approach::ALL {
        for attention in [false, true] {
            let spec = EncoderSpec::uniform(module_spec(a, 8, Context::Online), 2, attention);
            let enc = build_encoder(&spec, 3).unwrap();
            let x = input(32, 8, 1);
            let y = enc.eval(&x).unwrap();
            let mut v = x.clone().into_tensor();
            v.data_mut()[20 * 8 + 3] += 0.5;
            let y2 = enc.eval(&TimeSeries::try_from(v).unwrap()).unwrap();
            assert_eq!(&y.data()[..20 * 8], &y2.data()[..20 * 8], "{a}");
        }
    }
}

#[test]
fn offline_encoder_is_not_causal() {
    let spec = EncoderSpec::uniform(
        module_spec(Approach::Baseline, 8, Context::Offline),
        2,
        false,
    );
    let enc = build_encoder(&spec, 3).unwrap();
    let x = input(32, 8, 1);
    let y = enc.eval(&x).unwrap();
    let mut v = x.clone().into_tensor();
    v.data_mut()[20 * 8] += 0.5;
    let y2 = enc.eval(&TimeSeries::try_from(v).unwrap()).unwrap();
    assert_ne!(&y.data()[..20 * 8], &y2.data()[..20 * 8]);
}

#[test]
fn s4_conv_evaluation_matches_scan() {
    for a in [Approach::Dir, Approach::Com] {
        let spec = EncoderSpec::uniform(module_spec(a, 8, Context::Online), 2, false);
        let enc = build_encoder(&spec, 1).unwrap();
        let x = input(50, 8, 2);
        let scan = enc.eval_with(&x, S4Eval::Scan).unwrap();
        let conv = enc.eval_with(&x, S4Eval::Conv).unwrap();
        assert!(max_relative_error(conv.data(), scan.data()) < 1e-8);
    }
}
