use advectant::tensor::{ParamStore, Tape, Tensor, Var};
use advectant::Error;
use proptest::prelude::*;

/// Builds a scalar loss from the given leaves.
type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> advectant::Result<Var> + 'a;

fn eval(build: &Build<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item()
}

/// Largest error between analytic and central-difference gradients,
/// relative to `max(|analytic|, |numeric|, 1e-3)`.
fn gradcheck(build: &Build<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Contracts `y` with a fixed weight tensor so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> advectant::Result<Var> {
    let n = tape.value(y).numel();
    let w: Vec<f64> = (0..n)
        .map(|i| (((i as u64 + 1) * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Pushes entries away from zero so kinked ops stay differentiable under
/// finite differences.
fn away_from_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - v.abs() } else { 0.05 + *v };
        }
    }
    t
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_gradients(seed in 0u64..10_000, rows in 1usize..5, cin in 1usize..5, cout in 1usize..5) {
        let inputs = vec![tensor(&[rows, cin], seed), tensor(&[cout, cin], seed + 1), tensor(&[cout], seed + 2)];
        let err = gradcheck(&|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; weighted_sum(t, y, seed) }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn conv3d_gradients(seed in 0u64..10_000, k in prop::sample::select(vec![1usize, 3]), cin in 1usize..3, cout in 1usize..3) {
        let inputs = vec![
            tensor(&[2, cin, 3, 4, 2], seed),
            tensor(&[cout, cin, k, k, k], seed + 1),
            tensor(&[cout], seed + 2),
        ];
        let err = gradcheck(&|t, v| { let y = t.conv3d(v[0], v[1], v[2])?; weighted_sum(t, y, seed) }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn batch_norm_training_gradients(seed in 0u64..10_000, n in 2usize..5, c in 1usize..4) {
        let inputs = vec![tensor(&[n, c, 3], seed), tensor(&[c], seed + 1), tensor(&[c], seed + 2)];
        let err = gradcheck(&|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            weighted_sum(t, y, seed)
        }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn batch_norm_eval_gradients(seed in 0u64..10_000, c in 1usize..4) {
        let inputs = vec![tensor(&[3, c], seed), tensor(&[c], seed + 1), tensor(&[c], seed + 2)];
        let rm: Vec<f64> = (0..c).map(|i| i as f64 * 0.1).collect();
        let rv: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        let err = gradcheck(&|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
            weighted_sum(t, y, seed)
        }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn elementwise_gradients(seed in 0u64..10_000, n in 1usize..8) {
        let inputs = vec![away_from_zero(tensor(&[n, 2], seed)), tensor(&[n, 2], seed + 1)];
        let err = gradcheck(&|t, v| {
            let r = t.relu(v[0])?;
            let m = t.mul(r, v[1])?;
            let s = t.sub(m, v[0])?;
            let a = t.add(s, v[1])?;
            let c = t.scale(a, 1.7)?;
            let d = t.add_scalar(c, -0.3)?;
            weighted_sum(t, d, seed)
        }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn shape_op_gradients(seed in 0u64..10_000, a in 1usize..4, b in 1usize..4) {
        let inputs = vec![tensor(&[2, a, 3], seed), tensor(&[2, b, 3], seed + 1)];
        let err = gradcheck(&|t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let r = t.reshape(c, &[2 * (a + b), 3])?;
            let g = t.gather_rows(r, &[0, 1, 1, 0, 2 * (a + b) - 1])?;
            let s = t.reduce_sum(g, 1)?;
            let m = t.reduce_mean(c, 2)?;
            let s1 = weighted_sum(t, s, seed)?;
            let s2 = weighted_sum(t, m, seed + 7)?;
            t.add(s1, s2)
        }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn reduce_max_gradients(seed in 0u64..10_000, n in 1usize..6) {
        // distinct values keep the argmax stable under perturbation
        let mut x = tensor(&[2, n, 3], seed);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += i as f64 * 0.01;
        }
        let err = gradcheck(&|t, v| { let y = t.reduce_max(v[0], 1)?; weighted_sum(t, y, seed) }, &[x]);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn log_softmax_gradients(seed in 0u64..10_000, rows in 1usize..4, cols in 1usize..6) {
        let inputs = vec![tensor(&[rows, cols], seed).map(|v| v * 4.0)];
        let err = gradcheck(&|t, v| { let y = t.log_softmax(v[0])?; weighted_sum(t, y, seed) }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn norm_and_segment_gradients(seed in 0u64..10_000, n in 2usize..8) {
        let inputs = vec![away_from_zero(tensor(&[n, 3], seed))];
        let segment: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let err = gradcheck(&|t, v| {
            let c = t.segment_mean(v[0], &segment, 4)?;
            let back = t.gather_rows(c, &segment)?;
            let d = t.sub(back, v[0])?;
            let d = t.add_scalar(d, 0.3)?;
            let r = t.row_norm(d)?;
            let q = t.row_norm(v[0])?;
            let s1 = weighted_sum(t, r, seed)?;
            let s2 = t.mean(q)?;
            t.add(s1, s2)
        }, &inputs);
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..10_000, scale in -3.0f64..3.0) {
        let x = tensor(&[3, 2], seed);
        let grad_of = |c: f64| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let y = tape.relu(v).unwrap();
            let s = weighted_sum(&mut tape, y, seed).unwrap();
            let l = tape.scale(s, c).unwrap();
            tape.backward(l).unwrap();
            tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&[3, 2]))
        };
        let g1 = grad_of(1.0);
        let gs = grad_of(scale);
        for (a, b) in g1.data().iter().zip(gs.data()) {
            prop_assert!((a * scale - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv3d_identity_and_zero_kernels() {
    let x = tensor(&[1, 2, 3, 3, 3], 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3, 3]);
    for c in 0..2 {
        let idx = ((((c * 2 + c) * 3 + 1) * 3) + 1) * 3 + 1;
        w.data_mut()[idx] = 1.0;
    }
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv3d(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y), &x);

    let wz = tape.constant(Tensor::zeros(&[2, 2, 3, 3, 3]));
    let b = tape.constant(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
    let z = tape.conv3d(xv, wz, b).unwrap();
    for (i, &v) in tape.value(z).data().iter().enumerate() {
        assert_eq!(v, if i < 27 { 0.5 } else { -1.0 });
    }
}

#[test]
fn batch_norm_training_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (y, stats) = tape.batch_norm(x, g, b, None, 1e-5).unwrap();
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 2.5).abs() < 1e-12);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
    let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
    for (v, e) in tape.value(y).data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-4, "{v} vs {e}");
    }
}

#[test]
fn batch_norm_needs_two_values_in_training() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.batch_norm(x, g, b, None, 1e-5), Err(Error::Statistics(_))));
    let (rm, rv) = ([0.0, 0.0], [1.0, 1.0]);
    assert!(tape.batch_norm(x, g, b, Some((&rm, &rv)), 1e-5).is_ok());
}

#[test]
fn reduce_max_tie_sends_gradient_to_first() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[2.0, 5.0, 5.0]).unwrap(), true);
    let m = tape.reduce_max(x, 0).unwrap();
    assert_eq!(tape.value(m).item(), 5.0);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_examples_and_accumulation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, -2.0]);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[12.0, -4.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_non_finite() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let big = tape.scale(x, f64::MAX / 4.0).unwrap();
    assert!(matches!(tape.scale(big, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    let c = tape.constant(Tensor::from_f64(&[2], &[4.0, 5.0]).unwrap());
    let p = tape.mul(x, c).unwrap();
    let l = tape.sum(p).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 5.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn dimension_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    assert!(matches!(tape.linear(a, b, None), Err(Error::Dimension(_))));
    assert!(matches!(tape.concat(&[a, b], 0), Err(Error::Dimension(_))));
    assert!(matches!(tape.gather_rows(a, &[5]), Err(Error::Dimension(_))));
    assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn param_store_roundtrip_through_cast() {
    let mut s = ParamStore::<f32>::new();
    s.add("w", advectant::tensor::ParamKind::Weight, Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
    let d: ParamStore<f64> = s.cast();
    let back: ParamStore<f32> = d.cast();
    assert_eq!(back.entries()[0].value, s.entries()[0].value);
}
