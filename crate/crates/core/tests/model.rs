use advectant::model::{
    boundary_penalty, diffusion_penalty, gather_penalty, loss, smoothed_cross_entropy, ModelConfig, Network, Targets,
};
use advectant::tensor::nn::{Ctx, ForwardMode};
use advectant::tensor::{Tape, Tensor};
use advectant::transfer::ParticleLayout;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn centers(x: &[[f64; 3]], labels: &[usize], k: usize) -> Vec<Option<[f64; 3]>> {
    (0..k)
        .map(|l| {
            let pts: Vec<_> = x.iter().zip(labels).filter(|(_, &m)| m == l).map(|(p, _)| *p).collect();
            (!pts.is_empty()).then(|| [0, 1, 2].map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / pts.len() as f64))
        })
        .collect()
}

fn oracle_gather(x: &[[f64; 3]], labels: &[usize], k: usize) -> f64 {
    let c = centers(x, labels, k);
    let mut s = 0.0;
    for l in 0..k {
        for m in 0..k {
            if let (true, Some(a), Some(b)) = (l != m, c[l], c[m]) {
                s += (1.0 - norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])).max(0.0);
            }
        }
    }
    0.5 * s
}

fn oracle_diffusion(x: &[[f64; 3]], labels: &[usize], k: usize) -> f64 {
    let c = centers(x, labels, k);
    let mut s = 0.0;
    for (p, &l) in x.iter().zip(labels) {
        let cl = c[l].unwrap();
        s += norm([cl[0] - p[0], cl[1] - p[1], cl[2] - p[2]]);
    }
    s / x.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalties_match_loop_oracles(seed in 0u64..100_000, p in 2usize..30, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_positions(&mut rng, p, 1.4);
        let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..k)).collect();
        let layout = ParticleLayout::single(p);
        let mut tape = Tape::new();
        let xv = tape.constant(to_tensor(&x));
        let b = boundary_penalty(&mut tape, xv).unwrap();
        let g = gather_penalty(&mut tape, xv, &labels, layout, k).unwrap();
        let d = diffusion_penalty(&mut tape, xv, &labels, layout, k).unwrap();
        let ob: f64 = x.iter().map(|&q| (norm(q) - 1.0).max(0.0)).sum::<f64>() / p as f64;
        prop_assert!((tape.value(b).item() - ob).abs() < 1e-12);
        prop_assert!((tape.value(g).item() - oracle_gather(&x, &labels, k)).abs() < 1e-12);
        prop_assert!((tape.value(d).item() - oracle_diffusion(&x, &labels, k)).abs() < 1e-12);
    }

    #[test]
    fn diffusion_is_translation_invariant(seed in 0u64..100_000, shift in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_positions(&mut rng, 10, 1.0);
        let moved: Vec<[f64; 3]> = x.iter().map(|p| p.map(|v| v + shift)).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let layout = ParticleLayout::single(10);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(to_tensor(&x)), tape.constant(to_tensor(&moved)));
        let da = diffusion_penalty(&mut tape, a, &labels, layout, 3).unwrap();
        let db = diffusion_penalty(&mut tape, b, &labels, layout, 3).unwrap();
        prop_assert!((tape.value(da).item() - tape.value(db).item()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_cross_entropy_matches_loop(seed in 0u64..100_000, rows in 1usize..5, classes in 2usize..6, conf in 0.1f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_tensor(&mut rng, &[rows, classes]).map(|v| 3.0 * v);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let l = smoothed_cross_entropy(&mut tape, zv, &targets, conf).unwrap();
        let mut expect = 0.0;
        for r in 0..rows {
            let row = &z.data()[r * classes..(r + 1) * classes];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            for (c, &v) in row.iter().enumerate() {
                let t = if c == targets[r] { conf } else { (1.0 - conf) / (classes - 1) as f64 };
                expect -= t * (v - lse);
            }
        }
        expect /= rows as f64;
        prop_assert!((tape.value(l).item() - expect).abs() < 1e-12);
        prop_assert!(tape.value(l).item() >= 0.0);
    }
}

#[test]
fn boundary_gradient_points_inward_with_magnitude_one_over_n() {
    let x = vec![[1.2, 0.9, -0.3], [0.1, 0.1, 0.1], [0.0, 0.2, 0.0]];
    let mut tape = Tape::new();
    let xv = tape.leaf(to_tensor(&x), true);
    let b = boundary_penalty(&mut tape, xv).unwrap();
    tape.backward(b).unwrap();
    let g = tape.grad(xv).unwrap().data().to_vec();
    let n = norm(x[0]);
    for a in 0..3 {
        assert!((g[a] - x[0][a] / n / 3.0).abs() < 1e-12);
    }
    assert!((norm([g[0], g[1], g[2]]) - 1.0 / 3.0).abs() < 1e-12);
    // descent direction -g points toward the origin
    assert!(g[0] * x[0][0] + g[1] * x[0][1] + g[2] * x[0][2] > 0.0);
    assert!(g[3..].iter().all(|&v| v == 0.0));
}

fn small_config(task_seg: bool) -> ModelConfig {
    let mut c = if task_seg {
        ModelConfig::segmentation(3)
    } else {
        ModelConfig::classification(4)
    };
    c.grid = 4;
    c.global_width = 32;
    c.head_widths = vec![16, 8];
    c
}

fn cloud(seed: u64, p: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_positions(&mut rng, p, 0.9)
}

#[test]
fn classifier_is_permutation_invariant_bitwise() {
    let net = Network::<f64>::new(small_config(false), 1).unwrap();
    let x = cloud(3, 20);
    let mut perm: Vec<usize> = (0..20).collect();
    perm.reverse();
    perm.swap(2, 11);
    let xp: Vec<[f64; 3]> = perm.iter().map(|&i| x[i]).collect();
    let a = net.predict(&to_tensor(&x)).unwrap();
    let b = net.predict(&to_tensor(&xp)).unwrap();
    assert_eq!(a.shape(), &[4]);
    assert!(a.is_finite());
    assert_eq!(a, b);
}

#[test]
fn classifier_ignores_duplicated_points() {
    let net = Network::<f64>::new(small_config(false), 2).unwrap();
    let x = cloud(4, 16);
    let doubled: Vec<[f64; 3]> = x.iter().chain(x.iter()).copied().collect();
    let a = net.predict(&to_tensor(&x)).unwrap();
    let b = net.predict(&to_tensor(&doubled)).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-9, "{u} vs {v}");
    }
}

#[test]
fn segmenter_is_permutation_equivariant_and_consistent_on_twins() {
    let net = Network::<f64>::new(small_config(true), 5).unwrap();
    let mut x = cloud(6, 18);
    x[7] = x[2];
    let perm: Vec<usize> = (0..18).map(|i| (i * 5) % 18).collect();
    let xp: Vec<[f64; 3]> = perm.iter().map(|&i| x[i]).collect();
    let a = net.predict(&to_tensor(&x)).unwrap();
    let b = net.predict(&to_tensor(&xp)).unwrap();
    assert_eq!(a.shape(), &[18, 3]);
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(&a.data()[i * 3..i * 3 + 3], &b.data()[k * 3..k * 3 + 3]);
    }
    assert_eq!(&a.data()[6..9], &a.data()[21..24]);
}

#[test]
fn empty_cloud_is_an_input_error() {
    let net = Network::<f64>::new(small_config(false), 0).unwrap();
    let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
    let r = net.forward(&mut ctx, &Tensor::zeros(&[1, 3]), ParticleLayout::single(0), None);
    assert!(matches!(r, Err(advectant::Error::Input(_))));
}

#[test]
fn loss_decomposes_by_weights() {
    let mut cfg = small_config(true);
    let x = to_tensor(&cloud(7, 12));
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let layout = ParticleLayout::single(12);
    let eval_loss = |cfg: &ModelConfig| {
        let net = Network::<f64>::new(cfg.clone(), 9).unwrap();
        let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
        let fwd = net.forward(&mut ctx, &x, layout, None).unwrap();
        let parts = loss(&mut ctx.tape, &fwd, Targets::Parts(&labels), cfg).unwrap();
        (ctx.tape.value(parts.total).item(), parts.cross_entropy, parts.boundary, parts.gather, parts.diffusion)
    };
    let (total, ce, b, g, d) = eval_loss(&cfg);
    assert!((total - (ce + b + 0.01 * g + 0.01 * d)).abs() < 1e-12);
    assert!(total >= 0.0);
    cfg.lambda_boundary = 0.0;
    cfg.lambda_gather = 0.0;
    cfg.lambda_diffusion = 0.0;
    let (total, ce, ..) = eval_loss(&cfg);
    assert_eq!(total, ce);
    assert!(matches!(
        {
            let net = Network::<f64>::new(cfg.clone(), 9).unwrap();
            let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
            let fwd = net.forward(&mut ctx, &x, layout, None).unwrap();
            loss(&mut ctx.tape, &fwd, Targets::Classes(&[0]), &cfg).map(|_| ())
        },
        Err(advectant::Error::Contract(_))
    ));
}

#[test]
fn trajectory_has_one_frame_per_step_plus_input() {
    use advectant::advect::Trajectory;
    let net = Network::<f64>::new(small_config(false), 3).unwrap();
    let x = to_tensor(&cloud(8, 10));
    let mut traj = Trajectory::default();
    let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
    net.forward(&mut ctx, &x, ParticleLayout::single(10), Some(&mut traj)).unwrap();
    assert_eq!(traj.frames.len(), 3);
    assert_eq!(traj.frames[0].1, x);
    assert!(traj.frames[0].2.data().iter().all(|&v| v == 0.0));
}
