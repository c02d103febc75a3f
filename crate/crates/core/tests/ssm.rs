mod common;

use common::{probe, random_block, t, weighted_sum};
use lfsamba::init::{randn, rng, uniform};
use lfsamba::params::{Module, ModuleExt};
use lfsamba::ssm::{
    discretize, project_params, scan_core, selective_scan, selective_scan_sequential,
    selective_scan_trace, selective_scan_with_c, SsmBlockParams,
};
use lfsamba::tensor::{gradcheck_many, gradcheck_with, GradcheckOptions};
use lfsamba::Tensor64 as T;
use proptest::prelude::*;

/// d = 1, N = 1, A = −1, B = C = 1, D = 0, Δ ≡ ln 2.
fn scalar_block() -> SsmBlockParams<f64> {
    SsmBlockParams {
        a_log: t(&[1, 1], &[0.0]),
        w_b: t(&[1, 1], &[1.0]),
        w_c: t(&[1, 1], &[1.0]),
        w_dt_down: t(&[1, 1], &[0.0]),
        w_dt_up: t(&[1, 1], &[0.0]),
        dt_bias: t(&[1], &[0.0]),
        d_skip: t(&[1], &[0.0]),
    }
}

#[test]
fn init_ranges() {
    let p = SsmBlockParams::<f64>::init(32, 8, &mut rng(3));
    assert_eq!(p.w_dt_down.shape(), &[2, 32]);
    assert!(p.a().data().iter().all(|&a| a < 0.0));
    for (k, &a) in p.a().data()[..8].iter().enumerate() {
        assert!((a + (k + 1) as f64).abs() < 1e-12);
    }
    for &b in p.dt_bias.data() {
        let dt = lfsamba::scalar::softplus(b);
        assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
    }
    assert!(p.d_skip.data().iter().all(|&v| v == 1.0));
    assert_eq!(p.param_count(), 32 * 8 * 3 + 2 * 32 * 2 + 32 * 2);
}

#[test]
fn projection_examples() {
    let mut r = rng(5);
    let p = random_block(4, 8, &mut r);
    let pr = project_params(&T::zeros(vec![5, 4]), &p).unwrap();
    assert_eq!(pr.delta.shape(), &[5, 4]);
    assert_eq!(pr.b.shape(), &[5, 8]);
    assert_eq!(pr.c.shape(), &[5, 8]);
    assert!(pr.b.data().iter().chain(pr.c.data()).all(|&v| v == 0.0));
    for (i, &dl) in pr.delta.data().iter().enumerate() {
        assert_eq!(dl, lfsamba::scalar::softplus(p.dt_bias.data()[i % 4]));
        assert!(dl > 0.0);
    }

    let mut q = p.clone();
    q.dt_bias = T::zeros(vec![4]);
    let pr = project_params(&T::zeros(vec![3, 4]), &q).unwrap();
    assert!(pr.delta.data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
}

#[test]
fn discretize_examples() {
    let ln2 = 2f64.ln();
    let (abar, bbar) = discretize(&t(&[1, 1], &[ln2]), &t(&[1, 1], &[-1.0]), &t(&[1, 1], &[1.0])).unwrap();
    assert!((abar.item() - 0.5).abs() < 1e-15);
    assert!((bbar.item() - 0.6931).abs() < 1e-4);

    let (abar, bbar) = discretize(&t(&[1, 2], &[1e-12, 0.3]), &t(&[2, 2], &[-3., -1., 0., 0.]), &t(&[1, 2], &[2., 5.])).unwrap();
    assert_eq!(abar.shape(), &[1, 2, 2]);
    assert!((abar.data()[0] - 1.0).abs() < 1e-10 && (abar.data()[1] - 1.0).abs() < 1e-10);
    assert!(bbar.data()[0].abs() < 1e-10);
    // zero row of A
    assert_eq!(&abar.data()[2..], &[1.0, 1.0]);
}

#[test]
fn hand_unrolled_recurrence() {
    let p = scalar_block();
    let u = t(&[2, 1], &[1.0, 1.0]);
    let y = selective_scan_sequential(&u, &p).unwrap();
    let h1 = 2f64.ln();
    let h2 = 0.5 * h1 + 2f64.ln();
    assert!((y.data()[0] - 0.6931).abs() < 1e-4 && (y.data()[1] - 1.0397).abs() < 1e-4);
    assert!((y.data()[0] - h1).abs() < 1e-15 && (y.data()[1] - h2).abs() < 1e-15);
    assert!(selective_scan(&u, &p).unwrap().bitwise_eq(&y));
}

#[test]
fn zero_input_and_single_step() {
    let mut r = rng(9);
    let p = random_block(3, 4, &mut r);
    let zero = T::zeros(vec![7, 3]);
    assert!(selective_scan_sequential(&zero, &p).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(selective_scan(&zero, &p).unwrap().data().iter().all(|&v| v == 0.0));

    let u: T = randn(vec![1, 3], 1.0, &mut r);
    let pr = project_params(&u, &p).unwrap();
    let y = selective_scan_sequential(&u, &p).unwrap();
    for i in 0..3 {
        let ui = u.data()[i];
        let dl = pr.delta.data()[i];
        let expect: f64 = (0..4).map(|k| pr.c.data()[k] * dl * pr.b.data()[k] * ui).sum::<f64>()
            + p.d_skip.data()[i] * ui;
        assert!((y.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn input_width_is_checked() {
    let p = random_block(3, 2, &mut rng(1));
    assert!(selective_scan(&T::zeros(vec![4, 2]), &p).is_err());
    assert!(selective_scan_sequential(&T::zeros(vec![4]), &p).is_err());
}

#[test]
fn gradcheck_all_parameters_and_input() {
    let (tl, d, n) = (6, 2, 3);
    let mut r = rng(21);
    let p = random_block(d, n, &mut r);
    let u: T = uniform(vec![tl, d], -1.0, 1.0, &mut r);
    let w = probe(&[tl, d], 77);
    let mut xs = vec![u];
    let mut names = Vec::new();
    let mut pc = p.clone();
    pc.visit("", &mut |name, x| {
        names.push(name.to_string());
        xs.push(x.clone());
        Ok(())
    })
    .unwrap();
    let rebuild = |xs: &[T]| {
        let mut q = p.clone();
        let mut i = 1;
        q.visit("", &mut |_, x| {
            *x = xs[i].clone();
            i += 1;
            Ok(())
        })
        .unwrap();
        q
    };
    let rep = gradcheck_many(|xs| weighted_sum(&selective_scan(&xs[0], &rebuild(xs))?, &w), &xs, 1e-4).unwrap();
    assert!(rep.pass, "{names:?} {rep:?}");

    let c: T = randn(vec![tl, n], 1.0, &mut r);
    let mut xs2 = xs.clone();
    xs2.push(c);
    let last = xs2.len() - 1;
    let rep = gradcheck_with(
        |xs| weighted_sum(&selective_scan_with_c(&xs[0], &rebuild(xs), &xs[last])?, &w),
        &xs2,
        &GradcheckOptions { tol: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn scan_core_gradcheck_direct() {
    let (tl, d, n) = (5, 3, 2);
    let mut r = rng(4);
    let xs: Vec<T> = vec![
        uniform(vec![tl, d], -1.0, 1.0, &mut r),
        uniform(vec![tl, d], 0.05, 1.5, &mut r),
        uniform(vec![d, n], -2.0, -0.1, &mut r),
        randn(vec![tl, n], 1.0, &mut r),
        randn(vec![tl, n], 1.0, &mut r),
        randn(vec![d], 1.0, &mut r),
    ];
    let w = probe(&[tl, d], 8);
    let rep = gradcheck_many(|x| weighted_sum(&scan_core(&x[0], &x[1], &x[2], &x[3], &x[4], &x[5])?, &w), &xs, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert_eq!(rep.checked, tl * d * 2 + d * n + tl * n * 2 + d);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fused_scan_matches_sequential_oracle(seed in any::<u64>(), tl in 1usize..=64, d in 1usize..=8, n in 1usize..=8) {
        let mut r = rng(seed);
        let p = random_block(d, n, &mut r);
        let u: T = randn(vec![tl, d], 1.0, &mut r);
        let fast = selective_scan(&u, &p).unwrap();
        let slow = selective_scan_sequential(&u, &p).unwrap();
        prop_assert!(common::max_rel_diff(&fast, &slow) <= 1e-6);
    }

    #[test]
    fn state_stays_bounded(seed in any::<u64>(), tl in 1usize..=48, d in 1usize..=6, n in 1usize..=8) {
        let mut r = rng(seed);
        let p = random_block(d, n, &mut r);
        let u: T = uniform(vec![tl, d], -1.0, 1.0, &mut r);
        let tr = selective_scan_trace(&u, &p).unwrap();
        prop_assert!(tr.y.is_finite());
        let bound = n as f64 * tr.bbar.max_abs() * tl as f64;
        for &h in tr.last_state.data() {
            prop_assert!(h.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn output_is_causal(seed in any::<u64>(), tl in 2usize..=24, d in 1usize..=4, n in 1usize..=4, cut in 0usize..24) {
        let cut = cut % (tl - 1);
        let mut r = rng(seed);
        let p = random_block(d, n, &mut r);
        let u: T = randn(vec![tl, d], 1.0, &mut r);
        let mut v = u.to_vec();
        for x in &mut v[(cut + 1) * d..] {
            *x += 3.0;
        }
        let u2 = T::new(vec![tl, d], v).unwrap();
        let (y1, y2) = (selective_scan(&u, &p).unwrap(), selective_scan(&u2, &p).unwrap());
        prop_assert_eq!(&y1.data()[..(cut + 1) * d], &y2.data()[..(cut + 1) * d]);
        prop_assert_ne!(&y1.data()[(cut + 1) * d..], &y2.data()[(cut + 1) * d..]);
    }
}
