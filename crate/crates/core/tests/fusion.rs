mod common;

use common::{max_rel_diff, probe, random_block, weighted_sum};
use lfsamba::init::{randn, rng};
use lfsamba::inter_modal::{
    cross_ss2d, cross_ss2d_with, fuse_basic, inter_modal_fuse, inter_modal_trace, middle_stream,
    InterModalParams,
};
use lfsamba::inter_slice::{
    concat_slice_fuse, inter_slice_fuse, slice_stem, ConcatFusionParams, InterSliceParams,
};
use lfsamba::layers::{Conv, Linear};
use lfsamba::scan::{
    fold, slice_token_grid, split_slice_token_grid, ss2d_with, unfold, DirectionalScanParams,
    ScanDirection,
};
use lfsamba::ssm::{discretize, project_params, selective_scan_sequential, SsmBlockParams};
use lfsamba::tensor::{gradcheck, gradcheck_many};
use lfsamba::{Error, Tensor64 as T};

fn slice_params(d: usize, n: usize, seed: u64) -> InterSliceParams<f64> {
    let mut r = rng(seed);
    let mut p = InterSliceParams::init(d, n, &mut r);
    p.scan = DirectionalScanParams { blocks: std::array::from_fn(|_| random_block(d, n, &mut r)) };
    p.out.b = randn(vec![d], 0.5, &mut r);
    p.norm.beta = randn(vec![d], 0.5, &mut r);
    p
}

fn modal_params(d: usize, n: usize, seed: u64) -> InterModalParams<f64> {
    let mut r = rng(seed);
    let mut p = InterModalParams::init(d, n, &mut r);
    for dirs in [&mut p.middle.scan, &mut p.all.stage1, &mut p.all.stage2, &mut p.slices.stage1, &mut p.slices.stage2] {
        *dirs = DirectionalScanParams { blocks: std::array::from_fn(|_| random_block(d, n, &mut r)) };
    }
    p
}

fn maps(k: usize, d: usize, h: usize, w: usize, seed: u64) -> Vec<T> {
    let mut r = rng(seed);
    (0..k).map(|_| randn(vec![d, h, w], 1.0, &mut r)).collect()
}

/// Per-pixel channel mixing by explicit loops.
fn mix_channels(x: &T, lin: &Linear<f64>) -> T {
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dout = lin.w.shape()[0];
    let mut out = vec![0.0; dout * h * w];
    for o in 0..dout {
        for px in 0..h * w {
            let mut acc = lin.b.data()[o];
            for i in 0..d {
                acc += lin.w.data()[o * d + i] * x.data()[i * h * w + px];
            }
            out[o * h * w + px] = acc;
        }
    }
    T::new(vec![dout, h, w], out).unwrap()
}

/// Direct zero-padded cross-correlation.
fn conv_oracle(x: &T, conv: &Conv<f64>) -> T {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (cout, k) = (conv.w.shape()[0], conv.w.shape()[2]);
    let per = conv.w.shape()[1];
    let pad = (k / 2) as isize;
    T::from_fn(vec![cout, h, w], |i| {
        let (co, y, xx) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = conv.b.data()[co];
        for ci in 0..per {
            let src = if conv.depthwise { co } else { ci };
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    acc += conv.w.data()[((co * per + ci) * k + ky) * k + kx]
                        * x.data()[(src * h + iy as usize) * w + ix as usize];
                }
            }
        }
        acc
    })
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn map_values(x: &T, f: impl Fn(f64) -> f64) -> T {
    T::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

/// Per-pixel layer norm over channels, then a linear map, by loops.
fn norm_project(x: &T, gamma: &T, beta: &T, lin: &Linear<f64>) -> T {
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut normed = vec![0.0; d * h * w];
    for px in 0..h * w {
        let col: Vec<f64> = (0..d).map(|c| x.data()[c * h * w + px]).collect();
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            normed[c * h * w + px] = (col[c] - mean) / (var + 1e-5).sqrt() * gamma.data()[c] + beta.data()[c];
        }
    }
    mix_channels(&T::new(vec![d, h, w], normed).unwrap(), lin)
}

fn oracle_ss2d(x: &T, p: &DirectionalScanParams<f64>) -> T {
    ss2d_with(x, p, |seq, block, _| selective_scan_sequential(seq, block)).unwrap()
}

/// Loop recurrence with an externally supplied read-out matrix.
fn oracle_scan_with_c(u: &T, p: &SsmBlockParams<f64>, c: &T) -> T {
    let (t, d, n) = (u.shape()[0], p.channels(), p.state_size());
    let pr = project_params(u, p).unwrap();
    let (abar, bbar) = discretize(&pr.delta, &p.a(), &pr.b).unwrap();
    let mut h = vec![0.0; d * n];
    T::from_fn(vec![t, d], |idx| {
        let (ti, i) = (idx / d, idx % d);
        let mut acc = 0.0;
        for k in 0..n {
            let j = (ti * d + i) * n + k;
            h[i * n + k] = abar.data()[j] * h[i * n + k] + bbar.data()[j] * u.data()[idx];
            acc += c.data()[ti * n + k] * h[i * n + k];
        }
        acc + p.d_skip.data()[i] * u.data()[idx]
    })
}

// ---------------------------------------------------------------- slices

#[test]
fn stem_identity_and_zero() {
    let mut p = slice_params(3, 2, 1);
    p.stem.linear = Linear::identity(3);
    p.stem.dwconv = Conv::identity(3, 3, true);
    let f = maps(1, 3, 4, 4, 2).remove(0);
    let got = slice_stem(&f, &p).unwrap();
    assert!(max_rel_diff(&got, &map_values(&f, silu)) < 1e-15);

    let mut p = slice_params(3, 2, 1);
    p.stem.linear.b = T::zeros(vec![3]);
    p.stem.dwconv.b = T::zeros(vec![3]);
    assert!(slice_stem(&T::zeros(vec![3, 4, 4]), &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_gradcheck() {
    let p = slice_params(4, 2, 3);
    let x = maps(1, 4, 2, 2, 4).remove(0);
    let w = probe(&[4, 2, 2], 5);
    let rep = gradcheck(|x| weighted_sum(&slice_stem(x, &p)?, &w), &x, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
}

fn zero_gate(p: &mut InterSliceParams<f64>) {
    let d = p.gate.w.shape()[0];
    p.gate = Linear::zeros(d, d);
    p.out.b = T::zeros(vec![d]);
}

#[test]
fn zero_gate_collapses_to_mean() {
    let mut p = slice_params(3, 2, 6);
    zero_gate(&mut p);
    let f = maps(1, 3, 3, 3, 7).remove(0);
    assert!(inter_slice_fuse(&[f.clone(), f.clone()], &p).unwrap().bitwise_eq(&f));
    assert!(inter_slice_fuse(std::slice::from_ref(&f), &p).unwrap().bitwise_eq(&f));

    let fs = maps(3, 3, 3, 3, 8);
    let a = inter_slice_fuse(&fs, &p).unwrap();
    let rev: Vec<T> = fs.iter().rev().cloned().collect();
    let b = inter_slice_fuse(&rev, &p).unwrap();
    assert!(max_rel_diff(&a, &b) < 1e-14);
    let mean = fs[0].add(&fs[1]).unwrap().add(&fs[2]).unwrap().scale(1.0 / 3.0);
    assert!(max_rel_diff(&a, &mean) < 1e-14);
}

#[test]
fn slice_order_matters() {
    let p = slice_params(3, 2, 9);
    let fs = maps(3, 3, 2, 3, 10);
    let a = inter_slice_fuse(&fs, &p).unwrap();
    let b = inter_slice_fuse(&[fs[2].clone(), fs[0].clone(), fs[1].clone()], &p).unwrap();
    assert!(max_rel_diff(&a, &b) > 1e-6);
}

#[test]
fn slice_fusion_shapes_and_errors() {
    let p = slice_params(2, 2, 11);
    for k in 1..=4 {
        assert_eq!(inter_slice_fuse(&maps(k, 2, 3, 2, k as u64), &p).unwrap().shape(), &[2, 3, 2]);
    }
    assert!(matches!(inter_slice_fuse::<f64>(&[], &p).unwrap_err(), Error::Contract(_)));
    let bad = vec![T::zeros(vec![2, 3, 2]), T::zeros(vec![2, 2, 3])];
    assert!(matches!(inter_slice_fuse(&bad, &p).unwrap_err(), Error::Dimension { .. }));
}

#[test]
fn slice_fusion_matches_composition_oracle() {
    let (d, h, w) = (3, 2, 3);
    let p = slice_params(d, 2, 12);
    let fs = maps(3, d, h, w, 13);

    let stems: Vec<T> = fs
        .iter()
        .map(|f| map_values(&conv_oracle(&mix_channels(f, &p.stem.linear), &p.stem.dwconv), silu))
        .collect();
    let grid = slice_token_grid(&stems).unwrap();
    let q = split_slice_token_grid(&oracle_ss2d(&grid, &p.scan), h, w).unwrap();
    let mut acc = vec![0.0; d * h * w];
    for (f, q) in fs.iter().zip(&q) {
        let gate = map_values(&mix_channels(f, &p.gate), silu);
        let normed = norm_project(q, &p.norm.gamma, &p.norm.beta, &Linear::identity(d));
        let z = T::new(vec![d, h, w], normed.data().iter().zip(gate.data()).map(|(a, b)| a * b).collect()).unwrap();
        let r = mix_channels(&z, &p.out);
        for (i, slot) in acc.iter_mut().enumerate() {
            *slot += f.data()[i] + r.data()[i];
        }
    }
    let oracle = T::new(vec![d, h, w], acc.iter().map(|v| v / 3.0).collect()).unwrap();
    let got = inter_slice_fuse(&fs, &p).unwrap();
    assert!(max_rel_diff(&got, &oracle) < 1e-10, "{}", max_rel_diff(&got, &oracle));
}

#[test]
fn slice_fusion_gradcheck() {
    let p = slice_params(2, 2, 14);
    let fs = maps(2, 2, 2, 2, 15);
    let w = probe(&[2, 2, 2], 16);
    let rep = gradcheck_many(|x| weighted_sum(&inter_slice_fuse(x, &p)?, &w), &fs, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
    let rep = gradcheck_many(
        |x| {
            let mut q = p.clone();
            q.gate.w = x[0].clone();
            q.out.w = x[1].clone();
            q.stem.dwconv.w = x[2].clone();
            weighted_sum(&inter_slice_fuse(&fs, &q)?, &w)
        },
        &[p.gate.w.clone(), p.out.w.clone(), p.stem.dwconv.w.clone()],
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn concat_fusion_baseline() {
    let (d, k) = (3, 2);
    let p = ConcatFusionParams::init(d, k, &mut rng(17));
    let fs = maps(k, d, 2, 2, 18);
    let got = concat_slice_fuse(&fs, &p).unwrap();
    let stacked = T::concat0(&[&fs[0], &fs[1]]).unwrap();
    assert!(max_rel_diff(&got, &conv_oracle(&stacked, &p.conv)) < 1e-14);
    assert!(matches!(concat_slice_fuse(&maps(3, d, 2, 2, 1), &p).unwrap_err(), Error::Contract(_)));
}

// ----------------------------------------------------------------- modal

#[test]
fn fuse_basic_examples() {
    let mut p = modal_params(2, 2, 20);
    p.fuse.b = T::zeros(vec![2]);
    let z = T::zeros(vec![2, 3, 3]);
    assert!(fuse_basic(&z, &z, &p).unwrap().data().iter().all(|&v| v == 0.0));

    let mut q = p.clone();
    q.fuse.w = T::zeros(vec![2, 4, 3, 3]);
    q.fuse.b = T::full(vec![2], 1.5);
    let f = maps(2, 2, 3, 3, 21);
    assert!(fuse_basic(&f[0], &f[1], &q).unwrap().data().iter().all(|&v| v == 1.5));

    let p = modal_params(2, 2, 22);
    let oracle = conv_oracle(&T::concat0(&[&f[0], &f[1]]).unwrap(), &p.fuse);
    assert!(max_rel_diff(&fuse_basic(&f[0], &f[1], &p).unwrap(), &oracle) < 1e-14);
    assert!(matches!(fuse_basic(&f[0], &T::zeros(vec![2, 3, 2]), &p).unwrap_err(), Error::Dimension { .. }));
}

#[test]
fn middle_stream_examples() {
    let mut p = modal_params(3, 2, 23);
    p.middle.stem.linear.b = T::zeros(vec![3]);
    p.middle.stem.dwconv.b = T::zeros(vec![3]);
    p.middle.head.linear.b = T::zeros(vec![3]);
    assert!(middle_stream(&T::zeros(vec![3, 2, 4]), &p).unwrap().data().iter().all(|&v| v == 0.0));

    let p = modal_params(2, 2, 24);
    let x = maps(1, 2, 2, 3, 25).remove(0);
    assert_eq!(middle_stream(&x, &p).unwrap().shape(), &[2, 2, 3]);
    let w = probe(&[2, 2, 3], 26);
    let rep = gradcheck(|x| weighted_sum(&middle_stream(x, &p)?, &w), &x, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
}

fn tie_streams(p: &mut InterModalParams<f64>) {
    p.slices = p.all.clone();
}

#[test]
fn cross_scan_symmetry_and_zero() {
    let mut p = modal_params(2, 3, 27);
    tie_streams(&mut p);
    let x = maps(1, 2, 3, 2, 28).remove(0);
    let out = cross_ss2d(&x, &x, &p).unwrap();
    assert!(out.s2a.bitwise_eq(&out.a2s));

    let z = T::zeros(vec![2, 3, 2]);
    let out = cross_ss2d(&z, &z, &modal_params(2, 3, 29)).unwrap();
    assert!(out.s2a.data().iter().chain(out.a2s.data()).all(|&v| v == 0.0));
    assert!(matches!(cross_ss2d(&x, &T::zeros(vec![2, 2, 3]), &p).unwrap_err(), Error::Dimension { .. }));
}

#[test]
fn cross_scan_exchange_is_effective() {
    let p = modal_params(2, 3, 30);
    let x = maps(2, 2, 3, 3, 31);
    let on = cross_ss2d(&x[0], &x[1], &p).unwrap();
    let off = cross_ss2d_with(&x[0], &x[1], &p, false).unwrap();
    assert!(max_rel_diff(&on.s2a, &off.s2a) > 1e-6);
    assert!(max_rel_diff(&on.a2s, &off.a2s) > 1e-6);

    let zeroed = cross_ss2d(&x[0], &T::zeros(vec![2, 3, 3]), &p).unwrap();
    assert!(max_rel_diff(&on.s2a, &zeroed.s2a) > 1e-6);
}

#[test]
fn cross_scan_matches_hand_exchange() {
    let (d, h, w) = (2, 2, 3);
    let p = modal_params(d, 2, 32);
    let x = maps(2, d, h, w, 33);
    let mut y0 = T::zeros(vec![d, h, w]);
    let mut ys = T::zeros(vec![d, h, w]);
    for dir in ScanDirection::ALL {
        let (b0, bs) = (p.all.stage1.get(dir), p.slices.stage1.get(dir));
        let (u0, us) = (unfold(&x[0], dir).unwrap(), unfold(&x[1], dir).unwrap());
        let c_from_slices = project_params(&us, bs).unwrap().c;
        let c_from_all = project_params(&u0, b0).unwrap().c;
        let o0 = oracle_scan_with_c(&u0, b0, &c_from_slices);
        let os = oracle_scan_with_c(&us, bs, &c_from_all);
        y0 = y0.add(&fold(&o0, dir, (h, w)).unwrap()).unwrap();
        ys = ys.add(&fold(&os, dir, (h, w)).unwrap()).unwrap();
    }
    let got = cross_ss2d(&x[0], &x[1], &p).unwrap();
    assert!(max_rel_diff(&got.s2a, &oracle_ss2d(&ys, &p.all.stage2)) < 1e-10);
    assert!(max_rel_diff(&got.a2s, &oracle_ss2d(&y0, &p.slices.stage2)) < 1e-10);
}

#[test]
fn zeroed_weights_leave_residuals() {
    let d = 3;
    let mut p = modal_params(d, 2, 34);
    p.fuse.w = T::zeros(vec![d, 2 * d, 3, 3]);
    p.fuse.b = T::zeros(vec![d]);
    for head in [&mut p.middle.head, &mut p.all.head, &mut p.slices.head] {
        head.linear = Linear::zeros(d, d);
    }
    let f = maps(2, d, 2, 2, 35);
    let fused = inter_modal_fuse(&f[0], &f[1], &p).unwrap();
    assert!(fused.bitwise_eq(&f[0].add(&f[1]).unwrap()));

    let mut q = modal_params(d, 2, 36);
    q.fuse.b = T::zeros(vec![d]);
    for s in [&mut q.middle.stem, &mut q.all.stem, &mut q.slices.stem] {
        s.linear.b = T::zeros(vec![d]);
        s.dwconv.b = T::zeros(vec![d]);
    }
    for head in [&mut q.middle.head, &mut q.all.head, &mut q.slices.head] {
        head.linear.b = T::zeros(vec![d]);
    }
    let z = T::zeros(vec![d, 2, 2]);
    assert!(inter_modal_fuse(&z, &z, &q).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn swapping_inputs_swaps_stream_outputs() {
    let d = 2;
    let mut p = modal_params(d, 2, 37);
    tie_streams(&mut p);
    // identical kernel halves make the concat convolution symmetric
    let half: T = randn(vec![d, d, 3, 3], 0.3, &mut rng(38));
    let hv = half.data();
    p.fuse.w = T::from_fn(vec![d, 2 * d, 3, 3], |i| {
        let (co, ci, k) = (i / (2 * d * 9), (i / 9) % (2 * d), i % 9);
        hv[(co * d + ci % d) * 9 + k]
    });
    let f = maps(2, d, 2, 3, 39);
    let a = inter_modal_trace(&f[0], &f[1], &p).unwrap();
    let b = inter_modal_trace(&f[1], &f[0], &p).unwrap();
    assert!(a.f0_bar.bitwise_eq(&b.f_slices_bar));
    assert!(a.f_slices_bar.bitwise_eq(&b.f0_bar));
    assert!(max_rel_diff(&a.fused, &b.fused) < 1e-12);
    assert_eq!(a.fused.shape(), f[0].shape());
}

#[test]
fn inter_modal_matches_composition_oracle() {
    let (d, h, w) = (2, 2, 2);
    let p = modal_params(d, 2, 40);
    let f = maps(2, d, h, w, 41);
    let stem = |x: &T, s: &lfsamba::layers::Stem<f64>| map_values(&conv_oracle(&mix_channels(x, &s.linear), &s.dwconv), silu);
    let pm = conv_oracle(&T::concat0(&[&f[0], &f[1]]).unwrap(), &p.fuse);
    let mh = &p.middle.head;
    let p_bar = norm_project(&oracle_ss2d(&stem(&pm, &p.middle.stem), &p.middle.scan), &mh.norm.gamma, &mh.norm.beta, &mh.linear);
    let x0 = stem(&f[0], &p.all.stem);
    let xs = stem(&f[1], &p.slices.stem);
    let cross = cross_ss2d(&x0, &xs, &p).unwrap();
    let (ah, sh) = (&p.all.head, &p.slices.head);
    let f0_bar = norm_project(&cross.s2a, &ah.norm.gamma, &ah.norm.beta, &ah.linear);
    let fs_bar = norm_project(&cross.a2s, &sh.norm.gamma, &sh.norm.beta, &sh.linear);
    let oracle = T::from_fn(vec![d, h, w], |i| {
        f0_bar.data()[i] + f[0].data()[i] + p_bar.data()[i] + pm.data()[i] + fs_bar.data()[i] + f[1].data()[i]
    });
    let got = inter_modal_fuse(&f[0], &f[1], &p).unwrap();
    assert!(max_rel_diff(&got, &oracle) < 1e-10, "{}", max_rel_diff(&got, &oracle));
}

#[test]
fn inter_modal_gradcheck() {
    let p = modal_params(2, 2, 42);
    let f = maps(2, 2, 2, 2, 43);
    let w = probe(&[2, 2, 2], 44);
    let rep = gradcheck_many(|x| weighted_sum(&inter_modal_fuse(&x[0], &x[1], &p)?, &w), &f, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
    let rep = gradcheck_many(
        |x| {
            let mut q = p.clone();
            q.all.stage1.blocks[1].w_c = x[0].clone();
            q.slices.stage1.blocks[2].w_b = x[1].clone();
            q.fuse.w = x[2].clone();
            weighted_sum(&inter_modal_fuse(&f[0], &f[1], &q)?, &w)
        },
        &[p.all.stage1.blocks[1].w_c.clone(), p.slices.stage1.blocks[2].w_b.clone(), p.fuse.w.clone()],
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}
