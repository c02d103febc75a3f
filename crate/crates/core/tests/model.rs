mod common;

use std::collections::BTreeMap;

use common::max_rel_diff;
use lfsamba::init::{randn, rng, uniform};
use lfsamba::inter_modal::inter_modal_fuse;
use lfsamba::inter_slice::slice_mean;
use lfsamba::layers::{Conv, Linear};
use lfsamba::losses::{total_loss, LossConfig, Supervision};
use lfsamba::model::*;
use lfsamba::optim::{Adam, AdamConfig};
use lfsamba::params::{Module, ModuleExt};
use lfsamba::tensor::{gradcheck_with, GradcheckOptions};
use lfsamba::{Error, Tape, Tensor64 as T};
use rand::seq::index::sample;

fn tiny() -> ModelConfig {
    ModelConfig { image_size: 32, dim: 32, groups: 2, slices: 2, ..ModelConfig::default() }
}

fn stack(cfg: &ModelConfig, k: usize, seed: u64) -> FocalStack<f64> {
    let r = &mut rng(seed);
    let n = cfg.image_size;
    let gt = T::from_fn(vec![n, n], |i| if (i / n) * 3 > n && (i % n) * 2 > n { 1.0 } else { 0.0 });
    FocalStack {
        all_focus: uniform(vec![3, n, n], 0.0, 1.0, r),
        slices: (0..k).map(|_| uniform(vec![3, n, n], 0.0, 1.0, r)).collect(),
        gt: Some(gt),
        scribble: None,
    }
}

// ---------------------------------------------------------------- counting

fn ssm_count(d: usize, n: usize) -> usize {
    let r = (d / 16).max(1);
    3 * d * n + 2 * r * d + 2 * d
}

/// Trainable parameter count derived by hand from the layer shapes.
fn analytic_trainable(cfg: &ModelConfig) -> usize {
    let (d, n) = (cfg.dim, cfg.state_size);
    let r = d / cfg.adapter_ratio;
    let dirs = 4 * ssm_count(d, n);
    let linear = d * d + d;
    let stem = linear + 9 * d + d;
    let norm_project = 2 * d + linear;
    let group = (9 * d * d + d) + cfg.encoder_blocks * ((r * d + r) + (d * r + d));
    let fusion = match cfg.slice_fusion {
        SliceFusion::Mamba => stem + dirs + 2 * d + 2 * linear,
        SliceFusion::Concat => cfg.slices * d * d + d,
    };
    let cross = stem + 2 * dirs + norm_project;
    let middle = stem + dirs + norm_project;
    let modal = (2 * d * d * 9 + d) + middle + 2 * cross;
    let mut decoder = 0;
    let mut c = d;
    for _ in 0..cfg.decoder_stages {
        let next = (c / 2).max(8);
        decoder += next * c * 9 + next;
        c = next;
    }
    decoder += c * 9 + 1;
    (cfg.groups + 1) * group + fusion + modal + decoder
}

fn analytic_frozen(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let g = 2 * cfg.grid();
    let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (hidden * d + hidden) + (d * hidden + d);
    (d * 3 * cfg.patch * cfg.patch + d) + d * g * g + cfg.encoder_blocks * block
}

fn count(v: &[(String, T)]) -> usize {
    v.iter().map(|(_, t)| t.len()).sum()
}

#[test]
fn trainable_count_matches_analytic_count() {
    for cfg in [ModelConfig::default(), tiny(), ModelConfig { slice_fusion: SliceFusion::Concat, ..ModelConfig::default() }] {
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let trainable = trainable_params(&p);
        assert!(!trainable.is_empty());
        assert_eq!(count(&trainable), analytic_trainable(&cfg), "{cfg:?}");
        assert_eq!(p.param_count(), analytic_trainable(&cfg) + analytic_frozen(&cfg));
        assert!(trainable.iter().all(|(n, _)| !n.starts_with("encoder.")));
    }
}

#[test]
fn tensor_names_are_unique_and_hierarchical() {
    let p = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let unique: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    for expected in [
        "adapter.3.block.1.w_down",
        "adapter.0.pos.w",
        "encoder.block.0.qkv.w",
        "inter_slice.scan.col_bwd.a_log",
        "inter_modal.all.stage1.row_fwd.w_c",
        "decoder.head.b",
    ] {
        assert!(unique.contains(&expected.to_string()), "{expected}");
    }
}

// ----------------------------------------------------------------- encoder

#[test]
fn encode_at_init_equals_adapter_free_encoder_bitwise() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    let img = uniform(vec![3, 64, 64], 0.0, 1.0, &mut rng(3));
    let plain = encode(&img, None, &p.encoder).unwrap();
    assert_eq!(plain.shape(), &[64, 8, 8]);
    for k in 0..=cfg.groups {
        assert!(encode(&img, Some(p.group(k)), &p.encoder).unwrap().bitwise_eq(&plain), "group {k}");
    }
}

#[test]
fn encode_is_deterministic_and_frozen_weights_are_seeded() {
    let cfg = ModelConfig::default();
    let a = ModelParams::<f64>::init(&cfg).unwrap();
    let b = ModelParams::<f64>::init(&cfg).unwrap();
    let img = uniform(vec![3, 64, 64], 0.0, 1.0, &mut rng(4));
    let x = encode(&img, Some(a.group(1)), &a.encoder).unwrap();
    let y = encode(&img, Some(b.group(1)), &b.encoder).unwrap();
    assert!(x.bitwise_eq(&y));
    let other = FrozenEncoder::<f64>::new(&ModelConfig { encoder_seed: 8, ..cfg });
    assert!(!other.embed.w.bitwise_eq(&a.encoder.embed.w));
}

#[test]
fn encode_rejects_indivisible_sizes() {
    let p = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
    let img = T::zeros(vec![3, 60, 64]);
    assert!(matches!(encode(&img, None, &p.encoder), Err(Error::Dimension { .. })));
}

#[test]
fn trained_adapter_changes_only_its_group() {
    let cfg = tiny();
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    p.adapters[1].blocks[0].up = Linear { w: randn(vec![32, 8], 0.1, &mut rng(5)), b: T::zeros(vec![32]) };
    let img = uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng(6));
    let base = encode(&img, None, &p.encoder).unwrap();
    assert!(!encode(&img, Some(p.group(1)), &p.encoder).unwrap().bitwise_eq(&base));
    assert!(encode(&img, Some(p.group(2)), &p.encoder).unwrap().bitwise_eq(&base));
    // groups are capped at G
    assert!(std::ptr::eq(p.group(7), p.group(cfg.groups)));
}

#[test]
fn position_adapter_examples() {
    // one channel, base grid 2×2 -> pooled 1×1
    let pos = T::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let centre = Conv::<f64>::identity(1, 3, false);
    assert_eq!(position_adapter(&pos, &centre).unwrap().data(), &[4.0]);
    let zero = Conv { w: T::zeros(vec![1, 1, 3, 3]), b: T::zeros(vec![1]), depthwise: false };
    assert_eq!(position_adapter(&pos, &zero).unwrap().data(), &[0.0]);

    let big = randn(vec![3, 4, 6], 1.0, &mut rng(7));
    let pooled = position_adapter(&big, &Conv::identity(3, 3, false)).unwrap();
    assert_eq!(pooled.shape(), &[3, 2, 3]);
    for c in 0..3 {
        for y in 0..2 {
            for x in 0..3 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| big.at(&[c, 2 * y + dy, 2 * x + dx]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(pooled.at(&[c, y, x]), m);
            }
        }
    }
    let odd = T::zeros(vec![1, 3, 2]);
    assert!(matches!(position_adapter(&odd, &centre), Err(Error::Dimension { .. })));
}

#[test]
fn feature_adapter_examples() {
    let r = &mut rng(8);
    let x = randn(vec![5, 8], 1.0, r);
    let mut a = FeatureAdapter::<f64>::init(8, 4, r);
    assert!(feature_adapter(&x, &a).unwrap().data().iter().all(|&v| v == 0.0));

    a.up = Linear::init(8, 2, r);
    a.down.w = T::zeros(vec![2, 8]);
    a.down.b = T::from_f64(vec![2], &[-0.5, -1.0]).unwrap();
    let out = feature_adapter(&x, &a).unwrap();
    for row in 0..5 {
        for c in 0..8 {
            assert_eq!(out.at(&[row, c]), a.up.b.data()[c]);
        }
    }

    let a = FeatureAdapter { down: Linear::init(2, 8, r), up: Linear::init(8, 2, r) };
    let out = feature_adapter(&x, &a).unwrap();
    for row in 0..5 {
        let hidden: Vec<f64> = (0..2)
            .map(|j| {
                let v: f64 = (0..8).map(|i| a.down.w.at(&[j, i]) * x.at(&[row, i])).sum::<f64>() + a.down.b.data()[j];
                v.max(0.0)
            })
            .collect();
        for c in 0..8 {
            let want: f64 = (0..2).map(|j| a.up.w.at(&[c, j]) * hidden[j]).sum::<f64>() + a.up.b.data()[c];
            assert!((out.at(&[row, c]) - want).abs() < 1e-12);
        }
    }
}

// ----------------------------------------------------------------- decoder

#[test]
fn decode_examples() {
    let cfg = ModelConfig::default();
    let mut dec = ModelParams::<f64>::init(&cfg).unwrap().decoder;
    let f = randn(vec![64, 8, 8], 1.0, &mut rng(9));
    let s = decode(&f, &dec, (64, 64)).unwrap();
    assert_eq!(s.shape(), &[64, 64]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(matches!(decode(&f, &dec, (48, 48)), Err(Error::Dimension { .. })));
    assert!(matches!(decode(&f, &dec, (64, 32)), Err(Error::Dimension { .. })));
    dec.head.w = T::zeros(dec.head.w.shape().to_vec());
    dec.head.b = T::zeros(vec![1]);
    assert!(decode(&f, &dec, (64, 64)).unwrap().data().iter().all(|&v| v == 0.5));
}

// ----------------------------------------------------------------- forward

#[test]
fn forward_shapes_and_determinism() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    let s = stack(&cfg, 3, 10);
    let a = forward(&s, &p).unwrap();
    let b = forward(&s, &ModelParams::<f64>::init(&cfg).unwrap()).unwrap();
    assert_eq!(a.saliency.shape(), &[64, 64]);
    assert_eq!(a.f0.shape(), &[64, 8, 8]);
    assert_eq!(a.f_slices.shape(), &[64, 8, 8]);
    assert_eq!(a.f_fused.shape(), &[64, 8, 8]);
    assert!(a.saliency.bitwise_eq(&b.saliency));
}

#[test]
fn forward_with_zero_gates_equals_the_adapter_free_composition() {
    let cfg = tiny();
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    let SliceFusionParams::Mamba(sp) = &mut p.slice_fusion else { unreachable!() };
    sp.gate = Linear::zeros(32, 32);
    let s = stack(&cfg, 3, 11);
    let f0 = encode(&s.all_focus, None, &p.encoder).unwrap();
    let fk: Vec<T> = s.slices.iter().map(|x| encode(x, None, &p.encoder).unwrap()).collect();
    let fused = inter_modal_fuse(&f0, &slice_mean(&fk).unwrap(), &p.inter_modal).unwrap();
    let want = decode(&fused, &p.decoder, (32, 32)).unwrap();
    let got = forward(&s, &p).unwrap().saliency;
    assert!(max_rel_diff(&got, &want) < 1e-12);
}

#[test]
fn forward_accepts_any_slice_count_and_checks_the_stack() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    for k in [1, 2, 5] {
        assert_eq!(forward(&stack(&cfg, k, 12), &p).unwrap().saliency.shape(), &[32, 32]);
    }
    let mut bad = stack(&cfg, 2, 13);
    bad.slices.clear();
    assert!(matches!(forward(&bad, &p), Err(Error::Contract(_))));
    let mut bad = stack(&cfg, 2, 13);
    bad.slices[1] = T::zeros(vec![3, 32, 16]);
    assert!(matches!(forward(&bad, &p), Err(Error::Dimension { .. })));
}

#[test]
fn concat_variant_needs_its_slice_count() {
    let cfg = ModelConfig { slice_fusion: SliceFusion::Concat, ..tiny() };
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    assert_eq!(forward(&stack(&cfg, 2, 14), &p).unwrap().saliency.shape(), &[32, 32]);
    assert!(forward(&stack(&cfg, 3, 14), &p).is_err());
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig { patch: 4, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { image_size: 60, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { heads: 5, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { groups: 0, ..ModelConfig::default() }.validate().is_err());
    let json = r#"{"dim": 32, "slice_fusion": "concat"}"#;
    let cfg: ModelConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.dim, cfg.slice_fusion, cfg.image_size), (32, SliceFusion::Concat, 64));
    assert!(serde_json::from_str::<ModelConfig>(r#"{"dims": 32}"#).is_err());
}

// ---------------------------------------------------------------- training

fn set_named(p: &mut ModelParams<f64>, table: &BTreeMap<String, T>) {
    p.visit("", &mut |name, t| {
        if let Some(v) = table.get(name) {
            *t = v.clone();
        }
        Ok(())
    })
    .unwrap();
}

#[test]
fn loss_gradcheck_on_sampled_trainable_params() {
    let cfg = ModelConfig { encoder_blocks: 2, ..tiny() };
    let mut base = ModelParams::<f64>::init(&cfg).unwrap();
    // non-zero up-projections so adapter gradients are exercised away from init
    for g in base.adapters.iter_mut() {
        for b in g.blocks.iter_mut() {
            b.up.w = randn(b.up.w.shape().to_vec(), 0.05, &mut rng(15));
        }
    }
    let s = stack(&cfg, 2, 16);
    let trainable = trainable_params(&base);
    let names: Vec<String> = trainable.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<T> = trainable.into_iter().map(|(_, t)| t).collect();
    let offsets: Vec<usize> = values
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = values.iter().map(T::len).sum();
    let picks = sample(&mut rng(17), total, total / 100);
    let coords: Vec<(usize, usize)> = picks
        .iter()
        .map(|flat| {
            let i = offsets.partition_point(|&o| o <= flat) - 1;
            (i, flat - offsets[i])
        })
        .collect();
    let f = |xs: &[T]| {
        let mut p = base.clone();
        let table: BTreeMap<String, T> = names.iter().cloned().zip(xs.iter().cloned()).collect();
        set_named(&mut p, &table);
        let pred = forward(&s, &p)?.saliency;
        total_loss(&pred, &s, Supervision::Full, &LossConfig::default())
    };
    let opts = GradcheckOptions { tol: 1e-3, coords: Some(coords), ..Default::default() };
    let rep = gradcheck_with(f, &values, &opts).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.checked >= total / 100);
}

#[test]
fn training_never_touches_the_encoder_and_reaches_every_adapter() {
    let cfg = tiny();
    let mut p = ModelParams::<f64>::init(&cfg).unwrap();
    let frozen_before: Vec<(String, T)> = p.named_tensors().into_iter().filter(|(n, _)| !is_trainable(n)).collect();
    let s = stack(&cfg, 2, 18);
    let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() });
    for step in 0..10 {
        let tape = Tape::new();
        let bound = p.bind_trainable(&tape).unwrap();
        let pred = forward(&s, &bound).unwrap().saliency;
        let loss = total_loss(&pred, &s, Supervision::Full, &LossConfig::default()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.iter().all(|(n, _)| is_trainable(n)));
        if step == 0 {
            // up-projections start at zero but still receive gradient
            for k in 0..=2 {
                let g = grads.get(&format!("adapter.{k}.block.0.w_up")).unwrap();
                assert!(g.max_abs() > 0.0, "adapter {k}");
            }
        }
        adam.step(&mut p, &grads).unwrap();
    }
    let frozen_after: Vec<(String, T)> = p.named_tensors().into_iter().filter(|(n, _)| !is_trainable(n)).collect();
    assert_eq!(frozen_before.len(), frozen_after.len());
    for ((n, a), (_, b)) in frozen_before.iter().zip(&frozen_after) {
        assert!(a.bitwise_eq(b), "{n}");
    }
    assert_eq!(adam.steps_taken(), 10);
}
