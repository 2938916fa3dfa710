use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::format::parse_output;
use crate::numerics::{finite_diff_grad, relative_error, ComputeGraph, Tensor};
use crate::retrieval::static_summary;
use crate::{GrayImage, Label};

fn policy() -> Policy {
    Policy::new(PolicyConfig::default(), 7).unwrap()
}

fn ramp_image() -> GrayImage {
    let px = (0..32 * 32).map(|i| ((i % 32) as f64 / 31.0) * 0.8 + 0.1).collect();
    GrayImage::new(32, 32, px).unwrap()
}

fn cond(p: &Policy) -> Conditioning {
    let feats = p.features(&ramp_image()).unwrap();
    let prompt = p.build_prompt(INSTRUCTION, None).unwrap();
    p.condition(&feats, &prompt).unwrap()
}

#[test]
fn zero_image_encodes_to_stochastic_attention() {
    let p = policy();
    let enc = p.encode_image(&GrayImage::new(32, 32, vec![0.0; 1024]).unwrap()).unwrap();
    assert!(enc.tokens.all_finite() && enc.cls.all_finite());
    for a in enc.attention.layers() {
        assert_eq!(a.dims2(), (17, 17));
        for r in 0..17 {
            assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let n: f64 = enc.cls_unit.iter().map(|v| v * v).sum();
    assert!((n - 1.0).abs() < 1e-12);
}

#[test]
fn encoding_is_deterministic_and_sensitive() {
    let p = policy();
    let img = ramp_image();
    let a = p.encode_image(&img).unwrap();
    let b = p.encode_image(&img).unwrap();
    assert_eq!(a.cls, b.cls);
    let mut px = img.pixels().to_vec();
    for y in 0..8 {
        for x in 8..16 {
            px[y * 32 + x] = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
        }
    }
    let c = p.encode_image(&GrayImage::new(32, 32, px).unwrap()).unwrap();
    assert!(a.cls.max_abs_diff(&c.cls) > 1e-6);
    assert!(p.encode_image(&GrayImage::new(16, 16, vec![0.0; 256]).unwrap()).is_err());
}

#[test]
fn prompt_assembly_order() {
    let p = policy();
    let instr = p.build_prompt(INSTRUCTION, None).unwrap();
    let summary = static_summary(10, 5, 5).unwrap();
    let full = p.build_prompt(INSTRUCTION, Some(&summary)).unwrap();
    assert_eq!(&full[..instr.len()], instr.as_slice());
    assert_eq!(full[instr.len()..], p.lexicon().tokenize(&summary.text).unwrap()[..]);
    assert_eq!(full, p.build_prompt(INSTRUCTION, Some(&summary)).unwrap());
}

#[test]
fn uniform_logits_give_uniform_logprobs() {
    let mut p = policy();
    for name in ["dec.in.w", "dec.out.w", "dec.prior"] {
        let t = p.params[name].clone();
        p.params.insert(name.to_string(), Tensor::zeros(t.rows(), t.cols()));
    }
    let c = cond(&p);
    let one = p.sequence_logprob(&c, &[3]).unwrap();
    assert!((one - (1.0f64 / 16.0).ln()).abs() < 1e-12);
    let two = p.sequence_logprob(&c, &[3, 9]).unwrap();
    assert!((two - 2.0 * (1.0f64 / 16.0).ln()).abs() < 1e-12);
    assert!(p.sequence_logprob(&c, &[16]).is_err());
    assert!(p.sequence_logprob(&c, &[]).is_err());
}

#[test]
fn greedy_is_deterministic_and_base_verdict_ties_to_real() {
    let p = policy();
    let c = cond(&p);
    let group = p.sample_group(&c, 4, 0.0, 1).unwrap();
    assert!(group.windows(2).all(|w| w[0].tokens == w[1].tokens));
    let text = p.vocabulary().render(&group[0].tokens).unwrap();
    let v = parse_output(&text);
    assert_eq!(v.answer(), Some(Label::Real), "{text}");
}

#[test]
fn sampling_is_seeded_and_logprobs_are_consistent() {
    let p = policy();
    let c = cond(&p);
    let a = p.sample_group(&c, 8, 1.0, 11).unwrap();
    let b = p.sample_group(&c, 8, 1.0, 11).unwrap();
    let other = p.sample_group(&c, 8, 1.0, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, other);
    for s in &a {
        assert!(s.tokens.len() <= p.config().max_len);
        assert!(s.total_logprob <= 0.0);
        assert!((s.token_logprobs.iter().sum::<f64>() - s.total_logprob).abs() < 1e-12);
        let again = p.sequence_logprob(&c, &s.tokens).unwrap();
        assert!((again - s.total_logprob).abs() < 1e-12);
        assert_eq!(s.snapshot_tag, SnapshotTag::Current);
    }
}

#[test]
fn adapter_gradient_matches_finite_differences() {
    let mut p = policy();
    let mut seed = 3.0f64;
    for name in ["lora.in.up", "lora.out.up"] {
        let t = p.params[name].clone();
        let data = t
            .data()
            .iter()
            .map(|_| {
                seed = (seed * 1.7 + 0.3) % 1.0;
                0.2 * (seed - 0.5)
            })
            .collect();
        p.set_trainable(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    }
    let feats = p.features(&ramp_image()).unwrap();
    let prompt = p.build_prompt(INSTRUCTION, None).unwrap();
    let c = p.condition(&feats, &prompt).unwrap();
    let seqs = vec![vec![0, 6, 1, 2, 5, 3, 15], vec![0, 7, 8, 1, 2, 4, 3, 15]];

    let loss = |p: &Policy| -> (f64, BTreeMap<String, Tensor>) {
        let mut g = ComputeGraph::new();
        let b = p.bind(&mut g, true);
        let (img, _, _) = p.encode_graph(&mut g, &b, &feats).unwrap();
        let pf = g.constant(c.prompt.clone());
        let lp = p.sequence_logprobs_graph(&mut g, &b, img, pf, &seqs).unwrap();
        let root = g.sum(lp).unwrap();
        let grads = g.backward(root).unwrap();
        let named = b.trainable().map(|(n, id)| (n.to_string(), grads.get(id))).collect();
        (g.scalar_value(root), named)
    };
    let (_, grads) = loss(&p);
    for name in ["lora.in.down", "lora.out.up", "enc.l0.h0.wq", "enc.cls"] {
        let x = p.params[name].clone();
        let fd = finite_diff_grad(
            |v| {
                let mut q = p.clone();
                q.set_trainable(name, v.clone()).unwrap();
                loss(&q).0
            },
            &x,
            1e-5,
        );
        let err = relative_error(&grads[name], &fd, 1e-8);
        assert!(err < 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn trainable_set_and_freeze_contract() {
    let mut p = policy();
    assert_eq!(p.trainable_parameter_count(), p.config().trainable_parameter_count());
    assert!(p.param("lora.in.up").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p.param("lora.out.up").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p.trainable_parameters().iter().all(|(n, _)| !n.starts_with("dec.")));

    let frozen = p.frozen_hash();
    let before = p.clone();
    let grads: BTreeMap<String, Tensor> = p
        .trainable_parameters()
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::filled(t.rows(), t.cols(), 0.1)))
        .collect();
    p.apply_update(&grads, 0.5).unwrap();
    assert_eq!(p.frozen_hash(), frozen);
    for (name, t) in before.params() {
        if !Policy::is_trainable(name) {
            assert_eq!(p.param(name).unwrap(), t);
        } else {
            assert_ne!(p.param(name).unwrap(), t);
        }
    }
    let mut bad = BTreeMap::new();
    bad.insert("dec.prior".to_string(), Tensor::zeros(16, 16));
    assert!(p.apply_update(&bad, 1.0).is_err());
}

#[test]
fn snapshots_are_detached() {
    let mut p = policy();
    let old = p.snapshot(SnapshotTag::Old);
    let reference = p.snapshot(SnapshotTag::Ref);
    assert_eq!(*old, *reference);
    let c = cond(&p);
    let sample = old.sample_group(&c, 2, 1.0, 5).unwrap();
    assert_eq!(sample[0].snapshot_tag, SnapshotTag::Old);
    for s in &sample {
        let ratio = (p.sequence_logprob(&c, &s.tokens).unwrap() - old.sequence_logprob(&c, &s.tokens).unwrap()).exp();
        assert_eq!(ratio, 1.0);
    }
    let grads: BTreeMap<String, Tensor> = p
        .trainable_parameters()
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::filled(t.rows(), t.cols(), 1.0)))
        .collect();
    for _ in 0..100 {
        p.apply_update(&grads, 0.01).unwrap();
    }
    assert_eq!(old.sample_group(&c, 2, 1.0, 5).unwrap(), sample);
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let p = policy();
    let bytes = checkpoint_bytes(&p);
    let q = parse_checkpoint(&bytes, Some(p.config())).unwrap();
    assert_eq!(p, q);
    let other = PolicyConfig {
        hidden_dim: 8,
        ..PolicyConfig::default()
    };
    assert!(parse_checkpoint(&bytes, Some(&other)).is_err());
    assert!(parse_checkpoint(&bytes[..bytes.len() - 3], None).is_err());
    assert!(parse_checkpoint(b"nope", None).is_err());
}

#[test]
fn config_validation() {
    let bad = PolicyConfig {
        patch_size: 6,
        ..PolicyConfig::default()
    };
    assert!(Policy::new(bad, 0).is_err());
    let multi = PolicyConfig {
        heads: 2,
        layers: 2,
        ..PolicyConfig::default()
    };
    let p = Policy::new(multi, 0).unwrap();
    assert_eq!(p.trainable_parameter_count(), p.config().trainable_parameter_count());
    let enc = p.encode_image(&ramp_image()).unwrap();
    assert_eq!(enc.attention.depth(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn attention_rows_stochastic_for_any_image(px in proptest::collection::vec(0.0f64..=1.0, 1024), seed in 0u64..1000) {
        let p = Policy::new(PolicyConfig::default(), seed).unwrap();
        let enc = p.encode_image(&GrayImage::new(32, 32, px).unwrap()).unwrap();
        for a in enc.attention.layers() {
            for r in 0..a.rows() {
                prop_assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
