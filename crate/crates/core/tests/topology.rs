use multiquant::engine::Graph;
use multiquant::quant::RoundMode;
use multiquant::topology::checkpoint;
use multiquant::topology::{
    build_branch_plan, build_selection_map, storage_report, ArchSpec, BodyEncoding, BranchId, ConvSpec, ForwardRecord,
    Mode, MultiQuantModel, Strategy,
};
use multiquant::{Error, Tensor};

fn small_arch() -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        height: 8,
        width: 8,
        classes: 3,
        stem: ConvSpec::new(4, 3, 1, false),
        body: vec![ConvSpec::new(4, 3, 1, true), ConvSpec::new(6, 3, 1, true)],
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

fn input(n: usize) -> Tensor {
    Tensor::new(
        vec![n, 1, 8, 8],
        (0..n * 64).map(|i| (i * 37 % 101) as f64 / 101.0).collect(),
    )
    .unwrap()
}

fn model(bits: &[u8], strategy: Strategy) -> MultiQuantModel {
    let plan = build_branch_plan(bits).unwrap();
    let map = build_selection_map(&plan, strategy).unwrap();
    MultiQuantModel::build(&small_arch(), &plan, &map, 11).unwrap()
}

/// A model that has seen one training batch at every width, so activation
/// bounds and running statistics are set.
fn warmed(bits: &[u8]) -> MultiQuantModel {
    let mut m = model(bits, Strategy::Amortized);
    let x = input(5);
    for &b in bits {
        m.set_bitwidth(b).unwrap();
        let mut g = Graph::new();
        let out = m.forward_composed(&mut g, &x, Mode::Train).unwrap();
        m.apply_updates(&out.record);
    }
    m
}

#[test]
fn composed_equals_external_branch_sum() {
    for bits in [&[2u8, 4, 6, 8][..], &[2, 3, 4]] {
        let mut m = warmed(bits);
        let x = input(3);
        for &b in bits {
            m.set_bitwidth(b).unwrap();
            let mut g = Graph::new();
            let composed = m.forward_composed(&mut g, &x, Mode::Eval).unwrap();
            let composed = g.value(composed.logits).clone();

            let mut acc: Option<Tensor> = None;
            let mut rec = ForwardRecord::default();
            for j in m.selected(b).unwrap() {
                let mut gb = Graph::new();
                let xv = gb.input(x.clone());
                let stem = m.forward_stem(&mut gb, xv, Mode::Eval, &mut rec).unwrap();
                let f = m.forward_branch(&mut gb, stem, j, b, Mode::Eval, &mut rec).unwrap();
                let f = gb.value(f).clone();
                acc = Some(match acc {
                    None => f,
                    Some(a) => {
                        let data = a.data().iter().zip(f.data()).map(|(p, q)| p + q).collect();
                        Tensor::new(a.shape().to_vec(), data).unwrap()
                    }
                });
            }
            let mut gh = Graph::new();
            let feat = gh.input(acc.unwrap());
            let logits = m.forward_head(&mut gh, feat, Mode::Eval).unwrap();
            assert_eq!(gh.value(logits), &composed, "b={b}");
        }
    }
}

#[test]
fn identical_branches_scale_features() {
    let mut m = warmed(&[2, 4, 6, 8]);
    // Copy branch 1 into every branch, make BN the identity and give every
    // activation quantizer the same bounds.
    let src = m.branches()[0].clone();
    for j in 0..m.branches().len() {
        let dst = m.branches()[j].clone();
        for (li, (a, b)) in src.blocks.iter().zip(&dst.blocks).enumerate() {
            let w = m.store().value(a.weight).clone();
            m.store_mut().get_mut(b.weight).value = w;
            let (pa, pb) = (&a.weight_clip[&2], &b.weight_clip[&2]);
            let (l, u) = (m.store().scalar(pa.l), m.store().scalar(pa.u));
            m.store_mut().set_scalar(pb.l, l);
            m.store_mut().set_scalar(pb.u, u);
            for (&bits, aq) in &b.act_clip {
                m.store_mut().set_scalar(aq.l, 0.0);
                m.store_mut().set_scalar(aq.u, 4.0);
                let eps = m.arch().bn_eps;
                let bank = m.bank_mut(j, li, bits).unwrap();
                bank.running_mean.iter_mut().for_each(|v| *v = 0.0);
                bank.running_var.iter_mut().for_each(|v| *v = 1.0 - eps);
                let (gamma, beta, c) = (bank.gamma, bank.beta, bank.running_mean.len());
                m.store_mut().get_mut(gamma).value = Tensor::full(&[c], 1.0);
                m.store_mut().get_mut(beta).value = Tensor::zeros(&[c]);
            }
        }
    }
    let x = input(2);
    for b in [2u8, 4, 6, 8] {
        m.set_bitwidth(b).unwrap();
        let mut g = Graph::new();
        let out = m.forward_composed(&mut g, &x, Mode::Eval).unwrap();
        let composed = g.value(out.features).clone();
        let mut rec = ForwardRecord::default();
        let xv = g.input(x.clone());
        let stem = m.forward_stem(&mut g, xv, Mode::Eval, &mut rec).unwrap();
        let j = m.selected(b).unwrap()[0];
        let single = m.forward_branch(&mut g, stem, j, b, Mode::Eval, &mut rec).unwrap();
        let k = (b / 2) as f64;
        for (c, s) in composed.data().iter().zip(g.value(single).data()) {
            assert!((c - k * s).abs() <= 1e-12 * (1.0 + c.abs()), "b={b}");
        }
    }
}

#[test]
fn switching_is_stateless_in_eval() {
    let mut m = warmed(&[2, 4, 8]);
    let x = input(4);
    m.set_bitwidth(8).unwrap();
    let first = m.predict(&x, 8).unwrap();
    m.set_bitwidth(2).unwrap();
    let _ = m.predict(&x, 2).unwrap();
    m.set_bitwidth(8).unwrap();
    let mut g = Graph::new();
    let again = m.forward_composed(&mut g, &x, Mode::Eval).unwrap();
    assert_eq!(g.value(again.logits), &first);
    assert!(matches!(m.set_bitwidth(5), Err(Error::NotACandidate(5))));
}

#[test]
fn amortized_selection_is_bound() {
    let mut m = model(&[2, 4, 6, 8], Strategy::Amortized);
    m.set_bitwidth(4).unwrap();
    let ids: Vec<BranchId> = m.selected(4).unwrap().iter().map(|&j| m.branches()[j].id).collect();
    assert_eq!(ids, vec![BranchId::Full(2), BranchId::Full(3)]);
}

#[test]
fn branch_weights_stay_two_bit() {
    let mut m = warmed(&[2, 4, 6, 8]);
    let x = input(2);
    for b in [8u8, 2, 6, 4, 8] {
        m.set_bitwidth(b).unwrap();
        assert_eq!(m.weight_spec(b).bits, 2);
        let mut g = Graph::new();
        let out = m.forward_composed(&mut g, &x, Mode::Train).unwrap();
        assert!(out.record.weight_bits.iter().all(|&w| w == 2));
    }
    let mut single = MultiQuantModel::single_body(&small_arch(), &[4, 8], RoundMode::Nearest, 1).unwrap();
    let mut seen = Vec::new();
    for b in [8u8, 4] {
        single.set_bitwidth(b).unwrap();
        let mut g = Graph::new();
        let out = single.forward_composed(&mut g, &x, Mode::Train).unwrap();
        seen.extend(out.record.weight_bits);
    }
    assert!(seen.contains(&8) && seen.contains(&4));
}

#[test]
fn body_copies_and_half_branch_shapes() {
    let one = model(&[2], Strategy::Serial);
    let four = model(&[2, 4, 6, 8], Strategy::Serial);
    assert_eq!(one.branches().len(), 1);
    let per_body = one.branch_weight_count(0);
    let total: usize = (0..4).map(|j| four.branch_weight_count(j)).sum();
    assert_eq!(total, 4 * per_body);

    let odd = model(&[2, 3, 4], Strategy::Serial);
    let half = odd.branches().iter().find(|b| b.id == BranchId::Half).unwrap();
    assert_eq!(half.input_channels, 2);
    let outs: Vec<usize> = half.blocks.iter().map(|b| b.shape.out_channels).collect();
    assert_eq!(outs, vec![2, 6]);
}

#[test]
fn storage_audit() {
    let one = model(&[2], Strategy::Serial);
    let four = model(&[2, 4, 6, 8], Strategy::Serial);
    let r1 = storage_report(&one, BodyEncoding::Packed { bits: 2 });
    let r4 = storage_report(&four, BodyEncoding::Packed { bits: 2 });
    assert_eq!(r4.body_payload_bytes, 4 * r1.body_payload_bytes);
    assert_eq!(r4.body_compression_ratio(), 16.0);
    let fp = storage_report(&four, BodyEncoding::FullPrecision);
    assert_eq!(fp.body_payload_bytes, r4.fp_body_bytes);
}

#[test]
fn checkpoint_round_trip_preserves_eval_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(3);
    for m in [warmed(&[2, 3, 4]), {
        let mut s = MultiQuantModel::single_body(&small_arch(), &[4, 8], RoundMode::Floor, 3).unwrap();
        let mut g = Graph::new();
        let out = s.forward_composed(&mut g, &x, Mode::Train).unwrap();
        s.apply_updates(&out.record);
        s
    }] {
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&m, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        for &b in m.candidates() {
            assert_eq!(m.predict(&x, b).unwrap(), back.predict(&x, b).unwrap(), "b={b}");
        }
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), checkpoint::to_bytes(&m).unwrap());
    }
    let mut bytes = checkpoint::to_bytes(&warmed(&[2])).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::from_bytes(&bytes).is_err());
    assert!(matches!(
        checkpoint::load(&dir.path().join("absent")),
        Err(Error::MissingArtifact(_))
    ));
}
