mod common;

use attnlink::model::{eval_logits, forward, Pass};
use attnlink::{Graph, LinkPlacement, ModelConfig, ModelParams};

fn linked_cfg(placement: LinkPlacement) -> ModelConfig {
    ModelConfig::toy(16, 4, 3, 20).with_placement(placement).with_link_scale(0.9)
}

#[test]
fn decoder_is_causal() {
    for placement in LinkPlacement::ALL {
        let cfg = linked_cfg(placement);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let src = [4, 5, 6, 7, 8];
        let tgt = [2, 9, 10, 11, 12, 13];
        let base = eval_logits(&params, &cfg, &src, &tgt).unwrap();
        for cut in 1..tgt.len() {
            let mut changed = tgt;
            for t in changed.iter_mut().skip(cut) {
                *t = 19;
            }
            let other = eval_logits(&params, &cfg, &src, &changed).unwrap();
            let v = cfg.tgt_vocab;
            // rows before the perturbed position are untouched, bit for bit
            assert_eq!(base.data()[..cut * v], other.data()[..cut * v], "{placement:?} cut {cut}");
            assert_ne!(base.data()[cut * v..], other.data()[cut * v..]);
        }
    }
}

#[test]
fn padding_does_not_leak() {
    for placement in LinkPlacement::ALL {
        let cfg = linked_cfg(placement);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let short_src = vec![4, 5, 6];
        let short_tgt = vec![2, 7, 8];
        let alone = eval_logits(&params, &cfg, &short_src, &short_tgt).unwrap();

        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let src = vec![vec![10, 11, 12, 13, 14, 15, 16], short_src.clone()];
        let tgt = vec![vec![2, 9, 9, 9, 9, 9], short_tgt.clone()];
        let f = forward(&p, &cfg, &src, &tgt, &mut Pass::eval()).unwrap();
        let v = cfg.tgt_vocab;
        let batched = f.logits.value();
        let row0 = 6 * v;
        let got = &batched.data()[row0..row0 + 3 * v];
        let worst = got
            .iter()
            .zip(alone.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{placement:?}: {worst}");
    }
}

#[test]
fn zero_scale_is_bitwise_vanilla() {
    let vanilla = ModelConfig::toy(16, 4, 3, 20);
    let params = ModelParams::init(&vanilla, 3).unwrap();
    let src = [4, 5, 6, 7];
    let tgt = [2, 8, 9];
    let want = eval_logits(&params, &vanilla, &src, &tgt).unwrap();
    for placement in LinkPlacement::ALL {
        let cfg = vanilla.clone().with_placement(placement).with_link_scale(0.0);
        let got = eval_logits(&params, &cfg, &src, &tgt).unwrap();
        assert_eq!(want.data(), got.data(), "{placement:?}");
    }
}

#[test]
fn linking_changes_output() {
    let vanilla = ModelConfig::toy(16, 4, 3, 20);
    let params = ModelParams::init(&vanilla, 3).unwrap();
    let want = eval_logits(&params, &vanilla, &[4, 5, 6], &[2, 8]).unwrap();
    for placement in [LinkPlacement::Encoder, LinkPlacement::Decoder, LinkPlacement::Both] {
        let got = eval_logits(&params, &vanilla.clone().with_placement(placement), &[4, 5, 6], &[2, 8]).unwrap();
        assert!(want.max_abs_diff(&got) > 1e-6, "{placement:?}");
    }
}

#[test]
fn rejects_out_of_range_ids() {
    let cfg = ModelConfig::toy(8, 2, 1, 10);
    let params = ModelParams::init(&cfg, 0).unwrap();
    assert!(eval_logits(&params, &cfg, &[4, 10], &[2]).is_err());
    assert!(eval_logits(&params, &cfg, &[4], &[2, 99]).is_err());
    let long: Vec<usize> = vec![4; cfg.max_len + 1];
    assert!(eval_logits(&params, &cfg, &long, &[2]).is_err());
}
