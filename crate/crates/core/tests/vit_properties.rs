use evax_core::vit::{build_vit, mean_pool, rope_rotate, TokenSequence, ViTModel};
use evax_core::{Graph, Preset, Rng, Tensor, ViTConfig};

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn within(count: usize, target: f64, frac: f64) -> bool {
    (count as f64 - target).abs() <= frac * target
}

#[test]
fn preset_sizes_match_the_reported_scales() {
    let ti = ViTConfig::preset(Preset::Ti, 224);
    let s = ViTConfig::preset(Preset::S, 224);
    let b = ViTConfig::preset(Preset::B, 224);
    assert!(within(ti.param_count(), 6e6, 0.1), "{}", ti.param_count());
    assert!(within(s.param_count(), 22e6, 0.1), "{}", s.param_count());
    assert!(within(b.param_count(), 86e6, 0.1), "{}", b.param_count());
    assert!(ti.param_count() < s.param_count() && s.param_count() < b.param_count());
    assert_eq!(build_vit(&ti, 0).unwrap().param_count(), ti.param_count());
}

#[test]
fn same_seed_same_weights() {
    let cfg = ViTConfig::new(32, 2, 2, 32);
    let (a, b, c) = (build_vit(&cfg, 4).unwrap(), build_vit(&cfg, 4).unwrap(), build_vit(&cfg, 5).unwrap());
    assert!(a.params.tensors().iter().zip(b.params.tensors()).all(|(x, y)| x.bit_eq(y)));
    assert!(a.params.tensors().iter().zip(c.params.tensors()).any(|(x, y)| !x.bit_eq(y)));
}

#[test]
fn patchify_lengths_and_zero_image() {
    let m = build_vit(&ViTConfig::new(32, 1, 2, 224), 0).unwrap();
    assert_eq!(m.patchify(&Tensor::zeros(vec![224, 224])).unwrap().len(), 197);

    let mut m = build_vit(&ViTConfig::new(32, 1, 2, 32), 0).unwrap();
    m.params.set("pos_embed", Tensor::zeros(vec![5, 32])).unwrap();
    let seq = m.patchify(&Tensor::zeros(vec![32, 32])).unwrap();
    let cls = m.params.by_name("cls_token").unwrap().data().to_vec();
    assert_eq!(&seq.tokens.data()[..32], &cls[..]);
    assert!(seq.tokens.data()[32..].iter().all(|&v| v == 0.0));
    assert!(m.patchify(&Tensor::zeros(vec![48, 48])).is_err());
}

#[test]
fn rotary_encoding_is_an_isometry() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let x = randn(&mut rng, &[2, 10, 8]);
        let y = rope_rotate(&x, (3, 3), true).unwrap();
        for (a, b) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((na - nb).abs() < 1e-5);
        }
    }
}

#[test]
fn rotary_scores_depend_on_offsets_only() {
    let mut rng = Rng::new(2);
    let dh = 16;
    let (q, k) = (randn(&mut rng, &[dh]), randn(&mut rng, &[dh]));
    // one row of 8 positions; place q and k at (p, p + 3) for several p
    let score = |p: usize| -> f32 {
        let mut x = vec![0f32; 8 * dh];
        x[p * dh..(p + 1) * dh].copy_from_slice(q.data());
        x[(p + 3) * dh..(p + 4) * dh].copy_from_slice(k.data());
        let y = rope_rotate(&Tensor::new(vec![8, dh], x).unwrap(), (1, 8), false).unwrap();
        let a = &y.data()[p * dh..(p + 1) * dh];
        let b = &y.data()[(p + 3) * dh..(p + 4) * dh];
        a.iter().zip(b).map(|(u, v)| u * v).sum()
    };
    let s0 = score(0);
    for p in 1..5 {
        assert!((score(p) - s0).abs() < 1e-4, "{p}: {} vs {s0}", score(p));
    }
}

fn zero_named(m: &mut ViTModel, suffix: &str) {
    let names: Vec<String> = m.params.names().iter().filter(|n| n.ends_with(suffix)).cloned().collect();
    for n in names {
        let shape = m.params.by_name(&n).unwrap().shape().to_vec();
        m.params.set(&n, Tensor::zeros(shape)).unwrap();
    }
}

#[test]
fn zeroed_output_projections_give_identity_blocks() {
    let mut m = build_vit(&ViTConfig::new(32, 2, 2, 32), 7).unwrap();
    for s in ["attn.proj.weight", "attn.proj.bias", "mlp.w_out.weight", "mlp.w_out.bias"] {
        zero_named(&mut m, s);
    }
    let seq = m.patchify(&randn(&mut Rng::new(3), &[32, 32])).unwrap();
    for i in 0..2 {
        assert!(m.block_forward(i, &seq).unwrap().tokens.bit_eq(&seq.tokens));
    }
}

#[test]
fn blocks_preserve_shape_and_are_deterministic() {
    for (d, heads) in [(32, 2), (64, 4)] {
        let m = build_vit(&ViTConfig::new(d, 2, heads, 64), 1).unwrap();
        let seq = m.patchify(&randn(&mut Rng::new(d as u64), &[64, 64])).unwrap();
        let out = m.block_forward(1, &seq).unwrap();
        assert_eq!(out.tokens.shape(), seq.tokens.shape());
        let f1 = m.forward_features(&seq).unwrap();
        let f2 = m.forward_features(&seq).unwrap();
        assert!(f1.tokens.bit_eq(&f2.tokens));
    }
}

#[test]
fn swapping_tokens_with_their_positions_swaps_outputs() {
    let m = build_vit(&ViTConfig::new(32, 1, 2, 64), 2).unwrap();
    let seq = m.patchify(&randn(&mut Rng::new(9), &[64, 64])).unwrap();
    let (n, d) = (seq.len(), seq.dim());
    let (i, j) = (3, 11);
    let mut order: Vec<usize> = (0..n).collect();
    order.swap(i, j);
    let swapped: Vec<f32> = order.iter().flat_map(|&r| seq.tokens.data()[r * d..(r + 1) * d].to_vec()).collect();
    let run = |vit: &evax_core::vit::ViT, tokens: Vec<f32>| {
        let mut g = Graph::new(false);
        let p = g.bind(&m.params, false);
        let x = g.input(Tensor::new(vec![1, n, d], tokens).unwrap(), false);
        let y = vit.block(&mut g, &p, 0, x).unwrap().0;
        g.value(y).data().to_vec()
    };
    let plain = run(&m.vit, seq.tokens.data().to_vec());
    let permuted = run(&m.vit.with_token_order(&order).unwrap(), swapped);
    for (r, &src) in order.iter().enumerate() {
        for k in 0..d {
            assert!((permuted[r * d + k] - plain[src * d + k]).abs() < 1e-5);
        }
    }
    assert!(m.vit.with_token_order(&[0, 0]).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let m = build_vit(&ViTConfig::new(32, 2, 2, 64), 5).unwrap();
    let mut g = Graph::new(false);
    let p = g.bind(&m.params, false);
    let x = g.input(randn(&mut Rng::new(0), &[2, 1, 64, 64]), false);
    let f = {
        let e = m.vit.embed(&mut g, &p, x, None).unwrap();
        m.vit.encode(&mut g, &p, e, Some(1)).unwrap()
    };
    let a = g.value(f.attention.unwrap());
    assert_eq!(a.shape(), &[2, 2, 17, 17]);
    for row in a.data().chunks(17) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mean_pool_ignores_order_and_class_token() {
    let mut rng = Rng::new(6);
    let t = randn(&mut rng, &[5, 4]);
    let pooled = mean_pool(&TokenSequence::new(t.clone(), (2, 2), true).unwrap()).unwrap();
    let mut rows: Vec<&[f32]> = t.data().chunks(4).collect();
    rows[1..].reverse();
    let rev = Tensor::new(vec![5, 4], rows.concat()).unwrap();
    let again = mean_pool(&TokenSequence::new(rev, (2, 2), true).unwrap()).unwrap();
    assert!(pooled.max_abs_diff(&again) < 1e-6);
    let direct: Vec<f32> = (0..4).map(|k| (1..5).map(|r| t.data()[r * 4 + k]).sum::<f32>() / 4.0).collect();
    assert!(pooled.max_abs_diff(&Tensor::from_vec(direct)) < 1e-6);
}
