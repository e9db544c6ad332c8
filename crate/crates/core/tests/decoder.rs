use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recdet::decoder::{
    decode_stage, dynamic_conv, run_decoder, sample_stage_roi, BottleneckNorm, Checkpoint, Decoder, DecoderConfig,
    ProposalInit, Sharing, StageWeights,
};
use recdet::nn::ParamBuilder;
use recdet::numerics::{Graph, Params, Tensor, Var};
use recdet::pipeline::{FeaturePyramid, PyramidLevel, MAX_LEVEL, MIN_LEVEL};
use recdet::posenc::{modulate_with_centerness, CenternessVariant, ROI_CELLS};

fn tiny() -> DecoderConfig {
    DecoderConfig {
        c: 8,
        d: 2,
        n_stages: 6,
        n_heads: 2,
        ffn_dim: 16,
        num_classes: 2,
        num_proposals: 3,
        ..DecoderConfig::desk()
    }
}

fn build(cfg: &DecoderConfig, seed: u64) -> (Decoder, Params<f64>) {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = Decoder::build(&mut ParamBuilder::new(&mut params, &mut rng), cfg).unwrap();
    (dec, params)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn pyramid<'g>(g: &'g Graph<f64>, c: usize, seed: u64) -> FeaturePyramid<'g, f64> {
    let size = 64;
    FeaturePyramid {
        levels: (MIN_LEVEL..=MAX_LEVEL)
            .map(|l| PyramidLevel {
                features: g.input(random(&[size >> l, size >> l, c], seed + l as u64)),
                level: l,
            })
            .collect(),
        image_height: size,
        image_width: size,
    }
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b);
    assert!(diff <= tol, "max abs diff {diff}");
}

#[test]
fn dyn_parameter_counts_at_full_scale() {
    let cfg = DecoderConfig::paper_scale();
    let (c, d) = (cfg.c, cfg.d);
    assert_eq!(c * 2 * c * d + 2 * c * d, 8_421_376);
    assert_eq!(49 * c * c + c, 3_211_520);
}

#[test]
fn dyn_at_origin_is_bias() {
    let cfg = tiny();
    let (dec, params) = build(&cfg, 1);
    let w = &dec.stages[0];
    let mut params = params;
    let bias = random(&[2 * cfg.c * cfg.d], 5);
    params.set(w.dyn_layer.bias.unwrap(), bias.clone()).unwrap();
    let g = Graph::new();
    let (k, v) = w.dyn_kernels(&g, &params, g.constant(Tensor::zeros(&[1, cfg.c])));
    let cd = cfg.c * cfg.d;
    assert_eq!(k.shape(), [1, cfg.c, cfg.d]);
    assert_eq!(v.shape(), [1, cfg.d, cfg.c]);
    assert_eq!(k.value().data(), &bias.data()[..cd]);
    assert_eq!(v.value().data(), &bias.data()[cd..]);
}

#[test]
fn identical_features_identical_kernels() {
    let cfg = tiny();
    let (dec, params) = build(&cfg, 2);
    let g = Graph::new();
    let row = random(&[1, cfg.c], 3);
    let q = g.constant(Tensor::new(&[2, cfg.c], [row.data(), row.data()].concat()).unwrap());
    let (k, _) = dec.stages[0].dyn_kernels(&g, &params, q);
    let k = k.value();
    let half = cfg.c * cfg.d;
    assert_eq!(&k.data()[..half], &k.data()[half..]);
}

#[test]
fn bare_bottleneck_gives_row_sums() {
    // d = 1, all-ones kernels, no normalization: every output channel is the
    // sum of the input row.
    let g = Graph::<f64>::new();
    let params = Params::new();
    let f = Tensor::from_f64(&[1, 4, 2], &[1.0, 2.0, 0.5, 0.25, 3.0, -1.0, 0.0, 4.0]).unwrap();
    let out = dynamic_conv(
        &g,
        &params,
        g.constant(f),
        g.constant(Tensor::ones(&[1, 2, 1])),
        g.constant(Tensor::ones(&[1, 1, 2])),
        None,
        None,
        BottleneckNorm::Identity,
    )
    .value();
    assert_eq!(out.data(), &[3.0, 3.0, 0.75, 0.75, 2.0, 2.0, 4.0, 4.0]);
}

#[test]
fn zero_mask_gives_image_of_zero() {
    let cfg = tiny();
    let (dec, params) = build(&cfg, 4);
    let w = &dec.stages[0];
    let g = Graph::new();
    let (k, v) = w.dyn_kernels(&g, &params, g.constant(random(&[2, cfg.c], 6)));
    let f = g.constant(random(&[2, ROI_CELLS, cfg.c], 7));
    let zero_mask = g.constant(Tensor::zeros(&[2, ROI_CELLS]));
    let masked = dynamic_conv(&g, &params, f, k, v, None, Some(zero_mask), w.conv_norm).value();
    let zero_f = g.constant(Tensor::zeros(&[2, ROI_CELLS, cfg.c]));
    let reference = dynamic_conv(&g, &params, zero_f, k, v, None, None, w.conv_norm).value();
    assert_eq!(masked, reference);
}

#[test]
fn factored_conv_matches_concatenated_form() {
    let (c, d) = (8, 3);
    let g = Graph::<f64>::new();
    let params = Params::new();
    let f = g.constant(random(&[1, ROI_CELLS, c], 10));
    let k = g.constant(random(&[1, c, d], 11));
    let v = g.constant(random(&[1, d, c], 12));
    let pf = g.constant(random(&[1, ROI_CELLS, c], 13));
    let pk = g.constant(random(&[1, c], 14));
    let m = g.constant(Tensor::uniform(&[1, ROI_CELLS], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(15)));
    let fast = dynamic_conv(&g, &params, f, k, v, Some((pf, pk)), Some(m), BottleneckNorm::Identity).value();

    // Explicit construction: [m·f, p_f] against m·[k; diag(p_k) k], one cell at a time.
    let f2 = f.reshape(&[ROI_CELLS, c]);
    let k2 = k.reshape(&[c, d]);
    let k_pos = pk.reshape(&[c, 1]) * k2;
    let k_ext = g.concat(&[k2, k_pos], 0);
    let (fm, _) = modulate_with_centerness(f2, k2, m);
    let x_cat = g.concat(&[fm, pf.reshape(&[ROI_CELLS, c])], 1);
    let (_, k_e) = modulate_with_centerness(g.concat(&[f2, f2], 1), k_ext, m);
    let h = x_cat.reshape(&[ROI_CELLS, 1, 2 * c]).bmm(k_e).reshape(&[ROI_CELLS, d]);
    let slow = h.relu().matmul(v.reshape(&[d, c])).relu().reshape(&[1, ROI_CELLS, c]).value();
    assert_close(&fast, &slow, 1e-12);
}

#[test]
fn conv_output_shape_is_fixed() {
    for (pe, centerness) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = DecoderConfig {
            use_box_pe: pe,
            use_centerness: centerness,
            ..tiny()
        };
        let (dec, params) = build(&cfg, 5);
        let g = Graph::new();
        let pyr = pyramid(&g, cfg.c, 20);
        let out = dec.run(&g, &params, &pyr, 1).unwrap();
        assert_eq!(out[0].features.shape(), [cfg.num_proposals, cfg.c]);
        assert_eq!(out[0].logits.shape(), [cfg.num_proposals, cfg.num_classes]);
        assert_eq!(out[0].boxes.shape(), [cfg.num_proposals, 4]);
    }
}

#[test]
fn zero_out_layer_is_residual_identity() {
    let cfg = tiny();
    let (dec, mut params) = build(&cfg, 6);
    let w = &dec.stages[0];
    let wt = w.out_layer.weight;
    params.set(wt, Tensor::zeros(params.get(wt).shape())).unwrap();
    params.set(w.out_layer.bias.unwrap(), Tensor::zeros(&[cfg.c])).unwrap();
    let g = Graph::new();
    let q = random(&[2, cfg.c], 8);
    let o = w.out(&g, &params, g.constant(random(&[2, ROI_CELLS, cfg.c], 9)), g.constant(q.clone()));
    assert_eq!(o.value(), q);
}

#[test]
fn single_token_attention() {
    let cfg = tiny();
    let (dec, params) = build(&cfg, 7);
    let w = &dec.stages[0];
    let g = Graph::new();
    let q = g.constant(random(&[1, cfg.c], 1));
    let pe = g.constant(random(&[1, cfg.c], 2));
    let got = w.self_attention_with_pe(&g, &params, q, Some(pe)).value();
    let sa = &w.self_attn;
    let value_path = sa.proj.forward(&g, &params, sa.value.forward(&g, &params, q));
    let want = w.attn_norm.forward(&g, &params, q + value_path).value();
    assert_close(&got, &want, 1e-12);
}

#[test]
fn attention_is_permutation_equivariant() {
    let cfg = tiny();
    let (dec, params) = build(&cfg, 8);
    let w = &dec.stages[0];
    let g = Graph::new();
    let q = random(&[4, cfg.c], 3);
    let pe = random(&[4, cfg.c], 4);
    let perm = [2, 0, 3, 1];
    let out = w.self_attention_with_pe(&g, &params, g.constant(q.clone()), Some(g.constant(pe.clone())));
    let qp = g.constant(q).index_select(&perm);
    let pp = g.constant(pe).index_select(&perm);
    let permuted = w.self_attention_with_pe(&g, &params, qp, Some(pp)).value();
    assert_close(&out.index_select(&perm).value(), &permuted, 1e-12);
}

#[test]
fn pe_shift_invariance_needs_query_side_cancellation() {
    // Shifting every PE by δ adds (δW_q)·k_j to the logits, which varies per
    // key; the shift is invisible only when δW_q = 0.
    let cfg = tiny();
    let (dec, mut params) = build(&cfg, 9);
    let w = dec.stages[0].clone();
    let g = Graph::new();
    let q = g.constant(random(&[4, cfg.c], 5));
    let pe = random(&[4, cfg.c], 6);
    let mut delta = Tensor::zeros(&[1, cfg.c]);
    delta.set(&[0, 0], 1.5);
    let shifted = g.constant(pe.clone()) + g.constant(delta);
    let base = w.self_attention_with_pe(&g, &params, q, Some(g.constant(pe.clone()))).value();
    let moved = w.self_attention_with_pe(&g, &params, q, Some(shifted)).value();
    assert!(base.max_abs_diff(&moved) > 1e-6);

    let wq = w.self_attn.query.weight;
    let mut m = params.get(wq).clone();
    for j in 0..cfg.c {
        m.set(&[0, j], 0.0);
    }
    params.set(wq, m).unwrap();
    let g = Graph::new();
    let q = g.constant(random(&[4, cfg.c], 5));
    let base = w.self_attention_with_pe(&g, &params, q, Some(g.constant(pe.clone()))).value();
    let mut delta = Tensor::zeros(&[1, cfg.c]);
    delta.set(&[0, 0], 1.5);
    let shifted = g.constant(pe) + g.constant(delta);
    let moved = w.self_attention_with_pe(&g, &params, q, Some(shifted)).value();
    assert_close(&base, &moved, 1e-12);
}

#[test]
fn in_stage_recursion_repeats_dyn_and_out() {
    let one = DecoderConfig {
        use_box_pe: true,
        use_centerness: true,
        ..tiny()
    };
    let two = DecoderConfig {
        in_stage_depth: 2,
        ..one.clone()
    };
    let (dec, params) = build(&one, 10);
    let (dec2, params2) = build(&two, 10);
    assert_eq!(params.num_scalars(), params2.num_scalars());
    assert_eq!(dec.stages, dec2.stages);
    assert_eq!(params, params2);

    let trace = |cfg: &DecoderConfig| {
        let g = Graph::new();
        let pyr = pyramid(&g, cfg.c, 30);
        let q = g.param(&params, dec.proposals);
        let boxes = g.constant(dec.initial_boxes());
        run_decoder(&g, &params, cfg, |_| &dec.stages[0], q, boxes, &pyr, 1);
        g.trace()
    };
    let t1 = trace(&one);
    let t2 = trace(&two);

    // One extra pass: Dyn, kernel PE, mask, dynamic conv, Out and its norm.
    let g = Graph::new();
    let w = &dec.stages[0];
    let o = g.input(random(&[one.num_proposals, one.c], 1));
    let boxes = g.constant(dec.initial_boxes());
    let pyr = pyramid(&g, one.c, 30);
    let roi = sample_stage_roi(&one, &pyr, boxes);
    let start = g.trace().len();
    let (k, v) = w.dyn_kernels(&g, &params, o);
    let pk = recdet::posenc::kernel_pe(&g, &params, w.geometry.as_ref().unwrap(), o, boxes);
    let m = w.centerness.as_ref().unwrap().mask(&g, &params, one.num_proposals, Some(o));
    let f = dynamic_conv(&g, &params, roi.features, k, v, Some((roi.element_pe.unwrap(), pk)), Some(m), w.conv_norm);
    w.out_norm.forward(&g, &params, w.out(&g, &params, f, o));
    let pass = g.trace()[start..].to_vec();
    assert_eq!(t2.len(), t1.len() + pass.len());
    let dyn_uses = |t: &[&str]| t.iter().filter(|op| **op == "matmul").count();
    assert_eq!(dyn_uses(&t2) - dyn_uses(&t1), dyn_uses(&pass));
}

#[test]
fn shared_weights_are_deterministic() {
    let cfg = DecoderConfig {
        use_box_pe: true,
        use_centerness: true,
        ..tiny()
    };
    let (dec, params) = build(&cfg, 11);
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 40);
    let q = g.param(&params, dec.proposals);
    let boxes = g.constant(dec.initial_boxes());
    let roi = sample_stage_roi(&cfg, &pyr, boxes);
    let a = decode_stage(&g, &params, &dec.stages[0], &cfg, q, boxes, roi);
    let b = decode_stage(&g, &params, &dec.stages[0], &cfg, q, boxes, roi);
    assert_eq!(a.features.value(), b.features.value());
    assert_eq!(a.boxes.value(), b.boxes.value());
    assert_eq!(a.logits.value(), b.logits.value());
}

#[test]
fn sharing_policies_set_unique_weight_counts() {
    for (sharing, unique) in [(Sharing::SharedAll, 1), (Sharing::FirstIndependent, 2), (Sharing::Cascade, 6)] {
        let cfg = DecoderConfig { sharing, ..tiny() };
        let (dec, params) = build(&cfg, 12);
        assert_eq!(dec.stages.len(), unique);
        let per_stage = params.num_scalars_with_prefix("decoder.stage0.");
        assert_eq!(params.num_scalars_with_prefix("decoder.stage"), unique * per_stage);
    }
}

#[test]
fn policy_mismatch_is_rejected() {
    let cfg = DecoderConfig {
        sharing: Sharing::FirstIndependent,
        ..tiny()
    };
    let (mut dec, params) = build(&cfg, 13);
    dec.stages.pop();
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 1);
    assert!(dec.run(&g, &params, &pyr, 6).is_err());
}

#[test]
fn truncated_inference_is_a_prefix() {
    let cfg = DecoderConfig {
        sharing: Sharing::SharedAll,
        use_box_pe: true,
        use_centerness: true,
        ..tiny()
    };
    let (dec, params) = build(&cfg, 14);
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 50);
    let full = dec.run(&g, &params, &pyr, 6).unwrap();
    assert_eq!(full.len(), 6);
    for k in 1..=6 {
        let part = dec.run(&g, &params, &pyr, k).unwrap();
        assert_eq!(part.len(), k);
        for (a, b) in part.iter().zip(&full) {
            assert_eq!(a.boxes.value(), b.boxes.value());
            assert_eq!(a.logits.value(), b.logits.value());
        }
    }
    assert!(dec.run(&g, &params, &pyr, 7).is_err());
}

#[test]
fn single_stage_run_equals_one_stage_call() {
    let cfg = DecoderConfig { n_stages: 1, ..tiny() };
    let (dec, params) = build(&cfg, 15);
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 60);
    let run = dec.run(&g, &params, &pyr, 1).unwrap();
    let q = g.param(&params, dec.proposals);
    let boxes = g.constant(dec.initial_boxes());
    let direct = decode_stage(&g, &params, &dec.stages[0], &cfg, q, boxes, sample_stage_roi(&cfg, &pyr, boxes));
    assert_eq!(run[0].logits.value(), direct.logits.value());
    assert_eq!(run[0].boxes.value(), direct.boxes.value());
}

fn permuted_run(cfg: &DecoderConfig, perm: Option<&[usize]>) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    let (dec, mut params) = build(cfg, 16);
    if let Some(perm) = perm {
        let g = Graph::new();
        let shuffled = g.param(&params, dec.proposals).index_select(perm).value();
        params.set(dec.proposals, shuffled).unwrap();
    }
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 70);
    dec.run(&g, &params, &pyr, cfg.n_stages)
        .unwrap()
        .iter()
        .map(|o| (o.logits.value(), o.boxes.value()))
        .collect()
}

#[test]
fn decoder_is_permutation_equivariant() {
    let cfg = DecoderConfig {
        num_proposals: 4,
        use_box_pe: true,
        use_centerness: true,
        centerness_variant: CenternessVariant::Adjust,
        in_stage_depth: 2,
        proposal_init: ProposalInit::FullImage,
        ..tiny()
    };
    let perm = [3, 1, 0, 2];
    let base = permuted_run(&cfg, None);
    let shuffled = permuted_run(&cfg, Some(&perm));
    let g = Graph::new();
    for ((bl, bb), (sl, sb)) in base.iter().zip(&shuffled) {
        assert_close(&g.constant(bl.clone()).index_select(&perm).value(), sl, 1e-10);
        assert_close(&g.constant(bb.clone()).index_select(&perm).value(), sb, 1e-10);
    }
}

fn box_gradient_norm(detach: bool, box_pe: bool) -> f64 {
    let cfg = DecoderConfig {
        detach_boxes: detach,
        use_box_pe: box_pe,
        ..tiny()
    };
    let (dec, params) = build(&cfg, 17);
    let g = Graph::new();
    let pyr = pyramid(&g, cfg.c, 80);
    let q = g.param(&params, dec.proposals);
    let init = Tensor::from_f64(&[3, 4], &[0.5, 0.5, 0.8, 0.8, 0.4, 0.6, 0.5, 0.3, 0.6, 0.4, 0.3, 0.5]).unwrap();
    let boxes: Var<f64> = g.input(init);
    let out = run_decoder(&g, &params, &cfg, |t| dec.stage_weights(t), q, boxes, &pyr, 6);
    assert_eq!(out.len(), 6);
    let loss = out[5].boxes.sum() + out[5].logits.sum();
    let grads = g.backward(loss);
    let gb = grads.wrt(boxes).cloned().unwrap_or_else(|| Tensor::zeros(&[3, 4]));
    assert!(gb.all_finite());
    gb.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn gradient_reaches_first_stage_boxes_without_detachment() {
    assert!(box_gradient_norm(false, false) > 0.0);
    assert!(box_gradient_norm(false, true) > 0.0);
    // With detachment and no box PE nothing downstream depends on the input boxes differentiably.
    assert_eq!(box_gradient_norm(true, false), 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = DecoderConfig {
        use_box_pe: true,
        use_centerness: true,
        centerness_variant: CenternessVariant::Learnable,
        ..tiny()
    };
    let (_, params) = build(&cfg, 18);
    let extra = vec![("adam.step".to_string(), Tensor::scalar(3.0))];
    let ckpt = Checkpoint::from_params(&params, extra, 18, "cascade", 7, serde_json::to_value(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let bytes = std::fs::read(&path).unwrap();
    let mut again = Vec::new();
    loaded.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(&bytes[..8], b"RDETCKPT");

    let (_, mut fresh) = build(&cfg, 99);
    loaded.restore_params(&mut fresh).unwrap();
    for ((_, _, a), (_, _, b)) in fresh.iter().zip(params.iter()) {
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert!(Checkpoint::<f32>::load(&path).is_err());
    std::fs::write(&path, &bytes[1..]).unwrap();
    assert!(Checkpoint::<f64>::load(&path).is_err());
}

#[test]
fn stage_weights_count_matches_store() {
    let cfg = DecoderConfig {
        use_box_pe: true,
        use_centerness: true,
        centerness_variant: CenternessVariant::Adjust,
        ..tiny()
    };
    let mut params = Params::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = StageWeights::build(&mut ParamBuilder::new(&mut params, &mut rng), &cfg);
    assert_eq!(w.num_params(), params.num_scalars());
}
