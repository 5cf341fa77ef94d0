use hires_core::cvfm::{FusionMode, ResizeMethod};
use hires_core::encoder::*;
use hires_core::gradcheck::noise_image;
use hires_core::image::{ImageBuffer, Normalization};
use hires_core::vit::build_vit;
use hires_core::Error;
use hires_tensor::{Graph, Var};
use proptest::prelude::*;

#[test]
fn desk_encode_shape() {
    let enc = HybridEncoder::new(EncoderConfig::desk()).unwrap();
    let p = enc.init_params(1).unwrap();
    let img = noise_image(96, 96, 1, enc.config()).unwrap();
    let t = enc.encode(&img, &p).unwrap();
    assert_eq!(t.shape(), [5, 36, 64]);
    assert_eq!(t.plan.view_count, 5);
    assert_eq!(t.to_tensor().dims(), &[5, 36, 64]);
    assert_eq!(enc.encode(&img, &p).unwrap(), t);
}

#[test]
fn ds_equals_plain_vit_forward() {
    let cfg = make_variant(&EncoderConfig::desk(), "ds").unwrap();
    let enc = HybridEncoder::new(cfg.clone()).unwrap();
    let p = enc.init_params(3).unwrap();
    assert!(p.names().all(|n| n.starts_with("vit.")));
    let img = noise_image(96, 70, 2, &cfg).unwrap();
    let tokens = enc.encode(&img, &p).unwrap();

    let (vit, vp) = build_vit(cfg.vit.clone(), 3).unwrap();
    assert_eq!(vp, p);
    let views = hires_core::planner::apply_plan(&img, &tokens.plan).unwrap();
    let mut g = Graph::no_grad();
    let b = g.bind(&vp);
    let vs: Vec<Var> = views
        .views()
        .into_iter()
        .map(|v| g.constant(v.clone()))
        .collect();
    let out = vit.forward(&mut g, &b, &vs).unwrap();
    for (h, t) in out.iter().zip(&tokens.views) {
        let spatial = g.narrow(h.hidden, 0, 1, 36).unwrap();
        assert_eq!(g.value(spatial), t);
    }
}

#[test]
fn zero_gate_matches_ds_for_representative_variants() {
    let base = EncoderConfig::tiny();
    let ds = HybridEncoder::new(make_variant(&base, "ds").unwrap()).unwrap();
    let img = noise_image(32, 32, 9, &base).unwrap();
    let want = ds.encode(&img, &ds.init_params(4).unwrap()).unwrap();
    for id in [
        "multi_channel",
        "last_layer_add",
        "pyramid_global_ca_conv",
        "multi_6",
        "multi_local_ca_conv",
    ] {
        let enc = HybridEncoder::new(make_variant(&base, id).unwrap()).unwrap();
        let got = enc.encode(&img, &enc.init_params(4).unwrap()).unwrap();
        assert_eq!(got, want, "{id}");
    }
}

#[test]
fn nonzero_gate_changes_tokens() {
    let mut cfg = EncoderConfig::tiny();
    cfg.fusion.gate_init = 0.5;
    let enc = HybridEncoder::new(cfg.clone()).unwrap();
    let ds = HybridEncoder::new(make_variant(&cfg, "ds").unwrap()).unwrap();
    let img = noise_image(32, 32, 9, &cfg).unwrap();
    let a = enc.encode(&img, &enc.init_params(4).unwrap()).unwrap();
    let b = ds.encode(&img, &ds.init_params(4).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn ablation_matrix_enumeration() {
    let ids = ablation_matrix();
    assert_eq!(ids.len(), 23);
    assert_eq!(ids[0], "ds");
    assert!(ids.contains(&"last_layer_global_ca".to_string()));
    assert!(!ids
        .iter()
        .any(|i| i.starts_with("last_layer") && i.ends_with("_conv")));
    let base = EncoderConfig::desk();
    for id in &ids {
        let c = make_variant(&base, id).unwrap();
        c.validate().unwrap();
    }
}

#[test]
fn variant_configs_realise_their_rows() {
    let base = EncoderConfig::desk();
    let ds = make_variant(&base, "ds").unwrap();
    assert!(!ds.fusion.enabled);

    let last = make_variant(&base, "last_layer_channel").unwrap();
    assert_eq!(last.fusion.interaction_layers, vec![8]);
    assert_eq!(last.fusion.stages, vec![4]);

    let m2 = make_variant(&base, "multi_2").unwrap();
    assert_eq!(m2.fusion.interaction_layers, vec![1, 6]);
    assert_eq!(m2.fusion.stages, vec![1, 4]);

    let m6 = make_variant(&base, "multi_6").unwrap();
    assert_eq!(m6.fusion.interaction_layers, vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(m6.fusion.stages, vec![1, 2, 2, 3, 3, 4]);
    let p6 = make_variant(&EncoderConfig::full(), "multi_6").unwrap();
    assert_eq!(p6.fusion.interaction_layers, vec![2, 6, 9, 12, 16, 20]);

    let pyr = make_variant(&base, "pyramid").unwrap();
    assert_eq!(pyr.fusion.structure, Structure::Pyramid);
    assert_eq!(pyr.fusion.interactions().len(), 4);
    assert_eq!(pyr.fusion.mode, FusionMode::Channel);

    let conv = make_variant(&base, "multi_local_ca_conv").unwrap();
    assert_eq!(conv.fusion.resize_method, ResizeMethod::Conv);
    assert_eq!(conv.fusion.mode, FusionMode::LocalCa);
    assert_eq!(
        make_variant(&base, "multi_4").unwrap(),
        make_variant(&base, "multi_channel").unwrap()
    );
}

#[test]
fn bad_variant_ids_are_usage_errors() {
    let base = EncoderConfig::desk();
    for id in [
        "multi_concat",
        "last_layer_add_conv",
        "",
        "pyramid_",
        "ds_conv",
    ] {
        assert!(
            matches!(make_variant(&base, id), Err(Error::Usage(_))),
            "{id}"
        );
    }
    let mut crowded = base.clone();
    crowded.vit.interaction_layers = vec![1, 2, 3, 4];
    assert!(matches!(
        make_variant(&crowded, "multi_6"),
        Err(Error::Usage(_))
    ));
}

#[test]
fn partition_laws() {
    for id in ablation_matrix() {
        let enc = HybridEncoder::new(make_variant(&EncoderConfig::tiny(), &id).unwrap()).unwrap();
        let p = enc.init_params(0).unwrap();
        let pre = parameter_partition(&p, TrainStage::Pretrain);
        let fine = parameter_partition(&p, TrainStage::Finetune);
        assert!(fine.frozen.is_empty());
        assert_eq!(fine.trainable.len(), p.len());
        assert_eq!(pre.trainable.len() + pre.frozen.len(), p.len());
        assert!(pre.trainable.iter().all(|n| !pre.frozen.contains(n)));
        assert!(
            pre.frozen
                .iter()
                .all(|n| n.starts_with("vit.") || n.starts_with("conv.")),
            "{id}"
        );
        assert!(pre.trainable.iter().all(|n| n.starts_with("cvfm.")), "{id}");
        assert_eq!(pre.trainable.is_empty(), id == "ds");
    }
}

#[test]
fn full_scale_dry_run_shapes() {
    let enc = HybridEncoder::new(EncoderConfig::full()).unwrap();
    let r = enc.dry_run(672, 672).unwrap();
    assert_eq!(r.views, 5);
    assert_eq!(r.tokens_per_view, 576);
    assert_eq!(r.embed_dim, 1024);
    assert_eq!(r.conv_input, [3, 1536, 1536]);
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = EncoderConfig::full();
    let back = EncoderConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(cfg.hash(), EncoderConfig::desk().hash());
    assert_eq!(cfg.hash().len(), 16);

    let minimal = EncoderConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
    assert_eq!(minimal, EncoderConfig::desk());
    let partial =
        EncoderConfig::from_json(r#"{"fusion": {"mode": "add", "gate_init": 0.25}}"#).unwrap();
    assert_eq!(partial.fusion.mode, FusionMode::Add);
    assert_eq!(partial.fusion.gate_init, 0.25);
    assert_eq!(partial.fusion.stages, vec![1, 2, 3, 4]);

    assert!(matches!(
        EncoderConfig::from_json(r#"{"schema_version": 2}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        EncoderConfig::from_json(r#"{"fusoin": {}}"#),
        Err(Error::Json(_))
    ));
    assert!(matches!(
        EncoderConfig::from_json(r#"{"fusion": {"stages": [1, 2]}}"#),
        Err(Error::Config(_))
    ));
}

#[test]
fn inconsistent_geometry_is_rejected() {
    let mut cfg = EncoderConfig::desk();
    cfg.planner.tile_size = 96;
    cfg.planner.candidates = vec![[96, 96]];
    assert!(matches!(HybridEncoder::new(cfg), Err(Error::Config(_))));
}

#[test]
fn force_single_tile_uses_one_tile() {
    let mut cfg = EncoderConfig::desk();
    cfg.force_single_tile = true;
    let enc = HybridEncoder::new(cfg).unwrap();
    let p = enc.init_params(0).unwrap();
    let img = ImageBuffer::constant(120, 80, [0.2, 0.4, 0.6], Normalization::default()).unwrap();
    let t = enc.encode(&img, &p).unwrap();
    assert_eq!(t.shape(), [2, 36, 64]);
    assert_eq!(t.plan.highres_dims, (192, 192));
}

// Cross-tile flow with fusion on and off, measured on a pixel of tile 1 and a
// token of tile 0.
#[test]
fn fusion_opens_cross_tile_flow() {
    let mut cfg = EncoderConfig::tiny();
    cfg.fusion.gate_init = 0.5;
    let img = noise_image(32, 32, 3, &cfg).unwrap();
    for (id, expect_flow) in [
        ("ds", false),
        ("multi_channel", true),
        ("multi_global_ca", true),
    ] {
        let enc = HybridEncoder::new(make_variant(&cfg, id).unwrap()).unwrap();
        let p = enc.init_params(2).unwrap();
        let base = enc.encode(&img, &p).unwrap();
        let mut moved = img.clone();
        let i = moved.index(0, 3, 20);
        moved.pixels_mut().data_mut()[i] += 0.5;
        let after = enc.encode(&moved, &p).unwrap();
        assert_eq!(base.views[1] != after.views[1], expect_flow, "{id}");
        assert_ne!(base.views[2], after.views[2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn variants_share_token_shape(w in 8usize..80, h in 8usize..80, pick in 0usize..23) {
        let id = &ablation_matrix()[pick];
        let enc = HybridEncoder::new(make_variant(&EncoderConfig::tiny(), id).unwrap()).unwrap();
        let img = noise_image(w, h, 1, enc.config()).unwrap();
        let t = enc.encode(&img, &enc.init_params(1).unwrap()).unwrap();
        let plan = enc.plan(w, h).unwrap();
        prop_assert_eq!(t.shape(), [plan.view_count, 4, 8]);
    }
}
