use hires_core::cvfm::FusionMode;
use hires_core::encoder::{make_variant, EncoderConfig};
use hires_core::gradcheck::{fusion_gradcheck, noise_image, GradcheckOptions};

fn check(id: &str, opts: GradcheckOptions) -> hires_tensor::GradCheckReport {
    let cfg = make_variant(&EncoderConfig::tiny(), id).unwrap();
    let img = noise_image(32, 32, 4, &cfg).unwrap();
    fusion_gradcheck(&cfg, &img, opts).unwrap()
}

#[test]
fn fusion_gradients_match_finite_differences_for_every_mode() {
    for mode in FusionMode::ALL {
        let id = format!("multi_{}", mode.as_str());
        let r = check(&id, GradcheckOptions::default());
        assert!(r.passed(), "{id}: {:?}", r.worst_failure());
        assert!(r.params.iter().any(|p| p.name.ends_with("alpha")));
        assert_eq!(
            r.params
                .iter()
                .filter(|p| p.name.ends_with("alpha"))
                .count(),
            4
        );
    }
}

#[test]
fn resize_conv_and_pyramid_gradients_match() {
    for id in ["pyramid_channel_conv", "multi_add_conv"] {
        let r = check(id, GradcheckOptions::default());
        assert!(r.passed(), "{id}: {:?}", r.worst_failure());
        assert!(r.params.iter().any(|p| p.name.contains("resize")), "{id}");
    }
}

#[test]
fn zero_gate_gradients_match_too() {
    let r = check(
        "multi_channel",
        GradcheckOptions {
            gate: 0.0,
            ..Default::default()
        },
    );
    assert!(r.passed(), "{:?}", r.worst_failure());
}

#[test]
fn corrupted_gradient_is_caught() {
    let r = check(
        "multi_channel",
        GradcheckOptions {
            corrupt: true,
            ..Default::default()
        },
    );
    assert!(!r.passed());
    assert!(r.worst_failure().is_some());
}

#[test]
fn disabled_fusion_is_rejected() {
    let cfg = make_variant(&EncoderConfig::tiny(), "ds").unwrap();
    let img = noise_image(32, 32, 4, &cfg).unwrap();
    assert!(fusion_gradcheck(&cfg, &img, GradcheckOptions::default()).is_err());
}

// Desk width is too large for every coordinate; a seeded sample of each
// parameter tensor keeps the same tolerances.
#[test]
fn desk_sampled_coordinates_match() {
    let cfg = EncoderConfig::desk();
    let img = noise_image(48, 96, 4, &cfg).unwrap();
    let opts = GradcheckOptions {
        coords_per_param: Some(2),
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let r = fusion_gradcheck(&make_variant(&cfg, "multi_global_ca").unwrap(), &img, opts).unwrap();
    eprintln!("{} params in {:?}", r.params.len(), t.elapsed());
    assert!(r.passed(), "{:?}", r.worst_failure());
    assert!(r.params.iter().all(|p| p.name.starts_with("cvfm.")));
}
