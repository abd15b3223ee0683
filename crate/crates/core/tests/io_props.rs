use s2mlp::analysis::{count_flops, count_params};
use s2mlp::archive::{load_weights, save_weights, WeightArchive};
use s2mlp::configfile::{parse_config, to_config_string};
use s2mlp::model::{init_weights, zero_weights};
use s2mlp::{Error, FusionMode, Preset, Tensor};

#[test]
fn saved_archive_reloads_bit_exactly_and_resaves_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.s2v2");
    let mut w = init_weights(&Preset::Tiny.config(), 5).unwrap();
    // Values that only survive a bit-exact round trip.
    w.insert("extra/specials", Tensor::new([4], vec![-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, 1e-45]).unwrap())
        .unwrap();
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.names().collect::<Vec<_>>(), w.names().collect::<Vec<_>>());
    for ((_, a), (_, b)) in w.iter().zip(back.iter()) {
        assert_eq!(a.dims(), b.dims());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let again = dir.path().join("again.s2v2");
    save_weights(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn truncated_file_reports_expected_and_found_bytes() {
    let w = init_weights(&Preset::Tiny.config(), 0).unwrap();
    let bytes = w.to_bytes();
    let err = WeightArchive::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }));
    assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
}

#[test]
fn missing_file_names_the_path() {
    let err = load_weights("/nonexistent/dir/w.s2v2").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/w.s2v2"));
}

#[test]
fn parameter_count_equals_serialized_scalars() {
    for p in Preset::ALL {
        let cfg = p.config();
        let w = zero_weights(&cfg).unwrap();
        assert_eq!(w.scalar_count() as u64, count_params(&cfg).unwrap().total_params, "{p}");
    }
    let mut ablation = Preset::Tiny.config();
    ablation.fusion_mode = FusionMode::SumPooling;
    ablation.active_branches = vec![2, 3];
    let w = zero_weights(&ablation).unwrap();
    assert_eq!(w.scalar_count() as u64, count_params(&ablation).unwrap().total_params);
}

#[test]
fn per_token_flops_scale_quadratically_with_side() {
    let cfg = Preset::Small7.config();
    let at = |s| count_flops(&cfg, (s, s)).unwrap();
    let (small, large) = (at(224), at(448));
    // Layers evaluated once per image (split-attention MLPs and the classifier)
    // do not scale; everything else scales by exactly 4.
    let per_image = |r: &s2mlp::analysis::CostReport| {
        r.per_layer
            .iter()
            .filter(|l| l.name.contains("/sa/") || l.name == "head/fc")
            .map(|l| l.flops)
            .sum::<u64>()
    };
    assert_eq!(per_image(&small), per_image(&large));
    assert_eq!(large.total_flops - per_image(&large), 4 * (small.total_flops - per_image(&small)));
    assert!((per_image(&small) as f64) < 1e-3 * small.total_flops as f64);
    let ratio = large.total_flops as f64 / small.total_flops as f64;
    assert!((ratio - 4.0).abs() < 3e-3, "{ratio}");
}

#[test]
fn every_preset_round_trips_through_the_config_format() {
    for p in Preset::ALL {
        let cfg = p.config();
        assert_eq!(parse_config(&to_config_string(&cfg)).unwrap(), cfg);
    }
}
