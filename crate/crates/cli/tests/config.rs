use gxssl_cli::config::{parse_config, parse_config_str, ExperimentConfig};
use gxssl_core::ssl::EncoderKind;

#[test]
fn empty_object_gives_published_defaults() {
    let c = parse_config_str("{}").unwrap();
    assert_eq!(c.hyper.epochs, 80);
    assert_eq!(c.hyper.batch_size, 256);
    assert_eq!(c.hyper.learning_rate, 0.03);
    assert_eq!(c.hyper.momentum, 0.9);
    assert_eq!(c.hyper.weight_decay, 0.0004);
    assert_eq!(c.hyper.tau, 0.996);
    assert_eq!(c.mlp.hidden_size, 4096);
    assert_eq!(c.mlp.output_size, 256);
    assert_eq!(c.augment.view_size, 128);
    assert_eq!(c.sigma, 0.5);
    assert_eq!(c.encoder.kind, EncoderKind::Resnet50);
    assert_eq!(c.encoder.feature_dim, Some(2048));
    assert_eq!((c.tiling.patch_size, c.tiling.stride), (299, 50));
    assert_eq!((c.tiling.outside_max_fraction, c.tiling.inside_min_fraction), (0.01, 0.85));
}

#[test]
fn tau_out_of_range_is_rejected() {
    let e = parse_config_str(r#"{"hyper": {"tau": 2.0}}"#).unwrap_err();
    assert!(format!("{e:#}").contains("tau"), "{e:#}");
}

#[test]
fn unknown_key_is_named() {
    let e = parse_config_str(r#"{"hyperr": {}}"#).unwrap_err();
    assert!(format!("{e:#}").contains("hyperr"), "{e:#}");
    let e = parse_config_str(r#"{"hyper": {"epochz": 3}}"#).unwrap_err();
    assert!(format!("{e:#}").contains("epochz"), "{e:#}");
}

#[test]
fn type_mismatch_names_key_and_type() {
    let e = format!("{:#}", parse_config_str(r#"{"hyper": {"epochs": "ten"}}"#).unwrap_err());
    assert!(e.contains("hyper.epochs"), "{e}");
    assert!(e.contains("expected usize"), "{e}");
}

#[test]
fn partial_blocks_keep_other_defaults() {
    let c = parse_config_str(r#"{"hyper": {"epochs": 3}, "augment": {"view_size": 32}}"#).unwrap();
    assert_eq!(c.hyper.epochs, 3);
    assert_eq!(c.hyper.tau, 0.996);
    assert_eq!(c.augment.view_size, 32);
    assert_eq!(c.augment.crop_scale_range, [0.4, 1.0]);
}

#[test]
fn resolution_is_idempotent() {
    for c in [ExperimentConfig::default(), ExperimentConfig::synthetic()] {
        let once = c.resolved();
        assert_eq!(once.resolved(), once);
        let text = serde_json::to_string(&once.to_json()).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), once);
    }
}

#[test]
fn synthetic_preset_is_valid() {
    let c = ExperimentConfig::synthetic();
    c.validate().unwrap();
    assert_eq!(c.encoder.kind, EncoderKind::SmallConv);
    assert_eq!((c.tiling.patch_size, c.tiling.stride, c.augment.view_size), (64, 32, 32));
}

#[test]
fn missing_file_mentions_path() {
    let e = parse_config(std::path::Path::new("/nonexistent/cfg.json")).unwrap_err();
    assert!(format!("{e:#}").contains("/nonexistent/cfg.json"));
}
