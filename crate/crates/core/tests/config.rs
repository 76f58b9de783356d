use tokenfill_core::config::PipelineConfig;
use tokenfill_core::{Error, MaskKind};

#[test]
fn presets_validate_and_round_trip() {
    for c in [PipelineConfig::desk(), PipelineConfig::smoke()] {
        c.validate().unwrap();
        let back = PipelineConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.token_extent(), 8);
    }
    assert_ne!(PipelineConfig::desk().hash(), PipelineConfig::smoke().hash());
    assert!(PipelineConfig::preset("huge").is_err());
}

#[test]
fn parsing_overrides_and_comments() {
    let c = PipelineConfig::parse("# a comment\n\nalpha = 0.25   # trailing\ntrain_masks = box80, custom-box:0.3\nvq_widths=4,8,16\nenc_widths = 8,16\ndec_widths = 8,8,8\nextent = 32\n").unwrap();
    assert_eq!(c.alpha, 0.25);
    assert_eq!(c.train_masks, vec![MaskKind::Box80, MaskKind::CustomBox(0.3)]);
    assert_eq!(c.stages(), 2);
    assert_eq!(c.token_extent(), 8);
    assert_eq!(c.get("alpha").unwrap(), "0.25");
    assert!(c.get("nope").is_none());
    for key in PipelineConfig::KEYS {
        assert!(c.get(key).is_some());
    }
}

#[test]
fn invalid_configs_are_config_errors() {
    let bad = [
        "unknown_key = 1",
        "alpha = abc",
        "alpha = 1.5",
        "extent = 60",
        "enc_widths = 8,16",
        "tr_heads = 3",
        "anneal = 0",
        "temperature = -1",
        "no equals sign",
        "tr_mask_min = 0.8",
        "enc_mode = gated",
    ];
    for text in bad {
        match PipelineConfig::parse(text) {
            Err(Error::Config(msg)) => assert!(!msg.is_empty()),
            other => panic!("`{text}` gave {other:?}"),
        }
    }
}
