use super::config::Origin;
use super::*;
use crate::flow::BiasMode;

#[test]
fn defaults_are_valid_and_documented() {
    let c = Config::default();
    c.validate().unwrap();
    assert_eq!(c.d_z, 32);
    assert_eq!(c.widths, vec![64, 64, 64]);
    assert_eq!(c.steps_train, 32);
    assert_eq!(c.steps_eval, 64);
    assert_eq!(c.bias_mode, BiasMode::Adaptive);
    let docs = Config::documentation();
    for (k, d, _) in KEYS {
        assert!(docs.contains(k) && docs.contains(&format!("[default: {d}]")), "{k}");
    }
}

#[test]
fn file_text_and_overrides() {
    let mut c = Config::default();
    c.apply_text("# comment\n\nmodel.d_z = 16  # trailing\nflow.bias_mode=plain\nencoder.attention = false\nmodel.widths = 8, 8\n")
        .unwrap();
    c.apply_override("train.lr=0.01").unwrap();
    assert_eq!(c.d_z, 16);
    assert_eq!(c.bias_mode, BiasMode::Plain);
    assert!(!c.attention);
    assert_eq!(c.widths, vec![8, 8]);
    assert_eq!(c.lr, 0.01);
    assert_eq!(c.model().d_z(), 16);
}

#[test]
fn unknown_keys_report_the_line() {
    let mut c = Config::default();
    let err = c.apply_text("model.d_z = 8\n\nmodel.dz = 4\n").unwrap_err();
    assert_eq!(
        err,
        ConfigError::UnknownKey {
            origin: Origin::Line(3),
            key: "model.dz".into()
        }
    );
    assert!(err.to_string().contains("line 3"));
    assert!(matches!(c.apply_override("nope=1"), Err(ConfigError::UnknownKey { origin: Origin::Flag, .. })));
}

#[test]
fn bad_values_and_syntax_are_rejected() {
    let mut c = Config::default();
    assert!(matches!(c.apply_text("train.epochs = many"), Err(ConfigError::BadValue { origin: Origin::Line(1), .. })));
    assert!(matches!(c.apply_text("flow.bias_mode = fancy"), Err(ConfigError::BadValue { .. })));
    assert!(matches!(c.apply_text("just words"), Err(ConfigError::Syntax { .. })));
    let mut z = Config::default();
    z.apply_text("data.n_points = 0").unwrap();
    assert!(matches!(z.validate(), Err(ConfigError::Invalid(m)) if m.contains("data.n_points")));
}

#[test]
fn help_lists_every_key() {
    let help = command().render_long_help().to_string();
    for (k, ..) in KEYS {
        assert!(help.contains(k), "{k} missing from help");
    }
    assert!(!help.contains("inject"));
}

#[test]
fn svg_has_three_panels_per_cloud() {
    let c = PointCloud::new(vec![[0.0, 0.5, 1.0], [-1.0, 0.2, 0.3]]).unwrap();
    let s = svg::render(&c, "shape <1>");
    for id in ["id=\"xy\"", "id=\"xz\"", "id=\"yz\""] {
        assert!(s.contains(id));
    }
    assert_eq!(s.matches("<circle").count(), 6);
    assert!(s.contains("shape &lt;1&gt;"));
}

#[test]
fn synthetic_dataset_is_standardized_and_labelled() {
    let ds = synthetic_dataset(4, 32, 0.02, 1).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.label(0), Some("sphere"));
    assert_eq!(ds.label(11), Some("torus"));
    assert_eq!(synthetic_dataset(4, 32, 0.02, 1).unwrap(), ds);
    assert_ne!(synthetic_dataset(4, 32, 0.02, 2).unwrap(), ds);
}
