mod common;

use common::schema;
use proptest::prelude::*;
use serde_json::{json, Value};
use sparsim::front::{fixtures, parse_network, simulate, DensitySetting, FrontError, RunConfig};
use sparsim::nn::Mode;

fn config_text(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn fixtures_match_network_schema() {
    let s = schema::load("network.schema.json");
    for (name, text) in fixtures::ALL {
        let v: Value = serde_json::from_str(text).unwrap();
        assert_eq!(schema::validate(&s, &v), Vec::<String>::new(), "{name}");
        let reparsed: Value = serde_json::from_str(&parse_network(text).unwrap().to_json()).unwrap();
        assert_eq!(schema::validate(&s, &reparsed), Vec::<String>::new(), "{name} after round trip");
    }
}

#[test]
fn shipped_config_matches_schema_and_defaults() {
    let s = schema::load("config.schema.json");
    let text = config_text("default.json");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(schema::validate(&s, &v), Vec::<String>::new());
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    let v = serde_json::to_value(RunConfig::default()).unwrap();
    assert_eq!(schema::validate(&s, &v), Vec::<String>::new());
}

#[test]
fn reports_match_report_schema() {
    let s = schema::load("report.schema.json");
    for (name, text) in fixtures::ALL {
        let d = parse_network(text).unwrap();
        for mode in [Mode::Inference, Mode::Training] {
            let cfg = RunConfig { mode, density: DensitySetting::Assumed(0.3), ..RunConfig::default() };
            let v = serde_json::to_value(simulate(&d, &cfg, 0).unwrap()).unwrap();
            assert_eq!(schema::validate(&s, &v), Vec::<String>::new(), "{name} {mode:?}");
        }
    }
}

#[test]
fn schema_rejects_altered_report() {
    let s = schema::load("report.schema.json");
    let d = parse_network(fixtures::LENET).unwrap();
    let mut v = serde_json::to_value(simulate(&d, &RunConfig::default(), 0).unwrap()).unwrap();
    v["layers"][0]["surprise"] = json!(1);
    v["energy"]["total_fj"] = json!(-1);
    let errs = schema::validate(&s, &v);
    assert_eq!(errs.len(), 2, "{errs:?}");
}

#[test]
fn syntax_errors_carry_position() {
    let e = parse_network("{\n  \"name\": \"x\",\n  \"input\": [1, 2,\n}").unwrap_err();
    match &e {
        FrontError::Syntax { line, .. } => assert_eq!(*line, 4),
        other => panic!("{other:?}"),
    }
    assert_eq!(e.exit_code(), 2);
    assert_eq!(e.to_json()["error"]["line"], 4);
}

#[test]
fn layer_errors_name_layer_and_field() {
    let text = r#"{"name": "x", "input": [1, 4, 4], "layers": [
        {"kind": "relu"},
        {"kind": "conv", "filters": 2}
    ]}"#;
    let e = parse_network(text).unwrap_err();
    let j = e.to_json();
    assert_eq!(j["error"]["kind"], "network");
    assert_eq!(j["error"]["layer"], 1);
    assert_eq!(j["error"]["field"], "kernel");

    let text = r#"{"name": "x", "input": [1, 4, 4], "layers": [{"kind": "pool", "op": "max", "window": 3, "stride": 2}]}"#;
    let j = parse_network(text).unwrap_err().to_json();
    assert_eq!(j["error"]["layer"], 0);
    assert_eq!(j["error"]["exit_code"], 2);
}

fn layer() -> impl Strategy<Value = Value> {
    prop_oneof![
        (1usize..6, 1usize..4, 0usize..2).prop_map(|(f, k, p)| json!({"kind": "conv", "filters": f, "kernel": k, "pad": p})),
        Just(json!({"kind": "relu"})),
        (0.5f64..0.99).prop_map(|m| json!({"kind": "batch_norm", "momentum": m})),
        (prop_oneof![Just("add"), Just("sub")], -2.0f64..2.0).prop_map(|(op, v)| json!({"kind": "scalar", "op": op, "value": v})),
    ]
}

fn description() -> impl Strategy<Value = Value> {
    (
        "[a-z][a-z0-9_]{0,8}",
        proptest::option::of(1usize..64),
        proptest::option::of(any::<u64>()),
        1usize..4,
        4usize..10,
        prop::collection::vec(layer(), 0..5),
        1usize..12,
        prop_oneof![Just("l1"), Just("l2"), Just("softmax_xent")],
    )
        .prop_map(|(name, batch, seed, c, hw, mut layers, out, loss)| {
            layers.push(json!({"kind": "fc", "outputs": out}));
            layers.push(json!({"kind": "loss", "loss": loss}));
            let mut v = json!({"name": name, "input": [c, hw, hw], "layers": layers});
            if let Some(b) = batch {
                v["batch"] = json!(b);
            }
            if let Some(s) = seed {
                v["seed"] = json!(s);
            }
            v
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn network_descriptions_round_trip(v in description()) {
        let d = match parse_network(&v.to_string()) {
            Ok(d) => d,
            Err(e) => { prop_assert_eq!(e.exit_code(), 2); return Ok(()); }
        };
        let again = parse_network(&d.to_json()).unwrap();
        prop_assert_eq!(&again, &d);
        let s = schema::load("network.schema.json");
        let errs = schema::validate(&s, &serde_json::from_str(&d.to_json()).unwrap());
        prop_assert!(errs.is_empty(), "{:?}", errs);
    }

    #[test]
    fn configs_round_trip(density in 0.0f64..=1.0, lr in 1e-4f64..1.0, train in any::<bool>()) {
        let cfg = RunConfig {
            density: DensitySetting::Assumed(density),
            lr,
            mode: if train { Mode::Training } else { Mode::Inference },
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
