use nlsrelax::decomposition::{parse_ndjson, to_ndjson, ProbeRecord};
use nlsrelax::experiment::{AmplitudeSeries, ExperimentConfig};
use nlsrelax::{snapshot, ComplexField, SpatialGrid, C64};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-12..1e-12f64, Just(0.0)]
}

fn probe() -> impl Strategy<Value = ProbeRecord> {
    (
        0.0..1e5f64,
        prop::array::uniform4(finite()),
        prop::array::uniform3(0.0..10.0f64),
        prop::option::of(0.0..1.0f64),
        prop::option::of(finite()),
    )
        .prop_map(|(t, a, n, g, m)| ProbeRecord {
            t,
            re_x: a[0],
            im_x: a[1],
            re_y: a[2],
            im_y: a[3],
            xi_l2: n[0],
            xi_l2loc: n[1],
            xi_l4: n[2],
            g3_norm: g,
            g5_norm: g.map(|v| v * v),
            g7_norm: None,
            mdot: m,
            thetadot: m.map(|v| -v),
            mass: g,
            energy: m,
            xi2_rel: None,
            arg_phi0: g,
        })
}

fn config_text(n: f64, seed: u64, dt_e0: f64, horizon: f64, lambda: f64) -> String {
    format!(
        r#"{{"potential": {{"kind": "gaussian", "depth": 8.0, "width": 1.0}},
            "grid": {{"dim": 1, "n": 256, "half_width": 24.0}},
            "lambda": {lambda:?}, "data": {{"n": {n:?}, "x0_ratio": 0.3, "y0_ratio": 0.9,
            "xi0": {{"kind": "random", "norm_y": 1e-7, "cutoff": 3.0, "envelope": 4.0}}}},
            "dt_e0": {dt_e0:?}, "horizon": {{"t2_multiple": {horizon:?}}}, "seed": {seed}}}"#
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_bit_identically(
        n in 1e-4..0.1f64,
        seed in any::<u64>(),
        dt in 1e-4..1.0f64,
        horizon in 0.1..100.0f64,
        lambda in -1e3..1e3f64,
    ) {
        let cfg = ExperimentConfig::from_json(&config_text(n, seed, dt, horizon, lambda)).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.data.n.to_bits(), n.to_bits());
        prop_assert_eq!(back.lambda.to_bits(), lambda.to_bits());
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
        prop_assert_eq!(&back, &cfg);
    }

    #[test]
    fn probe_stream_round_trips(records in prop::collection::vec(probe(), 0..20)) {
        let text = to_ndjson(&records).unwrap();
        let back = parse_ndjson(&text).unwrap();
        prop_assert_eq!(to_ndjson(&back).unwrap(), text);
        prop_assert_eq!(back, records);
    }

    #[test]
    fn snapshot_round_trips(
        dim in 1usize..=2,
        half_width in 0.5..100.0f64,
        values in prop::collection::vec((finite(), finite()), 64),
    ) {
        let grid = SpatialGrid::new(dim, 8, half_width).unwrap();
        let v: Vec<C64> = values.iter().cycle().take(grid.len()).map(|&(a, b)| C64::new(a, b)).collect();
        let f = ComplexField::new(grid, v).unwrap();
        let back = snapshot::decode(&snapshot::encode(&f)).unwrap();
        prop_assert_eq!(back.grid(), f.grid());
        for (a, b) in back.values().iter().zip(f.values()) {
            prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
            prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn series_csv_round_trips(rows in prop::collection::vec((0.0..1e4f64, prop::array::uniform4(finite())), 0..30)) {
        let s = AmplitudeSeries {
            t: rows.iter().map(|r| r.0).collect(),
            x: rows.iter().map(|r| C64::new(r.1[0], r.1[1])).collect(),
            y: rows.iter().map(|r| C64::new(r.1[2], r.1[3])).collect(),
        };
        prop_assert_eq!(AmplitudeSeries::from_csv(&s.to_csv()).unwrap(), s);
    }
}

#[test]
fn configs_with_unknown_fields_are_rejected() {
    let text = config_text(0.05, 1, 0.1, 1.0, 1.0).replacen('{', r#"{"extra": 1, "#, 1);
    assert!(ExperimentConfig::from_json(&text).is_err());
}

#[test]
fn published_schema_lists_every_config_field() {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut documented: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
    let cfg = ExperimentConfig::from_json(&config_text(0.05, 1, 0.1, 1.0, 1.0)).unwrap();
    let value: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    let mut emitted: Vec<&String> = value.as_object().unwrap().keys().collect();
    documented.sort();
    emitted.sort();
    assert_eq!(documented, emitted);
    let data: Vec<&String> = value["data"].as_object().unwrap().keys().collect();
    for k in data {
        assert!(
            schema["properties"]["data"]["properties"].get(k).is_some(),
            "data.{k} undocumented"
        );
    }
}
