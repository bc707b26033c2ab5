//! Replays the checked-in fuzz seeds through the same round-trip properties the
//! fuzz targets assert.

use std::path::PathBuf;

use nlsrelax::decomposition::{parse_ndjson, to_ndjson};
use nlsrelax::experiment::ExperimentConfig;
use nlsrelax::snapshot;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let b = std::fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn snapshot_seeds() {
    let mut decoded = 0;
    for (path, bytes) in seeds("snapshot_decode") {
        if let Ok(f) = snapshot::decode(&bytes) {
            assert_eq!(snapshot::encode(&f), bytes, "{}", path.display());
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn config_seeds() {
    let mut parsed = 0;
    for (path, bytes) in seeds("config_parse") {
        if let Ok(cfg) = ExperimentConfig::from_json(std::str::from_utf8(&bytes).unwrap()) {
            let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back.hash(), cfg.hash(), "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 3);
}

#[test]
fn probe_seeds() {
    let mut parsed = 0;
    for (path, bytes) in seeds("probe_parse") {
        if let Ok(records) = parse_ndjson(std::str::from_utf8(&bytes).unwrap()) {
            let out = to_ndjson(&records).unwrap();
            assert_eq!(parse_ndjson(&out).unwrap(), records, "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}
