#![no_main]

use libfuzzer_sys::fuzz_target;
use nlsrelax::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let back = ExperimentConfig::from_json(&cfg.to_json().expect("valid config serializes"))
            .expect("serialized config parses");
        assert_eq!(back.hash(), cfg.hash());
    }
});
