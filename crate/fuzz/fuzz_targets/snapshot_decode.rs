#![no_main]

use libfuzzer_sys::fuzz_target;
use nlsrelax::snapshot;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = snapshot::decode(data) {
        let again = snapshot::decode(&snapshot::encode(&f)).expect("re-encoded snapshot decodes");
        assert_eq!(again.grid(), f.grid());
        assert_eq!(again.len(), f.len());
    }
});
