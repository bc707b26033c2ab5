#![no_main]

use libfuzzer_sys::fuzz_target;
use nlsrelax::decomposition::{parse_ndjson, to_ndjson};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_ndjson(text) {
        let out = to_ndjson(&records).expect("parsed records serialize");
        assert_eq!(parse_ndjson(&out).expect("serialized records parse"), records);
    }
});
