#![no_main]

use libfuzzer_sys::fuzz_target;
use repairlab::corpus::{parse_index, write_index};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_index(text) {
        assert_eq!(parse_index(&write_index(&entries)).expect("re-parse"), entries);
    }
});
