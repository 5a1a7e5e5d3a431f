#![no_main]

use libfuzzer_sys::fuzz_target;
use repairlab::sim::trace::parse_trace;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_trace(text);
    }
});
