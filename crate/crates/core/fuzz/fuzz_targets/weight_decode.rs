#![no_main]

use libfuzzer_sys::fuzz_target;
use repairlab::nn::weights::{decode, encode};
use repairlab::repair::RepairModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = decode(data) {
        assert_eq!(decode(&encode(&file)).expect("re-decode"), file);
    }
    // Model loading adds shape checks on top of the container format.
    let _ = RepairModel::from_bytes(data);
});
