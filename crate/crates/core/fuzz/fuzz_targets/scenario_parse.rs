#![no_main]

use libfuzzer_sys::fuzz_target;
use repairlab::sim::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scenario) = Scenario::from_toml(text) {
        // Anything accepted must survive a round trip.
        let again = Scenario::from_toml(&scenario.to_toml()).expect("re-parse");
        assert_eq!(again, scenario);
    }
});
