#![no_main]

use libfuzzer_sys::fuzz_target;
use neurop_diff::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        let again = RunConfig::from_json(&cfg.to_json_pretty()).expect("printed config parses");
        assert_eq!(again, cfg);
    }
});
