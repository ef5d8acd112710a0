#![no_main]

use cmtm::cli::{parse_config_text, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(values) = parse_config_text(text) {
        if let Ok(config) = RunConfig::resolve(values, std::iter::empty()) {
            let reparsed = parse_config_text(&config.to_text()).expect("resolved config re-parses");
            let again = RunConfig::resolve(reparsed, std::iter::empty()).expect("resolved config resolves");
            assert_eq!(again.hash(), config.hash());
        }
    }
});
