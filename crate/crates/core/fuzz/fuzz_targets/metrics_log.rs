#![no_main]

use cmtm::training::parse_metrics_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_metrics_log(text) {
        let written: String = rows.iter().map(|r| r.to_line()).collect();
        assert_eq!(parse_metrics_log(&written).expect("written log parses").len(), rows.len());
    }
});
