#![no_main]

use cmtm::corpus::io::parse_aligned;
use libfuzzer_sys::fuzz_target;

// source and target files separated by a NUL byte
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (source, target) = text.split_once('\0').unwrap_or((text, ""));
    let _ = parse_aligned(source, target);
});
