#![no_main]

use cmtm::corpus::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = Vocab::from_text(text) {
        let again = Vocab::from_text(&vocab.to_text()).expect("written vocabulary parses");
        assert_eq!(again.tokens(), vocab.tokens());
    }
});
