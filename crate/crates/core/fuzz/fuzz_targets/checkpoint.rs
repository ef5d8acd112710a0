#![no_main]

use cmtm::model::{Checkpoint, Model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // whatever parses must survive a round trip
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again.to_bytes(), ckpt.to_bytes());
        let _ = Model::from_checkpoint(&ckpt);
    }
});
