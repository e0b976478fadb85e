#![no_main]

use libfuzzer_sys::fuzz_target;
use neurop_diff::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // anything accepted must re-encode to an archive that decodes the same
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ck);
    }
});
