#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::score::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.model.param_count(), ck.header.param_count);
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.model.param_count(), ck.model.param_count());
    }
});
