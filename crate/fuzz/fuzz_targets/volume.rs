#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::container::Container;
use tpdm_core::operators::stack_from_container;
use tpdm_core::volume::Volume3D;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let again = Container::decode(&c.encode()).expect("re-encoded container decodes");
        assert_eq!(again, c);
        let _ = stack_from_container(&c);
    }
    if let Ok(v) = Volume3D::from_bytes(data) {
        let (a, b, c) = v.shape();
        assert_eq!(v.len(), a * b * c);
    }
});
