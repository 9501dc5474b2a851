#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_core::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok((shape, pixels)) = pgm::decode(data) {
        assert_eq!(pixels.len(), shape.0 * shape.1);
        assert_eq!(pgm::decode(&pgm::encode(shape, &pixels)).unwrap(), (shape, pixels));
    }
});
