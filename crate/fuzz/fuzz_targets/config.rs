#![no_main]

use libfuzzer_sys::fuzz_target;
use tpdm_cli::config::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text) {
            let json = serde_json::to_string(&cfg).expect("config serialises");
            let _ = parse_config(&json);
        }
    }
});
