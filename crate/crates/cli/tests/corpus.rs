use std::fs;
use std::path::PathBuf;

use tpdm_cli::config::parse_config;
use tpdm_core::container::Container;
use tpdm_core::pgm;
use tpdm_core::score::Checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn volume_seeds_decode() {
    for (p, bytes) in seeds("volume") {
        let c = Container::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(c.encode(), bytes, "{}", p.display());
    }
}

#[test]
fn checkpoint_seeds_decode() {
    for (p, bytes) in seeds("checkpoint") {
        Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn pgm_seeds_decode() {
    for (p, bytes) in seeds("pgm") {
        pgm::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn config_seeds_parse() {
    for (p, bytes) in seeds("config") {
        let text = String::from_utf8(bytes).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
