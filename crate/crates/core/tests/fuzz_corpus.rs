//! Replays the checked-in fuzz seeds through the same properties the fuzz
//! targets assert, so the seeds stay meaningful without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use neurop_diff::checkpoint::Checkpoint;
use neurop_diff::config::RunConfig;
use neurop_diff::data::decode_image;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds() {
    let mut accepted = 0;
    for (name, bytes) in seeds("checkpoint_decode") {
        if let Ok(ck) = Checkpoint::decode(&bytes) {
            accepted += 1;
            assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck, "{name}");
            assert_eq!(ck.encode(), bytes, "{name}: encoding is canonical");
        }
        // every prefix and single-byte corruption is rejected or round-trips
        for cut in (0..bytes.len()).step_by(997) {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "{name}: prefix {cut} accepted");
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (name, bytes) in seeds("run_config_parse") {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        match RunConfig::from_json(text) {
            Ok(cfg) => {
                accepted += 1;
                assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg, "{name}");
            }
            Err(e) => assert_eq!(e.exit_code(), 2, "{name}: {e}"),
        }
    }
    assert!(accepted >= 3);
}

#[test]
fn image_seeds() {
    for (name, bytes) in seeds("image_decode") {
        let img = decode_image(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(img.channels(), 3);
        assert!(img.values().iter().all(|v| (-1.0..=1.0).contains(v)), "{name}");
        assert!(decode_image(&bytes[..bytes.len() / 2]).is_err(), "{name}: truncated file decoded");
    }
}
