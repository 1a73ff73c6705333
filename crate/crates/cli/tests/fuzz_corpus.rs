//! Replays the checked-in config fuzz seeds.

use std::path::PathBuf;

use dpvae_cli::config::RunConfig;

#[test]
fn config_seeds() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_toml");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = RunConfig::from_toml_str(&text);
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        assert_eq!(parsed.is_ok(), name != "bad_key.toml", "{name}");
        if let Ok(c) = parsed {
            c.validate().unwrap();
        }
        seen += 1;
    }
    assert!(seen >= 3);
}
