use std::fs;
use std::path::Path;

use vltb::config::ExperimentConfig;

#[test]
fn checked_in_configs_load_and_roundtrip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("ini") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        let again = ExperimentConfig::parse(&cfg.write()).unwrap();
        assert_eq!(again, cfg, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 6, "only {seen} configs found");
}
