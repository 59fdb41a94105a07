//! The operator files shipped in `gallery/` agree with the built-in gallery.

use std::path::Path;

use afree_core::{gallery, LinearOperator};

#[test]
fn shipped_files_match_builtin_operators() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../gallery");
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(&dir).expect("gallery directory") {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = LinearOperator::from_toml_str(&text, &path.display().to_string()).unwrap();
        let builtin =
            gallery::by_name(&name).unwrap_or_else(|| panic!("{name} is not a gallery name"));
        assert_eq!(parsed, builtin, "{name}");
        seen.push(name);
    }
    seen.sort();
    let mut names: Vec<String> = gallery::NAMES.iter().map(|s| s.to_string()).collect();
    names.sort();
    assert_eq!(seen, names);
}
