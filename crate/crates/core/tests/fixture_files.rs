//! Guard: the committed fixture files must match the generator exactly.
//! Regenerate with `cargo run -p bodychan --example gen_fixtures fixtures`.

use std::path::PathBuf;

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn committed_fixtures_match_generator() {
    let dir = fixtures_dir();
    let cases = [
        ("meas_capacitive.csv", bodychan::fixtures::capacitive_measured_csv()),
        ("meas_galvanic.csv", bodychan::fixtures::galvanic_measured_csv()),
        ("sim_map.csv", bodychan::fixtures::sim_map_csv()),
    ];
    for (name, expected) in cases {
        let path = dir.join(name);
        let committed = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
        assert_eq!(
            committed, expected,
            "{name} drifted from the generator; regenerate with the gen_fixtures example"
        );
    }
}
