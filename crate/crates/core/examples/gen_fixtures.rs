//! Regenerate the shipped fixture files.
//!
//! Usage: cargo run -p bodychan --example gen_fixtures [OUT_DIR]
//! (default OUT_DIR: ./fixtures)

use std::fs;
use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures".to_string())
        .into();
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("meas_capacitive.csv"),
        bodychan::fixtures::capacitive_measured_csv(),
    )?;
    fs::write(
        out.join("meas_galvanic.csv"),
        bodychan::fixtures::galvanic_measured_csv(),
    )?;
    fs::write(out.join("sim_map.csv"), bodychan::fixtures::sim_map_csv())?;
    println!("fixtures written to {}", out.display());
    Ok(())
}
