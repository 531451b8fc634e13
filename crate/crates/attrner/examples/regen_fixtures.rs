//! Regenerates the checked-in synthetic fixture corpus. The generator is
//! deterministic, so rerunning this must leave the file unchanged.

use std::fs;
use std::path::Path;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("synthetic50.tsv");
    fs::write(&path, attrner::synth::learnable_fixture()).unwrap();
    println!("wrote {}", path.display());
}
