//! Regenerates the bundled fixture files under fixtures/.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    if let Err(e) = readvqa::fixtures::write_all(&dir) {
        eprintln!("error[{}] {}", e.category(), e);
        std::process::exit(1);
    }
    println!("wrote fixtures to {}", dir.display());
}
