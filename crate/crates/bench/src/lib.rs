//! Shared fixtures for the benchmarks in `benches/`.

use std::path::Path;

use infodesign::{BeliefGrid, GameSpec, Interpolation};

/// Loads an instance from the workspace corpus.
pub fn corpus(name: &str) -> GameSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../corpus/{name}.json"));
    GameSpec::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn grid(spec: &GameSpec, resolution: usize) -> BeliefGrid {
    BeliefGrid::new(spec.n_states, resolution, Interpolation::SimplexLinear)
        .expect("valid resolution")
}
