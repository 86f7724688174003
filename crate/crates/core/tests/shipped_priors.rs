use std::path::PathBuf;

use posekit::shape::{load_prior, procedural, PriorCheck, PRIOR_VERTEX_COUNT};

fn priors_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/priors")
}

#[test]
fn every_shipped_prior_loads_and_matches_the_generator() {
    for category in procedural::CATEGORIES {
        let mesh = load_prior(category, &priors_dir(), &PriorCheck::default()).unwrap();
        assert_eq!(mesh.vertices.len(), PRIOR_VERTEX_COUNT);
        let generated = procedural::prior(category).unwrap();
        assert_eq!(mesh.faces, generated.faces, "{category}");
        let drift = mesh.vertices.iter().zip(&generated.vertices).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(drift < 1e-9, "{category}: {drift}");
    }
}
