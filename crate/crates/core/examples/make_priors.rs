//! Regenerates the shipped category priors: `cargo run --example make_priors -- <dir>`.

use std::path::PathBuf;

use posekit::mesh::write_obj;
use posekit::shape::{prior_path, procedural};

fn main() -> posekit::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/priors"));
    std::fs::create_dir_all(&dir).map_err(|e| posekit::Error::Load { path: dir.clone(), msg: e.to_string() })?;
    for category in procedural::CATEGORIES {
        let mesh = procedural::prior(category).expect("every listed category has a generator");
        let path = prior_path(&dir, category);
        posekit::dataio::annotation::write_atomic(&path, write_obj(&mesh).as_bytes())?;
        println!("{} ({} vertices, {} faces)", path.display(), mesh.vertices.len(), mesh.faces.len());
    }
    Ok(())
}
