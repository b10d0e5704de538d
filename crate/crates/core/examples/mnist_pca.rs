//! Loads IDX image files, keeps digits 0 and 1 and reduces them to eight
//! features in [0, π].
//!
//! `cargo run --example mnist_pca -- <dir>`; defaults to the bundled
//! test fixture.
use qmargin::ingest::{filter_binary, load_idx_pair, pca_reduce, subsample_per_class};
use std::path::PathBuf;

fn main() -> qmargin::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist"));
    let raw = load_idx_pair(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
    )?;
    let binary = subsample_per_class(&filter_binary(&raw, 0, 1)?, 100, 0);
    let reduced = pca_reduce(&binary, 8)?;
    let t = reduced.transform.as_ref().unwrap();
    println!("{} images of dim {} -> {} features", binary.len(), raw.dim(), reduced.dim());
    println!("leading variances {:.3?}", &t.eigenvalues[..4]);
    println!("first sample {:.3?} label {:+}", reduced.vectors[0], reduced.labels[0]);
    println!("checksum {}", reduced.checksum());
    Ok(())
}
