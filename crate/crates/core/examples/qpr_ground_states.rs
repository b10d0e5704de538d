//! Ground states of the cluster Hamiltonian at one point per phase, and a
//! seeded random-label dataset.
use qmargin::qpr::{cluster_ground_state, default_grid, randomize_labels, sample_dataset, Phase};

fn main() -> qmargin::Result<()> {
    let n = 8;
    for (j1, j2) in [(2.5, 0.0), (-2.5, 0.0), (0.0, 2.5), (0.0, 0.0)] {
        let (_, e) = cluster_ground_state(n, j1, j2)?;
        println!("J1={j1:+.1} J2={j2:+.1}  E0={e:.6}");
    }
    let grid = default_grid(10, 0)?;
    let clean = sample_dataset(n, &grid, 20, 7)?;
    let noisy = randomize_labels(&clean, 0.5, 8)?;
    let changed = noisy.randomized.iter().filter(|&&r| r).count();
    println!("m={} randomized={changed}", noisy.len());
    for (y, meta) in noisy.labels().iter().zip(&noisy.meta).take(4) {
        println!("  ({:+.2}, {:+.2}) -> {:?}", meta.j1, meta.j2, Phase::from_label(*y)?);
    }
    Ok(())
}
