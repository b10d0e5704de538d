//! Rank correlation and mutual information between a generalization gap
//! and a complexity measure.
use qmargin::analyze::{kendall_tau, mutual_information};

fn main() -> qmargin::Result<()> {
    let gap = [0.02, 0.10, 0.31, 0.45, 0.12, 0.60, 0.05, 0.38];
    let inv_median = [1.4, 2.9, 6.1, 9.8, 2.2, 14.0, 1.9, 7.5];
    let sqrt_params = [4.0, 4.0, 6.9, 6.9, 9.2, 9.2, 4.0, 6.9];
    for (name, metric) in [("inv_median", &inv_median), ("sqrt_params", &sqrt_params)] {
        let tau = kendall_tau(&gap, metric, 0)?;
        let mi = mutual_information(&gap, metric, 4)?;
        println!("{name:<12} τ={tau:.3} MI={:.3} nats", mi.value);
    }
    Ok(())
}
