//! Optimal discrimination of two single-qubit ensembles.
use qmargin::discrim::{helstrom, loss_lower_bound, EnsemblePair};
use qmargin::numc::c64;
use qmargin::qsim::Statevector;

fn main() -> qmargin::Result<()> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let plus = [Statevector::basis(1, 0)?];
    let minus = [
        Statevector::from_amplitudes(vec![c64(s, 0.0), c64(s, 0.0)])?,
        Statevector::basis(1, 1)?,
    ];
    let pair = EnsemblePair::from_states(&plus, &minus)?;
    let h = helstrom(&pair)?;
    println!("D_tr={:.6}", h.trace_distance);
    println!("P_success={:.6} (½ + ½·D_tr = {:.6})", h.success_probability, 0.5 + 0.5 * h.trace_distance);
    println!("loss lower bound={:.6}", loss_lower_bound(&pair)?);
    Ok(())
}
