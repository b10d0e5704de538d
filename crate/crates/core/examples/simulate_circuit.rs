//! Builds a small circuit, checks it against the dense unitary and prints
//! parameter-shift derivatives of one amplitude probability.
use qmargin::qsim::{apply_circuit, apply_circuit_shifted, full_unitary, Angle, Circuit, Gate, Statevector};
use std::f64::consts::FRAC_PI_2;

fn main() -> qmargin::Result<()> {
    let mut c = Circuit::new(3);
    c.push(Gate::H(0))
        .push(Gate::Ry(1, Angle::param(0)))
        .push(Gate::Cnot { control: 0, target: 2 })
        .push(Gate::Rzz(1, 2, Angle::param(1)));
    c.set_n_params(2);
    let theta = [0.4, 1.3];
    let zero = Statevector::zero(3)?;
    let out = apply_circuit(&c, &theta, &zero)?;
    let u = full_unitary(&c, &theta)?;
    let dense = u.column(0);
    let diff = out.amplitudes().iter().zip(&dense).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    println!("kernel vs dense max |Δ| = {diff:.2e}");

    let p0 = |s: &Statevector| s.probabilities()[0];
    for (gate, slot) in [(1, 0), (3, 1)] {
        let plus = apply_circuit_shifted(&c, &theta, &zero, gate, FRAC_PI_2)?;
        let minus = apply_circuit_shifted(&c, &theta, &zero, gate, -FRAC_PI_2)?;
        println!("∂p(000)/∂θ{slot} = {:+.6}", (p0(&plus) - p0(&minus)) / 2.0);
    }
    Ok(())
}
