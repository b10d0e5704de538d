//! Evaluates the margin generalization bound over a range of margin levels.
use qmargin::margin::{analytic_distance_bound, evaluate_margin_bound, margin_loss_from_margins, BoundInputs};

fn main() -> qmargin::Result<()> {
    let margins = [0.62, 0.41, 0.33, 0.18, 0.09, -0.05, 0.27, 0.51, 0.12, 0.36];
    for gamma in [0.05, 0.1, 0.2, 0.4] {
        let inputs = BoundInputs {
            m: margins.len(),
            gamma,
            delta: 0.1,
            b: analytic_distance_bound(8),
            e: 2.0,
            n_qubits: 8,
        };
        let emp = margin_loss_from_margins(&margins, gamma)?;
        let r = evaluate_margin_bound(&inputs, emp)?;
        println!(
            "γ={gamma:<4} empirical={:.3} complexity={:.3e} confidence={:.3} total={:.3e} α*={:.3}",
            r.empirical_margin_loss, r.rademacher_term, r.confidence_term, r.rhs_total, r.alpha_star
        );
    }
    Ok(())
}
