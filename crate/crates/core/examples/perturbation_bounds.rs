//! How far a bounded observation offset can push the learned cost over an
//! episode, and the budget needed to reach a target increase.
//!
//! ```text
//! cargo run --example perturbation_bounds
//! ```

use safe_rl_attack::bounds::{episodic_bound, estimate_psi_lipschitz, required_epsilon, LipschitzMethod, ScalarField};
use safe_rl_attack::Result;

/// A smooth bump that peaks where x = y.
struct Ridge;

impl ScalarField for Ridge {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((-(x[0] - x[1]).powi(2)).exp())
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.value(x)?;
        let d = -2.0 * (x[0] - x[1]) * v;
        Ok((v, vec![d, -d]))
    }
}

fn main() -> Result<()> {
    println!("{:>6} {:>6} {:>5} {:>10}", "L_psi", "L_f", "T", "bound");
    for (l_psi, l_f, horizon) in [(0.1, 0.5, 3), (0.1, 0.5, 100), (0.1, 1.0, 100), (0.1, 1.05, 100)] {
        println!(
            "{l_psi:>6} {l_f:>6} {horizon:>5} {:>10.4}",
            episodic_bound(l_psi, l_f, 0.1, horizon)?
        );
    }
    let eps = required_epsilon(0.0175, 0.1, 0.5, 3)?;
    println!("budget for an increase of 0.0175 over 3 steps: {eps}");

    let samples: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.05, 0.0]).collect();
    for method in [LipschitzMethod::PairRatio, LipschitzMethod::GradNormMax] {
        let est = estimate_psi_lipschitz(&Ridge, &samples, 0.1, method, 2000, 0)?;
        // Largest l1 gradient norm of the ridge: 4|u|exp(-u^2) at |u| = 1/sqrt(2).
        let exact = 2.0 * 2f64.sqrt() * (-0.5f64).exp();
        println!("{method:?} estimate {:.4} (exact {exact:.4})", est.value);
    }
    Ok(())
}
