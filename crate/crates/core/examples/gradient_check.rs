//! Hand-written backpropagation: compare analytic gradients of a small
//! network with central finite differences, then fit it to a sine curve.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use safe_rl_attack::nn::{train_step, Activation, Adam, AdamConfig, DenseNet, Loss, Sample};
use safe_rl_attack::rng;

fn main() -> safe_rl_attack::Result<()> {
    let mut r = rng::seeded(1);
    let mut net = DenseNet::new(&[3, 16, 16, 2], Activation::Tanh, Activation::Identity, &mut r)?;
    let x = [0.3, -1.2, 0.8];
    let weighting = [1.0, -0.5];
    let objective = |n: &DenseNet, x: &[f64]| -> f64 {
        let y = n.forward(x).unwrap();
        y[0] * weighting[0] + y[1] * weighting[1]
    };

    let report = net.gradients(&x, &weighting)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut up, mut down) = (x, x);
        up[i] += h;
        down[i] -= h;
        let numeric = (objective(&net, &up) - objective(&net, &down)) / (2.0 * h);
        println!("d/dx{i}: analytic {:+.9}  numeric {numeric:+.9}", report.input_grad[i]);
        worst = worst.max((numeric - report.input_grad[i]).abs());
    }
    for i in (0..net.param_count()).step_by(60) {
        let mut probe = net.clone();
        probe.weights_mut()[i] += h;
        let up = objective(&probe, &x);
        probe.weights_mut()[i] -= 2.0 * h;
        let numeric = (up - objective(&probe, &x)) / (2.0 * h);
        worst = worst.max((numeric - report.param_grad[i]).abs());
    }
    println!("largest absolute gap {worst:.2e}");

    // Regress (sin x, cos x) from (x, x^2, 1).
    let inputs: Vec<[f64; 3]> = (0..200)
        .map(|i| {
            let t = -3.0 + 6.0 * i as f64 / 199.0;
            [t, t * t / 9.0, 1.0]
        })
        .collect();
    let targets: Vec<[f64; 2]> = inputs.iter().map(|x| [x[0].sin(), x[0].cos()]).collect();
    let batch: Vec<Sample> = inputs
        .iter()
        .zip(&targets)
        .map(|(i, t)| Sample { input: i, target: t })
        .collect();
    let mut opt = Adam::for_net(AdamConfig::with_lr(1e-2), &net);
    for epoch in 0..=1500 {
        let step = train_step(&mut net, &batch, Loss::Mse, &mut opt)?;
        if epoch % 300 == 0 {
            println!("epoch {epoch:>5}  mse {:.5}", step.loss.unwrap());
        }
    }
    Ok(())
}
