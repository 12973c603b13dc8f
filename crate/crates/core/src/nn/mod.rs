//! Small dense networks with hand-written backpropagation.
//!
//! Everything that learns in this crate (policies, critics, the constraint
//! network and the dynamics model) is a [`DenseNet`], optionally behind a
//! [`Standardizer`]. Gradients are available with respect to both the input
//! (attacks) and the parameters (trainers).

mod dense;
mod optim;
mod scaled;

pub use dense::{param_count, sigmoid, Activation, DenseNet, GradientReport, Trace};
pub use optim::{batch_gradient, train_step, Adam, AdamConfig, Loss, Sample, StepOutcome};
pub use scaled::{sidecar_path, ScaledNet, Standardizer};
