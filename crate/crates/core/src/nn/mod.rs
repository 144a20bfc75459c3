//! Differentiable velocity networks and their optimizer.

mod embed;
mod net;
mod optim;
mod params;

pub use embed::{frequencies, time_embed, time_embed_batch, MAX_FREQUENCY, MIN_FREQUENCY};
pub use net::{
    set_output_bias, Arch, Condition, DualTimeVelocityNet, GradTape, VelocityNet, COND_EMBED,
    OUT_BIAS, OUT_WEIGHT, TIME_PROJ,
};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use params::{ParamRecord, ParamStore};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean over rows of the squared L2 error, with its gradient w.r.t. `pred`.
/// `target` is treated as a constant.
pub fn row_mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let b = pred.nrows();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let diff = &pred - &target;
    let loss = diff.iter().map(|x| x * x).sum::<f64>() / b as f64;
    let grad = diff * (2.0 / b as f64);
    Ok((loss, grad))
}
