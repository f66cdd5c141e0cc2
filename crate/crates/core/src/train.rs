//! One optimization step over a batch of episodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::correlation::HypercorrelationPyramid;
use crate::error::{arg_err, Result};
use crate::losses::{total_with_grad, LossBreakdown, LossFlags};
use crate::net::CorrelationNet;
use crate::optim::Adam;

/// A prepared episode: the correlation pyramid of a context/target pair and
/// the target's ground-truth heatmap at the network input size.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub hcp: &'a HypercorrelationPyramid,
    pub target: &'a [f64],
}

/// Mean loss and mean parameter gradient over the batch, reduced in batch
/// order.
pub fn batch_gradient(net: &CorrelationNet, batch: &[Sample<'_>], flags: &LossFlags) -> Result<(Vec<LossBreakdown>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    let mut grads = vec![0.0; net.param_count()];
    let mut losses = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let fwd = net.forward(s.hcp)?;
        let (loss, mut g) = total_with_grad(s.target, fwd.heatmap().data(), flags)?;
        g.iter_mut().for_each(|v| *v *= scale);
        net.backward(&fwd, &g, &mut grads)?;
        losses.push(loss);
    }
    Ok((losses, grads))
}

/// Computes the batch gradient and applies one Adam update. Returns the
/// per-episode losses measured before the update.
pub fn train_step(net: &mut CorrelationNet, adam: &mut Adam, batch: &[Sample<'_>], flags: &LossFlags) -> Result<Vec<LossBreakdown>> {
    let (losses, grads) = batch_gradient(net, batch, flags)?;
    adam.step(net.params_mut(), &grads);
    Ok(losses)
}
