use crate::error::{NeuralError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy of `[n, c, ...]` probabilities against one
/// target class per (sample, position), ordered sample-major.
///
/// Returns the loss and its gradient with respect to the probabilities.
pub fn cross_entropy<F: Real>(
    probs: &Tensor<F>,
    targets: &[usize],
    class_weights: Option<&[F]>,
) -> Result<(F, Tensor<F>)> {
    if probs.shape().len() < 2 {
        return Err(NeuralError::Shape(format!("class axis missing in {:?}", probs.shape())));
    }
    let n = probs.batch();
    let c = probs.shape()[1];
    let spatial: usize = probs.shape().iter().skip(2).product();
    if targets.len() != n * spatial {
        return Err(NeuralError::Shape(format!(
            "{} targets for {} predictions",
            targets.len(),
            n * spatial
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(NeuralError::Shape(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let floor = F::from_f64_lossy(PROBABILITY_FLOOR);
    let count = F::from_usize(targets.len().max(1)).unwrap();
    let p = probs.data();
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(NeuralError::TargetOutOfRange { target: t, classes: c });
        }
        let (b, s) = (i / spatial, i % spatial);
        let idx = (b * c + t) * spatial + s;
        let w = class_weights.map_or(F::one(), |w| w[t]);
        let pt = p[idx];
        total += -w * pt.max(floor).ln();
        if pt > floor {
            grad.data_mut()[idx] = -w / (count * pt);
        }
    }
    Ok((total / count, grad))
}
