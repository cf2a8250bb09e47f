//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NeuralError, Result};
use crate::real::Real;
use crate::weights::Model;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;

/// Smallest step tried when the interval straddles a non-differentiable point.
pub const MIN_FD_STEP: f64 = 1e-8;

/// Allowed deviation of the one-sided mismatch from linear scaling in `h`.
///
/// Around a smooth point `f(x+h) - 2 f(x) + f(x-h)` is `h^2 f''(x)`, so the
/// mismatch between forward and backward differences shrinks tenfold with
/// the step. A kink (max-pool tie, ELU exactly at 0) inside `[x - h, x + h]`
/// breaks that scaling.
pub const KINK_TOLERANCE: f64 = 0.5;

/// Denominator floor for the relative error: entries whose analytic and
/// numeric magnitudes are both below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    /// Step of the reported central difference.
    pub step: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Parameters that received no gradient at all during backward.
    pub disconnected: Vec<String>,
    /// Entries whose step was shrunk below [`FD_STEP`] to leave a kink.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `backward` must run a forward pass, the backward pass, and leave the
/// gradients in the model's slots. `loss` must run the same forward pass
/// (same inputs, same dropout masks) and return the scalar loss. Up to
/// `per_param` entries of every parameter tensor are sampled with `seed`.
///
/// The step starts at [`FD_STEP`]. When the one-sided differences show a
/// kink inside the interval (see [`KINK_TOLERANCE`]), the step is divided by
/// ten, down to [`MIN_FD_STEP`].
pub fn grad_check<F, M>(
    model: &mut M,
    mut backward: impl FnMut(&mut M) -> Result<()>,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Real,
    M: Model<F>,
{
    model.zero_grad();
    backward(model)?;
    let mut analytic: Vec<(String, Option<Vec<f64>>, usize)> = model
        .slots()
        .into_iter()
        .map(|s| {
            let g = s.grad.map(|g| g.data().iter().map(|v| v.as_f64()).collect());
            (s.name, g, s.value.len())
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = loss(model)?;
    for (slot_idx, (name, grad, len)) in analytic.iter_mut().enumerate() {
        let Some(grad) = grad else {
            report.disconnected.push(name.clone());
            continue;
        };
        let picks = sample(&mut rng, *len, per_param.min(*len)).into_vec();
        for index in picks {
            let original = model.slots()[slot_idx].value.data()[index];
            let mut eval = |model: &mut M, delta: f64| -> Result<f64> {
                model.slots()[slot_idx].value.data_mut()[index] = original + F::from_f64_lossy(delta);
                let l = loss(model);
                model.slots()[slot_idx].value.data_mut()[index] = original;
                l
            };
            // (central difference, forward minus backward difference) at step h
            let mut probe = |model: &mut M, h: f64| -> Result<(f64, f64)> {
                let (plus, minus) = (eval(model, h)?, eval(model, -h)?);
                // steps as actually represented in F
                let up = (original + F::from_f64_lossy(h)).as_f64() - original.as_f64();
                let down = original.as_f64() - (original - F::from_f64_lossy(h)).as_f64();
                let central = (plus - minus) / (up + down);
                if !central.is_finite() {
                    return Err(NeuralError::NonFiniteValue(name.clone()));
                }
                Ok((central, (plus - base) / up - (base - minus) / down))
            };
            let mut h = FD_STEP;
            let mut coarse = probe(model, h)?;
            let numeric = loop {
                if h / 10.0 < MIN_FD_STEP {
                    break coarse.0;
                }
                let fine = probe(model, h / 10.0)?;
                let noise = 64.0 * F::epsilon().as_f64() * base.abs().max(1.0) / (h / 10.0);
                if (10.0 * fine.1 - coarse.1).abs() <= KINK_TOLERANCE * coarse.1.abs() + 10.0 * noise {
                    break coarse.0;
                }
                h /= 10.0;
                coarse = fine;
            };
            if h < FD_STEP {
                report.refined += 1;
            }
            report.entries.push(GradCheckEntry {
                param: name.clone(),
                index,
                analytic: grad[index],
                numeric,
                relative_error: relative_error(grad[index], numeric),
                step: h,
            });
        }
    }
    Ok(report)
}

/// Errors out if any parameter received no gradient, which distinguishes a
/// structurally disconnected parameter from one whose gradient is numerically
/// zero.
pub fn ensure_connected<F: Real, M: Model<F>>(model: &mut M) -> Result<()> {
    match model.slots().into_iter().find(|s| s.grad.is_none()) {
        Some(s) => Err(NeuralError::DisconnectedParameter(s.name)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ForwardCtx, LayerSpec, Mode, Sequential, Tensor};

    /// loss = |w + b - c| through a 1×1 dense layer with input 1.
    fn abs_check(offset: f64) -> GradCheckReport {
        let mut net = Sequential::<f64>::new(&[LayerSpec::Dense { inputs: 1, units: 1 }], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let y = |net: &mut Sequential<f64>| {
            let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
            net.forward(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), &mut ctx).unwrap().data()[0]
        };
        let c = y(&mut net) + offset;
        grad_check(
            &mut net,
            |net| {
                let v = y(net);
                net.backward(Tensor::from_vec(&[1, 1], vec![(v - c).signum()])?)?;
                Ok(())
            },
            |net| Ok((y(net) - c).abs()),
            1,
            0,
        )
        .unwrap()
    }

    #[test]
    fn kink_inside_the_step_is_stepped_around() {
        // the kink sits 3e-6 away: the default step straddles it
        let r = abs_check(3e-6);
        assert_eq!(r.refined, 2);
        assert!(r.max_relative_error() < 1e-8, "{r:?}");
        assert!(r.entries.iter().all(|e| (e.step - 1e-6).abs() < 1e-18));
    }

    #[test]
    fn smooth_points_keep_the_default_step() {
        let r = abs_check(0.5);
        assert_eq!(r.refined, 0);
        assert!(r.entries.iter().all(|e| e.step == FD_STEP));
        assert!(r.max_relative_error() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2e-6, 1e-6) - 1e-2).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
