//! Stateful layers with cached activations for reverse-mode differentiation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NeuralError, Result};
use crate::ops;
use crate::real::Real;
use crate::spec::LayerSpec;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Gain applied to the fan-in scaled uniform initializer, `U(-a, a)` with
/// `a = gain * sqrt(3 / fan_in)`.
pub const INIT_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-call context for forward passes: mode and the dropout mask stream.
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        Self { mode, rng }
    }

    pub fn infer() -> Self {
        use rand::SeedableRng;
        Self { mode: Mode::Infer, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

#[derive(Debug, Clone, Default)]
enum Cache<F> {
    #[default]
    Empty,
    Input(Tensor<F>),
    Elu { input: Tensor<F>, output: Tensor<F> },
    Softmax(Tensor<F>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dropout(Option<Vec<F>>),
    BatchNormTrain { x_hat: Tensor<F>, inv_std: Vec<F> },
    BatchNormInfer { inv_std: Vec<F> },
}

/// A parameter tensor paired with its accumulated gradient, if any.
pub struct ParamSlot<'a, F> {
    pub name: String,
    pub value: &'a mut Tensor<F>,
    pub grad: Option<&'a Tensor<F>>,
}

#[derive(Debug, Clone)]
pub struct Layer<F> {
    spec: LayerSpec,
    params: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
    /// Non-trainable buffers (batchnorm running mean and variance).
    state: Vec<Tensor<F>>,
    cache: Cache<F>,
}

fn uniform_init<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = INIT_GAIN * (3.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

impl<F: Real> Layer<F> {
    pub fn new(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (params, state) = match spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let w = uniform_init(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
                (vec![w, Tensor::zeros(&[out_channels])], vec![])
            }
            LayerSpec::Dense { inputs, units } => {
                let w = uniform_init(&[units, inputs], inputs, rng);
                (vec![w, Tensor::zeros(&[units])], vec![])
            }
            LayerSpec::BatchNorm { channels } => (
                vec![Tensor::filled(&[channels], F::one()), Tensor::zeros(&[channels])],
                vec![Tensor::zeros(&[channels]), Tensor::filled(&[channels], F::one())],
            ),
            LayerSpec::Concat { .. } => {
                return Err(NeuralError::InvalidSpec(
                    "concat is joined by the owning network, not a sequential layer".into(),
                ))
            }
            _ => (vec![], vec![]),
        };
        let grads = vec![None; params.len()];
        Ok(Self { spec, params, grads, state, cache: Cache::Empty })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn state(&self) -> &[Tensor<F>] {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.state
    }

    pub fn grads(&self) -> &[Option<Tensor<F>>] {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self.spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => &["weight", "bias"],
            LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    fn state_names(&self) -> &'static [&'static str] {
        match self.spec {
            LayerSpec::BatchNorm { .. } => &["running_mean", "running_var"],
            _ => &[],
        }
    }

    pub fn slots(&mut self, prefix: &str) -> Vec<ParamSlot<'_, F>> {
        let names = self.param_names();
        let kind = self.spec.kind();
        self.params
            .iter_mut()
            .zip(self.grads.iter())
            .zip(names)
            .map(|((value, grad), name)| ParamSlot {
                name: format!("{prefix}.{kind}.{name}"),
                value,
                grad: grad.as_ref(),
            })
            .collect()
    }

    /// Parameters followed by state buffers, with stable names.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        let kind = self.spec.kind();
        self.params
            .iter()
            .zip(self.param_names())
            .chain(self.state.iter().zip(self.state_names()))
            .map(|(t, name)| (format!("{prefix}.{kind}.{name}"), t))
            .collect()
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let kind = self.spec.kind();
        let pn = self.param_names();
        let sn = self.state_names();
        self.params
            .iter_mut()
            .zip(pn)
            .chain(self.state.iter_mut().zip(sn))
            .map(|(t, name)| (format!("{prefix}.{kind}.{name}"), t))
            .collect()
    }

    pub fn forward(&mut self, input: Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        let train = ctx.mode == Mode::Train;
        let out = match self.spec {
            LayerSpec::Conv2d { dilation, .. } => {
                let out = ops::conv2d_forward(&input, &self.params[0], &self.params[1], dilation)?;
                self.cache = if train { Cache::Input(input) } else { Cache::Empty };
                out
            }
            LayerSpec::Dense { .. } => {
                let out = ops::dense_forward(&input, &self.params[0], &self.params[1])?;
                self.cache = if train { Cache::Input(input) } else { Cache::Empty };
                out
            }
            LayerSpec::MaxPool2d { pool, stride } => {
                let (out, argmax) = ops::maxpool2d_forward(&input, pool, stride)?;
                self.cache = if train {
                    Cache::Pool { input_shape: input.shape().to_vec(), argmax }
                } else {
                    Cache::Empty
                };
                out
            }
            LayerSpec::Elu => {
                let out = ops::elu_forward(&input);
                self.cache = if train { Cache::Elu { input, output: out.clone() } } else { Cache::Empty };
                out
            }
            LayerSpec::Softmax => {
                let out = ops::softmax_forward(&input)?;
                self.cache = if train { Cache::Softmax(out.clone()) } else { Cache::Empty };
                out
            }
            LayerSpec::Dropout { p } => {
                if !train || p == 0.0 {
                    self.cache = Cache::Dropout(None);
                    input
                } else {
                    let keep = 1.0 - p;
                    let scale = F::from_f64_lossy(1.0 / keep);
                    let mask: Vec<F> = (0..input.len())
                        .map(|_| if ctx.rng.gen::<f64>() < keep { scale } else { F::zero() })
                        .collect();
                    let mut out = input;
                    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    self.cache = Cache::Dropout(Some(mask));
                    out
                }
            }
            LayerSpec::BatchNorm { .. } => self.batchnorm_forward(input, train)?,
            LayerSpec::Concat { .. } => unreachable!("rejected at construction"),
        };
        Ok(out)
    }

    fn batchnorm_forward(&mut self, input: Tensor<F>, train: bool) -> Result<Tensor<F>> {
        let eps = F::from_f64_lossy(BATCHNORM_EPS);
        if train {
            if input.batch() < 2 {
                return Err(NeuralError::BatchNormSingleSample);
            }
            let (mean, var) = ops::channel_statistics(&input)?;
            let (x_hat, inv_std) = ops::batchnorm_normalize(&input, &mean, &var, eps)?;
            let out = ops::scale_shift(&x_hat, self.params[0].data(), self.params[1].data())?;
            let momentum = F::from_f64_lossy(BATCHNORM_MOMENTUM);
            let count = input.len() / mean.len();
            let unbias = F::from_f64_lossy(count as f64 / (count as f64 - 1.0).max(1.0));
            let (rm, rv) = self.state.split_at_mut(1);
            for ((r, &m), (s, &v)) in rm[0]
                .data_mut()
                .iter_mut()
                .zip(&mean)
                .zip(rv[0].data_mut().iter_mut().zip(&var))
            {
                *r = (F::one() - momentum) * *r + momentum * m;
                *s = (F::one() - momentum) * *s + momentum * v * unbias;
            }
            self.cache = Cache::BatchNormTrain { x_hat, inv_std };
            Ok(out)
        } else {
            let (x_hat, inv_std) =
                ops::batchnorm_normalize(&input, self.state[0].data(), self.state[1].data(), eps)?;
            self.cache = Cache::BatchNormInfer { inv_std };
            ops::scale_shift(&x_hat, self.params[0].data(), self.params[1].data())
        }
    }

    fn accumulate(&mut self, index: usize, grad: Tensor<F>) -> Result<()> {
        match &mut self.grads[index] {
            Some(g) => g.add_assign(&grad),
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }

    /// Propagates `grad_out` to the layer input, accumulating parameter
    /// gradients. Requires a preceding training-mode forward, except for
    /// pointwise identity cases (inference dropout).
    pub fn backward(&mut self, grad_out: Tensor<F>) -> Result<Tensor<F>> {
        let missing = || NeuralError::Shape("backward called without a cached training forward".into());
        let cache = std::mem::take(&mut self.cache);
        let spec = self.spec.clone();
        match (&spec, cache) {
            (LayerSpec::Conv2d { dilation, .. }, Cache::Input(input)) => {
                let (dx, dw, db) = ops::conv2d_backward(&input, &self.params[0], *dilation, &grad_out)?;
                self.accumulate(0, dw)?;
                self.accumulate(1, db)?;
                Ok(dx)
            }
            (LayerSpec::Dense { .. }, Cache::Input(input)) => {
                let (dx, dw, db) = ops::dense_backward(&input, &self.params[0], &grad_out)?;
                self.accumulate(0, dw)?;
                self.accumulate(1, db)?;
                dx.reshape(input.shape())
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { input_shape, argmax }) => {
                Ok(ops::maxpool2d_backward(&input_shape, &argmax, &grad_out))
            }
            (LayerSpec::Elu, Cache::Elu { input, output }) => Ok(ops::elu_backward(&input, &output, &grad_out)),
            (LayerSpec::Softmax, Cache::Softmax(output)) => ops::softmax_backward(&output, &grad_out),
            (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
                let mut g = grad_out;
                if let Some(mask) = mask {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                Ok(g)
            }
            (LayerSpec::BatchNorm { channels }, Cache::BatchNormTrain { x_hat, inv_std }) => {
                let (dx, dg, db) =
                    ops::batchnorm_backward_train(&x_hat, &inv_std, self.params[0].data(), &grad_out)?;
                self.accumulate(0, Tensor::from_vec(&[*channels], dg)?)?;
                self.accumulate(1, Tensor::from_vec(&[*channels], db)?)?;
                Ok(dx)
            }
            (LayerSpec::BatchNorm { .. }, Cache::BatchNormInfer { inv_std }) => {
                // Frozen statistics: a per-channel affine map.
                let c = inv_std.len();
                let spatial = grad_out.sample_len() / c;
                let mut dx = grad_out;
                let gamma = self.params[0].data();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    let ch = (i / spatial) % c;
                    *v *= gamma[ch] * inv_std[ch];
                }
                Ok(dx)
            }
            _ => Err(missing()),
        }
    }
}

/// Linear chain of layers.
#[derive(Debug, Clone)]
pub struct Sequential<F> {
    layers: Vec<Layer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn new(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs.iter().map(|s| Layer::new(s.clone(), rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn forward(&mut self, input: Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        self.layers.iter_mut().try_fold(input, |x, layer| layer.forward(x, ctx))
    }

    pub fn backward(&mut self, grad_out: Tensor<F>) -> Result<Tensor<F>> {
        self.layers.iter_mut().rev().try_fold(grad_out, |g, layer| layer.backward(g))
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    pub fn slots(&mut self, prefix: &str) -> Vec<ParamSlot<'_, F>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.slots(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_tensors(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.named_tensors_mut(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn initialization_zero_bias_bounded_weights() {
        let layer = Layer::<f64>::new(LayerSpec::conv(4, 8, 3, 1), &mut rng()).unwrap();
        let bound = INIT_GAIN * (3.0f64 / 36.0).sqrt();
        assert!(layer.params()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(layer.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_zero_is_identity_in_both_modes() {
        let mut layer = Layer::<f64>::new(LayerSpec::Dropout { p: 0.0 }, &mut rng()).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let mut ctx = ForwardCtx::new(mode, rng());
            assert_eq!(layer.forward(x.clone(), &mut ctx).unwrap(), x);
        }
    }

    #[test]
    fn inference_dropout_passes_gradient_through() {
        let mut layer = Layer::<f64>::new(LayerSpec::Dropout { p: 0.5 }, &mut rng()).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut ctx = ForwardCtx::infer();
        assert_eq!(layer.forward(x.clone(), &mut ctx).unwrap(), x);
        let g = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(layer.backward(g.clone()).unwrap(), g);
    }

    #[test]
    fn batchnorm_single_sample_training_is_an_error() {
        let mut layer = Layer::<f64>::new(LayerSpec::BatchNorm { channels: 2 }, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let mut ctx = ForwardCtx::new(Mode::Train, rng());
        assert!(matches!(layer.forward(x, &mut ctx), Err(NeuralError::BatchNormSingleSample)));
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let mut layer = Layer::<f64>::new(LayerSpec::BatchNorm { channels: 1 }, &mut rng()).unwrap();
        // per-channel mean 3, variance 4
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 5.0, 5.0, 1.0]).unwrap();
        let mut ctx = ForwardCtx::new(Mode::Train, rng());
        let y = layer.forward(x, &mut ctx).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
    }

    #[test]
    fn concat_is_not_a_sequential_layer() {
        assert!(Layer::<f32>::new(LayerSpec::Concat { branches: 2 }, &mut rng()).is_err());
    }

    #[test]
    fn slot_names_are_hierarchical() {
        let mut net = Sequential::<f32>::new(
            &[LayerSpec::conv(1, 2, 3, 1), LayerSpec::Elu, LayerSpec::BatchNorm { channels: 2 }],
            &mut rng(),
        )
        .unwrap();
        let names: Vec<String> = net.slots("sub").into_iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            ["sub.0.conv2d.weight", "sub.0.conv2d.bias", "sub.2.batchnorm.gamma", "sub.2.batchnorm.beta"]
        );
        assert_eq!(net.named_tensors("sub").len(), 6);
    }
}
