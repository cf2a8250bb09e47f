//! Second-stage network: binary calcium / false-positive classifier on
//! 2.5D patches around stage-1 positives.

use calc_neural::{
    cross_entropy, fingerprint, receptive_field, ForwardCtx, LayerSpec, Model, NetworkWeights, OptimizerState,
    ParamSlot, Real, Sequential, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::CtVolume;
use crate::stage1::{fill_patch, Orientation};

pub const PATCH: usize = 65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn2Spec {
    pub patch: usize,
    /// Channels of the three conv-conv-pool blocks.
    pub widths: [usize; 3],
    pub hidden: usize,
    pub dropout: f64,
}

pub fn build_cnn2() -> Cnn2Spec {
    Cnn2Spec { patch: PATCH, widths: [16, 32, 64], hidden: 256, dropout: 0.5 }
}

impl Cnn2Spec {
    pub fn with_widths(mut self, widths: [usize; 3], hidden: usize) -> Self {
        self.widths = widths;
        self.hidden = hidden;
        self
    }

    pub fn subnet_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut channels = 1;
        for &w in &self.widths {
            for _ in 0..2 {
                layers.push(LayerSpec::conv(channels, w, 3, 1));
                layers.push(LayerSpec::BatchNorm { channels: w });
                layers.push(LayerSpec::Elu);
                channels = w;
            }
            layers.push(LayerSpec::MaxPool2d { pool: 2, stride: 2 });
        }
        layers
    }

    /// Side of the feature map each subnetwork hands to the head.
    pub fn feature_side(&self) -> usize {
        self.widths.iter().fold(self.patch, |side, _| side.saturating_sub(4) / 2)
    }

    pub fn flat_features(&self) -> usize {
        let side = self.feature_side();
        self.widths[2] * side * side
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { inputs: 3 * self.flat_features(), units: self.hidden },
            LayerSpec::BatchNorm { channels: self.hidden },
            LayerSpec::Elu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense { inputs: self.hidden, units: 2 },
            LayerSpec::Softmax,
        ]
    }

    /// Extent of the convolution stack alone; the dense head sees the whole
    /// patch regardless.
    pub fn conv_receptive_field(&self) -> usize {
        receptive_field(&self.subnet_layers()).0
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.feature_side() == 0 {
            return Err(Error::Config(format!("stage-2 patch {} must be odd and survive three pooling blocks", self.patch)));
        }
        if self.widths.contains(&0) || self.hidden == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("stage-2 widths must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&("cnn2", self.patch, Orientation::ALL.map(|_| self.subnet_layers()), self.head_layers()))
    }
}

/// Labeled patch triples for stage-2 training.
#[derive(Debug, Clone)]
pub struct Cnn2Batch<F> {
    pub inputs: [Tensor<F>; 3],
    /// 1 for true calcium, 0 for a false positive.
    pub targets: Vec<usize>,
}

pub fn patch_triples<F: Real>(v: &CtVolume, voxels: &[[usize; 3]], patch: usize) -> Result<[Tensor<F>; 3]> {
    let pp = patch * patch;
    let n = voxels.len();
    let dims = v.dims();
    if let Some(bad) = voxels.iter().find(|p| (0..3).any(|a| p[a] >= dims[a])) {
        return Err(Error::InvalidInput(format!("candidate {bad:?} outside volume {dims:?}")));
    }
    let [a, s, c] = Orientation::ALL.map(|o| {
        let mut data = vec![F::zero(); n * pp];
        for (k, &voxel) in voxels.iter().enumerate() {
            fill_patch(v, voxel, patch, o, &mut data[k * pp..(k + 1) * pp]);
        }
        Tensor::from_vec(&[n, 1, patch, patch], data)
    });
    Ok([a?, s?, c?])
}

impl<F: Real> Cnn2Batch<F> {
    /// `samples` are `(scan, voxel, is_calcium)`.
    pub fn build(scans: &[&CtVolume], samples: &[(usize, [usize; 3], bool)], patch: usize) -> Result<Self> {
        let pp = patch * patch;
        let n = samples.len();
        let mut data = [vec![F::zero(); n * pp], vec![F::zero(); n * pp], vec![F::zero(); n * pp]];
        for (k, &(scan, voxel, _)) in samples.iter().enumerate() {
            let v = scans.get(scan).ok_or_else(|| Error::InvalidInput(format!("no scan {scan}")))?;
            for (o, orientation) in Orientation::ALL.into_iter().enumerate() {
                fill_patch(v, voxel, patch, orientation, &mut data[o][k * pp..(k + 1) * pp]);
            }
        }
        let [a, s, c] = data;
        Ok(Self {
            inputs: [
                Tensor::from_vec(&[n, 1, patch, patch], a)?,
                Tensor::from_vec(&[n, 1, patch, patch], s)?,
                Tensor::from_vec(&[n, 1, patch, patch], c)?,
            ],
            targets: samples.iter().map(|s| usize::from(s.2)).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Cnn2<F> {
    spec: Cnn2Spec,
    subnets: [Sequential<F>; 3],
    head: Sequential<F>,
}

impl<F: Real> Cnn2<F> {
    pub fn new(spec: Cnn2Spec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec.subnet_layers();
        let subnets = [
            Sequential::new(&layers, &mut rng)?,
            Sequential::new(&layers, &mut rng)?,
            Sequential::new(&layers, &mut rng)?,
        ];
        let head = Sequential::new(&spec.head_layers(), &mut rng)?;
        Ok(Self { spec, subnets, head })
    }

    pub fn spec(&self) -> &Cnn2Spec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.subnets.iter().map(Sequential::parameter_count).sum::<usize>() + self.head.parameter_count()
    }

    pub fn forward(&mut self, inputs: [Tensor<F>; 3], ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        let mut features = Vec::with_capacity(3);
        for (o, x) in inputs.into_iter().enumerate() {
            features.push(self.subnets[o].forward(x, ctx)?);
        }
        let joined = Tensor::concat_channels(&features.iter().collect::<Vec<_>>())?;
        Ok(self.head.forward(joined, ctx)?)
    }

    pub fn backward(&mut self, grad: Tensor<F>) -> Result<[Tensor<F>; 3]> {
        let g = self.head.backward(grad)?;
        let w = self.spec.widths[2];
        let side = self.spec.feature_side();
        let n = g.batch();
        let g = g.reshape(&[n, 3 * w, side, side])?;
        let parts = g.split_channels(&[w, w, w])?;
        let mut out = Vec::with_capacity(3);
        for (o, part) in parts.into_iter().enumerate() {
            out.push(self.subnets[o].backward(part)?);
        }
        Ok(out.try_into().expect("three orientations"))
    }

    /// Mean cross-entropy on the batch, leaving gradients in the parameters.
    pub fn forward_backward(&mut self, batch: &Cnn2Batch<F>, ctx: &mut ForwardCtx) -> Result<f64> {
        let p = self.forward(batch.inputs.clone(), ctx)?;
        let (loss, grad) = cross_entropy(&p, &batch.targets, None)?;
        self.backward(grad)?;
        Ok(loss.as_f64())
    }

    pub fn train_step(&mut self, batch: &Cnn2Batch<F>, opt: &mut OptimizerState<F>, ctx: &mut ForwardCtx) -> Result<f64> {
        Model::zero_grad(self);
        let loss = self.forward_backward(batch, ctx)?;
        opt.step(&mut Model::slots(self))?;
        Ok(loss)
    }

    pub fn evaluate_loss(&self, batch: &Cnn2Batch<F>) -> Result<f64> {
        let p = self.clone().forward(batch.inputs.clone(), &mut ForwardCtx::infer())?;
        Ok(cross_entropy(&p, &batch.targets, None)?.0.as_f64())
    }

    /// `[p_background, p_calcium]` per candidate, in inference mode.
    pub fn classify_candidates(&self, v: &CtVolume, candidates: &[[usize; 3]], batch: usize) -> Result<Vec<[F; 2]>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[[usize; 3]]> = candidates.chunks(batch.max(1)).collect();
        let parts = chunks
            .par_iter()
            .map_init(
                || self.clone(),
                |net, chunk| -> Result<Vec<[F; 2]>> {
                    let inputs = patch_triples(v, chunk, self.spec.patch)?;
                    let p = net.forward(inputs, &mut ForwardCtx::infer())?;
                    Ok(p.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
                },
            )
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}

impl<F: Real> Model<F> for Cnn2<F> {
    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn slots(&mut self) -> Vec<ParamSlot<'_, F>> {
        let [a, s, c] = &mut self.subnets;
        let mut slots = Vec::new();
        for (o, net) in [a, s, c].into_iter().enumerate() {
            slots.extend(net.slots(Orientation::ALL[o].name()));
        }
        slots.extend(self.head.slots("head"));
        slots
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (o, net) in self.subnets.iter().enumerate() {
            out.extend(net.named_tensors(Orientation::ALL[o].name()));
        }
        out.extend(self.head.named_tensors("head"));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (o, net) in self.subnets.iter_mut().enumerate() {
            out.extend(net.named_tensors_mut(Orientation::ALL[o].name()));
        }
        out.extend(self.head.named_tensors_mut("head"));
        out
    }

    fn zero_grad(&mut self) {
        self.subnets.iter_mut().for_each(Sequential::zero_grad);
        self.head.zero_grad();
    }
}

pub fn capture_weights<F: Real>(net: &Cnn2<F>, seed: u64, steps: u64) -> Result<NetworkWeights> {
    Ok(NetworkWeights::capture(net, seed, steps, serde_json::to_string(net.spec())?))
}

pub fn restore_weights<F: Real>(weights: &NetworkWeights) -> Result<Cnn2<F>> {
    let spec: Cnn2Spec = serde_json::from_str(&weights.metadata)
        .map_err(|e| Error::Config(format!("stage-2 weights carry no valid spec: {e}")))?;
    let mut net = Cnn2::new(spec, weights.seed)?;
    weights.apply(&mut net)?;
    Ok(net)
}
