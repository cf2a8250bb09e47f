//! First-stage network: three orthogonal dilated-convolution subnetworks
//! with auxiliary outputs, a fusion head on the concatenated center
//! features, and dense whole-volume inference.

use std::sync::atomic::{AtomicUsize, Ordering};

use calc_neural::{
    cross_entropy, fingerprint, receptive_field, ForwardCtx, LayerSpec, Model, NetworkWeights, OptimizerState,
    ParamSlot, Real, Sequential, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{CtVolume, Grid, LabelMap};

pub const CLASSES: usize = 7;
pub const SUPPORTED_RF: [usize; 4] = [35, 67, 131, 259];
/// Air, used to pad volumes and patches beyond the scan.
pub const PAD_HU: f32 = -1000.0;
pub const HU_WINDOW: (f32, f32) = (-1000.0, 3000.0);

/// Clamps to the HU window and maps it affinely onto `[0, 1]`.
pub fn normalize_hu(hu: f32) -> f32 {
    (hu.clamp(HU_WINDOW.0, HU_WINDOW.1) - HU_WINDOW.0) / (HU_WINDOW.1 - HU_WINDOW.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    Sagittal,
    Coronal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Self::Axial, Self::Sagittal, Self::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Axial => "axial",
            Self::Sagittal => "sagittal",
            Self::Coronal => "coronal",
        }
    }

    /// Volume axes spanning the plane as `(row axis, column axis)`, and the
    /// fixed axis.
    pub fn axes(self) -> (usize, usize, usize) {
        match self {
            Self::Axial => (1, 2, 0),
            Self::Sagittal => (0, 1, 2),
            Self::Coronal => (0, 2, 1),
        }
    }
}

/// Fusion weights for `p_N`, `p_A`, `p_S`, `p_C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Omega {
    pub n: f64,
    pub a: f64,
    pub s: f64,
    pub c: f64,
}

impl Default for Omega {
    fn default() -> Self {
        Self { n: 0.5, a: 1.0 / 6.0, s: 1.0 / 6.0, c: 1.0 / 6.0 }
    }
}

impl Omega {
    pub const NETWORK_ONLY: Self = Self { n: 1.0, a: 0.0, s: 0.0, c: 0.0 };

    pub fn as_array(&self) -> [f64; 4] {
        [self.n, self.a, self.s, self.c]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fusion weights {w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    pub fn uses_auxiliary(&self) -> bool {
        self.a > 0.0 || self.s > 0.0 || self.c > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn1Spec {
    /// Dilation of every 3×3 convolution in a subnetwork.
    pub dilations: Vec<usize>,
    pub width: usize,
    pub fusion_width: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub omega: Omega,
}

/// `(1, 1, 2, 4, ..., D, 1)` with `rf = 4 D + 3`.
pub fn dilation_ladder(rf_target: usize) -> Result<Vec<usize>> {
    if !SUPPORTED_RF.contains(&rf_target) {
        return Err(Error::Config(format!("receptive field {rf_target} not in {SUPPORTED_RF:?}")));
    }
    let top = (rf_target - 3) / 4;
    let mut d = vec![1];
    let mut k = 1;
    while k <= top {
        d.push(k);
        k *= 2;
    }
    d.push(1);
    Ok(d)
}

pub fn build_cnn1(rf_target: usize) -> Result<Cnn1Spec> {
    let spec = Cnn1Spec {
        dilations: dilation_ladder(rf_target)?,
        width: 32,
        fusion_width: 128,
        dropout: 0.35,
        gamma: 0.05,
        omega: Omega::default(),
    };
    if spec.receptive_field() != rf_target {
        return Err(Error::Config(format!("ladder {:?} misses receptive field {rf_target}", spec.dilations)));
    }
    Ok(spec)
}

impl Cnn1Spec {
    pub fn with_width(mut self, width: usize, fusion_width: usize) -> Self {
        self.width = width;
        self.fusion_width = fusion_width;
        self
    }

    pub fn subnet_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut channels = 1;
        for &d in &self.dilations {
            layers.push(LayerSpec::conv(channels, self.width, 3, d));
            layers.push(LayerSpec::Elu);
            channels = self.width;
        }
        layers
    }

    pub fn aux_layers(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::conv(self.width, CLASSES, 1, 1), LayerSpec::Softmax]
    }

    pub fn fusion_layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(3 * self.width, self.fusion_width, 1, 1),
            LayerSpec::Elu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::conv(self.fusion_width, CLASSES, 1, 1),
            LayerSpec::Softmax,
        ]
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.subnet_layers()).0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) || self.width == 0 || self.fusion_width == 0 {
            return Err(Error::Config("stage-1 layers need positive dilations and widths".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.gamma >= 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1) and gamma must be >= 0".into()));
        }
        self.omega.validate()
    }

    /// Hash of the layer structure; training weights (γ, ω) are excluded.
    pub fn fingerprint(&self) -> String {
        fingerprint(&(
            "cnn1",
            Orientation::ALL.map(|_| self.subnet_layers()),
            self.aux_layers(),
            self.fusion_layers(),
        ))
    }
}

pub fn total_loss(l_n: f64, l_a: f64, l_s: f64, l_c: f64, gamma: f64) -> f64 {
    l_n + gamma * (l_a + l_s + l_c)
}

/// Weighted average of the four class distributions.
pub fn fuse_probabilities(p_n: &[f64], p_a: &[f64], p_s: &[f64], p_c: &[f64], omega: &Omega) -> Result<Vec<f64>> {
    omega.validate()?;
    if [p_a.len(), p_s.len(), p_c.len()].iter().any(|&l| l != p_n.len()) {
        return Err(Error::InvalidInput("distributions differ in length".into()));
    }
    Ok((0..p_n.len()).map(|k| omega.n * p_n[k] + omega.a * p_a[k] + omega.s * p_s[k] + omega.c * p_c[k]).collect())
}

/// Writes the `size × size` patch of `orientation` centered on `voxel`
/// (normalized intensities, air outside the volume) into `out`.
pub fn fill_patch<F: Real>(v: &CtVolume, voxel: [usize; 3], size: usize, orientation: Orientation, out: &mut [F]) {
    let half = (size / 2) as isize;
    let (ra, ca, _) = orientation.axes();
    let pad = F::from_f64_lossy(normalize_hu(PAD_HU) as f64);
    for r in 0..size {
        for c in 0..size {
            let mut p = voxel.map(|x| x as isize);
            p[ra] += r as isize - half;
            p[ca] += c as isize - half;
            let hu = v.get_or(p[0], p[1], p[2], f32::NAN);
            out[r * size + c] = if hu.is_nan() { pad } else { F::from_f64_lossy(normalize_hu(hu) as f64) };
        }
    }
}

/// Labels of the `size × size` neighbourhood in `orientation`, background
/// outside the volume.
pub fn label_crop(labels: &LabelMap, voxel: [usize; 3], size: usize, orientation: Orientation, out: &mut [usize]) {
    let half = (size / 2) as isize;
    let (ra, ca, _) = orientation.axes();
    let dims = labels.grid().dims;
    for r in 0..size {
        for c in 0..size {
            let mut p = voxel.map(|x| x as isize);
            p[ra] += r as isize - half;
            p[ca] += c as isize - half;
            let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]);
            out[r * size + c] = if inside {
                labels.get(p[0] as usize, p[1] as usize, p[2] as usize).code() as usize
            } else {
                0
            };
        }
    }
}

/// Three orthogonal patches through one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoPatchSet {
    pub voxel: [usize; 3],
    pub size: usize,
    /// Axial, sagittal, coronal; row-major normalized intensities.
    pub planes: [Vec<f32>; 3],
}

impl OrthoPatchSet {
    pub fn extract(v: &CtVolume, voxel: [usize; 3], size: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidInput(format!("patch size {size} must be odd")));
        }
        let planes = Orientation::ALL.map(|o| {
            let mut p = vec![0.0f32; size * size];
            fill_patch(v, voxel, size, o, &mut p);
            p
        });
        Ok(Self { voxel, size, planes })
    }

    pub fn center(&self, orientation: usize) -> f32 {
        let h = self.size / 2;
        self.planes[orientation][h * self.size + h]
    }
}

/// A training minibatch for stage 1.
#[derive(Debug, Clone)]
pub struct Cnn1Batch<F> {
    pub patch: usize,
    /// `[n, 1, patch, patch]` per orientation.
    pub inputs: [Tensor<F>; 3],
    /// `n * m * m` auxiliary targets per orientation, `m = patch - rf + 1`.
    pub aux_targets: [Vec<usize>; 3],
    pub center_targets: Vec<usize>,
}

impl<F: Real> Cnn1Batch<F> {
    /// Patches and label crops for `(scan, voxel)` samples.
    pub fn build(scans: &[(&CtVolume, &LabelMap)], samples: &[(usize, [usize; 3])], patch: usize, rf: usize) -> Result<Self> {
        if patch < rf || patch % 2 == 0 || rf % 2 == 0 {
            return Err(Error::InvalidInput(format!("patch {patch} must be odd and at least the receptive field {rf}")));
        }
        let n = samples.len();
        let m = patch - rf + 1;
        let pp = patch * patch;
        let mut inputs = [vec![F::zero(); n * pp], vec![F::zero(); n * pp], vec![F::zero(); n * pp]];
        let mut aux_targets = [vec![0; n * m * m], vec![0; n * m * m], vec![0; n * m * m]];
        let mut center_targets = Vec::with_capacity(n);
        for (k, &(scan, voxel)) in samples.iter().enumerate() {
            let (v, l) = scans.get(scan).ok_or_else(|| Error::InvalidInput(format!("no scan {scan}")))?;
            for (o, orientation) in Orientation::ALL.into_iter().enumerate() {
                fill_patch(v, voxel, patch, orientation, &mut inputs[o][k * pp..(k + 1) * pp]);
                label_crop(l, voxel, m, orientation, &mut aux_targets[o][k * m * m..(k + 1) * m * m]);
            }
            center_targets.push(l.get(voxel[0], voxel[1], voxel[2]).code() as usize);
        }
        let [a, s, c] = inputs;
        Ok(Self {
            patch,
            inputs: [
                Tensor::from_vec(&[n, 1, patch, patch], a)?,
                Tensor::from_vec(&[n, 1, patch, patch], s)?,
                Tensor::from_vec(&[n, 1, patch, patch], c)?,
            ],
            aux_targets,
            center_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.center_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_n: f64,
    /// Axial, sagittal, coronal; zero when the auxiliary heads are skipped.
    pub l_aux: [f64; 3],
    pub total: f64,
}

/// Per-position class distributions of one forward pass.
#[derive(Debug, Clone)]
pub struct Cnn1Output<F> {
    pub fused: Tensor<F>,
    pub p_n: Tensor<F>,
    /// Absent when the auxiliary heads carry no fusion weight.
    pub aux: Option<[Tensor<F>; 3]>,
}

/// Stage-1 network with independent weights per orientation.
#[derive(Debug)]
pub struct Cnn1<F> {
    spec: Cnn1Spec,
    subnets: [Sequential<F>; 3],
    aux: [Sequential<F>; 3],
    fusion: Sequential<F>,
    aux_evaluations: AtomicUsize,
}

impl<F: Real> Clone for Cnn1<F> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            subnets: self.subnets.clone(),
            aux: self.aux.clone(),
            fusion: self.fusion.clone(),
            aux_evaluations: AtomicUsize::new(self.aux_evaluations.load(Ordering::Relaxed)),
        }
    }
}

fn take_center<F: Real>(features: &Tensor<F>) -> Result<Tensor<F>> {
    let &[n, c, h, w] = features.shape() else {
        return Err(Error::InvalidInput(format!("feature map {:?} is not 4-d", features.shape())));
    };
    let (ch, cw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for k in 0..c {
            out.push(features.data()[((b * c + k) * h + ch) * w + cw]);
        }
    }
    Ok(Tensor::from_vec(&[n, c, 1, 1], out)?)
}

fn scatter_center<F: Real>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(shape);
    for b in 0..n {
        for k in 0..c {
            out.data_mut()[((b * c + k) * h + h / 2) * w + w / 2] = grad.data()[b * c + k];
        }
    }
    out
}

impl<F: Real> Cnn1<F> {
    pub fn new(spec: Cnn1Spec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subnet = spec.subnet_layers();
        let aux = spec.aux_layers();
        let subnets = [
            Sequential::new(&subnet, &mut rng)?,
            Sequential::new(&subnet, &mut rng)?,
            Sequential::new(&subnet, &mut rng)?,
        ];
        let aux = [Sequential::new(&aux, &mut rng)?, Sequential::new(&aux, &mut rng)?, Sequential::new(&aux, &mut rng)?];
        let fusion = Sequential::new(&spec.fusion_layers(), &mut rng)?;
        Ok(Self { spec, subnets, aux, fusion, aux_evaluations: AtomicUsize::new(0) })
    }

    pub fn spec(&self) -> &Cnn1Spec {
        &self.spec
    }

    pub fn receptive_field(&self) -> usize {
        self.spec.receptive_field()
    }

    /// Number of auxiliary-head forward passes so far.
    pub fn aux_evaluations(&self) -> usize {
        self.aux_evaluations.load(Ordering::Relaxed)
    }

    fn run_aux(&mut self, o: usize, features: Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        self.aux_evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(self.aux[o].forward(features, ctx)?)
    }

    /// Loss components on a batch, leaving gradients in the parameters.
    /// Auxiliary heads are evaluated only when `gamma > 0`.
    pub fn forward_backward(&mut self, batch: &Cnn1Batch<F>, ctx: &mut ForwardCtx) -> Result<LossComponents> {
        let rf = self.receptive_field();
        if batch.patch < rf {
            return Err(Error::InvalidInput(format!("patch {} smaller than receptive field {rf}", batch.patch)));
        }
        let m = batch.patch - rf + 1;
        let n = batch.len();
        if batch.aux_targets.iter().any(|t| t.len() != n * m * m) || batch.center_targets.len() != n {
            return Err(Error::InvalidInput(format!("label crops do not match the {m}×{m} output map")));
        }
        let gamma = self.spec.gamma;
        let use_aux = gamma > 0.0;
        let mut features = Vec::with_capacity(3);
        for o in 0..3 {
            features.push(self.subnets[o].forward(batch.inputs[o].clone(), ctx)?);
        }
        let feature_shape = features[0].shape().to_vec();
        let centers = features.iter().map(take_center).collect::<Result<Vec<_>>>()?;
        let joined = Tensor::concat_channels(&centers.iter().collect::<Vec<_>>())?;
        let p_n = self.fusion.forward(joined, ctx)?;
        let (l_n, g_n) = cross_entropy(&p_n, &batch.center_targets, None)?;
        let g_joined = self.fusion.backward(g_n)?;
        let w = self.spec.width;
        let g_centers = g_joined.split_channels(&[w, w, w])?;

        let mut l_aux = [0.0; 3];
        for (o, feat) in features.into_iter().enumerate() {
            let mut g_feat = scatter_center(&g_centers[o], &feature_shape);
            if use_aux {
                let p = self.run_aux(o, feat, ctx)?;
                let (l, mut g) = cross_entropy(&p, &batch.aux_targets[o], None)?;
                l_aux[o] = l.as_f64();
                g.scale(F::from_f64_lossy(gamma));
                g_feat.add_assign(&self.aux[o].backward(g)?)?;
            }
            self.subnets[o].backward(g_feat)?;
        }
        let l_n = l_n.as_f64();
        Ok(LossComponents { l_n, l_aux, total: total_loss(l_n, l_aux[0], l_aux[1], l_aux[2], gamma) })
    }

    /// Loss components without touching gradients.
    pub fn evaluate_loss(&mut self, batch: &Cnn1Batch<F>, ctx: &mut ForwardCtx) -> Result<LossComponents> {
        let rf = self.receptive_field();
        let mut l_aux = [0.0; 3];
        let mut centers = Vec::with_capacity(3);
        for o in 0..3 {
            let f = self.subnets[o].forward(batch.inputs[o].clone(), ctx)?;
            if batch.patch < rf {
                return Err(Error::InvalidInput("patch smaller than receptive field".into()));
            }
            centers.push(take_center(&f)?);
            if self.spec.gamma > 0.0 {
                let p = self.run_aux(o, f, ctx)?;
                l_aux[o] = cross_entropy(&p, &batch.aux_targets[o], None)?.0.as_f64();
            }
        }
        let p_n = self.fusion.forward(Tensor::concat_channels(&centers.iter().collect::<Vec<_>>())?, ctx)?;
        let l_n = cross_entropy(&p_n, &batch.center_targets, None)?.0.as_f64();
        Ok(LossComponents { l_n, l_aux, total: total_loss(l_n, l_aux[0], l_aux[1], l_aux[2], self.spec.gamma) })
    }

    /// One Adam step on the total loss. With `gamma = 0` the auxiliary
    /// heads are left out of the update.
    pub fn train_step(&mut self, batch: &Cnn1Batch<F>, opt: &mut OptimizerState<F>, ctx: &mut ForwardCtx) -> Result<LossComponents> {
        Model::zero_grad(self);
        let losses = self.forward_backward(batch, ctx)?;
        let include_aux = self.spec.gamma > 0.0;
        opt.step(&mut self.trainable_slots(include_aux))?;
        Ok(losses)
    }

    pub fn trainable_slots(&mut self, include_aux: bool) -> Vec<ParamSlot<'_, F>> {
        let mut slots = Vec::new();
        let [sa, ss, sc] = &mut self.subnets;
        for (o, net) in [sa, ss, sc].into_iter().enumerate() {
            slots.extend(net.slots(Orientation::ALL[o].name()));
        }
        if include_aux {
            let [aa, as_, ac] = &mut self.aux;
            for (o, net) in [aa, as_, ac].into_iter().enumerate() {
                slots.extend(net.slots(&format!("{}_aux", Orientation::ALL[o].name())));
            }
        }
        slots.extend(self.fusion.slots("fusion"));
        slots
    }

    /// Classifies patch triples whose size equals the receptive field, so
    /// every output is a single position.
    pub fn classify_patches(&mut self, inputs: [Tensor<F>; 3]) -> Result<Cnn1Output<F>> {
        let mut ctx = ForwardCtx::infer();
        let use_aux = self.spec.omega.uses_auxiliary();
        let mut centers = Vec::with_capacity(3);
        let mut aux = Vec::with_capacity(3);
        for (o, x) in inputs.into_iter().enumerate() {
            let f = self.subnets[o].forward(x, &mut ctx)?;
            if f.shape()[2] != 1 || f.shape()[3] != 1 {
                return Err(Error::InvalidInput(format!("patches must match the receptive field, got map {:?}", f.shape())));
            }
            if use_aux {
                aux.push(self.run_aux(o, f.clone(), &mut ctx)?);
            }
            centers.push(f);
        }
        let p_n = self.fusion.forward(Tensor::concat_channels(&centers.iter().collect::<Vec<_>>())?, &mut ctx)?;
        let fused = fuse_tensors(&p_n, &aux, &self.spec.omega)?;
        Ok(Cnn1Output { fused, p_n, aux: if use_aux { Some(aux.try_into().expect("three heads")) } else { None } })
    }

    /// Sliding-window reference: classifies each voxel from its own
    /// receptive-field-sized patch triple.
    pub fn sliding_window(&mut self, v: &CtVolume, voxels: &[[usize; 3]], batch: usize) -> Result<Vec<[F; CLASSES]>> {
        let rf = self.receptive_field();
        let pp = rf * rf;
        let mut out = Vec::with_capacity(voxels.len());
        for chunk in voxels.chunks(batch.max(1)) {
            let n = chunk.len();
            let inputs = Orientation::ALL.map(|o| {
                let mut data = vec![F::zero(); n * pp];
                for (k, &voxel) in chunk.iter().enumerate() {
                    fill_patch(v, voxel, rf, o, &mut data[k * pp..(k + 1) * pp]);
                }
                Tensor::from_vec(&[n, 1, rf, rf], data)
            });
            let [a, s, c] = inputs;
            let result = self.classify_patches([a?, s?, c?])?;
            for k in 0..n {
                out.push(std::array::from_fn(|j| result.fused.data()[k * CLASSES + j]));
            }
        }
        Ok(out)
    }

    /// Runs each orientation's subnetwork over every plane of the
    /// air-padded volume and fuses the per-voxel features.
    pub fn dense_classify_volume(&self, v: &CtVolume) -> Result<DenseProbabilities<F>> {
        let grid = *v.grid();
        let nvox = grid.len();
        let w = self.spec.width;
        let features: Vec<Vec<F>> = Orientation::ALL
            .into_iter()
            .enumerate()
            .map(|(o, orientation)| plane_features(&self.subnets[o], v, orientation, self.receptive_field()))
            .collect::<Result<_>>()?;

        let use_aux = self.spec.omega.uses_auxiliary();
        if use_aux {
            self.aux_evaluations.fetch_add(3, Ordering::Relaxed);
        }
        const CHUNK: usize = 4096;
        let starts: Vec<usize> = (0..nvox).step_by(CHUNK).collect();
        let pieces = starts
            .par_iter()
            .map_init(
                || (self.fusion.clone(), self.aux.clone()),
                |(fusion, aux), &start| -> Result<_> {
                    let len = CHUNK.min(nvox - start);
                    let mut ctx = ForwardCtx::infer();
                    let gather = |feat: &[F]| {
                        let mut data = vec![F::zero(); w * len];
                        for j in 0..len {
                            for c in 0..w {
                                data[c * len + j] = feat[(start + j) * w + c];
                            }
                        }
                        Tensor::from_vec(&[1, w, 1, len], data)
                    };
                    let per: Vec<Tensor<F>> = features.iter().map(|f| gather(f)).collect::<std::result::Result<_, _>>()?;
                    let p_n = fusion.forward(Tensor::concat_channels(&per.iter().collect::<Vec<_>>())?, &mut ctx)?;
                    let mut heads = Vec::new();
                    if use_aux {
                        for (o, f) in per.into_iter().enumerate() {
                            heads.push(aux[o].forward(f, &mut ctx)?);
                        }
                    }
                    let fused = fuse_tensors(&p_n, &heads, &self.spec.omega)?;
                    Ok((fused, p_n, heads))
                },
            )
            .collect::<Result<Vec<_>>>()?;

        let transpose = |t: &Tensor<F>, out: &mut Vec<F>| {
            let len = t.shape()[3];
            for j in 0..len {
                for k in 0..CLASSES {
                    out.push(t.data()[k * len + j]);
                }
            }
        };
        let mut fused = Vec::with_capacity(nvox * CLASSES);
        let mut p_n = Vec::with_capacity(nvox * CLASSES);
        let mut aux: Option<[Vec<F>; 3]> = use_aux.then(|| [Vec::new(), Vec::new(), Vec::new()]);
        for (f, n, heads) in &pieces {
            transpose(f, &mut fused);
            transpose(n, &mut p_n);
            if let Some(aux) = aux.as_mut() {
                for (o, h) in heads.iter().enumerate() {
                    transpose(h, &mut aux[o]);
                }
            }
        }
        Ok(DenseProbabilities { grid, fused, p_n, aux })
    }
}

fn fuse_tensors<F: Real>(p_n: &Tensor<F>, aux: &[Tensor<F>], omega: &Omega) -> Result<Tensor<F>> {
    if aux.is_empty() {
        if omega.uses_auxiliary() {
            return Err(Error::InvalidInput("auxiliary outputs required by the fusion weights".into()));
        }
        return Ok(p_n.clone());
    }
    let mut fused = p_n.clone();
    fused.scale(F::from_f64_lossy(omega.n));
    for (h, w) in aux.iter().zip([omega.a, omega.s, omega.c]) {
        let mut part = h.clone();
        part.scale(F::from_f64_lossy(w));
        fused.add_assign(&part)?;
    }
    Ok(fused)
}

/// Subnetwork features for every voxel, laid out `[voxel][channel]`.
fn plane_features<F: Real>(net: &Sequential<F>, v: &CtVolume, orientation: Orientation, rf: usize) -> Result<Vec<F>> {
    let dims = v.dims();
    let (ra, ca, fa) = orientation.axes();
    let (rows, cols, planes) = (dims[ra], dims[ca], dims[fa]);
    let r = rf / 2;
    let (pr, pc) = (rows + 2 * r, cols + 2 * r);
    let width = match net.layers().iter().rev().find_map(|l| match l.spec() {
        LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
        _ => None,
    }) {
        Some(w) => w,
        None => return Err(Error::InvalidInput("subnetwork has no convolution".into())),
    };
    // bounded batches of planes keep the im2col buffers small
    let per_batch = (4_000_000 / (pr * pc * width).max(1)).clamp(1, 16);
    let starts: Vec<usize> = (0..planes).step_by(per_batch).collect();
    let pad = F::from_f64_lossy(normalize_hu(PAD_HU) as f64);
    let chunks = starts
        .par_iter()
        .map_init(
            || net.clone(),
            |net, &start| -> Result<(usize, Tensor<F>)> {
                let count = per_batch.min(planes - start);
                let mut data = vec![pad; count * pr * pc];
                for k in 0..count {
                    for i in 0..rows {
                        for j in 0..cols {
                            let mut p = [0usize; 3];
                            p[fa] = start + k;
                            p[ra] = i;
                            p[ca] = j;
                            data[(k * pr + i + r) * pc + j + r] =
                                F::from_f64_lossy(normalize_hu(v.get(p[0], p[1], p[2])) as f64);
                        }
                    }
                }
                let x = Tensor::from_vec(&[count, 1, pr, pc], data)?;
                Ok((start, net.forward(x, &mut ForwardCtx::infer())?))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let grid_len = dims.iter().product::<usize>();
    let mut out = vec![F::zero(); grid_len * width];
    let grid = Grid { dims, spacing: v.spacing(), origin: v.grid().origin };
    for (start, t) in chunks {
        let shape = t.shape();
        if shape[2] != rows || shape[3] != cols {
            return Err(Error::InvalidInput(format!("subnetwork output {shape:?} does not cover the plane")));
        }
        for k in 0..shape[0] {
            for c in 0..width {
                for i in 0..rows {
                    for j in 0..cols {
                        let mut p = [0usize; 3];
                        p[fa] = start + k;
                        p[ra] = i;
                        p[ca] = j;
                        let vox = grid.index(p[0], p[1], p[2]);
                        out[vox * width + c] = t.data()[((k * width + c) * rows + i) * cols + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel distributions, `[voxel][class]` in grid order.
#[derive(Debug, Clone)]
pub struct DenseProbabilities<F> {
    pub grid: Grid,
    pub fused: Vec<F>,
    pub p_n: Vec<F>,
    pub aux: Option<[Vec<F>; 3]>,
}

impl<F: Real> DenseProbabilities<F> {
    pub fn voxel(&self, index: usize) -> &[F] {
        &self.fused[index * CLASSES..(index + 1) * CLASSES]
    }

    /// Highest-probability class, lowest code on ties.
    pub fn argmax(&self, index: usize) -> usize {
        let p = self.voxel(index);
        (1..CLASSES).fold(0, |best, k| if p[k] > p[best] { k } else { best })
    }
}

impl<F: Real> Model<F> for Cnn1<F> {
    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn slots(&mut self) -> Vec<ParamSlot<'_, F>> {
        self.trainable_slots(true)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (o, net) in self.subnets.iter().enumerate() {
            out.extend(net.named_tensors(Orientation::ALL[o].name()));
        }
        for (o, net) in self.aux.iter().enumerate() {
            out.extend(net.named_tensors(&format!("{}_aux", Orientation::ALL[o].name())));
        }
        out.extend(self.fusion.named_tensors("fusion"));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (o, net) in self.subnets.iter_mut().enumerate() {
            out.extend(net.named_tensors_mut(Orientation::ALL[o].name()));
        }
        for (o, net) in self.aux.iter_mut().enumerate() {
            out.extend(net.named_tensors_mut(&format!("{}_aux", Orientation::ALL[o].name())));
        }
        out.extend(self.fusion.named_tensors_mut("fusion"));
        out
    }

    fn zero_grad(&mut self) {
        self.subnets.iter_mut().chain(self.aux.iter_mut()).for_each(Sequential::zero_grad);
        self.fusion.zero_grad();
    }
}

/// Weights file metadata: the architecture itself, so a file fully describes its
/// network.
pub fn capture_weights<F: Real>(net: &Cnn1<F>, seed: u64, steps: u64) -> Result<NetworkWeights> {
    Ok(NetworkWeights::capture(net, seed, steps, serde_json::to_string(net.spec())?))
}

pub fn restore_weights<F: Real>(weights: &NetworkWeights) -> Result<Cnn1<F>> {
    let spec: Cnn1Spec = serde_json::from_str(&weights.metadata)
        .map_err(|e| Error::Config(format!("stage-1 weights carry no valid spec: {e}")))?;
    let mut net = Cnn1::new(spec, weights.seed)?;
    weights.apply(&mut net)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use calc_neural::{AdamConfig, Mode};

    fn tiny_spec(gamma: f64) -> Cnn1Spec {
        Cnn1Spec { dilations: vec![1, 2, 1], width: 4, fusion_width: 6, dropout: 0.0, gamma, omega: Omega::default() }
    }

    fn textured_volume(dims: [usize; 3], seed: u64) -> CtVolume {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(dims, [1.5, 0.7, 0.7], [0.0; 3]).unwrap();
        let data = (0..grid.len()).map(|_| rng.gen_range(-900.0..1200.0f32).round()).collect();
        CtVolume::new(grid, 3.0, data).unwrap()
    }

    #[test]
    fn ladders_hit_every_supported_receptive_field() {
        for rf in SUPPORTED_RF {
            let spec = build_cnn1(rf).unwrap();
            assert_eq!(spec.receptive_field(), rf);
            assert_eq!(spec.dilations.first(), Some(&1));
            assert_eq!(spec.dilations.last(), Some(&1));
            assert_eq!(*spec.dilations.iter().max().unwrap(), (rf - 3) / 4);
        }
        assert_eq!(build_cnn1(35).unwrap().dilations, vec![1, 1, 2, 4, 8, 1]);
        assert!(build_cnn1(99).is_err());
    }

    #[test]
    fn total_loss_weighs_auxiliary_terms() {
        assert!((total_loss(1.0, 2.0, 2.0, 2.0, 0.05) - 1.3).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 5.0, 5.0, 5.0, 0.0), 0.7);
    }

    #[test]
    fn fusion_is_a_weighted_average() {
        let p_n = [0.2, 0.8];
        let p_a = [1.0, 0.0];
        let p_s = [0.0, 1.0];
        let p_c = [0.5, 0.5];
        let fused = fuse_probabilities(&p_n, &p_a, &p_s, &p_c, &Omega::default()).unwrap();
        // 0.5 * 0.2 + (1 + 0 + 0.5) / 6 = 0.35
        assert!((fused[0] - 0.35).abs() < 1e-12);
        assert!((fused[1] - 0.65).abs() < 1e-12);
        let bad = Omega { n: 0.5, a: 0.2, s: 0.2, c: 0.2 };
        assert!(fuse_probabilities(&p_n, &p_a, &p_s, &p_c, &bad).is_err());
    }

    #[test]
    fn normalization_maps_window_onto_unit_interval() {
        assert_eq!(normalize_hu(-1000.0), 0.0);
        assert_eq!(normalize_hu(-3000.0), 0.0);
        assert_eq!(normalize_hu(3000.0), 1.0);
        assert_eq!(normalize_hu(1000.0), 0.5);
    }

    #[test]
    fn patches_follow_their_planes() {
        let grid = Grid::new([5, 6, 7], [1.0; 3], [0.0; 3]).unwrap();
        let data = (0..grid.len()).map(|i| i as f32).collect();
        let v = CtVolume::new(grid, 1.0, data).unwrap();
        let set = OrthoPatchSet::extract(&v, [2, 3, 3], 3).unwrap();
        let at = |z: usize, y: usize, x: usize| normalize_hu(grid.index(z, y, x) as f32);
        // axial rows step in y, sagittal rows step in z, coronal columns step in x
        assert_eq!(set.planes[0][1], at(2, 2, 3));
        assert_eq!(set.planes[0][3], at(2, 3, 2));
        assert_eq!(set.planes[1][1], at(1, 3, 3));
        assert_eq!(set.planes[1][3], at(2, 2, 3));
        assert_eq!(set.planes[2][5], at(2, 3, 4));
        for o in 0..3 {
            assert_eq!(set.center(o), at(2, 3, 3));
        }
        let corner = OrthoPatchSet::extract(&v, [0, 0, 0], 3).unwrap();
        assert_eq!(corner.planes[0][0], 0.0);
        assert!(OrthoPatchSet::extract(&v, [0, 0, 0], 4).is_err());
    }

    #[test]
    fn dense_inference_matches_sliding_window() {
        let v = textured_volume([6, 9, 8], 3);
        let mut net = Cnn1::<f64>::new(tiny_spec(0.05), 11).unwrap();
        let dense = net.dense_classify_volume(&v).unwrap();
        let grid = *v.grid();
        let voxels: Vec<[usize; 3]> = (0..grid.len()).map(|i| grid.coords(i)).collect();
        let reference = net.sliding_window(&v, &voxels, 32).unwrap();
        let mut worst = 0.0f64;
        for (i, p) in reference.iter().enumerate() {
            for k in 0..CLASSES {
                worst = worst.max((dense.voxel(i)[k] - p[k]).abs());
            }
        }
        assert!(worst < 1e-12, "max deviation {worst}");
        let sum: f64 = dense.voxel(17).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    fn batch(net: &Cnn1<f64>, patch: usize) -> Cnn1Batch<f64> {
        let v = textured_volume([10, 12, 12], 5);
        let mut l = LabelMap::background(*v.grid()).unwrap();
        let g = *l.grid();
        l.set(g.index(5, 6, 6), crate::imagegrid::ClassCode::Lad);
        l.set(g.index(4, 6, 7), crate::imagegrid::ClassCode::Tac);
        Cnn1Batch::build(&[(&v, &l)], &[(0, [5, 6, 6]), (0, [4, 6, 7]), (0, [2, 3, 9])], patch, net.receptive_field()).unwrap()
    }

    #[test]
    fn zero_gamma_never_evaluates_auxiliary_heads() {
        let mut spec = tiny_spec(0.0);
        spec.omega = Omega::NETWORK_ONLY;
        let mut net = Cnn1::<f64>::new(spec, 2).unwrap();
        let b = batch(&net, 11);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let losses = net.train_step(&b, &mut opt, &mut ctx).unwrap();
        assert_eq!(losses.l_aux, [0.0; 3]);
        assert_eq!(losses.total, losses.l_n);
        net.dense_classify_volume(&textured_volume([3, 8, 8], 1)).unwrap();
        assert_eq!(net.aux_evaluations(), 0);

        let mut with_aux = Cnn1::<f64>::new(tiny_spec(0.05), 2).unwrap();
        with_aux.train_step(&b, &mut opt_fresh(), &mut ctx).unwrap();
        assert_eq!(with_aux.aux_evaluations(), 3);
    }

    fn opt_fresh() -> OptimizerState<f64> {
        OptimizerState::new(AdamConfig::default())
    }

    #[test]
    fn gamma_changes_the_subnetwork_update() {
        let first_weight = |net: &Cnn1<f64>| net.named_tensors()[0].1.data().to_vec();
        let mut a = Cnn1::<f64>::new(tiny_spec(0.0), 4).unwrap();
        let mut b = Cnn1::<f64>::new(tiny_spec(0.05), 4).unwrap();
        let start = first_weight(&a);
        assert_eq!(start, first_weight(&b));
        let data = batch(&a, 11);
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let la = a.train_step(&data, &mut opt_fresh(), &mut ctx).unwrap();
        let lb = b.train_step(&data, &mut opt_fresh(), &mut ctx).unwrap();
        assert_eq!(la.l_n, lb.l_n);
        assert!(lb.total > lb.l_n);
        assert_ne!(first_weight(&a), first_weight(&b));
        assert_ne!(first_weight(&a), start);
    }

    #[test]
    fn training_reduces_the_loss_on_a_fixed_batch() {
        let mut net = Cnn1::<f64>::new(tiny_spec(0.05), 9).unwrap();
        let data = batch(&net, 11);
        let mut opt = opt_fresh();
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let before = net.evaluate_loss(&data, &mut ForwardCtx::infer()).unwrap().total;
        for _ in 0..150 {
            net.train_step(&data, &mut opt, &mut ctx).unwrap();
        }
        let after = net.evaluate_loss(&data, &mut ForwardCtx::infer()).unwrap().total;
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn weights_round_trip_through_bytes() {
        let net = Cnn1::<f32>::new(tiny_spec(0.05), 21).unwrap();
        let w = capture_weights(&net, 21, 0).unwrap();
        let restored: Cnn1<f32> = restore_weights(&NetworkWeights::from_bytes(&w.to_bytes()).unwrap()).unwrap();
        assert_eq!(restored.spec(), net.spec());
        let v = textured_volume([3, 7, 7], 8);
        let a = net.dense_classify_volume(&v).unwrap();
        let b = restored.dense_classify_volume(&v).unwrap();
        assert_eq!(a.fused, b.fused);
        let mut other = Cnn1::<f32>::new(tiny_spec(0.05).with_width(5, 6), 21).unwrap();
        assert!(w.apply(&mut other).is_err());
    }
}
