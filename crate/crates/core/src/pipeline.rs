//! Preprocessing, candidate extraction, the two-stage cascade and training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use calc_neural::{ForwardCtx, Mode, OptimizerState, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GridConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::imagegrid::{load_labels, load_volume, reconstruct_slabs, resample_inplane, resample_labels_to, ClassCode, CtVolume, Grid, LabelMap};
use crate::phantom::{read_manifest, Split};
use crate::stage1::{Cnn1, Cnn1Batch, CLASSES};
use crate::stage2::{Cnn2, Cnn2Batch};

const SPACING_TOLERANCE: f64 = 1e-6;
const STAGE2_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub voxel: [usize; 3],
    pub hu: f32,
    /// Stage-1 decision, set by [`run_inference`].
    pub class: Option<ClassCode>,
    pub probabilities: Option<[f32; CLASSES]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub grid: Grid,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn voxels(&self) -> Vec<[usize; 3]> {
        self.candidates.iter().map(|c| c.voxel).collect()
    }
}

/// Every voxel at or above `threshold_hu`, in grid order.
pub fn extract_candidates(v: &CtVolume, threshold_hu: f32) -> CandidateSet {
    let grid = *v.grid();
    let candidates = v
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &hu)| hu >= threshold_hu)
        .map(|(i, &hu)| Candidate { voxel: grid.coords(i), hu, class: None, probabilities: None })
        .collect();
    CandidateSet { grid, candidates }
}

/// Slab reconstruction and in-plane resampling onto the working grid.
/// Steps whose target already matches the input are skipped.
pub fn standardize(v: &CtVolume, g: &GridConfig) -> Result<CtVolume> {
    let close = |a: f64, b: f64| (a - b).abs() <= SPACING_TOLERANCE;
    let mut out = if close(v.spacing()[0], g.slab_spacing_mm) && close(v.slice_thickness(), g.slab_thickness_mm) {
        v.clone()
    } else {
        reconstruct_slabs(v, g.slab_thickness_mm, g.slab_spacing_mm)?
    };
    let [_, sy, sx] = out.spacing();
    if !close(sy, g.inplane_spacing_mm) || !close(sx, g.inplane_spacing_mm) {
        out = resample_inplane(&out, g.inplane_spacing_mm)?;
    }
    Ok(out)
}

/// Result of the cascade on one scan.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Final labels on the input grid.
    pub labels: LabelMap,
    pub standardized: CtVolume,
    /// Stage-1 labels of the candidates on the working grid.
    pub stage1_labels: LabelMap,
    /// Final labels on the working grid.
    pub final_labels: LabelMap,
    pub candidates: CandidateSet,
    pub stage1_positives: usize,
    pub stage2_rejected: usize,
}

/// Stage 1 on the whole working grid, decisions kept at candidates only,
/// then stage 2 on the stage-1 positives. `net2 = None` accepts every
/// positive.
pub fn run_inference<F: Real>(
    v: &CtVolume,
    net1: &Cnn1<F>,
    net2: Option<&Cnn2<F>>,
    cfg: &PipelineConfig,
) -> Result<Inference> {
    let standardized = standardize(v, &cfg.grid)?;
    let grid = *standardized.grid();
    let mut candidates = extract_candidates(&standardized, cfg.threshold_hu);
    let mut stage1_labels = LabelMap::background(grid)?;
    if !candidates.is_empty() {
        let dense = net1.dense_classify_volume(&standardized)?;
        for c in &mut candidates.candidates {
            let index = grid.index(c.voxel[0], c.voxel[1], c.voxel[2]);
            let class = ClassCode::from_code(dense.argmax(index) as u32)?;
            c.class = Some(class);
            c.probabilities = Some(std::array::from_fn(|k| dense.voxel(index)[k].as_f64() as f32));
            stage1_labels.set(index, class);
        }
    }
    let positives: Vec<[usize; 3]> =
        candidates.candidates.iter().filter(|c| c.class.is_some_and(ClassCode::is_calcium)).map(|c| c.voxel).collect();
    let mut final_labels = stage1_labels.clone();
    let mut rejected = 0;
    if let Some(net2) = net2 {
        let p = net2.classify_candidates(&standardized, &positives, STAGE2_BATCH)?;
        for (voxel, p) in positives.iter().zip(&p) {
            if p[0] >= p[1] {
                final_labels.set(grid.index(voxel[0], voxel[1], voxel[2]), ClassCode::Background);
                rejected += 1;
            }
        }
    }
    let labels = if grid.same_as(v.grid()) { final_labels.clone() } else { resample_labels_to(&final_labels, v.grid())? };
    Ok(Inference {
        labels,
        standardized,
        stage1_labels,
        final_labels,
        candidates,
        stage1_positives: positives.len(),
        stage2_rejected: rejected,
    })
}

/// `ceil(b / 2)` draws from `positive` followed by `floor(b / 2)` from
/// `negative`, with replacement.
pub fn balanced_minibatch<T: Copy>(
    positive: &[T],
    negative: &[T],
    batch_size: usize,
    names: (&'static str, &'static str),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    if positive.is_empty() {
        return Err(Error::EmptyStratum(names.0));
    }
    if negative.is_empty() {
        return Err(Error::EmptyStratum(names.1));
    }
    let half = batch_size.div_ceil(2);
    let mut out = Vec::with_capacity(batch_size);
    out.extend((0..half).map(|_| positive[rng.gen_range(0..positive.len())]));
    out.extend((half..batch_size).map(|_| negative[rng.gen_range(0..negative.len())]));
    Ok(out)
}

/// One scan on the working grid with its reference labels.
#[derive(Debug, Clone)]
pub struct LabeledScan {
    pub id: String,
    pub subject: String,
    pub volume: CtVolume,
    pub labels: LabelMap,
}

impl LabeledScan {
    /// Standardizes the scan and carries the reference along.
    pub fn new(id: &str, subject: &str, volume: &CtVolume, labels: &LabelMap, g: &GridConfig) -> Result<Self> {
        volume.grid().ensure_same(labels.grid())?;
        let std = standardize(volume, g)?;
        let labels = if std.grid().same_as(volume.grid()) { labels.clone() } else { resample_labels_to(labels, std.grid())? };
        Ok(Self { id: id.into(), subject: subject.into(), volume: std, labels })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<LabeledScan>,
    pub validation: Vec<LabeledScan>,
    pub test: Vec<LabeledScan>,
}

impl Corpus {
    /// Reads a phantom corpus directory and its manifest.
    pub fn load(dir: &Path, g: &GridConfig) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut corpus = Self::default();
        for e in &manifest.subjects {
            let v = load_volume(&dir.join(&e.volume_file))?;
            let l = load_labels(&dir.join(&e.labels_file))?;
            let scan = LabeledScan::new(&e.id, &e.id, &v, &l, g)?;
            match e.split {
                Split::Train => corpus.train.push(scan),
                Split::Validation => corpus.validation.push(scan),
                Split::Test => corpus.test.push(scan),
            }
        }
        corpus.check_subjects()?;
        Ok(corpus)
    }

    /// Errors when a subject has scans in more than one split.
    pub fn check_subjects(&self) -> Result<()> {
        let ids = |s: &[LabeledScan]| s.iter().map(|x| x.subject.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&self.train), ids(&self.validation), ids(&self.test));
        let leak = tr.intersection(&va).chain(tr.intersection(&te)).chain(va.intersection(&te)).next().cloned();
        match leak {
            Some(subject) => Err(Error::SubjectLeak(subject)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: Stage,
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub stage1_calcium_voxels: usize,
    pub stage1_background_voxels: usize,
    /// Stage-1 positives over the training scans.
    pub stage1_positives: usize,
    pub stage2_true_positives: usize,
    pub stage2_false_positives: usize,
    /// Background candidates added when stage 1 produced no false positive.
    pub stage2_fallback_negatives: usize,
}

#[derive(Debug)]
pub struct TrainedPipeline<F> {
    pub stage1: Cnn1<F>,
    pub stage2: Cnn2<F>,
    pub log: TrainingLog,
    pub stage1_seed: u64,
    pub stage2_seed: u64,
}

type VoxelRef = (usize, [usize; 3]);

/// Calcium and background candidates of a scan set.
fn candidate_strata(scans: &[LabeledScan], threshold: f32) -> (Vec<VoxelRef>, Vec<VoxelRef>) {
    let (mut calcium, mut background) = (Vec::new(), Vec::new());
    for (s, scan) in scans.iter().enumerate() {
        for c in extract_candidates(&scan.volume, threshold).candidates {
            let [z, y, x] = c.voxel;
            if scan.labels.get(z, y, x).is_calcium() {
                calcium.push((s, c.voxel));
            } else {
                background.push((s, c.voxel));
            }
        }
    }
    (calcium, background)
}

fn pairs(scans: &[LabeledScan]) -> Vec<(&CtVolume, &LabelMap)> {
    scans.iter().map(|s| (&s.volume, &s.labels)).collect()
}

/// Trains stage 1 on candidates of the training scans, harvests its
/// positives and trains stage 2 on them.
pub fn train_pipeline<F: Real>(corpus: &Corpus, cfg: &PipelineConfig) -> Result<TrainedPipeline<F>> {
    cfg.validate()?;
    corpus.check_subjects()?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::InvalidInput("training needs training and validation scans".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stage1_seed: u64 = master.gen();
    let stage2_seed: u64 = master.gen();
    let mut log = TrainingLog::default();

    let spec1 = cfg.stage1_spec()?;
    let rf = spec1.receptive_field();
    let patch = cfg.stage1.patch;
    let mut net1 = Cnn1::<F>::new(spec1, stage1_seed)?;
    let (calcium, background) = candidate_strata(&corpus.train, cfg.threshold_hu);
    log.stage1_calcium_voxels = calcium.len();
    log.stage1_background_voxels = background.len();
    let names = ("calcium", "background");
    let train_scans = pairs(&corpus.train);
    let val_scans = pairs(&corpus.validation);
    let mut rng = ChaCha8Rng::seed_from_u64(stage1_seed ^ 0x5eed);
    let val_batch = {
        let (vc, vb) = candidate_strata(&corpus.validation, cfg.threshold_hu);
        let samples = balanced_minibatch(&vc, &vb, cfg.stage1.validation_samples, names, &mut rng)?;
        Cnn1Batch::<F>::build(&val_scans, &samples, patch, rf)?
    };
    let mut opt = OptimizerState::new(cfg.stage1_adam());
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(stage1_seed ^ 0xd0));
    let mut running = 0.0;
    for step in 1..=cfg.stage1.steps {
        let samples = balanced_minibatch(&calcium, &background, cfg.stage1.batch_size, names, &mut rng)?;
        let batch = Cnn1Batch::<F>::build(&train_scans, &samples, patch, rf)?;
        running += net1.train_step(&batch, &mut opt, &mut ctx)?.total;
        if step % cfg.stage1.validation_every == 0 || step == cfg.stage1.steps {
            let span = (step - 1) % cfg.stage1.validation_every + 1;
            let validation_loss = net1.evaluate_loss(&val_batch, &mut ForwardCtx::infer())?.total;
            log.entries.push(LogEntry { stage: Stage::Stage1, step, train_loss: running / span as f64, validation_loss });
            running = 0.0;
        }
    }

    let (tp, fp) = harvest_positives(&net1, &corpus.train, cfg.threshold_hu)?;
    log.stage1_positives = tp.len() + fp.len();
    log.stage2_true_positives = tp.len();
    log.stage2_false_positives = fp.len();
    if tp.is_empty() {
        return Err(Error::EmptyStratum("stage-1 true positives"));
    }
    let negatives = if fp.is_empty() {
        log.stage2_fallback_negatives = background.len();
        background.clone()
    } else {
        fp
    };
    let (val_tp, val_fp) = harvest_positives(&net1, &corpus.validation, cfg.threshold_hu)?;

    let spec2 = cfg.stage2_spec()?;
    let patch2 = spec2.patch;
    let mut net2 = Cnn2::<F>::new(spec2, stage2_seed)?;
    let volumes: Vec<&CtVolume> = corpus.train.iter().map(|s| &s.volume).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stage2_seed ^ 0x5eed);
    let tagged = |v: &[VoxelRef], truth: bool| v.iter().map(|&(s, p)| (s, p, truth)).collect::<Vec<_>>();
    let (pos, neg) = (tagged(&tp, true), tagged(&negatives, false));
    let val_batch = {
        let (vp, vn) = (tagged(&val_tp, true), tagged(if val_fp.is_empty() { &val_tp } else { &val_fp }, false));
        let val_volumes: Vec<&CtVolume> = corpus.validation.iter().map(|s| &s.volume).collect();
        (!vp.is_empty())
            .then(|| balanced_minibatch(&vp, &vn, cfg.stage2.validation_samples, names, &mut rng))
            .transpose()?
            .map(|samples| Cnn2Batch::<F>::build(&val_volumes, &samples, patch2))
            .transpose()?
    };
    let mut opt = OptimizerState::new(cfg.stage2_adam());
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(stage2_seed ^ 0xd0));
    let mut running = 0.0;
    for step in 1..=cfg.stage2.steps {
        let samples = balanced_minibatch(&pos, &neg, cfg.stage2.batch_size, ("true positive", "false positive"), &mut rng)?;
        let batch = Cnn2Batch::<F>::build(&volumes, &samples, patch2)?;
        running += net2.train_step(&batch, &mut opt, &mut ctx)?;
        if step % cfg.stage2.validation_every == 0 || step == cfg.stage2.steps {
            let span = (step - 1) % cfg.stage2.validation_every + 1;
            let validation_loss = match &val_batch {
                Some(b) => net2.evaluate_loss(b)?,
                None => f64::NAN,
            };
            log.entries.push(LogEntry { stage: Stage::Stage2, step, train_loss: running / span as f64, validation_loss });
            running = 0.0;
        }
    }
    Ok(TrainedPipeline { stage1: net1, stage2: net2, log, stage1_seed, stage2_seed })
}

/// Stage-1 positives split by the reference into true and false ones.
pub fn harvest_positives<F: Real>(
    net1: &Cnn1<F>,
    scans: &[LabeledScan],
    threshold: f32,
) -> Result<(Vec<VoxelRef>, Vec<VoxelRef>)> {
    let (mut tp, mut fp) = (Vec::new(), Vec::new());
    for (s, scan) in scans.iter().enumerate() {
        let candidates = extract_candidates(&scan.volume, threshold);
        if candidates.is_empty() {
            continue;
        }
        let dense = net1.dense_classify_volume(&scan.volume)?;
        let grid = scan.volume.grid();
        for c in candidates.candidates {
            let [z, y, x] = c.voxel;
            if dense.argmax(grid.index(z, y, x)) != 0 {
                if scan.labels.get(z, y, x).is_calcium() {
                    tp.push((s, c.voxel));
                } else {
                    fp.push((s, c.voxel));
                }
            }
        }
    }
    Ok((tp, fp))
}

/// Machine-readable record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub precision: String,
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// File name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub weight_fingerprints: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u128>,
}

impl RunManifest {
    pub fn new(command: &str, precision: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            precision: precision.into(),
            config: None,
            config_hash: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            weight_fingerprints: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, cfg: &PipelineConfig) -> Self {
        self.config = Some(cfg.to_toml());
        self.config_hash = Some(cfg.hash());
        self
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
