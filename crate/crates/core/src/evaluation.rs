//! Agreement statistics: volume overlap, risk-category kappa and the
//! voxel-to-lesion conversion.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{ClassCode, CtVolume, LabelMap};
use crate::scoring::{RiskCategory, ScoreReport};

/// Row = reference category, column = predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput("confusion matrix needs at least 2 categories".into()));
        }
        Ok(Self { k, counts: vec![0; k * k] })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let mut m = Self::new(rows.len())?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != m.k {
                return Err(Error::InvalidInput(format!("row {r} has {} entries, expected {}", row.len(), m.k)));
            }
            m.counts[r * m.k..(r + 1) * m.k].copy_from_slice(row);
        }
        Ok(m)
    }

    /// Whitespace-separated non-negative integers, one row per line.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<u64>().map_err(|_| Error::InvalidInput(format!("not a count: `{t}`"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        self.counts[reference * self.k + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn to_text(&self) -> String {
        self.counts
            .chunks(self.k)
            .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Linearly weighted kappa, disagreement weights `|i - j| / (k - 1)`.
pub fn weighted_kappa(m: &ConfusionMatrix) -> Result<f64> {
    let n = m.total() as f64;
    if n == 0.0 {
        return Err(Error::InvalidInput("confusion matrix is empty".into()));
    }
    let k = m.size();
    let row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| m.get(i, j)).sum::<u64>() as f64 / n).collect();
    let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| m.get(i, j)).sum::<u64>() as f64 / n).collect();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = i.abs_diff(j) as f64 / (k - 1) as f64;
            observed += w * m.get(i, j) as f64 / n;
            expected += w * row[i] * col[j];
        }
    }
    if observed == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - observed / expected)
}

pub fn risk_confusion(pred: &[ScoreReport], reference: &[ScoreReport]) -> Result<ConfusionMatrix> {
    let by_id: BTreeMap<&str, RiskCategory> = pred.iter().map(|r| (r.scan_id.as_str(), r.risk_category)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::InvalidInput("duplicate scan id among predictions".into()));
    }
    let mut m = ConfusionMatrix::new(RiskCategory::ALL.len())?;
    for r in reference {
        let p = by_id.get(r.scan_id.as_str()).ok_or_else(|| Error::UnmatchedScan(r.scan_id.clone()))?;
        m.add(r.risk_category.index(), p.index());
    }
    if let Some(extra) = pred.iter().find(|p| !reference.iter().any(|r| r.scan_id == p.scan_id)) {
        return Err(Error::UnmatchedScan(extra.scan_id.clone()));
    }
    Ok(m)
}

/// Which voxels count as positive in an overlap comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(ClassCode),
    AnyCalcium,
}

impl Target {
    fn hit(self, code: u8) -> bool {
        match self {
            Target::Class(c) => code == c.code(),
            Target::AnyCalcium => code != 0,
        }
    }
}

/// True-positive, false-negative and false-positive volumes in mm³.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeCounts {
    pub tp: f64,
    pub fn_: f64,
    pub fp: f64,
}

impl VolumeCounts {
    pub fn merge(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fn_: self.fn_ + o.fn_, fp: self.fp + o.fp }
    }

    /// An empty reference gives sensitivity 100 and agreement on two empty
    /// sets gives F1 1.
    pub fn stats(self) -> AgreementStats {
        let sensitivity_pct = if self.tp + self.fn_ > 0.0 { 100.0 * (self.tp / (self.tp + self.fn_)) } else { 100.0 };
        let denom = 2.0 * self.tp + self.fp + self.fn_;
        AgreementStats {
            sensitivity_pct,
            false_positive_volume_mm3: self.fp,
            f1: if denom > 0.0 { 2.0 * self.tp / denom } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub sensitivity_pct: f64,
    pub false_positive_volume_mm3: f64,
    pub f1: f64,
}

pub fn volume_counts(pred: &LabelMap, reference: &LabelMap, target: Target) -> Result<VolumeCounts> {
    pred.grid().ensure_same(reference.grid())?;
    let (mut tp, mut fn_, mut fp) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        match (target.hit(p), target.hit(r)) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (true, false) => fp += 1,
            _ => {}
        }
    }
    let vv = pred.grid().voxel_volume();
    Ok(VolumeCounts { tp: tp as f64 * vv, fn_: fn_ as f64 * vv, fp: fp as f64 * vv })
}

pub fn volume_agreement(pred: &LabelMap, reference: &LabelMap, target: Target) -> Result<AgreementStats> {
    Ok(volume_counts(pred, reference, target)?.stats())
}

/// Corpus summary in both reporting modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusAgreement {
    /// Volumes pooled over all scans before computing the ratios.
    pub pooled: AgreementStats,
    /// F1 computed per scan, then averaged.
    pub per_scan_mean_f1: f64,
    pub mean_false_positive_volume_mm3: f64,
    pub scans: usize,
}

pub fn corpus_agreement(per_scan: &[VolumeCounts]) -> CorpusAgreement {
    let n = per_scan.len().max(1) as f64;
    let pooled = per_scan.iter().fold(VolumeCounts::default(), |a, &b| a.merge(b));
    CorpusAgreement {
        pooled: pooled.stats(),
        per_scan_mean_f1: per_scan.iter().map(|c| c.stats().f1).sum::<f64>() / n,
        mean_false_positive_volume_mm3: pooled.fp / n,
        scans: per_scan.len(),
    }
}

pub const EXCLUSION_RATIO: f64 = 5.0;
pub const LESION_THRESHOLD_HU: f32 = 130.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionStats {
    pub seed_volume_mm3: f64,
    pub grown_volume_mm3: f64,
    /// Grown over seed volume; 1 when there are no seeds.
    pub ratio: f64,
    pub excluded: bool,
    pub lesions: usize,
}

/// Grows every labeled voxel into its 6-connected region of voxels at or
/// above 130 HU. Each region takes the majority label of its seeds, ties
/// going to the lowest class code. Seeds stay in their region whatever
/// their intensity.
pub fn lesionize(reference: &LabelMap, v: &CtVolume) -> Result<(LabelMap, LesionStats)> {
    reference.grid().ensure_same(v.grid())?;
    let grid = *reference.grid();
    let [nz, ny, nx] = grid.dims;
    let seeds = reference.data();
    let open = |i: usize| seeds[i] != 0 || v.data()[i] >= LESION_THRESHOLD_HU;
    let mut out = LabelMap::background(grid)?;
    let mut visited = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    let mut member = Vec::new();
    let mut lesions = 0;
    for start in 0..grid.len() {
        if seeds[start] == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        member.clear();
        let mut votes = [0usize; ClassCode::COUNT];
        while let Some(i) = queue.pop_front() {
            member.push(i);
            votes[seeds[i] as usize] += 1;
            let [z, y, x] = grid.coords(i);
            let plane = ny * nx;
            let neighbours = [
                (z > 0).then(|| i - plane),
                (z + 1 < nz).then(|| i + plane),
                (y > 0).then(|| i - nx),
                (y + 1 < ny).then(|| i + nx),
                (x > 0).then(|| i - 1),
                (x + 1 < nx).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if !visited[j] && open(j) {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        // index 0 counts grown non-seed voxels and never votes
        let winner = (1..ClassCode::COUNT).fold(1, |best, c| if votes[c] > votes[best] { c } else { best });
        let class = ClassCode::from_code(winner as u32)?;
        for &i in &member {
            out.set(i, class);
        }
        lesions += 1;
    }
    let vv = grid.voxel_volume();
    let seed_volume = reference.calcium_count() as f64 * vv;
    let grown_volume = out.calcium_count() as f64 * vv;
    let ratio = if seed_volume > 0.0 { grown_volume / seed_volume } else { 1.0 };
    Ok((
        out,
        LesionStats {
            seed_volume_mm3: seed_volume,
            grown_volume_mm3: grown_volume,
            ratio,
            excluded: ratio > EXCLUSION_RATIO,
            lesions,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEvaluation {
    pub scan_id: String,
    pub calcium: VolumeCounts,
    /// Indexed by class code 1..=6.
    pub per_class: Vec<VolumeCounts>,
}

impl ScanEvaluation {
    pub fn compute(scan_id: &str, pred: &LabelMap, reference: &LabelMap) -> Result<Self> {
        Ok(Self {
            scan_id: scan_id.to_string(),
            calcium: volume_counts(pred, reference, Target::AnyCalcium)?,
            per_class: ClassCode::CALCIUM
                .iter()
                .map(|&c| volume_counts(pred, reference, Target::Class(c)))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scans: Vec<ScanEvaluation>,
    pub calcium: CorpusAgreement,
    pub per_class: BTreeMap<String, CorpusAgreement>,
    pub risk_confusion: Vec<Vec<u64>>,
    pub risk_kappa: f64,
}

impl EvaluationReport {
    pub fn build(scans: Vec<ScanEvaluation>, pred: &[ScoreReport], reference: &[ScoreReport]) -> Result<Self> {
        let calcium = corpus_agreement(&scans.iter().map(|s| s.calcium).collect::<Vec<_>>());
        let per_class = ClassCode::CALCIUM
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let counts: Vec<_> = scans.iter().map(|s| s.per_class[k]).collect();
                (c.name().to_string(), corpus_agreement(&counts))
            })
            .collect();
        let m = risk_confusion(pred, reference)?;
        Ok(Self { scans, calcium, per_class, risk_kappa: weighted_kappa(&m)?, risk_confusion: m.rows() })
    }
}
