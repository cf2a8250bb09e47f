//! Synthetic chest phantoms with exact voxel labels.
//!
//! The anatomy is deliberately simple geometry: an elliptical body, two
//! lungs, a cylindrical heart wrapped in epicardial fat, a descending aorta
//! and a vertebral column. Calcified lesions are compact voxel balls placed
//! on class-specific loci (coronary arcs around the heart, the aortic wall,
//! two valve positions). Phantoms exercise the pipeline contracts; they are
//! not a CT simulator and carry no clinical meaning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{save_labels, save_volume, ClassCode, CtVolume, Grid, LabelMap};
use crate::scoring::{risk_category, ScoreReport};

pub const AIR_HU: f32 = -1000.0;
pub const LUNG_HU: f32 = -800.0;
pub const FAT_HU: f32 = -100.0;
pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const AORTIC_WALL_HU: f32 = 50.0;
pub const CORTICAL_BONE_HU: f32 = 700.0;
pub const MARROW_HU: f32 = 320.0;
pub const BRIDGE_HU: f32 = 250.0;
pub const CALCIUM_FLOOR_HU: f32 = 130.0;
const HU_RANGE: (f32, f32) = (-1024.0, 3071.0);
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    Soft,
    Sharp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub soft_sigma: f64,
    pub sharp_sigma: f64,
    /// Weight of the subtracted 3×3 in-plane mean in the sharp noise field.
    pub sharp_highpass: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { soft_sigma: 15.0, sharp_sigma: 35.0, sharp_highpass: 0.5 }
    }
}

/// How many lesions of one class to plant and how large.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionPlan {
    pub count: usize,
    pub volume_mm3: (f64, f64),
    pub hu: (f32, f32),
}

impl LesionPlan {
    pub const NONE: Self = Self { count: 0, volume_mm3: (0.0, 0.0), hu: (400.0, 400.0) };
}

/// Target of a planted supra-threshold bridge leaving a TAC lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bridge {
    Spine,
    /// An unlabeled bright nodule of the given volume.
    Nodule { volume_mm3: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub slice_thickness: f64,
    pub preset: NoisePreset,
    pub noise: NoiseConfig,
    /// Lesion plans keyed by class name (`LAD`, `LCX`, `RCA`, `TAC`, `AV`, `MV`).
    pub lesions: BTreeMap<String, LesionPlan>,
    pub bridge: Option<Bridge>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [20, 96, 96],
            spacing: [1.5, 0.66, 0.66],
            slice_thickness: 3.0,
            preset: NoisePreset::Soft,
            noise: NoiseConfig::default(),
            lesions: BTreeMap::new(),
            bridge: None,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Coronary burden aimed at risk category I..IV for tiers 0..3, plus a
    /// fixed aortic and valvular load.
    pub fn with_burden(mut self, tier: usize) -> Self {
        let coronary = match tier {
            0 => None,
            1 => Some((1, (10.0, 16.0))),
            2 => Some((2, (40.0, 60.0))),
            _ => Some((3, (200.0, 260.0))),
        };
        for class in ClassCode::CORONARY {
            let plan = coronary.map_or(LesionPlan::NONE, |(count, volume_mm3)| LesionPlan {
                count,
                volume_mm3,
                hu: (450.0, 900.0),
            });
            self.lesions.insert(class.name().into(), plan);
        }
        self.lesions.insert("TAC".into(), LesionPlan { count: 2, volume_mm3: (20.0, 120.0), hu: (300.0, 900.0) });
        self.lesions.insert("AV".into(), LesionPlan { count: 1, volume_mm3: (10.0, 60.0), hu: (300.0, 800.0) });
        self.lesions.insert("MV".into(), LesionPlan { count: 1, volume_mm3: (10.0, 60.0), hu: (300.0, 800.0) });
        self
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing, [0.0; 3])?;
        if self.dims[1] < 32 || self.dims[2] < 32 || self.dims[0] < 4 {
            return Err(Error::Config(format!("phantom grid {:?} too small for the anatomy", self.dims)));
        }
        if !(self.slice_thickness > 0.0) {
            return Err(Error::Config("slice_thickness must be positive".into()));
        }
        let n = self.noise;
        if !(n.soft_sigma >= 0.0 && n.sharp_sigma >= 0.0 && (0.0..1.0).contains(&n.sharp_highpass)) {
            return Err(Error::Config("noise sigmas must be >= 0 and highpass in [0, 1)".into()));
        }
        for (name, plan) in &self.lesions {
            match ClassCode::from_name(name) {
                Some(c) if c.is_calcium() => {}
                _ => return Err(Error::Config(format!("unknown lesion class `{name}`"))),
            }
            let (lo, hi) = plan.hu;
            if !(CALCIUM_FLOOR_HU <= lo && lo <= hi && hi <= 3000.0) {
                return Err(Error::Config(format!("{name}: lesion HU range must lie within [130, 3000]")));
            }
            let (vlo, vhi) = plan.volume_mm3;
            if plan.count > 0 && !(vlo > 0.0 && vlo <= vhi) {
                return Err(Error::Config(format!("{name}: lesion volume range must be positive")));
            }
        }
        if let Some(Bridge::Nodule { volume_mm3 }) = self.bridge {
            if !(volume_mm3 > 0.0) {
                return Err(Error::Config("bridge nodule volume must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedLesion {
    pub class: String,
    pub center_mm: [f64; 3],
    pub voxels: usize,
    pub volume_mm3: f64,
    pub hu: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub lesions: Vec<PlacedLesion>,
    /// Labeled volume per class name.
    pub class_volume_mm3: BTreeMap<String, f64>,
    pub bridge_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: CtVolume,
    pub labels: LabelMap,
    pub truth: PhantomTruth,
}

/// In-plane layout in mm relative to the slice center; `y` grows
/// posteriorly, `x` towards the patient's left.
struct Layout {
    scale: f64,
    center: [f64; 2],
}

impl Layout {
    const BODY: [f64; 2] = [27.0, 30.0];
    const LUNG_OFFSET: f64 = 17.0;
    const LUNG: [f64; 2] = [18.0, 10.0];
    const HEART: [f64; 2] = [-6.0, 3.0];
    const HEART_RADIUS: f64 = 11.0;
    const FAT_RADIUS: f64 = 14.0;
    const CORONARY_RADIUS: f64 = 12.5;
    const AORTA: [f64; 2] = [12.0, 12.0];
    const AORTA_RADIUS: f64 = 5.0;
    const AORTA_WALL: f64 = 1.0;
    const AORTA_FAT: f64 = 6.5;
    const SPINE: [f64; 2] = [20.0, 0.0];
    const SPINE_RADIUS: f64 = 5.0;
    const MARROW_RADIUS: f64 = 3.5;
    const AORTIC_VALVE: [f64; 2] = [-8.0, -1.0];
    const MITRAL_VALVE: [f64; 2] = [-3.0, 7.0];

    fn new(grid: &Grid) -> Self {
        let h = grid.dims[1] as f64 * grid.spacing[1];
        let w = grid.dims[2] as f64 * grid.spacing[2];
        Self { scale: h.min(w) / 63.4, center: [(grid.dims[1] - 1) as f64 * grid.spacing[1] / 2.0, (grid.dims[2] - 1) as f64 * grid.spacing[2] / 2.0] }
    }

    /// Layout-space position of an in-plane voxel.
    fn local(&self, grid: &Grid, y: usize, x: usize) -> [f64; 2] {
        [
            (y as f64 * grid.spacing[1] - self.center[0]) / self.scale,
            (x as f64 * grid.spacing[2] - self.center[1]) / self.scale,
        ]
    }

    fn to_mm(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.center[0], p[1] * self.scale + self.center[1]]
    }

    fn tissue(&self, p: [f64; 2]) -> f32 {
        let d = |c: [f64; 2]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
        let body = (p[0] / Self::BODY[0]).powi(2) + (p[1] / Self::BODY[1]).powi(2);
        if body > 1.0 {
            return AIR_HU;
        }
        let spine = d(Self::SPINE);
        if spine <= Self::MARROW_RADIUS {
            return MARROW_HU;
        }
        if spine <= Self::SPINE_RADIUS {
            return CORTICAL_BONE_HU;
        }
        let aorta = d(Self::AORTA);
        if aorta <= Self::AORTA_RADIUS - Self::AORTA_WALL {
            return SOFT_TISSUE_HU;
        }
        if aorta <= Self::AORTA_RADIUS {
            return AORTIC_WALL_HU;
        }
        if aorta <= Self::AORTA_FAT {
            return FAT_HU;
        }
        let heart = d(Self::HEART);
        if heart <= Self::HEART_RADIUS {
            return SOFT_TISSUE_HU;
        }
        if heart <= Self::FAT_RADIUS {
            return FAT_HU;
        }
        for side in [-1.0, 1.0] {
            let l = ((p[0] + 2.0) / Self::LUNG[0]).powi(2) + ((p[1] - side * Self::LUNG_OFFSET) / Self::LUNG[1]).powi(2);
            if l <= 1.0 {
                return LUNG_HU;
            }
        }
        SOFT_TISSUE_HU
    }

    fn is_bone(&self, p: [f64; 2]) -> bool {
        let d = ((p[0] - Self::SPINE[0]).powi(2) + (p[1] - Self::SPINE[1]).powi(2)).sqrt();
        d <= Self::SPINE_RADIUS
    }

    /// Random lesion center (layout space, plus z fraction) for a class.
    fn locus(&self, class: ClassCode, rng: &mut ChaCha8Rng) -> ([f64; 2], f64) {
        let on_ring = |c: [f64; 2], r: f64, deg: (f64, f64), rng: &mut ChaCha8Rng| {
            let a = rng.gen_range(deg.0..deg.1).to_radians();
            [c[0] + r * a.sin(), c[1] + r * a.cos()]
        };
        let jitter = |c: [f64; 2], rng: &mut ChaCha8Rng| [c[0] + rng.gen_range(-1.5..1.5), c[1] + rng.gen_range(-1.5..1.5)];
        match class {
            ClassCode::Lad => (on_ring(Self::HEART, Self::CORONARY_RADIUS, (-110.0, -30.0), rng), rng.gen_range(0.1..0.6)),
            ClassCode::Lcx => (on_ring(Self::HEART, Self::CORONARY_RADIUS, (-10.0, 70.0), rng), rng.gen_range(0.3..0.8)),
            ClassCode::Rca => (on_ring(Self::HEART, Self::CORONARY_RADIUS, (140.0, 240.0), rng), rng.gen_range(0.4..0.9)),
            ClassCode::Tac => (on_ring(Self::AORTA, Self::AORTA_RADIUS - 0.5, (0.0, 360.0), rng), rng.gen_range(0.1..0.9)),
            ClassCode::AorticValve => (jitter(Self::AORTIC_VALVE, rng), rng.gen_range(0.2..0.45)),
            ClassCode::MitralValve => (jitter(Self::MITRAL_VALVE, rng), rng.gen_range(0.55..0.8)),
            ClassCode::Background => unreachable!("background has no locus"),
        }
    }
}

/// The `count` voxels nearest to `center_mm`, ties broken by linear index.
fn ball(grid: &Grid, center_mm: [f64; 3], count: usize) -> Vec<usize> {
    let vv = grid.voxel_volume();
    let radius = (3.0 * count as f64 * vv / (4.0 * std::f64::consts::PI)).cbrt() + 2.0 * grid.spacing.iter().cloned().fold(0.0, f64::max);
    let range = |a: usize| {
        let lo = ((center_mm[a] - radius - grid.origin[a]) / grid.spacing[a]).floor().max(0.0) as usize;
        let hi = (((center_mm[a] + radius - grid.origin[a]) / grid.spacing[a]).ceil().max(0.0) as usize).min(grid.dims[a] - 1);
        lo..=hi
    };
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let p = grid.position([z, y, x]);
                let d: f64 = (0..3).map(|a| (p[a] - center_mm[a]).powi(2)).sum();
                cells.push((d, grid.index(z, y, x)));
            }
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cells.truncate(count);
    cells.into_iter().map(|(_, i)| i).collect()
}

fn neighbours6(grid: &Grid, i: usize) -> impl Iterator<Item = usize> {
    let [nz, ny, nx] = grid.dims;
    let [z, y, x] = grid.coords(i);
    let plane = ny * nx;
    [
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

fn noise_field(cfg: &PhantomConfig, grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sigma = match cfg.preset {
        NoisePreset::Soft => cfg.noise.soft_sigma,
        NoisePreset::Sharp => cfg.noise.sharp_sigma,
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut g: Vec<f64> = (0..grid.len()).map(|_| normal.sample(rng)).collect();
    if cfg.preset == NoisePreset::Sharp && cfg.noise.sharp_highpass > 0.0 {
        // g - a * mean3x3(g), rescaled to unit variance
        let a = cfg.noise.sharp_highpass;
        let [nz, ny, nx] = grid.dims;
        let mut out = vec![0.0; g.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut s = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let yy = (y as isize + dy).clamp(0, ny as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, nx as isize - 1) as usize;
                            s += g[grid.index(z, yy, xx)];
                        }
                    }
                    let i = grid.index(z, y, x);
                    out[i] = g[i] - a * s / 9.0;
                }
            }
        }
        let k = a / 9.0;
        let std = ((1.0 - k).powi(2) + 8.0 * k * k).sqrt();
        g = out.into_iter().map(|v| v / std).collect();
    }
    g.into_iter().map(|v| (v * sigma) as f32).collect()
}

pub fn generate(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing, [0.0; 3])?;
    let layout = Layout::new(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [nz, ny, nx] = grid.dims;
    let plane = ny * nx;

    let mut slice = vec![0.0f32; plane];
    let mut bone = vec![false; plane];
    for y in 0..ny {
        for x in 0..nx {
            let p = layout.local(&grid, y, x);
            slice[y * nx + x] = layout.tissue(p);
            bone[y * nx + x] = layout.is_bone(p);
        }
    }
    let mut base: Vec<f32> = slice.repeat(nz);
    let is_bone = |i: usize| bone[i % plane];

    let mut labels = LabelMap::background(grid)?;
    let mut occupied = vec![false; grid.len()];
    let mut lesions = Vec::new();
    let mut hu_of = vec![0.0f32; grid.len()];

    for class in ClassCode::CALCIUM {
        let Some(plan) = cfg.lesions.get(class.name()) else { continue };
        for _ in 0..plan.count {
            let volume = if plan.volume_mm3.0 < plan.volume_mm3.1 {
                rng.gen_range(plan.volume_mm3.0..=plan.volume_mm3.1)
            } else {
                plan.volume_mm3.0
            };
            let count = ((volume / grid.voxel_volume()).round() as usize).max(1);
            let hu = if plan.hu.0 < plan.hu.1 { rng.gen_range(plan.hu.0..=plan.hu.1) } else { plan.hu.0 };
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let (p, zf) = layout.locus(class, &mut rng);
                let [my, mx] = layout.to_mm(p);
                let center = [zf * (nz - 1) as f64 * grid.spacing[0], my, mx];
                let voxels = ball(&grid, center, count);
                let clear = voxels.len() == count
                    && voxels.iter().all(|&i| {
                        base[i] > AIR_HU
                            && !occupied[i]
                            && !is_bone(i)
                            && neighbours6(&grid, i).all(|j| !occupied[j] && !is_bone(j))
                            && neighbours6(&grid, i).flat_map(|j| neighbours6(&grid, j)).all(|k| !is_bone(k))
                    });
                if clear {
                    placed = Some((center, voxels));
                    break;
                }
            }
            let (center, voxels) = placed.ok_or_else(|| {
                Error::Placement(format!("no room for a {volume:.1} mm³ {} lesion", class.name()))
            })?;
            for &i in &voxels {
                occupied[i] = true;
                labels.set(i, class);
                hu_of[i] = hu;
                base[i] = hu;
            }
            lesions.push(PlacedLesion {
                class: class.name().into(),
                center_mm: center,
                voxels: voxels.len(),
                volume_mm3: voxels.len() as f64 * grid.voxel_volume(),
                hu,
            });
        }
    }

    let mut bridge_cells = Vec::new();
    if let Some(bridge) = cfg.bridge {
        let tac: Vec<usize> = (0..grid.len()).filter(|&i| labels.class_at(i) == ClassCode::Tac).collect();
        if tac.is_empty() {
            return Err(Error::Placement("a bridge needs at least one TAC lesion".into()));
        }
        let target: Vec<usize> = match bridge {
            Bridge::Spine => (0..grid.len()).filter(|&i| is_bone(i)).collect(),
            Bridge::Nodule { volume_mm3 } => {
                let count = ((volume_mm3 / grid.voxel_volume()).round() as usize).max(1);
                let from = grid.position(grid.coords(tac[0]));
                let mut nodule = None;
                for _ in 0..MAX_PLACEMENT_TRIES {
                    let dir: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-6);
                    let reach = 5.0 + (count as f64 * grid.voxel_volume()).cbrt();
                    let center = [from[0], from[1] + reach * dir[0] / norm, from[2] + reach * dir[1] / norm];
                    let voxels = ball(&grid, center, count);
                    if voxels.len() == count
                        && voxels.iter().all(|&i| {
                            base[i] > AIR_HU && !is_bone(i) && !occupied[i] && neighbours6(&grid, i).all(|j| !occupied[j] && !is_bone(j))
                        })
                    {
                        nodule = Some(voxels);
                        break;
                    }
                }
                let voxels = nodule.ok_or_else(|| Error::Placement("no room for the bridge nodule".into()))?;
                for &i in &voxels {
                    base[i] = MARROW_HU;
                    bridge_cells.push(i);
                }
                voxels
            }
        };
        // straight 6-connected walk from the closest lesion voxel to the target
        let dist = |a: usize, b: usize| {
            let (pa, pb) = (grid.coords(a), grid.coords(b));
            (0..3).map(|k| pa[k].abs_diff(pb[k]).pow(2)).sum::<usize>()
        };
        let (start, goal) = tac
            .iter()
            .flat_map(|&a| target.iter().map(move |&b| (a, b)))
            .min_by_key(|&(a, b)| (dist(a, b), a, b))
            .expect("non-empty");
        let mut cur = grid.coords(start);
        let end = grid.coords(goal);
        while cur != end {
            let axis = (0..3).max_by_key(|&k| (cur[k].abs_diff(end[k]), std::cmp::Reverse(k))).expect("three axes");
            if cur[axis] < end[axis] {
                cur[axis] += 1;
            } else {
                cur[axis] -= 1;
            }
            let i = grid.index(cur[0], cur[1], cur[2]);
            if !occupied[i] && !is_bone(i) && base[i] < BRIDGE_HU {
                base[i] = BRIDGE_HU;
                bridge_cells.push(i);
            }
        }
    }

    let noise = noise_field(cfg, &grid, &mut rng);
    let mut data: Vec<f32> = base.iter().zip(&noise).map(|(b, n)| (b + n).clamp(HU_RANGE.0, HU_RANGE.1)).collect();
    for i in 0..grid.len() {
        if occupied[i] {
            data[i] = data[i].max(CALCIUM_FLOOR_HU);
        }
    }
    for &i in &bridge_cells {
        data[i] = data[i].max(CALCIUM_FLOOR_HU);
    }
    let volume = CtVolume::new(grid, cfg.slice_thickness, data)?;
    let class_volume_mm3 = ClassCode::CALCIUM
        .iter()
        .map(|&c| (c.name().to_string(), labels.count(c) as f64 * grid.voxel_volume()))
        .collect();
    bridge_cells.sort_unstable();
    bridge_cells.dedup();
    Ok(Phantom {
        volume,
        labels,
        truth: PhantomTruth { lesions, class_volume_mm3, bridge_voxels: bridge_cells.len() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Split sizes for `n` subjects: floor(0.6 n) training and floor(0.1 n)
/// validation subjects, each at least one, the rest for testing.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 6 / 10).max(1);
    let val = (n / 10).max(1);
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub split: Split,
    pub preset: NoisePreset,
    pub burden_tier: usize,
    pub config: PhantomConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub subjects: usize,
    /// Fraction of each split generated with the sharp preset.
    pub sharp_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { subjects: 30, sharp_fraction: 0.5 }
    }
}

/// Document read by the phantom command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomRunConfig {
    pub corpus: CorpusConfig,
    /// Base settings; lesion plans are replaced per subject by the burden tier.
    pub phantom: PhantomConfig,
    pub seed: u64,
}

impl PhantomRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.phantom.validate()?;
        Ok(cfg)
    }
}

/// Plans a corpus: subjects are shuffled into splits, then each split cycles
/// through the four burden tiers and gets its share of sharp scans.
pub fn generate_corpus(corpus: &CorpusConfig, base: &PhantomConfig, seed: u64) -> Result<Vec<Subject>> {
    let n = corpus.subjects;
    if n < 3 {
        return Err(Error::Config(format!("a corpus needs at least 3 subjects, got {n}")));
    }
    if !(0.0..=1.0).contains(&corpus.sharp_fraction) {
        return Err(Error::Config("sharp_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let (train, val, _) = split_sizes(n);
    let mut subjects = vec![None; n];
    let splits = [(Split::Train, 0..train), (Split::Validation, train..train + val), (Split::Test, train + val..n)];
    for (split, range) in splits {
        let members = &order[range];
        let sharp = (members.len() as f64 * corpus.sharp_fraction).round() as usize;
        for (k, &id) in members.iter().enumerate() {
            // spreads exactly `sharp` sharp scans evenly over the split
            let m = members.len();
            let preset = if (k + 1) * sharp / m > k * sharp / m { NoisePreset::Sharp } else { NoisePreset::Soft };
            let tier = k % 4;
            let config = PhantomConfig { preset, seed: rng.gen(), ..base.clone() }.with_burden(tier);
            subjects[id] = Some(Subject { id: format!("subj-{id:03}"), split, preset, burden_tier: tier, config });
        }
    }
    Ok(subjects.into_iter().map(|s| s.expect("every subject assigned")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub preset: NoisePreset,
    pub burden_tier: usize,
    pub seed: u64,
    pub volume_file: String,
    pub labels_file: String,
    pub class_volume_mm3: BTreeMap<String, f64>,
    pub cac_agatston: f64,
    pub risk_category: crate::scoring::RiskCategory,
    pub lesions: Vec<PlacedLesion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub subjects: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates and writes every subject of a planned corpus into `dir`.
pub fn write_corpus(subjects: &[Subject], seed: u64, dir: &Path) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let ph = generate(&s.config)?;
        let volume_file = format!("{}.vhdr", s.id);
        let labels_file = format!("{}_labels.vhdr", s.id);
        save_volume(&ph.volume, &dir.join(&volume_file))?;
        save_labels(&ph.labels, &dir.join(&labels_file))?;
        let report = ScoreReport::compute(&s.id, &ph.volume, &ph.labels, vec![])?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            split: s.split,
            preset: s.preset,
            burden_tier: s.burden_tier,
            seed: s.config.seed,
            volume_file,
            labels_file,
            class_volume_mm3: ph.truth.class_volume_mm3,
            cac_agatston: report.cac_agatston,
            risk_category: risk_category(report.cac_agatston)?,
            lesions: ph.truth.lesions,
        });
    }
    let manifest = CorpusManifest { version: 1, seed, subjects: entries };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}
