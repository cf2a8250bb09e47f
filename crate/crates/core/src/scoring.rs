//! Calcium volume, overlap-normalized Agatston score and risk category.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{ClassCode, CtVolume, LabelMap};

/// Lower HU edges of the Agatston density bins and their weights.
pub const DENSITY_BINS: [(f32, u32); 4] = [(130.0, 1), (200.0, 2), (300.0, 3), (400.0, 4)];

pub fn density_weight(peak_hu: f32) -> u32 {
    DENSITY_BINS.iter().rev().find(|(edge, _)| peak_hu >= *edge).map_or(0, |&(_, w)| w)
}

pub fn volume_score(labels: &LabelMap, class: ClassCode) -> f64 {
    labels.count(class) as f64 * labels.grid().voxel_volume()
}

/// Agatston score of one class, summed over 4-connected in-slice components
/// and scaled by `spacing_z / slice_thickness` for overlapping slices.
pub fn agatston_score(v: &CtVolume, labels: &LabelMap, class: ClassCode) -> Result<f64> {
    v.grid().ensure_same(labels.grid())?;
    let thickness = v.slice_thickness();
    if !(thickness.is_finite() && thickness > 0.0) {
        return Err(Error::InvalidInput("slice thickness missing".into()));
    }
    let [nz, ny, nx] = v.dims();
    let [sz, sy, sx] = v.spacing();
    let code = class.code();
    let plane = ny * nx;
    let mut seen = vec![false; plane];
    let mut stack = Vec::new();
    let mut total = 0.0;
    for z in 0..nz {
        let lab = &labels.data()[z * plane..(z + 1) * plane];
        let hu = &v.data()[z * plane..(z + 1) * plane];
        seen.iter_mut().for_each(|s| *s = false);
        for start in 0..plane {
            if lab[start] != code || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut area, mut peak) = (0usize, f32::NEG_INFINITY);
            while let Some(i) = stack.pop() {
                area += 1;
                peak = peak.max(hu[i]);
                let (y, x) = (i / nx, i % nx);
                let mut visit = |j: usize| {
                    if lab[j] == code && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - nx);
                }
                if y + 1 < ny {
                    visit(i + nx);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < nx {
                    visit(i + 1);
                }
            }
            total += area as f64 * sy * sx * density_weight(peak) as f64;
        }
    }
    Ok(total * sz / thickness)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskCategory {
    I,
    II,
    III,
    IV,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// I: [0, 10], II: (10, 100], III: (100, 1000], IV: above 1000.
pub fn risk_category(cac_agatston: f64) -> Result<RiskCategory> {
    if cac_agatston.is_nan() || cac_agatston < 0.0 {
        return Err(Error::InvalidInput(format!("negative calcium score {cac_agatston}")));
    }
    Ok(match cac_agatston {
        s if s <= 10.0 => RiskCategory::I,
        s if s <= 100.0 => RiskCategory::II,
        s if s <= 1000.0 => RiskCategory::III,
        _ => RiskCategory::IV,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub code: u8,
    pub volume_mm3: f64,
    pub agatston: f64,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub version: u32,
    pub scan_id: String,
    pub classes: Vec<ClassScore>,
    pub cac_volume_mm3: f64,
    pub cac_agatston: f64,
    pub risk_category: RiskCategory,
    pub weights_fingerprints: Vec<String>,
}

impl ScoreReport {
    /// CAC aggregates sum the per-class LAD, LCX and RCA scores.
    pub fn compute(scan_id: &str, v: &CtVolume, labels: &LabelMap, fingerprints: Vec<String>) -> Result<Self> {
        let classes = ClassCode::CALCIUM
            .iter()
            .map(|&c| {
                Ok(ClassScore {
                    class: c.name().to_string(),
                    code: c.code(),
                    volume_mm3: volume_score(labels, c),
                    agatston: agatston_score(v, labels, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let coronary = |f: fn(&ClassScore) -> f64| {
            classes.iter().filter(|s| ClassCode::CORONARY.iter().any(|c| c.code() == s.code)).map(f).sum::<f64>()
        };
        let cac_volume_mm3 = coronary(|s| s.volume_mm3);
        let cac_agatston = coronary(|s| s.agatston);
        Ok(Self {
            version: REPORT_VERSION,
            scan_id: scan_id.to_string(),
            classes,
            cac_volume_mm3,
            cac_agatston,
            risk_category: risk_category(cac_agatston)?,
            weights_fingerprints: fingerprints,
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!("scan {}\n{:<8}{:>14}{:>12}\n", self.scan_id, "class", "volume_mm3", "agatston");
        for c in &self.classes {
            out.push_str(&format!("{:<8}{:>14.3}{:>12.3}\n", c.class, c.volume_mm3, c.agatston));
        }
        out.push_str(&format!(
            "{:<8}{:>14.3}{:>12.3}\nrisk category {}\n",
            "CAC", self.cac_volume_mm3, self.cac_agatston, self.risk_category
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagegrid::Grid;
    use proptest::prelude::*;

    fn scan(dims: [usize; 3], spacing_z: f64, thickness: f64) -> (CtVolume, LabelMap) {
        let grid = Grid::new(dims, [spacing_z, 0.66, 0.66], [0.0; 3]).unwrap();
        (CtVolume::filled(grid, thickness, 40.0).unwrap(), LabelMap::background(grid).unwrap())
    }

    fn paint(v: &mut CtVolume, l: &mut LabelMap, voxels: &[[usize; 3]], hu: f32, class: ClassCode) {
        let mut data = v.data().to_vec();
        for &[z, y, x] in voxels {
            let i = l.grid().index(z, y, x);
            data[i] = hu;
            l.set(i, class);
        }
        *v = CtVolume::new(*v.grid(), v.slice_thickness(), data).unwrap();
    }

    #[test]
    fn ten_voxels_of_volume() {
        let (mut v, mut l) = scan([2, 5, 5], 1.5, 3.0);
        let voxels: Vec<_> = (0..10).map(|i| [i / 5, i % 5, 0]).collect();
        paint(&mut v, &mut l, &voxels, 300.0, ClassCode::Tac);
        assert!((volume_score(&l, ClassCode::Tac) - 6.534).abs() < 1e-9);
        assert_eq!(volume_score(&l, ClassCode::Lad), 0.0);
    }

    #[test]
    fn single_component_example() {
        let (mut v, mut l) = scan([1, 6, 6], 1.5, 3.0);
        let voxels = [[0, 1, 1], [0, 1, 2], [0, 1, 3], [0, 2, 1], [0, 2, 2], [0, 2, 3]];
        paint(&mut v, &mut l, &voxels, 180.0, ClassCode::Lad);
        paint(&mut v, &mut l, &[[0, 2, 2]], 250.0, ClassCode::Lad);
        let s = agatston_score(&v, &l, ClassCode::Lad).unwrap();
        assert!((s - 2.6136).abs() < 1e-9, "{s}");
    }

    #[test]
    fn overlapping_duplicate_doubles() {
        let voxels = |z| [[z, 1, 1], [z, 1, 2], [z, 1, 3], [z, 2, 1], [z, 2, 2], [z, 2, 3]];
        let (mut v1, mut l1) = scan([2, 6, 6], 1.5, 3.0);
        paint(&mut v1, &mut l1, &voxels(0), 250.0, ClassCode::Rca);
        let single = agatston_score(&v1, &l1, ClassCode::Rca).unwrap();
        let (mut v2, mut l2) = scan([2, 6, 6], 1.5, 3.0);
        paint(&mut v2, &mut l2, &voxels(0), 250.0, ClassCode::Rca);
        paint(&mut v2, &mut l2, &voxels(1), 250.0, ClassCode::Rca);
        let double = agatston_score(&v2, &l2, ClassCode::Rca).unwrap();
        assert_eq!(double, 2.0 * single);
        // equals the classical score of one 3 mm slice
        assert!((double - 6.0 * 0.66 * 0.66 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_voxels_are_separate_components() {
        let (mut v, mut l) = scan([1, 4, 4], 3.0, 3.0);
        paint(&mut v, &mut l, &[[0, 0, 0]], 450.0, ClassCode::Lcx);
        paint(&mut v, &mut l, &[[0, 1, 1]], 150.0, ClassCode::Lcx);
        let area = 0.66 * 0.66;
        let s = agatston_score(&v, &l, ClassCode::Lcx).unwrap();
        assert!((s - area * 5.0).abs() < 1e-9);
    }

    #[test]
    fn density_bin_edges() {
        assert_eq!(density_weight(129.9), 0);
        assert_eq!(density_weight(130.0), 1);
        assert_eq!(density_weight(199.9), 1);
        assert_eq!(density_weight(200.0), 2);
        assert_eq!(density_weight(300.0), 3);
        assert_eq!(density_weight(400.0), 4);
        assert_eq!(density_weight(2000.0), 4);
    }

    #[test]
    fn risk_bins() {
        use RiskCategory::*;
        for (s, c) in [(0.0, I), (10.0, I), (10.5, II), (11.0, II), (100.0, II), (101.0, III), (1000.0, III), (1000.5, IV)] {
            assert_eq!(risk_category(s).unwrap(), c, "{s}");
        }
        assert!(risk_category(-0.1).is_err());
    }

    #[test]
    fn empty_report_is_category_one() {
        let (v, l) = scan([2, 4, 4], 1.5, 3.0);
        let r = ScoreReport::compute("air", &v, &l, vec![]).unwrap();
        assert_eq!(r.cac_agatston, 0.0);
        assert_eq!(r.risk_category, RiskCategory::I);
        assert!(r.classes.iter().all(|c| c.volume_mm3 == 0.0 && c.agatston == 0.0));
        assert!(r.table().contains("risk category I"));
    }

    #[test]
    fn cac_excludes_aorta_and_valves() {
        let (mut v, mut l) = scan([1, 8, 8], 1.5, 3.0);
        paint(&mut v, &mut l, &[[0, 0, 0]], 500.0, ClassCode::Lad);
        paint(&mut v, &mut l, &[[0, 4, 4]], 500.0, ClassCode::Tac);
        paint(&mut v, &mut l, &[[0, 6, 6]], 500.0, ClassCode::MitralValve);
        let r = ScoreReport::compute("s", &v, &l, vec![]).unwrap();
        assert_eq!(r.cac_volume_mm3, volume_score(&l, ClassCode::Lad));
    }

    proptest! {
        #[test]
        fn volume_is_additive_and_agatston_monotone(
            cells in proptest::collection::vec((0usize..3, 0usize..6, 0usize..6), 1..30),
            split in 0usize..30,
            hu in 130.0f32..800.0,
        ) {
            let (mut v, mut l) = scan([3, 6, 6], 1.5, 3.0);
            let voxels: Vec<[usize; 3]> = cells.iter().map(|&(z, y, x)| [z, y, x]).collect();
            let mut prev = 0.0;
            for &vox in &voxels {
                paint(&mut v, &mut l, &[vox], hu, ClassCode::Lad);
                let s = agatston_score(&v, &l, ClassCode::Lad).unwrap();
                prop_assert!(s >= prev - 1e-12);
                prev = s;
            }
            let total = volume_score(&l, ClassCode::Lad);
            let mut l2 = l.clone();
            let k = split.min(voxels.len());
            for &[z, y, x] in &voxels[..k] {
                l2.set(l2.grid().index(z, y, x), ClassCode::Lcx);
            }
            let parts = volume_score(&l2, ClassCode::Lad) + volume_score(&l2, ClassCode::Lcx);
            prop_assert!((parts - total).abs() < 1e-9);
        }

        #[test]
        fn category_is_monotone(a in 0.0f64..5000.0, b in 0.0f64..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(risk_category(lo).unwrap() <= risk_category(hi).unwrap());
        }

        #[test]
        fn unit_overlap_factor_is_classical(hu in 130.0f32..900.0, n in 1usize..6) {
            let (mut v, mut l) = scan([1, 6, 6], 3.0, 3.0);
            let voxels: Vec<_> = (0..n).map(|x| [0, 2, x]).collect();
            paint(&mut v, &mut l, &voxels, hu, ClassCode::Rca);
            let s = agatston_score(&v, &l, ClassCode::Rca).unwrap();
            let classical = n as f64 * 0.66 * 0.66 * density_weight(hu) as f64;
            prop_assert!((s - classical).abs() < 1e-9);
        }
    }
}
