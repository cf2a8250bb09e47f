//! CT volumes, label maps and physical-space resampling.
//!
//! Grid convention used throughout the crate: arrays are indexed `(z, y, x)`,
//! `origin` is the physical position (mm) of the center of voxel `(0, 0, 0)`,
//! and voxel `i` along an axis sits at `origin + i * spacing`. All resampling
//! is defined on these physical voxel-center coordinates.

mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_labels, load_volume, save_labels, save_volume, HEADER_MAGIC};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("volume too thin: z-extent {extent} mm is smaller than one {thickness} mm slab")]
    VolumeTooThin { extent: f64, thickness: f64 },
    #[error("grids do not overlap in physical space")]
    DisjointExtents,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("unknown class code {0}")]
    UnknownClassCode(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

/// The seven voxel classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassCode {
    Background = 0,
    /// Left anterior descending artery, left main included.
    Lad = 1,
    /// Left circumflex artery.
    Lcx = 2,
    /// Right coronary artery.
    Rca = 3,
    /// Thoracic aorta.
    Tac = 4,
    AorticValve = 5,
    MitralValve = 6,
}

impl ClassCode {
    pub const COUNT: usize = 7;
    pub const ALL: [ClassCode; 7] = [
        Self::Background,
        Self::Lad,
        Self::Lcx,
        Self::Rca,
        Self::Tac,
        Self::AorticValve,
        Self::MitralValve,
    ];
    pub const CALCIUM: [ClassCode; 6] =
        [Self::Lad, Self::Lcx, Self::Rca, Self::Tac, Self::AorticValve, Self::MitralValve];
    /// Coronary classes summed into the CAC aggregate.
    pub const CORONARY: [ClassCode; 3] = [Self::Lad, Self::Lcx, Self::Rca];

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or(GridError::UnknownClassCode(code))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Lad => "LAD",
            Self::Lcx => "LCX",
            Self::Rca => "RCA",
            Self::Tac => "TAC",
            Self::AorticValve => "AV",
            Self::MitralValve => "MV",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn is_calcium(self) -> bool {
        self != Self::Background
    }
}

/// Voxel grid geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// `(z, y, x)` extents.
    pub dims: [usize; 3],
    /// `(z, y, x)` voxel spacing in mm.
    pub spacing: [f64; 3],
    /// `(z, y, x)` center of the first voxel in mm.
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Self { dims, spacing, origin };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(GridError::InvalidGrid(format!("dimensions {:?} must all be >= 1", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(GridError::InvalidGrid(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(GridError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        let z = index / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Physical position of a voxel center.
    pub fn position(&self, voxel: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + voxel[a] as f64 * self.spacing[a])
    }

    /// Same dims, and spacing/origin equal within 1e-6 mm.
    pub fn same_as(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.origin[a] - other.origin[a]).abs() < 1e-6
            })
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(GridError::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// HU intensities on a grid, with the reconstruction slice thickness.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    grid: Grid,
    slice_thickness: f64,
    data: Vec<f32>,
}

impl CtVolume {
    pub fn new(grid: Grid, slice_thickness: f64, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if !(slice_thickness.is_finite() && slice_thickness > 0.0) {
            return Err(GridError::InvalidGrid(format!("slice thickness {slice_thickness} must be positive")));
        }
        if data.len() != grid.len() {
            return Err(GridError::SizeMismatch(format!(
                "grid {:?} needs {} voxels, got {}",
                grid.dims,
                grid.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::InvalidGrid("HU values must be finite".into()));
        }
        Ok(Self { grid, slice_thickness, data })
    }

    pub fn filled(grid: Grid, slice_thickness: f64, hu: f32) -> Result<Self> {
        Self::new(grid, slice_thickness, vec![hu; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn slice_thickness(&self) -> f64 {
        self.slice_thickness
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.grid.index(z, y, x)]
    }

    /// Value at signed coordinates, `fill` outside the grid.
    pub fn get_or(&self, z: isize, y: isize, x: isize, fill: f32) -> f32 {
        let [dz, dy, dx] = self.grid.dims;
        if z < 0 || y < 0 || x < 0 || z as usize >= dz || y as usize >= dy || x as usize >= dx {
            fill
        } else {
            self.get(z as usize, y as usize, x as usize)
        }
    }
}

/// Per-voxel class codes on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(GridError::SizeMismatch(format!(
                "grid {:?} needs {} labels, got {}",
                grid.dims,
                grid.len(),
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= ClassCode::COUNT) {
            return Err(GridError::UnknownClassCode(bad as u32));
        }
        Ok(Self { grid, data })
    }

    pub fn background(grid: Grid) -> Result<Self> {
        Self::new(grid, vec![0; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> ClassCode {
        ClassCode::ALL[self.data[self.grid.index(z, y, x)] as usize]
    }

    pub fn class_at(&self, index: usize) -> ClassCode {
        ClassCode::ALL[self.data[index] as usize]
    }

    pub fn set(&mut self, index: usize, class: ClassCode) {
        self.data[index] = class.code();
    }

    pub fn count(&self, class: ClassCode) -> usize {
        self.data.iter().filter(|&&c| c == class.code()).count()
    }

    pub fn calcium_count(&self) -> usize {
        self.data.iter().filter(|&&c| c != 0).count()
    }
}

/// Averages thin axial slices into thick slabs.
///
/// Slab `k` is the mean of every input slice whose center lies in
/// `[k * spacing, k * spacing + thickness)` measured from the first slice
/// center. Slabs are emitted until the input z-extent is covered; a trailing
/// slab that runs past the end averages the slices it has.
pub fn reconstruct_slabs(v: &CtVolume, thickness: f64, spacing: f64) -> Result<CtVolume> {
    const EPS: f64 = 1e-9;
    if !(thickness > 0.0 && spacing > 0.0) {
        return Err(GridError::InvalidGrid("slab thickness and spacing must be positive".into()));
    }
    let [nz, ny, nx] = v.dims();
    let sz = v.spacing()[0];
    if sz > thickness + EPS {
        return Err(GridError::InvalidGrid(format!(
            "input slice spacing {sz} mm exceeds slab thickness {thickness} mm"
        )));
    }
    let extent = nz as f64 * sz;
    if extent + EPS < thickness {
        return Err(GridError::VolumeTooThin { extent, thickness });
    }
    let covering = ((extent - thickness) / spacing - EPS).ceil().max(0.0) as usize + 1;
    // a slab must start at or before the last slice center to be non-empty
    let non_empty = (((nz - 1) as f64 * sz) / spacing + EPS).floor() as usize + 1;
    let slabs = covering.min(non_empty);
    let plane = ny * nx;
    let mut data = vec![0.0f32; slabs * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(k, out)| {
        let start = k as f64 * spacing;
        let members: Vec<usize> = (0..nz)
            .filter(|&i| {
                let c = i as f64 * sz;
                c >= start - EPS && c < start + thickness - EPS
            })
            .collect();
        let mut acc = vec![0.0f64; plane];
        for &i in &members {
            for (a, &h) in acc.iter_mut().zip(&v.data[i * plane..(i + 1) * plane]) {
                *a += h as f64;
            }
        }
        let n = members.len() as f64;
        for (o, a) in out.iter_mut().zip(acc) {
            *o = (a / n) as f32;
        }
    });
    let mut grid = v.grid;
    grid.dims[0] = slabs;
    grid.spacing[0] = spacing;
    grid.origin[0] = v.grid.origin[0] + (thickness - sz) / 2.0;
    CtVolume::new(grid, thickness, data)
}

/// Number of samples and step when resampling `n` voxels at `spacing` to
/// `target`, keeping the first voxel center fixed.
fn resampled_extent(n: usize, spacing: f64, target: f64) -> usize {
    (((n - 1) as f64 * spacing) / target + 1e-9).floor() as usize + 1
}

fn linear_taps(u: f64, n: usize) -> (usize, usize, f64) {
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Bilinear in-plane resampling to `target` mm in y and x.
///
/// The first voxel center is kept; samples are placed every `target` mm for
/// as long as they stay within the input's voxel-center extent, so the
/// physical extent changes by less than one output voxel. Coordinates are
/// clamped to the border.
pub fn resample_inplane(v: &CtVolume, target: f64) -> Result<CtVolume> {
    if !(target.is_finite() && target > 0.0) {
        return Err(GridError::InvalidGrid(format!("target spacing {target} must be positive")));
    }
    let [nz, ny, nx] = v.dims();
    let [_, sy, sx] = v.spacing();
    let oy = resampled_extent(ny, sy, target);
    let ox = resampled_extent(nx, sx, target);
    let ytaps: Vec<_> = (0..oy).map(|j| linear_taps(j as f64 * target / sy, ny)).collect();
    let xtaps: Vec<_> = (0..ox).map(|i| linear_taps(i as f64 * target / sx, nx)).collect();
    let mut data = vec![0.0f32; nz * oy * ox];
    data.par_chunks_mut(oy * ox).enumerate().for_each(|(z, out)| {
        let slice = &v.data[z * ny * nx..(z + 1) * ny * nx];
        for (j, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (i, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let a = slice[y0 * nx + x0] as f64;
                let b = slice[y0 * nx + x1] as f64;
                let c = slice[y1 * nx + x0] as f64;
                let d = slice[y1 * nx + x1] as f64;
                let top = a + (b - a) * fx;
                let bottom = c + (d - c) * fx;
                out[j * ox + i] = (top + (bottom - top) * fy) as f32;
            }
        }
    });
    let mut grid = v.grid;
    grid.dims = [nz, oy, ox];
    grid.spacing = [grid.spacing[0], target, target];
    CtVolume::new(grid, v.slice_thickness, data)
}

/// Nearest-neighbour label resampling onto `target`. Codes are copied, never
/// interpolated; ties between two source voxels go to the higher index.
pub fn resample_labels_to(labels: &LabelMap, target: &Grid) -> Result<LabelMap> {
    target.validate()?;
    let src = labels.grid;
    for a in 0..3 {
        let half = src.spacing[a] / 2.0;
        let s_lo = src.origin[a] - half;
        let s_hi = src.origin[a] + (src.dims[a] - 1) as f64 * src.spacing[a] + half;
        let t_lo = target.origin[a];
        let t_hi = target.origin[a] + (target.dims[a] - 1) as f64 * target.spacing[a];
        if t_hi < s_lo || t_lo > s_hi {
            return Err(GridError::DisjointExtents);
        }
    }
    let lookup = |a: usize| -> Vec<usize> {
        (0..target.dims[a])
            .map(|i| {
                let p = target.origin[a] + i as f64 * target.spacing[a];
                let u = (p - src.origin[a]) / src.spacing[a];
                (u + 0.5 + 1e-9).floor().clamp(0.0, (src.dims[a] - 1) as f64) as usize
            })
            .collect()
    };
    let (zs, ys, xs) = (lookup(0), lookup(1), lookup(2));
    let mut data = Vec::with_capacity(target.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                data.push(labels.data[src.index(z, y, x)]);
            }
        }
    }
    LabelMap::new(*target, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> CtVolume {
        let grid = Grid::new(dims, spacing, [0.0; 3]).unwrap();
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        CtVolume::new(grid, spacing[0], data).unwrap()
    }

    #[test]
    fn class_codes_are_bijective() {
        for c in ClassCode::ALL {
            assert_eq!(ClassCode::from_code(c.code() as u32).unwrap(), c);
            assert_eq!(ClassCode::from_name(c.name()), Some(c));
        }
        assert!(matches!(ClassCode::from_code(7), Err(GridError::UnknownClassCode(7))));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Grid::new([1, 1, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(CtVolume::new(g, 0.0, vec![0.0; 2]).is_err());
        assert!(CtVolume::new(g, 1.0, vec![0.0, f32::NAN]).is_err());
        assert!(matches!(LabelMap::new(g, vec![0, 7]), Err(GridError::UnknownClassCode(7))));
    }

    #[test]
    fn slab_profile_example() {
        let v = volume([4, 1, 1], [1.0, 1.0, 1.0], |z, _, _| 100.0 * z as f32);
        let s = reconstruct_slabs(&v, 3.0, 1.5).unwrap();
        assert_eq!(s.data(), &[100.0, 250.0]);
        assert_eq!(s.spacing()[0], 1.5);
        assert_eq!(s.slice_thickness(), 3.0);
    }

    #[test]
    fn identity_slab() {
        let v = volume([5, 2, 3], [1.5, 0.7, 0.7], |z, y, x| (z * 7 + y * 3 + x) as f32);
        let s = reconstruct_slabs(&v, 1.5, 1.5).unwrap();
        assert_eq!(s.data(), v.data());
        assert_eq!(s.grid(), v.grid());
    }

    #[test]
    fn too_thin_for_one_slab() {
        let v = volume([2, 1, 1], [1.0, 1.0, 1.0], |_, _, _| 0.0);
        assert!(matches!(reconstruct_slabs(&v, 3.0, 1.5), Err(GridError::VolumeTooThin { .. })));
    }

    #[test]
    fn inplane_identity_at_target_spacing() {
        let v = volume([2, 5, 6], [1.5, 0.66, 0.66], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let r = resample_inplane(&v, 0.66).unwrap();
        assert_eq!(r.data(), v.data());
        assert_eq!(r.dims(), v.dims());
    }

    // Scalar bilinear interpolation at a physical position, clamped to the border.
    fn bilinear_oracle(v: &CtVolume, z: usize, py: f64, px: f64) -> f64 {
        let [_, ny, nx] = v.dims();
        let [_, sy, sx] = v.spacing();
        let u = (py / sy).clamp(0.0, (ny - 1) as f64);
        let w = (px / sx).clamp(0.0, (nx - 1) as f64);
        let (y0, x0) = (u.floor() as usize, w.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ny - 1), (x0 + 1).min(nx - 1));
        let (fy, fx) = (u - y0 as f64, w - x0 as f64);
        let g = |y, x| v.get(z, y, x) as f64;
        g(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + g(y0, x1) * (1.0 - fy) * fx
            + g(y1, x0) * fy * (1.0 - fx)
            + g(y1, x1) * fy * fx
    }

    #[test]
    fn two_by_two_upsampling_against_pointwise_oracle() {
        let v = volume([1, 2, 2], [1.0, 1.0, 1.0], |_, _, x| 100.0 * x as f32);
        let r = resample_inplane(&v, 0.5).unwrap();
        assert_eq!(r.dims(), [1, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                let expected = bilinear_oracle(&v, 0, y as f64 * 0.5, x as f64 * 0.5);
                assert!((r.get(0, y, x) as f64 - expected).abs() < 1e-6);
            }
            assert_eq!(r.get(0, y, 1), 50.0);
        }
    }

    #[test]
    fn arbitrary_resample_matches_oracle() {
        let v = volume([2, 7, 9], [1.5, 0.8, 0.9], |z, y, x| ((z * 31 + y * 7 + x * 13) % 17) as f32 * 10.0);
        let r = resample_inplane(&v, 0.66).unwrap();
        for z in 0..2 {
            for y in 0..r.dims()[1] {
                for x in 0..r.dims()[2] {
                    let expected = bilinear_oracle(&v, z, y as f64 * 0.66, x as f64 * 0.66);
                    assert!((r.get(z, y, x) as f64 - expected).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn labels_identity_and_background() {
        let g = Grid::new([2, 3, 4], [1.5, 0.66, 0.66], [0.0; 3]).unwrap();
        let labels = LabelMap::new(g, (0..24).map(|i| (i % 7) as u8).collect()).unwrap();
        assert_eq!(resample_labels_to(&labels, &g).unwrap(), labels);
        let target = Grid::new([3, 5, 7], [1.0, 0.5, 0.4], [0.2, -0.1, 0.3]).unwrap();
        let bg = LabelMap::background(g).unwrap();
        assert_eq!(resample_labels_to(&bg, &target).unwrap().calcium_count(), 0);
    }

    // Exhaustive nearest-neighbour search; ties go to the lexicographically
    // larger source index.
    fn nearest_oracle(labels: &LabelMap, p: [f64; 3]) -> u8 {
        let g = labels.grid();
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..g.len() {
            let c = g.position(g.coords(i));
            let d: f64 = (0..3).map(|a| (c[a] - p[a]).powi(2)).sum();
            if d <= best.0 + 1e-12 {
                best = (d, i);
            }
        }
        labels.data()[best.1]
    }

    #[test]
    fn single_voxel_upsampling_against_exhaustive_search() {
        let src = Grid::new([3, 4, 4], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut labels = LabelMap::background(src).unwrap();
        labels.set(src.index(1, 2, 1), ClassCode::Rca);
        for offset in [0.0, 0.13] {
            let target = Grid::new([6, 8, 8], [1.0, 0.5, 0.5], [offset; 3]).unwrap();
            let r = resample_labels_to(&labels, &target).unwrap();
            for i in 0..target.len() {
                let p = target.position(target.coords(i));
                assert_eq!(r.data()[i], nearest_oracle(&labels, p), "voxel {:?}", target.coords(i));
            }
            assert!(r.count(ClassCode::Rca) >= 8);
        }
    }

    #[test]
    fn disjoint_label_grids() {
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let far = Grid::new([2, 2, 2], [1.0; 3], [100.0, 0.0, 0.0]).unwrap();
        let labels = LabelMap::background(g).unwrap();
        assert!(matches!(resample_labels_to(&labels, &far), Err(GridError::DisjointExtents)));
    }

    proptest! {
        #[test]
        fn slab_means_stay_within_range(
            values in proptest::collection::vec(-1000.0f32..3000.0, 8..16),
            thickness in 1.0f64..4.0,
            step in 0.5f64..3.0,
        ) {
            let n = values.len();
            let v = volume([n, 1, 1], [0.5, 1.0, 1.0], |z, _, _| values[z]);
            let s = reconstruct_slabs(&v, thickness, step.min(thickness)).unwrap();
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &x in s.data() {
                prop_assert!(x >= lo - 1e-3 && x <= hi + 1e-3);
            }
        }

        #[test]
        fn constant_volumes_survive_slabs_and_round_trips(
            c in -1000.0f32..3000.0,
            target in 0.3f64..1.5,
        ) {
            let v = volume([6, 5, 7], [1.0, 0.7, 0.8], |_, _, _| c);
            prop_assert!(reconstruct_slabs(&v, 3.0, 1.5).unwrap().data().iter().all(|&x| x == c));
            let there = resample_inplane(&v, target).unwrap();
            let back = resample_inplane(&there, 0.7).unwrap();
            prop_assert!(back.data().iter().all(|&x| x == c));
        }

        #[test]
        fn bilinear_reproduces_linear_ramps(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in -100.0f64..100.0,
            target in 0.3f64..1.2,
        ) {
            let v = volume([1, 6, 8], [1.0, 0.9, 0.7], |_, y, x| {
                (a * y as f64 * 0.9 + b * x as f64 * 0.7 + c) as f32
            });
            let r = resample_inplane(&v, target).unwrap();
            for y in 0..r.dims()[1] {
                for x in 0..r.dims()[2] {
                    let expected = a * y as f64 * target + b * x as f64 * target + c;
                    prop_assert!((r.get(0, y, x) as f64 - expected).abs() < 1e-3);
                }
            }
        }

        #[test]
        fn nearest_neighbour_emits_only_source_codes(
            codes in proptest::collection::vec(prop_oneof![Just(0u8), Just(2u8), Just(5u8)], 24),
            sy in 0.3f64..2.0, sx in 0.3f64..2.0,
        ) {
            let g = Grid::new([2, 3, 4], [1.5, 0.66, 0.66], [0.0; 3]).unwrap();
            let labels = LabelMap::new(g, codes.clone()).unwrap();
            let target = Grid::new([3, 5, 6], [1.0, sy, sx], [0.0; 3]).unwrap();
            let r = resample_labels_to(&labels, &target).unwrap();
            prop_assert!(r.data().iter().all(|c| codes.contains(c)));
        }
    }
}
