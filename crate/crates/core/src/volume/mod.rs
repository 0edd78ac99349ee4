//! Voxel grids: intensity volumes, binary masks and label stacks.

mod metaimage;
mod phantom;

pub use metaimage::{
    load_grid, load_labels, load_mask, load_volume, save_grid, save_labels, save_mask,
    save_volume, Element, MetaHeader,
};
pub use phantom::{make_phantom, PhantomConfig};

use crate::error::{ensure, Error, Result};
use crate::image::Grid2;

/// Default abdominal soft-tissue window in Hounsfield units.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-160.0, 240.0);

/// 3D grid with physical spacing, `x` fastest, then `y`, then `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        ensure!(dims.iter().all(|&d| d > 0), Error::NonPositiveDims(dims));
        ensure!(
            spacing.iter().all(|&s| s > 0.0 && s.is_finite()),
            Error::NonPositiveSpacing(spacing)
        );
        let expected = dims[0] * dims[1] * dims[2];
        ensure!(
            data.len() == expected,
            Error::DimensionMismatch(format!(
                "{} voxels for dims {:?} ({expected} expected)",
                data.len(),
                dims
            ))
        );
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    /// Stack equally sized 2D slices along `z`.
    pub fn from_slices(slices: &[Grid2<T>], spacing: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("no slices to stack".into()))?;
        let (nx, ny) = first.dims();
        let mut data = Vec::with_capacity(nx * ny * slices.len());
        for s in slices {
            ensure!(
                s.dims() == (nx, ny),
                Error::DimensionMismatch(format!(
                    "slice {:?} differs from {:?}",
                    s.dims(),
                    (nx, ny)
                ))
            );
            data.extend_from_slice(s.data());
        }
        Self::new([nx, ny, slices.len()], spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn slice_z(&self, z: usize) -> Grid2<T> {
        let n = self.dims[0] * self.dims[1];
        Grid2::from_vec(
            self.dims[0],
            self.dims[1],
            self.data[z * n..(z + 1) * n].to_vec(),
        )
        .expect("slice dims are positive")
    }

    pub fn slices(&self) -> Vec<Grid2<T>> {
        (0..self.dims[2]).map(|z| self.slice_z(z)).collect()
    }

    pub fn same_dims<U>(&self, other: &Grid3<U>) -> bool {
        self.dims == other.dims
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityKind {
    Hounsfield,
    Normalized,
}

impl IntensityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IntensityKind::Hounsfield => "HU",
            IntensityKind::Normalized => "normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "HU" => Some(IntensityKind::Hounsfield),
            "normalized" => Some(IntensityKind::Normalized),
            _ => None,
        }
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid3<f32>,
    kind: IntensityKind,
}

impl Volume {
    pub fn new(grid: Grid3<f32>, kind: IntensityKind) -> Result<Self> {
        if kind == IntensityKind::Normalized {
            ensure!(
                grid.data().iter().all(|v| (0.0..=1.0).contains(v)),
                Error::Data("normalized volume has voxels outside [0,1]".into())
            );
        } else {
            ensure!(
                grid.data().iter().all(|v| v.is_finite()),
                Error::Data("volume has non-finite voxels".into())
            );
        }
        Ok(Self { grid, kind })
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing()
    }

    pub fn voxels(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn slice_z(&self, z: usize) -> Grid2<f32> {
        self.grid.slice_z(z)
    }

    pub fn slices(&self) -> Vec<Grid2<f32>> {
        self.grid.slices()
    }
}

/// Binary mask with values in {0,1}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask(Grid3<u8>);

impl LabelMask {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        ensure!(
            grid.data().iter().all(|&v| v <= 1),
            Error::Data("mask values must be 0 or 1".into())
        );
        Ok(Self(grid))
    }

    pub fn empty_like<T: Copy>(grid: &Grid3<T>) -> Self {
        Self(Grid3::filled(grid.dims(), grid.spacing(), 0).expect("dims already validated"))
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    pub fn voxels(&self) -> &[u8] {
        self.0.data()
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1).count()
    }

    pub fn slice_z(&self, z: usize) -> Grid2<u8> {
        self.0.slice_z(z)
    }

    pub fn slices(&self) -> Vec<Grid2<u8>> {
        self.0.slices()
    }

    pub fn from_slices(slices: &[Grid2<u8>], spacing: [f64; 3]) -> Result<Self> {
        Self::new(Grid3::from_slices(slices, spacing)?)
    }
}

/// Map HU intensities into [0,1] by clamping to the window `[lo, hi]`.
pub fn window_hu(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    ensure!(
        lo < hi,
        Error::InvalidArgument(format!("window lo {lo} must be below hi {hi}"))
    );
    let width = hi - lo;
    let data = v
        .voxels()
        .iter()
        .map(|&x| ((x as f64 - lo) / width).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(
        Grid3::new(v.dims(), v.spacing(), data)?,
        IntensityKind::Normalized,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hu_volume(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(
            Grid3::new([n, 1, 1], [1.0; 3], values).unwrap(),
            IntensityKind::Hounsfield,
        )
        .unwrap()
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let v = hu_volume(vec![-160.0, 240.0, 40.0, -1000.0, 3000.0]);
        let w = window_hu(&v, -160.0, 240.0).unwrap();
        assert_eq!(w.voxels(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
        assert_eq!(w.kind(), IntensityKind::Normalized);
    }

    #[test]
    fn window_rejects_empty_range() {
        let v = hu_volume(vec![0.0]);
        assert!(window_hu(&v, 10.0, 10.0).is_err());
        assert!(window_hu(&v, 11.0, 10.0).is_err());
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(matches!(
            Grid3::new([2, 2, 2], [1.0; 3], vec![0f32; 7]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            Grid3::new([2, 2, 2], [1.0, 1.0, 0.0], vec![0f32; 8]),
            Err(Error::NonPositiveSpacing(_))
        ));
        assert!(matches!(
            Grid3::new([0, 2, 2], [1.0; 3], Vec::<f32>::new()),
            Err(Error::NonPositiveDims(_))
        ));
    }

    #[test]
    fn mask_rejects_non_binary() {
        let g = Grid3::new([2, 1, 1], [1.0; 3], vec![0u8, 2]).unwrap();
        assert!(LabelMask::new(g).is_err());
    }

    #[test]
    fn slices_restack() {
        let g = Grid3::new([2, 3, 4], [1.0, 1.0, 2.0], (0..24).collect::<Vec<i32>>()).unwrap();
        assert_eq!(g.slice_z(1).get(1, 2), g.get(1, 2, 1));
        let back = Grid3::from_slices(&g.slices(), g.spacing()).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn window_is_monotone_and_idempotent(
            mut xs in proptest::collection::vec(-2000.0f32..3000.0, 2..64),
            lo in -500.0f64..0.0,
            width in 1.0f64..800.0,
        ) {
            xs.sort_by(f32::total_cmp);
            let w = window_hu(&hu_volume(xs), lo, lo + width).unwrap();
            prop_assert!(w.voxels().windows(2).all(|p| p[0] <= p[1]));
            let again = window_hu(&w, 0.0, 1.0).unwrap();
            prop_assert_eq!(again.voxels(), w.voxels());
        }
    }
}
