//! Voxel grid data model.
//!
//! All volumes use x-fastest linear order: `index = x + nx * (y + ny * z)`.
//! The z axis is assumed to be axial (inferior to superior).

use serde::{Deserialize, Serialize};

use crate::error::{KevsError, Result};
use crate::schema::LabelSchema;

/// Voxel spacing, in millimetres, that every pipeline stage works on.
pub const CANONICAL_SPACING: [f64; 3] = [1.5, 1.5, 1.5];

const SPACING_REL_TOL: f64 = 1e-6;
const ORIGIN_ABS_TOL_MM: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(KevsError::Geometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(KevsError::Geometry(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(KevsError::Geometry(format!("origin must be finite, got {origin:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| KevsError::Geometry(format!("dims {dims:?} overflow")))?;
        Ok(Self { dims, spacing, origin })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of voxels in one axial slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position (mm) of a voxel centre.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Same dims exactly; spacing and origin equal up to float noise from file headers.
    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing)
                .all(|(a, b)| (a - b).abs() <= SPACING_REL_TOL * a.abs().max(b.abs()))
            && self
                .origin
                .iter()
                .zip(other.origin)
                .all(|(a, b)| (a - b).abs() <= ORIGIN_ABS_TOL_MM)
    }

    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(KevsError::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Geometry of a single axial slice of this grid.
    pub fn slice_geometry(&self, z: usize) -> GridGeometry {
        let mut origin = self.origin;
        origin[2] += z as f64 * self.spacing[2];
        GridGeometry {
            dims: [self.dims[0], self.dims[1], 1],
            spacing: self.spacing,
            origin,
        }
    }

    /// Axis order that moves `z_axis` to the last position, keeping the others in order.
    fn axis_order(z_axis: usize) -> [usize; 3] {
        match z_axis {
            0 => [1, 2, 0],
            1 => [0, 2, 1],
            _ => [0, 1, 2],
        }
    }

    fn permuted(&self, order: [usize; 3]) -> GridGeometry {
        GridGeometry {
            dims: order.map(|a| self.dims[a]),
            spacing: order.map(|a| self.spacing[a]),
            origin: order.map(|a| self.origin[a]),
        }
    }
}

/// Reorders voxel data so that file axis `z_axis` becomes the grid's z axis.
fn permute_to_z<T: Copy>(geometry: &GridGeometry, data: &[T], z_axis: usize) -> (GridGeometry, Vec<T>) {
    let order = GridGeometry::axis_order(z_axis);
    let out_geom = geometry.permuted(order);
    let [mx, my, mz] = out_geom.dims;
    let mut out = Vec::with_capacity(data.len());
    let mut src = [0usize; 3];
    for k in 0..mz {
        for j in 0..my {
            for i in 0..mx {
                src[order[0]] = i;
                src[order[1]] = j;
                src[order[2]] = k;
                out.push(data[geometry.index(src[0], src[1], src[2])]);
            }
        }
    }
    (out_geom, out)
}

/// CT intensities in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(KevsError::Geometry(format!(
                "volume has {} values for {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(KevsError::InvalidArgument(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Result<Self> {
        let n = geometry.len();
        Self::new(geometry, vec![value; n])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Adds a constant to every voxel.
    pub fn shifted(&self, offset: f32) -> Result<Self> {
        Self::new(self.geometry.clone(), self.data.iter().map(|v| v + offset).collect())
    }

    pub fn with_z_axis(&self, z_axis: usize) -> Result<Self> {
        check_axis(z_axis)?;
        let (g, d) = permute_to_z(&self.geometry, &self.data, z_axis);
        Ok(Self { geometry: g, data: d })
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 2 {
        return Err(KevsError::InvalidArgument(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    Ok(())
}

/// Integer class labels with the schema naming their roles.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: GridGeometry,
    data: Vec<u32>,
    schema: LabelSchema,
}

impl LabelMap {
    pub fn new(geometry: GridGeometry, data: Vec<u32>, schema: LabelSchema) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(KevsError::Geometry(format!(
                "label map has {} values for {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        let known = schema.label_ids();
        if let Some((index, &label)) = data
            .iter()
            .enumerate()
            .find(|(_, &l)| l != 0 && known.binary_search(&l).is_err())
        {
            return Err(KevsError::UnknownLabel { label, index });
        }
        Ok(Self { geometry, data, schema })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn with_z_axis(&self, z_axis: usize) -> Result<Self> {
        check_axis(z_axis)?;
        let (g, d) = permute_to_z(&self.geometry, &self.data, z_axis);
        Ok(Self {
            geometry: g,
            data: d,
            schema: self.schema.clone(),
        })
    }

    /// Distinct labels present, ascending (background included if present).
    pub fn distinct_labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.clone();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: GridGeometry,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: GridGeometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geometry.len() {
            return Err(KevsError::Geometry(format!(
                "mask has {} bits for {} voxels",
                bits.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, bits })
    }

    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            bits: vec![false; n],
        }
    }

    pub fn full(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            bits: vec![true; n],
        }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims();
        let mut bits = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self { geometry, bits }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.geometry.index(x, y, z)]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Linear indices of true voxels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn slice_bits(&self, z: usize) -> &[bool] {
        let n = self.geometry.slice_len();
        &self.bits[z * n..(z + 1) * n]
    }

    /// Relabels the mask onto a geometry with identical dims (e.g. after a header round-trip).
    pub fn with_geometry(self, geometry: GridGeometry) -> Result<Self> {
        Self::new(geometry, self.bits)
    }
}
