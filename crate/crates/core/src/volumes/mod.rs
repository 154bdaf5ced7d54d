//! Core 3-D volume and label-map types plus the exact geometry operations
//! the segmentation method depends on: crop, left-right mirror, pad to a
//! pooling-friendly multiple, z-score normalisation, average pooling and
//! upsampling.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! - Grids are indexed `(x, y, z)` with `x` the left-right axis once a volume
//!   is in an MNI-oriented space. Mirroring reverses axis 0.
//! - `Space::MniHr` means 0.5 mm isotropic voxels (0.125 mm^3 voxel volume).
//! - Z-scoring uses the population standard deviation (divide by N), the
//!   usual deep-learning normalisation convention.

pub mod io;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical space a volume lives in. Pipelines move volumes strictly
/// forward through `Native -> MniStd -> MniHr -> Crop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Native,
    MniStd,
    MniHr,
    Crop,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Space::Native => "native",
            Space::MniStd => "mni_std",
            Space::MniHr => "mni_hr",
            Space::Crop => "crop",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Space::Native),
            "mni_std" => Ok(Space::MniStd),
            "mni_hr" => Ok(Space::MniHr),
            "crop" => Ok(Space::Crop),
            other => Err(Error::format(format!("unknown space tag '{other}'"))),
        }
    }
}

/// Which thalamus a cropped volume represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    NotApplicable,
}

impl Side {
    pub fn flipped(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::NotApplicable => Side::NotApplicable,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::NotApplicable => "n/a",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            "n/a" | "na" => Ok(Side::NotApplicable),
            other => Err(Error::format(format!("unknown side tag '{other}'"))),
        }
    }
}

/// A 3-D scalar grid with voxel spacing in millimetres, an anatomical space
/// tag and a side flag. The universal image carrier of the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub data: Array3<f32>,
    /// Voxel spacing (mm) along (x, y, z).
    pub spacing: [f32; 3],
    pub space: Space,
    pub side: Side,
    /// Offset of this volume inside its parent grid, recorded by `crop_roi`.
    pub crop_offset: Option<[usize; 3]>,
}

impl Volume3D {
    /// Builds a volume and checks the type invariants: positive spacing,
    /// finite data, and 0.5 mm spacing when tagged `MniHr`.
    pub fn new(data: Array3<f32>, spacing: [f32; 3], space: Space, side: Side) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "volume spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if space == Space::MniHr && spacing != [0.5, 0.5, 0.5] {
            return Err(Error::invalid(format!(
                "mni_hr volumes must have 0.5 mm isotropic spacing, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("volume contains non-finite values"));
        }
        Ok(Volume3D {
            data,
            spacing,
            space,
            side,
            crop_offset: None,
        })
    }

    /// Same grid filled with `value`.
    pub fn filled_like(&self, value: f32) -> Volume3D {
        Volume3D {
            data: Array3::from_elem(self.data.raw_dim(), value),
            ..self.clone()
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    pub fn same_geometry(&self, other: &Volume3D) -> bool {
        self.dims() == other.dims() && self.spacing == other.spacing
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.numel() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.numel() as f64;
        var.sqrt()
    }

    /// Test helper: volume whose value at (x, y, z) encodes its own index
    /// as x*10000 + y*100 + z.
    pub fn indexed_ramp(dims: [usize; 3], space: Space) -> Volume3D {
        let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(x, y, z)| {
            (x * 10_000 + y * 100 + z) as f32
        });
        let spacing = if space == Space::MniHr {
            [0.5, 0.5, 0.5]
        } else {
            [1.0, 1.0, 1.0]
        };
        Volume3D::new(data, spacing, space, Side::NotApplicable).expect("ramp is finite")
    }
}

/// Ordered (id, name) pairs for the structures a label map may contain.
/// Ids are 1-based and stable across the whole crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    entries: Vec<(u8, String)>,
}

/// Canonical names of the 13 thalamic structures, in id order 1..=13.
pub const NUCLEI_NAMES: [&str; 13] = [
    "Anterior Ventral Nucleus",
    "Ventral Anterior Nucleus",
    "Ventral Lateral Anterior Nucleus",
    "Ventral Lateral Posterior Nucleus",
    "Ventral Posterior Lateral Nucleus",
    "Pulvinar Nucleus",
    "Lateral Geniculate Nucleus",
    "Medial Geniculate Nucleus",
    "Centromedian Nucleus",
    "Mediodorsal Nucleus",
    "Habenular Nucleus",
    "Mammillothalamic Tract",
    "Intermediate Space",
];

impl LabelSchema {
    /// The full 13-structure thalamic schema.
    pub fn thalamus() -> LabelSchema {
        LabelSchema {
            entries: NUCLEI_NAMES
                .iter()
                .enumerate()
                .map(|(i, &n)| ((i + 1) as u8, n.to_string()))
                .collect(),
        }
    }

    /// The first `n` structures of the thalamic schema (phantoms may declare
    /// fewer nuclei than the full set).
    pub fn first_n(n: usize) -> Result<LabelSchema> {
        if n == 0 || n > 13 {
            return Err(Error::invalid(format!(
                "schema size must be in 1..=13, got {n}"
            )));
        }
        let mut s = LabelSchema::thalamus();
        s.entries.truncate(n);
        Ok(s)
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        id != 0 && (id as usize) <= self.entries.len()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.entries
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, n)| n.as_str())
    }

    pub fn max_id(&self) -> u8 {
        self.entries.last().map(|(i, _)| *i).unwrap_or(0)
    }
}

/// Integer grid over the same geometry as a paired [`Volume3D`]; values are
/// 0 (background) plus the schema's structure ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub data: Array3<u8>,
    pub schema: LabelSchema,
    pub spacing: [f32; 3],
    pub space: Space,
    pub side: Side,
}

impl LabelMap {
    pub fn new(
        data: Array3<u8>,
        schema: LabelSchema,
        spacing: [f32; 3],
        space: Space,
        side: Side,
    ) -> Result<Self> {
        if let Some(&v) = data.iter().find(|&&v| v != 0 && !schema.contains(v)) {
            return Err(Error::invalid(format!(
                "label value {v} outside schema (max id {})",
                schema.max_id()
            )));
        }
        Ok(LabelMap {
            data,
            schema,
            spacing,
            space,
            side,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn same_geometry_as(&self, v: &Volume3D) -> bool {
        self.dims() == v.dims() && self.spacing == v.spacing
    }

    /// Voxel count per label id (index 0 = background).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.schema.max_id() as usize + 1];
        for &v in self.data.iter() {
            h[v as usize] += 1;
        }
        h
    }

    pub fn count(&self, id: u8) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Mirror along the left-right axis (axis 0); label values unchanged,
    /// side flag toggled.
    pub fn mirror_lr(&self) -> LabelMap {
        let mut out = self.clone();
        out.data.invert_axis(ndarray::Axis(0));
        out.data = out.data.as_standard_layout().to_owned();
        out.side = self.side.flipped();
        out
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let [x, y, z] = self.dims();
        let data = Array3::from_shape_fn((x * factor, y * factor, z * factor), |(i, j, k)| {
            self.data[[i / factor, j / factor, k / factor]]
        });
        Ok(LabelMap {
            data,
            schema: self.schema.clone(),
            spacing: [
                self.spacing[0] / factor as f32,
                self.spacing[1] / factor as f32,
                self.spacing[2] / factor as f32,
            ],
            space: self.space,
            side: self.side,
        })
    }

    /// Nearest-neighbour downsampling by an integer factor (dims must divide).
    pub fn downsample_nearest(&self, factor: usize) -> Result<LabelMap> {
        let [x, y, z] = self.dims();
        if factor == 0 || x % factor != 0 || y % factor != 0 || z % factor != 0 {
            return Err(Error::geometry(format!(
                "dims {:?} not divisible by factor {factor}",
                self.dims()
            )));
        }
        // Sample the block centre (floor convention).
        let h = factor / 2;
        let data = Array3::from_shape_fn((x / factor, y / factor, z / factor), |(i, j, k)| {
            self.data[[i * factor + h, j * factor + h, k * factor + h]]
        });
        Ok(LabelMap {
            data,
            schema: self.schema.clone(),
            spacing: [
                self.spacing[0] * factor as f32,
                self.spacing[1] * factor as f32,
                self.spacing[2] * factor as f32,
            ],
            space: self.space,
            side: self.side,
        })
    }

    pub fn crop(&self, roi: &CropBox) -> Result<LabelMap> {
        roi.check_inside(self.dims())?;
        let [ox, oy, oz] = roi.offset;
        let [ex, ey, ez] = roi.extent;
        let data = self
            .data
            .slice(ndarray::s![ox..ox + ex, oy..oy + ey, oz..oz + ez])
            .to_owned();
        Ok(LabelMap {
            data,
            schema: self.schema.clone(),
            spacing: self.spacing,
            space: Space::Crop,
            side: self.side,
        })
    }
}

/// Modality tags for the members of a [`CaseBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    T1,
    T2,
    Wmn,
    SyntheticWmn,
    AtlasPrior,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::Wmn => "wmn",
            Modality::SyntheticWmn => "synthetic_wmn",
            Modality::AtlasPrior => "atlas_prior",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1" => Ok(Modality::T1),
            "t2" => Ok(Modality::T2),
            "wmn" => Ok(Modality::Wmn),
            "synthetic_wmn" => Ok(Modality::SyntheticWmn),
            "atlas_prior" => Ok(Modality::AtlasPrior),
            other => Err(Error::format(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

/// Case metadata carried alongside the image data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub side: Side,
    pub age: f32,
    pub sex: Sex,
    pub source: String,
    pub pseudo_label: bool,
}

/// One thalamus sample: a set of co-registered modalities, an optional label
/// map, and metadata. All member volumes share geometry.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    pub modalities: BTreeMap<Modality, Volume3D>,
    pub labels: Option<LabelMap>,
    pub meta: CaseMeta,
}

impl CaseBundle {
    /// Validates that every member volume (and the label map, if present)
    /// shares the same grid geometry.
    pub fn validate(&self) -> Result<()> {
        let mut it = self.modalities.values();
        let first = it
            .next()
            .ok_or_else(|| Error::invalid("case bundle has no modalities"))?;
        for v in it {
            if !first.same_geometry(v) {
                return Err(Error::geometry("case bundle modalities disagree on geometry"));
            }
        }
        if let Some(l) = &self.labels {
            if !l.same_geometry_as(first) {
                return Err(Error::geometry("case labels disagree with modality geometry"));
            }
        }
        Ok(())
    }

    pub fn modality(&self, m: Modality) -> Result<&Volume3D> {
        self.modalities
            .get(&m)
            .ok_or_else(|| Error::invalid(format!("case is missing modality '{m}'")))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities
            .values()
            .next()
            .map(|v| v.dims())
            .unwrap_or([0, 0, 0])
    }

    /// Mirrors every modality and the labels along the LR axis.
    pub fn mirror_lr(&self) -> CaseBundle {
        let modalities = self
            .modalities
            .iter()
            .map(|(&m, v)| (m, mirror_lr(v)))
            .collect();
        let labels = self.labels.as_ref().map(|l| l.mirror_lr());
        let mut meta = self.meta.clone();
        meta.side = meta.side.flipped();
        CaseBundle {
            modalities,
            labels,
            meta,
        }
    }
}

/// Axis-aligned crop region: `offset` is the first included voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub offset: [usize; 3],
    pub extent: [usize; 3],
}

impl CropBox {
    pub fn new(offset: [usize; 3], extent: [usize; 3]) -> CropBox {
        CropBox { offset, extent }
    }

    fn check_inside(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.extent[a] == 0 || self.offset[a] + self.extent[a] > dims[a] {
                return Err(Error::geometry(format!(
                    "crop box offset {:?} extent {:?} does not fit inside volume dims {:?}",
                    self.offset, self.extent, dims
                )));
            }
        }
        Ok(())
    }

    /// The same box mirrored along axis 0 of a grid with `dims`.
    pub fn mirrored_x(&self, dims: [usize; 3]) -> CropBox {
        CropBox {
            offset: [
                dims[0] - self.offset[0] - self.extent[0],
                self.offset[1],
                self.offset[2],
            ],
            extent: self.extent,
        }
    }
}

/// Record of a padding operation, sufficient to undo it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    /// Voxels added at the high end of each axis (padding is one-sided).
    pub added: [usize; 3],
}

impl PadRecord {
    pub fn is_empty(&self) -> bool {
        self.added == [0, 0, 0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Replicate the edge value (default; avoids artificial boundaries in
    /// pooled features).
    Edge,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    Trilinear,
    Nearest,
}

/// Extracts `roi` from a high-resolution MNI-space volume. The offsets are
/// recorded in the output's provenance so downstream steps can place results
/// back into the parent grid.
pub fn crop_roi(v: &Volume3D, roi: &CropBox) -> Result<Volume3D> {
    if v.space != Space::MniHr {
        return Err(Error::geometry(format!(
            "crop_roi expects an mni_hr volume, got space '{}'",
            v.space
        )));
    }
    roi.check_inside(v.dims())?;
    let [ox, oy, oz] = roi.offset;
    let [ex, ey, ez] = roi.extent;
    let data = v
        .data
        .slice(ndarray::s![ox..ox + ex, oy..oy + ey, oz..oz + ez])
        .as_standard_layout()
        .to_owned();
    Ok(Volume3D {
        data,
        spacing: v.spacing,
        space: Space::Crop,
        side: v.side,
        crop_offset: Some(roi.offset),
    })
}

/// Reverses the grid along the left-right axis (axis 0 in MNI orientation)
/// and toggles the side flag. An exact involution.
pub fn mirror_lr(v: &Volume3D) -> Volume3D {
    let mut data = v.data.clone();
    data.invert_axis(ndarray::Axis(0));
    Volume3D {
        data: data.as_standard_layout().to_owned(),
        spacing: v.spacing,
        space: v.space,
        side: v.side.flipped(),
        crop_offset: v.crop_offset,
    }
}

/// Pads each axis up to the smallest multiple of `m` (one-sided, high end).
/// Returns the padded volume and a record sufficient for an exact inverse.
pub fn pad_to_multiple(v: &Volume3D, m: usize, mode: PadMode) -> Result<(Volume3D, PadRecord)> {
    if m == 0 {
        return Err(Error::invalid("pad multiple must be >= 1"));
    }
    let dims = v.dims();
    let target: Vec<usize> = dims.iter().map(|&d| d.div_ceil(m) * m).collect();
    let added = [target[0] - dims[0], target[1] - dims[1], target[2] - dims[2]];
    if added == [0, 0, 0] {
        return Ok((v.clone(), PadRecord { added }));
    }
    let mut data = Array3::zeros((target[0], target[1], target[2]));
    data.slice_mut(ndarray::s![..dims[0], ..dims[1], ..dims[2]])
        .assign(&v.data);
    if mode == PadMode::Edge {
        // Fill each padded slab by replicating the last valid plane, axis by
        // axis, so corners replicate consistently.
        for axis in 0..3 {
            if added[axis] == 0 {
                continue;
            }
            let last = dims[axis] - 1;
            for i in dims[axis]..target[axis] {
                let src = data.index_axis(ndarray::Axis(axis), last).to_owned();
                data.index_axis_mut(ndarray::Axis(axis), i).assign(&src);
            }
        }
    }
    let out = Volume3D {
        data,
        spacing: v.spacing,
        space: v.space,
        side: v.side,
        crop_offset: v.crop_offset,
    };
    Ok((out, PadRecord { added }))
}

/// Exact inverse of [`pad_to_multiple`].
pub fn unpad(v: &Volume3D, record: &PadRecord) -> Result<Volume3D> {
    let dims = v.dims();
    for a in 0..3 {
        if record.added[a] >= dims[a] {
            return Err(Error::geometry(format!(
                "pad record {:?} does not match volume dims {:?}",
                record.added, dims
            )));
        }
    }
    let data = v
        .data
        .slice(ndarray::s![
            ..dims[0] - record.added[0],
            ..dims[1] - record.added[1],
            ..dims[2] - record.added[2]
        ])
        .as_standard_layout()
        .to_owned();
    Ok(Volume3D {
        data,
        spacing: v.spacing,
        space: v.space,
        side: v.side,
        crop_offset: v.crop_offset,
    })
}

/// Z-score normalisation: subtract the mean, divide by the population
/// standard deviation. Output mean 0 and std 1 to within float rounding.
pub fn zscore(v: &Volume3D) -> Result<Volume3D> {
    let mean = v.mean();
    let std = v.std();
    if std == 0.0 {
        return Err(Error::numeric(
            "zscore: volume is constant (needs >= 2 distinct values)",
        ));
    }
    let inv = 1.0 / std;
    let data = v.data.mapv(|x| ((x as f64 - mean) * inv) as f32);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("zscore produced non-finite values"));
    }
    Ok(Volume3D {
        data,
        spacing: v.spacing,
        space: v.space,
        side: v.side,
        crop_offset: v.crop_offset,
    })
}

/// Non-overlapping block average pooling by an integer factor. Dimensions
/// must be divisible by the factor (pad first).
pub fn avg_pool(v: &Volume3D, factor: usize) -> Result<Volume3D> {
    let [x, y, z] = v.dims();
    if factor == 0 || x % factor != 0 || y % factor != 0 || z % factor != 0 {
        return Err(Error::geometry(format!(
            "avg_pool: dims {:?} not divisible by factor {factor}; pad_to_multiple first",
            v.dims()
        )));
    }
    let inv = 1.0 / (factor * factor * factor) as f64;
    let data = Array3::from_shape_fn((x / factor, y / factor, z / factor), |(i, j, k)| {
        let mut acc = 0.0f64;
        for a in 0..factor {
            for b in 0..factor {
                for c in 0..factor {
                    acc += v.data[[i * factor + a, j * factor + b, k * factor + c]] as f64;
                }
            }
        }
        (acc * inv) as f32
    });
    Ok(Volume3D {
        data,
        spacing: [
            v.spacing[0] * factor as f32,
            v.spacing[1] * factor as f32,
            v.spacing[2] * factor as f32,
        ],
        space: v.space,
        side: v.side,
        crop_offset: v.crop_offset,
    })
}

/// Upsampling by an integer factor, trilinear or nearest. Output dims are
/// exactly `factor` times the input dims.
pub fn upsample(v: &Volume3D, factor: usize, kind: ResampleKind) -> Result<Volume3D> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let [x, y, z] = v.dims();
    let (nx, ny, nz) = (x * factor, y * factor, z * factor);
    let data = match kind {
        ResampleKind::Nearest => Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            v.data[[i / factor, j / factor, k / factor]]
        }),
        ResampleKind::Trilinear => {
            let f = factor as f64;
            // Block-centre alignment: output voxel centres map to
            // (i + 0.5) / f - 0.5 in input index coordinates, clamped.
            let coord = |i: usize| ((i as f64 + 0.5) / f - 0.5).max(0.0);
            let mut out = Array3::zeros((nx, ny, nz));
            Zip::indexed(&mut out).for_each(|(i, j, k), o| {
                let (cx, cy, cz) = (coord(i), coord(j), coord(k));
                let (x0, y0, z0) = (
                    (cx as usize).min(x - 1),
                    (cy as usize).min(y - 1),
                    (cz as usize).min(z - 1),
                );
                let (x1, y1, z1) = ((x0 + 1).min(x - 1), (y0 + 1).min(y - 1), (z0 + 1).min(z - 1));
                let (fx, fy, fz) = (cx - x0 as f64, cy - y0 as f64, cz - z0 as f64);
                let at = |a: usize, b: usize, c: usize| v.data[[a, b, c]] as f64;
                let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
                let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
                let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
                let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                *o = (c0 * (1.0 - fz) + c1 * fz) as f32;
            });
            out
        }
    };
    Ok(Volume3D {
        data,
        spacing: [
            v.spacing[0] / factor as f32,
            v.spacing[1] / factor as f32,
            v.spacing[2] / factor as f32,
        ],
        space: v.space,
        side: v.side,
        crop_offset: v.crop_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_volume(values: &[f32], dims: [usize; 3]) -> Volume3D {
        let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values.to_vec()).unwrap();
        Volume3D::new(data, [1.0, 1.0, 1.0], Space::Native, Side::NotApplicable).unwrap()
    }

    #[test]
    fn crop_full_mni_matrix_to_thalamus_roi() {
        // Standard matrix 362x434x362 at 0.5 mm; thalamic ROI is 76x91x79.
        let data = Array3::zeros((362, 434, 362));
        let v = Volume3D::new(data, [0.5, 0.5, 0.5], Space::MniHr, Side::NotApplicable).unwrap();
        let roi = CropBox::new([143, 171, 141], [76, 91, 79]);
        let c = crop_roi(&v, &roi).unwrap();
        assert_eq!(c.dims(), [76, 91, 79]);
        assert_eq!(c.space, Space::Crop);
        assert_eq!(c.crop_offset, Some([143, 171, 141]));
    }

    #[test]
    fn crop_identity_returns_same_data() {
        let mut v = Volume3D::indexed_ramp([6, 5, 4], Space::MniHr);
        v.spacing = [0.5, 0.5, 0.5];
        let roi = CropBox::new([0, 0, 0], [6, 5, 4]);
        let c = crop_roi(&v, &roi).unwrap();
        assert_eq!(c.data, v.data);
    }

    #[test]
    fn crop_values_follow_index_arithmetic() {
        let v = Volume3D::indexed_ramp([40, 40, 40], Space::MniHr);
        let roi = CropBox::new([10, 20, 30], [4, 4, 4]);
        let c = crop_roi(&v, &roi).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    let expected = ((10 + x) * 10_000 + (20 + y) * 100 + (30 + z)) as f32;
                    assert_eq!(c.data[[x, y, z]], expected);
                }
            }
        }
    }

    #[test]
    fn crop_out_of_bounds_is_rejected_with_dims() {
        let v = Volume3D::indexed_ramp([8, 8, 8], Space::MniHr);
        let roi = CropBox::new([4, 0, 0], [8, 2, 2]);
        let err = crop_roi(&v, &roi).unwrap_err().to_string();
        assert!(err.contains("[8, 8, 8]"), "error should name dims: {err}");
        assert!(err.contains("[4, 0, 0]"), "error should name offset: {err}");
    }

    #[test]
    fn crop_requires_mni_hr() {
        let v = Volume3D::indexed_ramp([8, 8, 8], Space::Native);
        let roi = CropBox::new([0, 0, 0], [2, 2, 2]);
        assert!(crop_roi(&v, &roi).is_err());
    }

    #[test]
    fn mirror_reverses_first_axis() {
        let v = small_volume(&[1.0, 2.0], [2, 1, 1]);
        let m = mirror_lr(&v);
        assert_eq!(m.data[[0, 0, 0]], 2.0);
        assert_eq!(m.data[[1, 0, 0]], 1.0);
    }

    #[test]
    fn mirror_toggles_side() {
        let mut v = Volume3D::indexed_ramp([4, 4, 4], Space::Crop);
        v.side = Side::Left;
        assert_eq!(mirror_lr(&v).side, Side::Right);
        assert_eq!(mirror_lr(&mirror_lr(&v)).side, Side::Left);
    }

    #[test]
    fn label_mirror_preserves_values_and_counts() {
        let schema = LabelSchema::first_n(3).unwrap();
        let data = Array3::from_shape_fn((4, 3, 2), |(x, _, _)| (x % 4) as u8 % 4);
        let l = LabelMap::new(data, schema, [0.5; 3], Space::Crop, Side::Left).unwrap();
        let m = l.mirror_lr();
        assert_eq!(l.histogram(), m.histogram());
        assert_eq!(m.side, Side::Right);
        assert_eq!(m.mirror_lr().data, l.data);
    }

    #[test]
    fn pad_reaches_next_multiple_of_eight() {
        // 76, 91, 79 are not divisible by 8; independent ceiling arithmetic.
        let dims = [76usize, 91, 79];
        let expect: Vec<usize> = dims.iter().map(|&d| ((d + 7) / 8) * 8).collect();
        assert_eq!(expect, vec![80, 96, 80]);

        let v = Volume3D::indexed_ramp(dims, Space::Crop);
        let (p, rec) = pad_to_multiple(&v, 8, PadMode::Edge).unwrap();
        assert_eq!(p.dims(), [80, 96, 80]);
        assert_eq!(rec.added, [4, 5, 1]);
        let back = unpad(&p, &rec).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn pad_noop_when_already_multiple() {
        let v = Volume3D::indexed_ramp([8, 16, 8], Space::Crop);
        let (p, rec) = pad_to_multiple(&v, 8, PadMode::Edge).unwrap();
        assert!(rec.is_empty());
        assert_eq!(p.data, v.data);
    }

    #[test]
    fn pad_edge_replicates_boundary() {
        let v = small_volume(&[1.0, 2.0, 3.0], [3, 1, 1]);
        let (p, _) = pad_to_multiple(&v, 4, PadMode::Edge).unwrap();
        assert_eq!(p.data[[3, 0, 0]], 3.0);
        let (pz, _) = pad_to_multiple(&v, 4, PadMode::Zero).unwrap();
        assert_eq!(pz.data[[3, 0, 0]], 0.0);
    }

    #[test]
    fn zscore_two_values_map_to_plus_minus_one() {
        let v = small_volume(&[0.0, 2.0, 0.0, 2.0], [4, 1, 1]);
        let z = zscore(&v).unwrap();
        // mean 1, population std 1 -> {0,2} -> {-1,+1}
        assert!((z.data[[0, 0, 0]] + 1.0).abs() < 1e-6);
        assert!((z.data[[1, 0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_output_statistics() {
        let v = Volume3D::indexed_ramp([6, 7, 5], Space::Crop);
        let z = zscore(&v).unwrap();
        assert!(z.mean().abs() < 1e-5);
        assert!((z.std() - 1.0).abs() < 1e-5);
        // Idempotence on standardized data.
        let z2 = zscore(&z).unwrap();
        let max_diff = z
            .data
            .iter()
            .zip(z2.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5);
    }

    #[test]
    fn zscore_rejects_constant_volume() {
        let v = small_volume(&[3.0; 8], [2, 2, 2]);
        let err = zscore(&v).unwrap_err().to_string();
        assert!(err.contains("zscore"), "error should name the op: {err}");
    }

    #[test]
    fn avg_pool_constant_stays_constant() {
        let v = small_volume(&[5.5; 64], [4, 4, 4]);
        for factor in [2usize, 4] {
            let p = avg_pool(&v, factor).unwrap();
            assert!(p.data.iter().all(|&x| (x - 5.5).abs() < 1e-6));
        }
    }

    #[test]
    fn avg_pool_shape_arithmetic() {
        let v = small_volume(&vec![0.0; 80 * 96 * 80], [80, 96, 80]);
        let p = avg_pool(&v, 8).unwrap();
        assert_eq!(p.dims(), [10, 12, 10]);
        assert_eq!(p.spacing, [8.0, 8.0, 8.0]);
    }

    #[test]
    fn avg_pool_block_mean() {
        let vals: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let v = small_volume(&vals, [2, 2, 2]);
        let p = avg_pool(&v, 2).unwrap();
        assert_eq!(p.dims(), [1, 1, 1]);
        assert!((p.data[[0, 0, 0]] - 3.5).abs() < 1e-6);
    }

    #[test]
    fn avg_pool_rejects_non_divisible() {
        let v = Volume3D::indexed_ramp([5, 4, 4], Space::Crop);
        assert!(avg_pool(&v, 2).is_err());
    }

    #[test]
    fn upsample_shapes_scale_exactly() {
        let v = Volume3D::indexed_ramp([3, 4, 5], Space::Crop);
        for kind in [ResampleKind::Nearest, ResampleKind::Trilinear] {
            let u = upsample(&v, 2, kind).unwrap();
            assert_eq!(u.dims(), [6, 8, 10]);
        }
    }

    #[test]
    fn pool_then_nearest_upsample_preserves_constant_regions() {
        // Volume constant within each 2x2x2 block.
        let v = small_volume(
            &(0..64)
                .map(|i| {
                    let (x, y, z) = (i / 16, (i / 4) % 4, i % 4);
                    ((x / 2) * 4 + (y / 2) * 2 + (z / 2)) as f32
                })
                .collect::<Vec<_>>(),
            [4, 4, 4],
        );
        let p = avg_pool(&v, 2).unwrap();
        let u = upsample(&p, 2, ResampleKind::Nearest).unwrap();
        assert_eq!(u.data, v.data);
    }

    #[test]
    fn mni_hr_requires_half_mm_spacing() {
        let data = Array3::zeros((4, 4, 4));
        assert!(Volume3D::new(data.clone(), [1.0; 3], Space::MniHr, Side::NotApplicable).is_err());
        assert!(Volume3D::new(data, [0.5; 3], Space::MniHr, Side::NotApplicable).is_ok());
    }

    #[test]
    fn schema_has_thirteen_stable_ids() {
        let s = LabelSchema::thalamus();
        assert_eq!(s.len(), 13);
        assert_eq!(s.ids().collect::<Vec<_>>(), (1..=13).collect::<Vec<_>>());
        assert_eq!(s.name(6), Some("Pulvinar Nucleus"));
        assert_eq!(s.name(13), Some("Intermediate Space"));
    }

    #[test]
    fn labelmap_rejects_out_of_schema_values() {
        let schema = LabelSchema::first_n(2).unwrap();
        let data = Array3::from_elem((2, 2, 2), 3u8);
        assert!(LabelMap::new(data, schema, [1.0; 3], Space::Crop, Side::Left).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mirror_is_involution(vals in proptest::collection::vec(-100.0f32..100.0, 24)) {
            let v = small_volume(&vals, [2, 3, 4]);
            let back = mirror_lr(&mirror_lr(&v));
            prop_assert_eq!(back.data, v.data);
        }

        #[test]
        fn pad_unpad_roundtrip(
            vals in proptest::collection::vec(-10.0f32..10.0, 3 * 5 * 7),
            m in 1usize..9,
        ) {
            let v = small_volume(&vals, [3, 5, 7]);
            let (p, rec) = pad_to_multiple(&v, m, PadMode::Edge).unwrap();
            let back = unpad(&p, &rec).unwrap();
            prop_assert_eq!(back.data, v.data);
        }

        #[test]
        fn zscore_affine_invariance(
            vals in proptest::collection::vec(-5.0f32..5.0, 27),
            a in 0.1f32..4.0,
            b in -10.0f32..10.0,
        ) {
            let v = small_volume(&vals, [3, 3, 3]);
            prop_assume!(v.std() > 1e-3);
            let scaled = small_volume(&vals.iter().map(|x| a * x + b).collect::<Vec<_>>(), [3, 3, 3]);
            let z1 = zscore(&v).unwrap();
            let z2 = zscore(&scaled).unwrap();
            for (p, q) in z1.data.iter().zip(z2.data.iter()) {
                prop_assert!((p - q).abs() < 1e-4);
            }
        }

        #[test]
        fn label_ops_preserve_schema_membership(seed in 0u8..3) {
            let schema = LabelSchema::first_n(4).unwrap();
            let data = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| {
                ((x + y + z + seed as usize) % 5) as u8
            });
            let l = LabelMap::new(data, schema.clone(), [1.0; 3], Space::Crop, Side::Left).unwrap();
            let ops: Vec<LabelMap> = vec![
                l.mirror_lr(),
                l.upsample_nearest(2).unwrap(),
                l.downsample_nearest(2).unwrap(),
                l.crop(&CropBox::new([1, 0, 0], [2, 3, 4])).unwrap(),
            ];
            for o in ops {
                for &v in o.data.iter() {
                    prop_assert!(v == 0 || schema.contains(v));
                }
            }
        }
    }
}
