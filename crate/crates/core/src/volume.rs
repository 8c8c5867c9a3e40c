//! Grid-aligned volumetric types, their NIfTI persistence and patch
//! extraction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nifti::{Dtype, NiftiImage, VoxelData};
use crate::simulator::Provenance;

/// Tolerance used when comparing affines of two grids (mm).
pub const AFFINE_TOL: f64 = 1e-6;

/// Segmentation classes in their fixed storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl TissueClass {
    pub const ALL: [TissueClass; 4] = [
        TissueClass::Background,
        TissueClass::Csf,
        TissueClass::Gm,
        TissueClass::Wm,
    ];
    pub const TISSUES: [TissueClass; 3] = [TissueClass::Csf, TissueClass::Gm, TissueClass::Wm];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::Csf => "CSF",
            TissueClass::Gm => "GM",
            TissueClass::Wm => "WM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "background" | "bg" => Some(TissueClass::Background),
            "csf" => Some(TissueClass::Csf),
            "gm" => Some(TissueClass::Gm),
            "wm" => Some(TissueClass::Wm),
            _ => None,
        }
    }
}

/// Geometry of a 3D voxel grid. Data on the grid is stored with x varying
/// fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    affine: [[f64; 4]; 4],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::validation(format!("grid dims {dims:?} must all be >= 1")));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation(format!(
                "voxel size {voxel_size:?} must be positive and finite"
            )));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::validation("affine last row must be (0, 0, 0, 1)"));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("affine must be finite"));
        }
        Ok(Self {
            dims,
            voxel_size,
            affine,
        })
    }

    /// Grid with a diagonal affine (voxel size on the diagonal, no offset).
    pub fn with_spacing(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for i in 0..3 {
            affine[i][i] = voxel_size[i];
        }
        affine[3][3] = 1.0;
        Self::new(dims, voxel_size, affine)
    }

    /// 1 mm isotropic grid with identity affine.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self::with_spacing(dims, [1.0; 3]).expect("positive dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn affine(&self) -> &[[f64; 4]; 4] {
        &self.affine
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// World coordinates (mm) of a voxel index.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        std::array::from_fn(|r| a[r][0] * ijk[0] + a[r][1] * ijk[1] + a[r][2] * ijk[2] + a[r][3])
    }

    /// Same dims, voxel size and affine (within [`AFFINE_TOL`]).
    pub fn matches(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self
                .voxel_size
                .iter()
                .zip(other.voxel_size.iter())
                .all(|(a, b)| (a - b).abs() <= AFFINE_TOL)
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= AFFINE_TOL)
    }

    pub(crate) fn ensure_matches(&self, other: &VoxelGrid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    /// Sub-grid of a patch; the affine is shifted so retained voxels keep
    /// their world coordinates.
    pub fn sub_grid(&self, spec: &PatchSpec) -> Result<VoxelGrid> {
        spec.check(self)?;
        let mut affine = self.affine;
        let o = spec.origin.map(|v| v as f64);
        for (r, row) in affine.iter_mut().take(3).enumerate() {
            row[3] = self.affine[r][0] * o[0]
                + self.affine[r][1] * o[1]
                + self.affine[r][2] * o[2]
                + self.affine[r][3];
        }
        VoxelGrid::new(spec.size, self.voxel_size, affine)
    }

    pub(crate) fn from_image(img: &NiftiImage) -> Result<Self> {
        let d = &img.dims;
        VoxelGrid::new([d[0], d[1], d[2]], img.voxel_size, img.affine)
    }
}

/// Location and extent of a box-shaped patch, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            origin: [0; 3],
            size: [128; 3],
        }
    }
}

impl PatchSpec {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Self {
        Self { origin, size }
    }

    pub fn full(grid: &VoxelGrid) -> Self {
        Self {
            origin: [0; 3],
            size: grid.dims(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.size.iter().product()
    }

    pub fn check(&self, grid: &VoxelGrid) -> Result<()> {
        let dims = grid.dims();
        for a in 0..3 {
            if self.size[a] == 0 || self.origin[a] + self.size[a] > dims[a] {
                return Err(Error::PatchOutOfBounds(format!(
                    "origin {:?} + size {:?} exceeds dims {:?}",
                    self.origin, self.size, dims
                )));
            }
        }
        Ok(())
    }
}

/// Copies one channel of a patch; row-wise along x.
pub(crate) fn copy_patch<T: Copy>(data: &[T], dims: [usize; 3], spec: &PatchSpec) -> Vec<T> {
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = spec.origin;
    let [px, py, pz] = spec.size;
    let mut out = Vec::with_capacity(px * py * pz);
    for z in oz..oz + pz {
        for y in oy..oy + py {
            let start = ox + nx * (y + ny * z);
            out.extend_from_slice(&data[start..start + px]);
        }
    }
    out
}

fn copy_patch_channels<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    spec: &PatchSpec,
) -> Vec<T> {
    let n = dims.iter().product::<usize>();
    (0..channels)
        .flat_map(|c| copy_patch(&data[c * n..(c + 1) * n], dims, spec))
        .collect()
}

/// Any field living on a [`VoxelGrid`].
pub trait GridField: Sized {
    fn grid(&self) -> &VoxelGrid;

    /// Copy of the field restricted to `spec`, on the corresponding sub-grid.
    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self>;
}

/// A single-channel `f64` field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: VoxelGrid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: VoxelGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_voxels() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} voxels",
                data.len(),
                grid.n_voxels()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = NiftiImage::read(path.as_ref())?;
        if img.n_channels() != 1 {
            return Err(Error::Nifti {
                path: path.as_ref().to_path_buf(),
                reason: format!("expected a 3D image, got dims {:?}", img.dims),
            });
        }
        Self::new(VoxelGrid::from_image(&img)?, img.data.to_f64())
    }
}

impl GridField for ScalarField {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self> {
        let grid = self.grid.sub_grid(spec)?;
        Ok(Self {
            data: copy_patch(&self.data, self.grid.dims(), spec),
            grid,
        })
    }
}

/// Loader policy for multi-parametric maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Largest tolerated fraction of voxels carrying a non-finite value while
    /// PD is positive. Tolerated voxels are zeroed and flagged invalid.
    pub max_nonfinite_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_nonfinite_fraction: 0.0,
        }
    }
}

/// Quantitative T1 (ms), T2* (ms), PD and optional MT maps on one grid.
///
/// Voxels with PD > 0 but a non-positive relaxation time (or PD < 0) are
/// flagged invalid; the simulator writes a fixed value there.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiParametricMap {
    grid: VoxelGrid,
    t1: Vec<f64>,
    t2s: Option<Vec<f64>>,
    pd: Vec<f64>,
    mt: Option<Vec<f64>>,
    invalid: Vec<bool>,
    subject_id: String,
}

/// 4D channel order; a file may omit trailing MT.
pub const MPM_CHANNELS: [&str; 4] = ["t1", "t2s", "pd", "mt"];

impl MultiParametricMap {
    pub fn new(
        grid: VoxelGrid,
        t1: Vec<f64>,
        t2s: Option<Vec<f64>>,
        pd: Vec<f64>,
        mt: Option<Vec<f64>>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        Self::with_options(grid, t1, t2s, pd, mt, subject_id, LoadOptions::default())
    }

    pub fn with_options(
        grid: VoxelGrid,
        mut t1: Vec<f64>,
        mut t2s: Option<Vec<f64>>,
        mut pd: Vec<f64>,
        mut mt: Option<Vec<f64>>,
        subject_id: impl Into<String>,
        opts: LoadOptions,
    ) -> Result<Self> {
        let n = grid.n_voxels();
        let lens = [
            ("t1", Some(t1.len())),
            ("t2s", t2s.as_ref().map(Vec::len)),
            ("pd", Some(pd.len())),
            ("mt", mt.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::GridMismatch(format!(
                        "channel {name} has {len} voxels, grid has {n}"
                    )));
                }
            }
        }

        let mut invalid = vec![false; n];
        let mut nonfinite = 0usize;
        for i in 0..n {
            let foreground = pd[i] > 0.0 || pd[i].is_nan();
            let finite = pd[i].is_finite()
                && t1[i].is_finite()
                && t2s.as_ref().is_none_or(|v| v[i].is_finite())
                && mt.as_ref().is_none_or(|v| v[i].is_finite());
            if !finite {
                if foreground {
                    nonfinite += 1;
                    invalid[i] = true;
                }
                for ch in [Some(&mut t1), t2s.as_mut(), Some(&mut pd), mt.as_mut()]
                    .into_iter()
                    .flatten()
                {
                    if !ch[i].is_finite() {
                        ch[i] = 0.0;
                    }
                }
                continue;
            }
            if pd[i] < 0.0
                || (pd[i] > 0.0 && (t1[i] <= 0.0 || t2s.as_ref().is_some_and(|v| v[i] <= 0.0)))
            {
                invalid[i] = true;
            }
        }
        let allowed = opts.max_nonfinite_fraction * n as f64;
        if nonfinite > 0 && nonfinite as f64 > allowed {
            return Err(Error::validation(format!(
                "{nonfinite} foreground voxels carry non-finite values (allowed fraction {})",
                opts.max_nonfinite_fraction
            )));
        }

        Ok(Self {
            grid,
            t1,
            t2s,
            pd,
            mt,
            invalid,
            subject_id: subject_id.into(),
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn t1(&self) -> &[f64] {
        &self.t1
    }
    pub fn t2s(&self) -> Option<&[f64]> {
        self.t2s.as_deref()
    }
    pub fn pd(&self) -> &[f64] {
        &self.pd
    }
    pub fn mt(&self) -> Option<&[f64]> {
        self.mt.as_deref()
    }
    pub fn invalid_mask(&self) -> &[bool] {
        &self.invalid
    }
    pub fn invalid_count(&self) -> usize {
        self.invalid.iter().filter(|&&b| b).count()
    }

    /// Loads either a 4D NIfTI (channels T1, T2*, PD[, MT]) or a JSON
    /// manifest pointing at per-channel 3D files.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Self::load_manifest(path, opts)
        } else {
            Self::load_4d(path, opts)
        }
    }

    fn load_4d(path: &Path, opts: LoadOptions) -> Result<Self> {
        let img = NiftiImage::read(path)?;
        let nc = img.n_channels();
        if !(3..=4).contains(&nc) || img.dims.len() != 4 {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                reason: format!("expected 4D image with 3 or 4 channels, got dims {:?}", img.dims),
            });
        }
        if let Some(chs) = img
            .metadata
            .as_ref()
            .and_then(|m| m.get("channels"))
            .and_then(|c| c.as_array())
        {
            let names: Vec<&str> = chs.iter().filter_map(|c| c.as_str()).collect();
            if names != MPM_CHANNELS[..nc] {
                return Err(Error::Schema(format!(
                    "{}: channel order {names:?} differs from {:?}",
                    path.display(),
                    &MPM_CHANNELS[..nc]
                )));
            }
        }
        let grid = VoxelGrid::from_image(&img)?;
        let n = grid.n_voxels();
        let data = img.data.to_f64();
        let ch = |c: usize| data[c * n..(c + 1) * n].to_vec();
        let subject = img
            .metadata
            .as_ref()
            .and_then(|m| m.get("subject_id"))
            .and_then(|s| s.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| file_stem(path));
        Self::with_options(
            grid,
            ch(0),
            Some(ch(1)),
            ch(2),
            (nc == 4).then(|| ch(3)),
            subject,
            opts,
        )
    }

    fn load_manifest(path: &Path, opts: LoadOptions) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MpmManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let t1 = ScalarField::load(resolve(&m.t1))?;
        let pd = ScalarField::load(resolve(&m.pd))?;
        pd.grid.ensure_matches(&t1.grid, "pd vs t1")?;
        let t2s = m
            .t2s
            .as_deref()
            .map(|p| ScalarField::load(resolve(p)))
            .transpose()?;
        let mt = m
            .mt
            .as_deref()
            .map(|p| ScalarField::load(resolve(p)))
            .transpose()?;
        for (name, f) in [("t2s", &t2s), ("mt", &mt)] {
            if let Some(f) = f {
                f.grid.ensure_matches(&t1.grid, &format!("{name} vs t1"))?;
            }
        }
        Self::with_options(
            t1.grid,
            t1.data,
            t2s.map(|f| f.data),
            pd.data,
            mt.map(|f| f.data),
            m.subject_id,
            opts,
        )
    }

    /// Writes the map as one 4D file in the fixed channel order. Requires
    /// T2*; MT is written when present.
    pub fn save_4d(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let t2s = self
            .t2s
            .as_ref()
            .ok_or_else(|| Error::validation("a 4D map file needs a T2* channel"))?;
        let mut data = Vec::with_capacity(self.t1.len() * 4);
        data.extend_from_slice(&self.t1);
        data.extend_from_slice(t2s);
        data.extend_from_slice(&self.pd);
        let mut nc = 3;
        if let Some(mt) = &self.mt {
            data.extend_from_slice(mt);
            nc = 4;
        }
        let d = self.grid.dims();
        NiftiImage {
            dims: vec![d[0], d[1], d[2], nc],
            voxel_size: self.grid.voxel_size(),
            affine: *self.grid.affine(),
            data: VoxelData::from_f64(&data, dtype)?,
            metadata: Some(json!({
                "subject_id": self.subject_id,
                "channels": &MPM_CHANNELS[..nc],
            })),
        }
        .write(path)
    }
}

impl GridField for MultiParametricMap {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self> {
        let grid = self.grid.sub_grid(spec)?;
        let dims = self.grid.dims();
        let cut = |v: &Vec<f64>| copy_patch(v, dims, spec);
        Ok(Self {
            t1: cut(&self.t1),
            t2s: self.t2s.as_ref().map(cut),
            pd: cut(&self.pd),
            mt: self.mt.as_ref().map(cut),
            invalid: copy_patch(&self.invalid, dims, spec),
            subject_id: self.subject_id.clone(),
            grid,
        })
    }
}

/// Per-channel MPM manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpmManifest {
    pub subject_id: String,
    pub t1: PathBuf,
    #[serde(default)]
    pub t2s: Option<PathBuf>,
    pub pd: PathBuf,
    #[serde(default)]
    pub mt: Option<PathBuf>,
}

fn file_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// Output of the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedVolume {
    pub grid: VoxelGrid,
    pub intensity: Vec<f64>,
    pub provenance: Provenance,
}

impl GridField for SimulatedVolume {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self> {
        let grid = self.grid.sub_grid(spec)?;
        Ok(Self {
            intensity: copy_patch(&self.intensity, self.grid.dims(), spec),
            provenance: self.provenance.clone(),
            grid,
        })
    }
}

/// Per-voxel probabilities over [`TissueClass::ALL`], stored class after
/// class: `probs[c * n_voxels + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation {
    grid: VoxelGrid,
    probs: Vec<f64>,
}

/// Allowed deviation of a voxel's probability sum from one.
pub const PROB_SUM_TOL: f64 = 1e-6;

impl SoftSegmentation {
    pub fn new(grid: VoxelGrid, probs: Vec<f64>) -> Result<Self> {
        let n = grid.n_voxels();
        if probs.len() != n * TissueClass::COUNT {
            return Err(Error::GridMismatch(format!(
                "{} probabilities for {} voxels x {} classes",
                probs.len(),
                n,
                TissueClass::COUNT
            )));
        }
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..TissueClass::COUNT {
                let p = probs[c * n + i];
                if !(-PROB_SUM_TOL..=1.0 + PROB_SUM_TOL).contains(&p) {
                    return Err(Error::validation(format!("probability {p} at voxel {i}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::validation(format!(
                    "probabilities at voxel {i} sum to {sum}"
                )));
            }
        }
        Ok(Self { grid, probs })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channel(&self, class: TissueClass) -> &[f64] {
        let n = self.grid.n_voxels();
        &self.probs[class.index() * n..(class.index() + 1) * n]
    }

    pub fn prob(&self, class: TissueClass, voxel: usize) -> f64 {
        self.probs[class.index() * self.grid.n_voxels() + voxel]
    }

    /// Argmax labels; ties go to the lowest class index.
    pub fn to_labels(&self) -> LabelMap {
        let n = self.grid.n_voxels();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..TissueClass::COUNT {
                    if self.probs[c * n + i] > self.probs[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            grid: self.grid.clone(),
            labels,
        }
    }
}

impl GridField for SoftSegmentation {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self> {
        let grid = self.grid.sub_grid(spec)?;
        Ok(Self {
            probs: copy_patch_channels(&self.probs, TissueClass::COUNT, self.grid.dims(), spec),
            grid,
        })
    }
}

/// Hard segmentation with labels in `0..4` (see [`TissueClass`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: VoxelGrid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: VoxelGrid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.n_voxels() {
            return Err(Error::GridMismatch(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.n_voxels()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= TissueClass::COUNT) {
            return Err(Error::validation(format!("label {bad} outside 0..=3")));
        }
        Ok(Self { grid, labels })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class: TissueClass) -> usize {
        let c = class as u8;
        self.labels.iter().filter(|&&l| l == c).count()
    }
}

impl GridField for LabelMap {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self> {
        let grid = self.grid.sub_grid(spec)?;
        Ok(Self {
            labels: copy_patch(&self.labels, self.grid.dims(), spec),
            grid,
        })
    }
}

/// Types that persist as a single NIfTI file.
pub trait VolumeFile: Sized {
    const DEFAULT_DTYPE: Dtype;

    fn to_image(&self, dtype: Dtype) -> Result<NiftiImage>;

    fn from_image(img: NiftiImage, path: &Path) -> Result<Self>;

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_image(NiftiImage::read(path)?, path)
    }
}

/// Writes `vol` to `path` (gzip when the name ends in `.gz`). `dtype`
/// defaults to the type's natural storage (32-bit float for intensities
/// and probabilities, uint8 for labels).
pub fn save_volume<V: VolumeFile>(vol: &V, path: impl AsRef<Path>, dtype: Option<Dtype>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory missing"),
            ));
        }
    }
    vol.to_image(dtype.unwrap_or(V::DEFAULT_DTYPE))?.write(path)
}

pub(crate) fn image_3d(grid: &VoxelGrid, channels: usize, data: VoxelData, meta: Option<serde_json::Value>) -> NiftiImage {
    let d = grid.dims();
    let mut dims = d.to_vec();
    if channels > 1 {
        dims.push(channels);
    }
    NiftiImage {
        dims,
        voxel_size: grid.voxel_size(),
        affine: *grid.affine(),
        data,
        metadata: meta,
    }
}

impl VolumeFile for SimulatedVolume {
    const DEFAULT_DTYPE: Dtype = Dtype::F32;

    fn to_image(&self, dtype: Dtype) -> Result<NiftiImage> {
        if dtype == Dtype::U8 {
            return Err(Error::UnsupportedDtype("uint8 for intensities".into()));
        }
        Ok(image_3d(
            &self.grid,
            1,
            VoxelData::from_f64(&self.intensity, dtype)?,
            Some(json!({ "provenance": self.provenance })),
        ))
    }

    fn from_image(img: NiftiImage, path: &Path) -> Result<Self> {
        if img.n_channels() != 1 {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                reason: "simulated volume must be 3D".into(),
            });
        }
        let provenance = img
            .metadata
            .as_ref()
            .and_then(|m| m.get("provenance"))
            .ok_or_else(|| Error::Schema(format!("{}: no provenance metadata", path.display())))
            .and_then(|p| Ok(serde_json::from_value(p.clone())?))?;
        Ok(Self {
            grid: VoxelGrid::from_image(&img)?,
            intensity: img.data.to_f64(),
            provenance,
        })
    }
}

impl VolumeFile for SoftSegmentation {
    const DEFAULT_DTYPE: Dtype = Dtype::F32;

    fn to_image(&self, dtype: Dtype) -> Result<NiftiImage> {
        if dtype == Dtype::U8 {
            return Err(Error::UnsupportedDtype("uint8 for probabilities".into()));
        }
        Ok(image_3d(
            &self.grid,
            TissueClass::COUNT,
            VoxelData::from_f64(&self.probs, dtype)?,
            Some(json!({ "classes": TissueClass::ALL.map(TissueClass::name) })),
        ))
    }

    fn from_image(img: NiftiImage, path: &Path) -> Result<Self> {
        if img.n_channels() != TissueClass::COUNT {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                reason: format!("expected {} channels, got dims {:?}", TissueClass::COUNT, img.dims),
            });
        }
        Self::new(VoxelGrid::from_image(&img)?, img.data.to_f64())
    }
}

impl VolumeFile for LabelMap {
    const DEFAULT_DTYPE: Dtype = Dtype::U8;

    fn to_image(&self, dtype: Dtype) -> Result<NiftiImage> {
        let data = match dtype {
            Dtype::U8 => VoxelData::U8(self.labels.clone()),
            Dtype::F32 => VoxelData::F32(self.labels.iter().map(|&l| l as f32).collect()),
            Dtype::F64 => VoxelData::F64(self.labels.iter().map(|&l| l as f64).collect()),
            Dtype::I16 => return Err(Error::UnsupportedDtype("int16 output".into())),
        };
        Ok(image_3d(&self.grid, 1, data, None))
    }

    fn from_image(img: NiftiImage, path: &Path) -> Result<Self> {
        if img.n_channels() != 1 {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                reason: "label map must be 3D".into(),
            });
        }
        let labels = img
            .data
            .to_f64()
            .into_iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..TissueClass::COUNT as f64).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::validation(format!("{}: label value {v}", path.display())))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(VoxelGrid::from_image(&img)?, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(grid: &VoxelGrid) -> Vec<f64> {
        (0..grid.n_voxels()).map(|i| i as f64).collect()
    }

    #[test]
    fn grid_invariants() {
        assert!(VoxelGrid::with_spacing([0, 1, 1], [1.0; 3]).is_err());
        assert!(VoxelGrid::with_spacing([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        let mut a = *VoxelGrid::isotropic([2, 2, 2]).affine();
        a[3][0] = 1.0;
        assert!(VoxelGrid::new([2, 2, 2], [1.0; 3], a).is_err());
    }

    #[test]
    fn full_patch_is_identity() {
        let g = VoxelGrid::isotropic([3, 4, 5]);
        let f = ScalarField::new(g.clone(), ramp(&g)).unwrap();
        assert_eq!(f.extract_patch(&PatchSpec::full(&g)).unwrap(), f);
    }

    #[test]
    fn single_voxel_patch() {
        let g = VoxelGrid::isotropic([3, 4, 5]);
        let f = ScalarField::new(g.clone(), ramp(&g).iter().map(|v| v + 7.0).collect()).unwrap();
        let p = f.extract_patch(&PatchSpec::new([0; 3], [1; 3])).unwrap();
        assert_eq!(p.data, vec![7.0]);
    }

    #[test]
    fn patch_out_of_bounds() {
        let g = VoxelGrid::isotropic([4, 4, 4]);
        let f = ScalarField::new(g.clone(), ramp(&g)).unwrap();
        let err = f.extract_patch(&PatchSpec::new([1, 0, 0], [4, 1, 1]));
        assert!(matches!(err, Err(Error::PatchOutOfBounds(_))));
        let err = f.extract_patch(&PatchSpec::new([0, 0, 0], [0, 1, 1]));
        assert!(matches!(err, Err(Error::PatchOutOfBounds(_))));
    }

    #[test]
    fn patch_keeps_world_coordinates() {
        let mut a = [[0.0; 4]; 4];
        a[0] = [0.9, 0.1, 0.0, -10.0];
        a[1] = [0.0, 1.2, 0.3, 5.0];
        a[2] = [0.2, 0.0, 2.0, 1.5];
        a[3] = [0.0, 0.0, 0.0, 1.0];
        let g = VoxelGrid::new([8, 9, 10], [1.0, 1.2, 2.0], a).unwrap();
        let spec = PatchSpec::new([2, 3, 4], [3, 3, 3]);
        let sub = g.sub_grid(&spec).unwrap();
        let w_sub = sub.world([1.0, 2.0, 0.0]);
        let w = g.world([3.0, 5.0, 4.0]);
        for k in 0..3 {
            assert!((w_sub[k] - w[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_voxels_flagged() {
        let g = VoxelGrid::isotropic([4, 1, 1]);
        let m = MultiParametricMap::new(
            g,
            vec![1000.0, 0.0, 1000.0, -5.0],
            Some(vec![50.0, 50.0, 0.0, 50.0]),
            vec![1.0, 1.0, 1.0, 0.0],
            None,
            "s",
        )
        .unwrap();
        assert_eq!(m.invalid_mask(), &[false, true, true, false]);
        assert_eq!(m.invalid_count(), 2);
    }

    #[test]
    fn nonfinite_policy() {
        let g = VoxelGrid::isotropic([4, 1, 1]);
        let t1 = vec![1000.0, f64::NAN, 1000.0, f64::INFINITY];
        let pd = vec![1.0, 1.0, 1.0, 0.0];
        let err = MultiParametricMap::new(g.clone(), t1.clone(), None, pd.clone(), None, "s");
        assert!(matches!(err, Err(Error::Validation(_))));
        let m = MultiParametricMap::with_options(
            g,
            t1,
            None,
            pd,
            None,
            "s",
            LoadOptions {
                max_nonfinite_fraction: 0.25,
            },
        )
        .unwrap();
        assert_eq!(m.invalid_mask(), &[false, true, false, false]);
        assert!(m.t1().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_length_mismatch() {
        let g = VoxelGrid::isotropic([2, 1, 1]);
        let err = MultiParametricMap::new(g, vec![1.0; 2], Some(vec![1.0; 3]), vec![1.0; 2], None, "s");
        assert!(matches!(err, Err(Error::GridMismatch(_))));
    }

    #[test]
    fn argmax_tie_goes_low() {
        let g = VoxelGrid::isotropic([2, 1, 1]);
        let probs = vec![0.0, 0.1, 0.4, 0.1, 0.4, 0.4, 0.2, 0.4];
        let s = SoftSegmentation::new(g, probs).unwrap();
        assert_eq!(s.to_labels().labels(), &[1, 2]);
    }

    #[test]
    fn soft_segmentation_rejects_bad_sums() {
        let g = VoxelGrid::isotropic([1, 1, 1]);
        assert!(SoftSegmentation::new(g.clone(), vec![0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(SoftSegmentation::new(g, vec![1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn label_range_checked() {
        let g = VoxelGrid::isotropic([2, 1, 1]);
        assert!(LabelMap::new(g, vec![0, 4]).is_err());
    }
}
