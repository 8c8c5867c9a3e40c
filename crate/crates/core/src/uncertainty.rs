//! Reference values for the uncertainty-aware training losses, aleatoric
//! segmentation sampling and calibrated volume bounds.
//!
//! Nothing here builds an autodiff graph: these are the numbers a training
//! framework's own implementation is checked against.
//!
//! Noise for the loss is indexed by `(voxel, pass, class)` and for sampling
//! by `(sample, voxel, class)` on a counter-based stream, so values do not
//! depend on scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{Dtype, NiftiImage, VoxelData};
use crate::rng::RngStream;
use crate::stats;
use crate::volume::{image_3d, LabelMap, TissueClass, VolumeFile, VoxelGrid};

/// Per-voxel, per-class values stored class after class
/// (`data[c * n_voxels + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassField {
    grid: VoxelGrid,
    classes: usize,
    data: Vec<f64>,
}

impl ClassField {
    fn build(grid: VoxelGrid, classes: usize, data: Vec<f64>, what: &str) -> Result<Self> {
        if classes < 2 {
            return Err(Error::validation(format!("{what}: need at least 2 classes")));
        }
        if data.len() != classes * grid.n_voxels() {
            return Err(Error::GridMismatch(format!(
                "{what}: {} values for {} voxels x {classes} classes",
                data.len(),
                grid.n_voxels()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{what}: non-finite value {v}")));
        }
        Ok(Self {
            grid,
            classes,
            data,
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Reads a 4D NIfTI with one volume per class.
    fn read(path: &Path, what: &str) -> Result<Self> {
        let img = NiftiImage::read(path)?;
        let grid = VoxelGrid::from_image(&img)?;
        Self::build(grid, img.n_channels(), img.data.to_f64(), what)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let data = VoxelData::from_f64(&self.data, dtype)?;
        image_3d(&self.grid, self.classes, data, None).write(path)
    }

    fn same_shape(&self, other: &ClassField, what: &str) -> Result<()> {
        self.grid.ensure_matches(&other.grid, what)?;
        if self.classes != other.classes {
            return Err(Error::GridMismatch(format!(
                "{what}: {} vs {} classes",
                self.classes, other.classes
            )));
        }
        Ok(())
    }
}

/// Network logits `f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField(ClassField);

/// Predicted per-voxel, per-class noise scales `sigma_i >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaField(ClassField);

impl LogitField {
    pub fn new(grid: VoxelGrid, classes: usize, data: Vec<f64>) -> Result<Self> {
        ClassField::build(grid, classes, data, "logits").map(Self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ClassField::read(path.as_ref(), "logits").map(Self)
    }
}

impl SigmaField {
    pub fn new(grid: VoxelGrid, classes: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v < 0.0) {
            return Err(Error::validation(format!("sigma: negative value {v}")));
        }
        ClassField::build(grid, classes, data, "sigma").map(Self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = ClassField::read(path.as_ref(), "sigma")?;
        Self::new(f.grid, f.classes, f.data)
    }

    pub fn zeros(grid: VoxelGrid, classes: usize) -> Self {
        let n = grid.n_voxels() * classes;
        Self(ClassField {
            grid,
            classes,
            data: vec![0.0; n],
        })
    }
}

impl std::ops::Deref for LogitField {
    type Target = ClassField;
    fn deref(&self) -> &ClassField {
        &self.0
    }
}

impl std::ops::Deref for SigmaField {
    type Target = ClassField;
    fn deref(&self) -> &ClassField {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuatedLoss {
    /// Sum of the per-voxel losses.
    pub total: f64,
    pub per_voxel: Vec<f64>,
    /// Delta-method Monte-Carlo standard error of each per-voxel loss,
    /// `sd_t(p_t) / (sqrt(T) mean_t(p_t))`. NaN when `T < 2`.
    pub per_voxel_se: Vec<f64>,
}

impl AttenuatedLoss {
    /// Standard error of `total`, assuming independent voxels.
    pub fn total_se(&self) -> f64 {
        self.per_voxel_se.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn check_loss_inputs(logits: &LogitField, sigma: &SigmaField, target: &LabelMap, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::validation("number of stochastic passes must be >= 1"));
    }
    logits.same_shape(sigma, "logits vs sigma")?;
    logits.grid.ensure_matches(target.grid(), "logits vs target")?;
    if let Some(l) = target.labels().iter().find(|&&l| l as usize >= logits.classes) {
        return Err(Error::validation(format!(
            "target label {l} outside {} classes",
            logits.classes
        )));
    }
    Ok(())
}

/// Per-pass log-probabilities of the target class at one voxel, written to
/// `log_p`; `probs` (if given) receives each pass's softmax vector.
#[allow(clippy::too_many_arguments)]
fn voxel_passes(
    logits: &LogitField,
    sigma: &SigmaField,
    target: usize,
    voxel: usize,
    passes: usize,
    rng: &RngStream,
    log_p: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let n = logits.grid.n_voxels();
    let c_n = logits.classes;
    let mut x = vec![0.0; c_n];
    for t in 0..passes {
        let base = ((voxel * passes + t) * c_n) as u64;
        for (c, xc) in x.iter_mut().enumerate() {
            let s = sigma.data[c * n + voxel];
            let eps = if s == 0.0 { 0.0 } else { s * rng.normal(base + c as u64) };
            *xc = logits.data[c * n + voxel] + eps;
        }
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ln_z = x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        log_p[t] = (x[target] - m) - ln_z;
        if let Some(pr) = probs.as_deref_mut() {
            for c in 0..c_n {
                pr[t * c_n + c] = ((x[c] - m) - ln_z).exp();
            }
        }
    }
}

/// Noisy-logit cross-entropy.
///
/// For every voxel `i` and pass `t`, `x_it = f_i + eps_t` with
/// `eps_t ~ N(0, sigma_i^2)` drawn per class, and
/// `L_i = -ln( (1/T) sum_t softmax(x_it)[y_i] )`, evaluated in log-sum-exp
/// form. With `sigma = 0` this is exactly the plain cross-entropy.
pub fn attenuated_ce_loss(
    logits: &LogitField,
    sigma: &SigmaField,
    target: &LabelMap,
    t_passes: usize,
    rng: &RngStream,
) -> Result<AttenuatedLoss> {
    check_loss_inputs(logits, sigma, target, t_passes)?;
    let labels = target.labels();
    let n = logits.grid.n_voxels();
    let t_f = t_passes as f64;
    let pairs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; t_passes],
            |log_p, i| {
                voxel_passes(logits, sigma, labels[i] as usize, i, t_passes, rng, log_p, None);
                let m = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = log_p.iter().map(|&a| (a - m).exp()).sum();
                let loss = -(m + (s / t_f).ln());
                let se = if t_passes < 2 {
                    f64::NAN
                } else {
                    let p: Vec<f64> = log_p.iter().map(|a| a.exp()).collect();
                    let mean = stats::mean(&p);
                    stats::sample_sd(&p) / (t_f.sqrt() * mean)
                };
                (loss, se)
            },
        )
        .collect();
    let per_voxel: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    if let Some(i) = per_voxel.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss at voxel {i}")));
    }
    Ok(AttenuatedLoss {
        total: stats::compensated_sum(per_voxel.iter().copied()),
        per_voxel_se: pairs.iter().map(|p| p.1).collect(),
        per_voxel,
    })
}

/// Gradient of [`attenuated_ce_loss`]'s total with respect to every logit,
/// noise held fixed. Same class-major layout as the logits.
pub fn attenuated_ce_logit_grad(
    logits: &LogitField,
    sigma: &SigmaField,
    target: &LabelMap,
    t_passes: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    check_loss_inputs(logits, sigma, target, t_passes)?;
    let labels = target.labels();
    let n = logits.grid.n_voxels();
    let c_n = logits.classes;
    let per_voxel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = labels[i] as usize;
            let mut log_p = vec![0.0; t_passes];
            let mut probs = vec![0.0; t_passes * c_n];
            voxel_passes(logits, sigma, y, i, t_passes, rng, &mut log_p, Some(&mut probs));
            let m = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = log_p.iter().map(|&a| (a - m).exp()).collect();
            let w_sum: f64 = w.iter().sum();
            (0..c_n)
                .map(|k| {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    let acc: f64 = (0..t_passes)
                        .map(|t| w[t] * (delta - probs[t * c_n + k]))
                        .sum();
                    -acc / w_sum
                })
                .collect()
        })
        .collect();
    let mut grad = vec![0.0; n * c_n];
    for (i, g) in per_voxel.into_iter().enumerate() {
        for (k, v) in g.into_iter().enumerate() {
            grad[k * n + i] = v;
        }
    }
    Ok(grad)
}

/// `s_samples` segmentations: per-class Gaussian noise with scale sigma is
/// added to the logits and the argmax taken (ties to the lowest class).
pub fn aleatoric_segmentation_samples(
    logits: &LogitField,
    sigma: &SigmaField,
    s_samples: usize,
    rng: &RngStream,
) -> Result<Vec<LabelMap>> {
    if s_samples == 0 {
        return Err(Error::validation("number of samples must be >= 1"));
    }
    logits.same_shape(sigma, "logits vs sigma")?;
    let c_n = logits.classes;
    if c_n > TissueClass::COUNT {
        return Err(Error::validation(format!(
            "label maps hold at most {} classes, logits have {c_n}",
            TissueClass::COUNT
        )));
    }
    let n = logits.grid.n_voxels();
    (0..s_samples)
        .map(|s| {
            let labels: Vec<u8> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let base = ((s * n + i) * c_n) as u64;
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for c in 0..c_n {
                        let sd = sigma.data[c * n + i];
                        let eps = if sd == 0.0 { 0.0 } else { sd * rng.normal(base + c as u64) };
                        let v = logits.data[c * n + i] + eps;
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(logits.grid.clone(), labels)
        })
        .collect()
}

/// Mean over elements of the per-element batch variance (population form):
/// `mean_e (1/B) sum_b (F_b[e] - mean_b F[e])^2`. Zero iff all items agree.
pub fn stratification_feature_loss(batch: &FeatureMapBatch) -> Result<f64> {
    let b = batch.items.len();
    if b < 2 {
        return Err(Error::validation("stratification loss needs a batch of at least 2"));
    }
    let len = batch.items[0].len();
    if len == 0 {
        return Err(Error::validation("empty feature maps"));
    }
    let b_f = b as f64;
    let mut acc = 0.0;
    for e in 0..len {
        // Shifted by the first item so identical maps give exactly zero.
        let x0 = batch.items[0][e];
        let mean = batch.items.iter().map(|f| f[e] - x0).sum::<f64>() / b_f;
        acc += batch
            .items
            .iter()
            .map(|f| {
                let d = (f[e] - x0) - mean;
                d * d
            })
            .sum::<f64>()
            / b_f;
    }
    Ok(acc / len as f64)
}

/// `B` equally shaped feature maps (flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapBatch {
    pub shape: Vec<usize>,
    pub items: Vec<Vec<f64>>,
}

impl FeatureMapBatch {
    pub fn new(shape: Vec<usize>, items: Vec<Vec<f64>>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if let Some(bad) = items.iter().find(|f| f.len() != len) {
            return Err(Error::GridMismatch(format!(
                "feature map of {} values, shape {shape:?} needs {len}",
                bad.len()
            )));
        }
        if items.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature maps must be finite"));
        }
        Ok(Self { shape, items })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Aleatoric,
    Epistemic,
}

/// Tissue volumes (mL) across `S` stochastic segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSampleSet {
    pub classes: Vec<TissueClass>,
    /// `volumes_ml[k][s]`: class `classes[k]`, sample `s`.
    pub volumes_ml: Vec<Vec<f64>>,
    pub source: SampleSource,
    pub sample_ids: Vec<String>,
}

impl VolumeSampleSet {
    pub fn new(
        classes: Vec<TissueClass>,
        volumes_ml: Vec<Vec<f64>>,
        source: SampleSource,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if classes.len() != volumes_ml.len() || classes.is_empty() {
            return Err(Error::validation("one volume list per class required"));
        }
        let s = sample_ids.len();
        if s == 0 {
            return Err(Error::validation("sample set is empty"));
        }
        for (c, v) in classes.iter().zip(&volumes_ml) {
            if v.len() != s {
                return Err(Error::validation(format!(
                    "class {}: {} volumes for {s} samples",
                    c.name(),
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
                return Err(Error::validation(format!(
                    "class {}: volume {bad} must be finite and >= 0",
                    c.name()
                )));
            }
        }
        Ok(Self {
            classes,
            volumes_ml,
            source,
            sample_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn volumes(&self, class: TissueClass) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|k| self.volumes_ml[k].as_slice())
    }
}

/// Voxel counts times voxel volume, in mL, for all four classes.
pub fn volumes_from_labelmaps(samples: &[LabelMap], grid: &VoxelGrid) -> Result<VolumeSampleSet> {
    if samples.is_empty() {
        return Err(Error::validation("no label maps given"));
    }
    let ml_per_voxel = grid.voxel_volume_mm3() / 1000.0;
    let mut volumes = (0..TissueClass::COUNT).map(|_| Vec::with_capacity(samples.len())).collect::<Vec<_>>();
    for m in samples {
        m.grid().ensure_matches(grid, "label map")?;
        let mut counts = [0usize; TissueClass::COUNT];
        for &l in m.labels() {
            counts[l as usize] += 1;
        }
        for (v, c) in volumes.iter_mut().zip(counts) {
            v.push(c as f64 * ml_per_voxel);
        }
    }
    VolumeSampleSet::new(
        TissueClass::ALL.to_vec(),
        volumes,
        SampleSource::Aleatoric,
        (0..samples.len()).map(|s| s.to_string()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeBounds {
    pub lo: f64,
    pub median: f64,
    pub hi: f64,
    pub iqr: f64,
}

/// Per-class `[lo_pct, hi_pct]` percentile bounds and median, Hazen
/// convention (see [`stats::hazen_percentile`]). `iqr` is `hi - lo`.
pub fn calibrated_volume_bounds(
    samples: &VolumeSampleSet,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<Vec<(TissueClass, VolumeBounds)>> {
    if samples.n_samples() < 2 {
        return Err(Error::validation("calibrated bounds need at least 2 samples"));
    }
    if !(0.0 <= lo_pct && lo_pct <= hi_pct && hi_pct <= 100.0) {
        return Err(Error::validation(format!(
            "percentiles [{lo_pct}, {hi_pct}] must satisfy 0 <= lo <= hi <= 100"
        )));
    }
    Ok(samples
        .classes
        .iter()
        .zip(&samples.volumes_ml)
        .map(|(&c, v)| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let lo = stats::hazen_percentile(&s, lo_pct);
            let hi = stats::hazen_percentile(&s, hi_pct);
            (
                c,
                VolumeBounds {
                    lo,
                    median: stats::hazen_percentile(&s, 50.0),
                    hi,
                    iqr: hi - lo,
                },
            )
        })
        .collect())
}

/// Loads externally produced epistemic samples: a directory of
/// `sample_*.nii[.gz]` label maps, or a CSV with header
/// `sample_id,csf_ml,gm_ml,wm_ml[,background_ml]`.
pub fn ingest_epistemic_samples(path: impl AsRef<Path>) -> Result<VolumeSampleSet> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
                    n.starts_with("sample_") && (n.ends_with(".nii") || n.ends_with(".nii.gz"))
                })
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Schema(format!(
                "{}: no sample_*.nii[.gz] files",
                path.display()
            )));
        }
        let maps = files
            .iter()
            .map(LabelMap::load)
            .collect::<Result<Vec<_>>>()?;
        let grid = maps[0].grid().clone();
        let mut set = volumes_from_labelmaps(&maps, &grid)?;
        set.source = SampleSource::Epistemic;
        set.sample_ids = files
            .iter()
            .map(|p| {
                let n = p.file_name().unwrap().to_string_lossy();
                n.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
            })
            .collect();
        return Ok(set);
    }

    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let base = ["sample_id", "csf_ml", "gm_ml", "wm_ml"];
    let with_bg = header.len() == 5 && header[4] == "background_ml";
    if header.len() < 4 || header[..4] != base || (header.len() == 5 && !with_bg) || header.len() > 5 {
        return Err(Error::Schema(format!(
            "{}: header {header:?}, expected sample_id,csf_ml,gm_ml,wm_ml[,background_ml]",
            path.display()
        )));
    }
    let mut classes = TissueClass::TISSUES.to_vec();
    if with_bg {
        classes.push(TissueClass::Background);
    }
    let mut volumes = vec![Vec::new(); classes.len()];
    let mut ids = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Schema(format!("row {}: wrong column count", row + 1)));
        }
        ids.push(rec[0].to_string());
        for (k, v) in volumes.iter_mut().enumerate() {
            let x: f64 = rec[k + 1].trim().parse().map_err(|_| {
                Error::Schema(format!("row {}: '{}' is not a number", row + 1, &rec[k + 1]))
            })?;
            v.push(x);
        }
    }
    VolumeSampleSet::new(classes, volumes, SampleSource::Epistemic, ids)
}
