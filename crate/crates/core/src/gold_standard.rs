//! Physics gold standard: soft tissue segmentation of quantitative maps by
//! posterior responsibilities of a fixed Gaussian mixture.
//!
//! The mixture parameters come from a user-supplied JSON config; nothing is
//! fitted to the data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{GridField, LabelMap, MultiParametricMap, SimulatedVolume, SoftSegmentation, TissueClass};

/// Background threshold used when the config gives none: this fraction of
/// the volume's 99th-percentile PD.
pub const DEFAULT_BACKGROUND_FRACTION: f64 = 0.05;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    T1,
    T2s,
    Pd,
    Mt,
}

impl Channel {
    fn data<'a>(&self, mpm: &'a MultiParametricMap) -> Option<&'a [f64]> {
        match self {
            Channel::T1 => Some(mpm.t1()),
            Channel::T2s => mpm.t2s(),
            Channel::Pd => Some(mpm.pd()),
            Channel::Mt => mpm.mt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Per-channel variances.
    Diagonal(Vec<f64>),
    /// Row-major symmetric matrix.
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    fn dense(&self) -> Vec<Vec<f64>> {
        match self {
            Covariance::Diagonal(d) => (0..d.len())
                .map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect())
                .collect(),
            Covariance::Full(m) => m.clone(),
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if a[i].len() != n {
            return None;
        }
        for j in 0..=i {
            if (a[i][j] - a[j][i]).abs() > 1e-9 * (a[i][j].abs() + a[j][i].abs()).max(1.0) {
                return None;
            }
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0 && d.is_finite()) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub name: String,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    pub weight: f64,
    chol: Vec<Vec<f64>>,
    // ln w - (d ln 2pi + ln|cov|) / 2
    log_scale: f64,
}

impl ClassModel {
    /// Log of `w N(v; mean, cov)`.
    pub fn log_joint(&self, v: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut z = [0.0f64; 4];
        let mut q = 0.0;
        for i in 0..d {
            let s: f64 = (0..i).map(|k| self.chol[i][k] * z[k]).sum();
            z[i] = (v[i] - self.mean[i] - s) / self.chol[i][i];
            q += z[i] * z[i];
        }
        self.log_scale - 0.5 * q
    }
}

/// A fixed mixture over tissue classes on a subset of map channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueGmmPrior {
    channels: Vec<Channel>,
    classes: Vec<ClassModel>,
    background_pd_threshold: Option<f64>,
}

/// Input for one class: `(name, mean, covariance, weight)`.
pub type ClassSpec = (String, Vec<f64>, Covariance, Option<f64>);

impl TissueGmmPrior {
    /// Builds and validates a prior. Missing weights default to uniform;
    /// weights not summing to one are rescaled.
    pub fn new(
        channels: Vec<Channel>,
        classes: Vec<ClassSpec>,
        background_pd_threshold: Option<f64>,
    ) -> Result<Self> {
        if channels.is_empty() || channels.len() > 4 {
            return Err(Error::validation("channel selection must hold 1 to 4 channels"));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(Error::validation(format!("channel {c:?} selected twice")));
            }
        }
        if classes.is_empty() {
            return Err(Error::validation("prior needs at least one class"));
        }
        if let Some(t) = background_pd_threshold {
            if !t.is_finite() {
                return Err(Error::validation("background_pd_threshold must be finite"));
            }
        }
        let d = channels.len();
        let n = classes.len();
        let any_weight = classes.iter().any(|c| c.3.is_some());
        if any_weight && classes.iter().any(|c| c.3.is_none()) {
            return Err(Error::validation("give a weight for every class or for none"));
        }
        let mut weights: Vec<f64> = classes.iter().map(|c| c.3.unwrap_or(1.0 / n as f64)).collect();
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::validation(format!("class weight {w} must be > 0")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            weights.iter_mut().for_each(|w| *w /= total);
        }

        let mut models = Vec::with_capacity(n);
        for ((name, mean, covariance, _), weight) in classes.into_iter().zip(weights) {
            if mean.len() != d || mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::validation(format!(
                    "class {name}: mean must have {d} finite entries"
                )));
            }
            match &covariance {
                Covariance::Diagonal(v) => {
                    if v.len() != d {
                        return Err(Error::validation(format!(
                            "class {name}: {} variances for {d} channels",
                            v.len()
                        )));
                    }
                    if let Some(bad) = v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                        return Err(Error::validation(format!(
                            "class {name}: variance {bad} must be > 0"
                        )));
                    }
                }
                Covariance::Full(m) => {
                    if m.len() != d {
                        return Err(Error::validation(format!(
                            "class {name}: covariance must be {d}x{d}"
                        )));
                    }
                }
            }
            let chol = cholesky(&covariance.dense())
                .ok_or_else(|| Error::SingularCovariance(name.clone()))?;
            let log_det: f64 = (0..d).map(|i| 2.0 * chol[i][i].ln()).sum();
            let log_scale = weight.ln() - 0.5 * (d as f64 * LN_2PI + log_det);
            models.push(ClassModel {
                name,
                mean,
                covariance,
                weight,
                chol,
                log_scale,
            });
        }
        Ok(Self {
            channels,
            classes: models,
            background_pd_threshold,
        })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn classes(&self) -> &[ClassModel] {
        &self.classes
    }

    pub fn background_pd_threshold(&self) -> Option<f64> {
        self.background_pd_threshold
    }

    /// Posterior responsibilities at feature vector `v`, in the prior's
    /// class order. Evaluated in log space; errors only when every class
    /// log-likelihood is `-inf` (or NaN).
    pub fn posteriors(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.classes.len()];
        self.posteriors_into(v, &mut out)?;
        Ok(out)
    }

    fn posteriors_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, c) in out.iter_mut().zip(&self.classes) {
            *o = c.log_joint(v);
        }
        let lse = stats::log_sum_exp(out);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "all class log-likelihoods are -inf at {v:?}"
            )));
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        Ok(())
    }

    /// Reads a JSON prior config (see [`PriorConfig`]).
    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PriorConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        cfg.build()
    }

    pub fn to_config(&self) -> PriorConfig {
        let classes = self
            .classes
            .iter()
            .map(|c| {
                let mut cfg = ClassConfig {
                    name: c.name.clone(),
                    weight: Some(c.weight),
                    ..ClassConfig::default()
                };
                for (k, ch) in self.channels.iter().enumerate() {
                    let var = match &c.covariance {
                        Covariance::Diagonal(v) => Some(v[k]),
                        Covariance::Full(_) => None,
                    };
                    let (mean, var_slot) = match ch {
                        Channel::T1 => (&mut cfg.mean_t1_ms, &mut cfg.var_t1),
                        Channel::T2s => (&mut cfg.mean_t2s_ms, &mut cfg.var_t2s),
                        Channel::Pd => (&mut cfg.mean_pd, &mut cfg.var_pd),
                        Channel::Mt => (&mut cfg.mean_mt, &mut cfg.var_mt),
                    };
                    *mean = Some(c.mean[k]);
                    *var_slot = var;
                }
                if let Covariance::Full(m) = &c.covariance {
                    cfg.cov = Some(m.clone());
                }
                cfg
            })
            .collect();
        PriorConfig {
            description: None,
            channels: Some(self.channels.clone()),
            classes,
            background_pd_threshold: self.background_pd_threshold,
        }
    }

    pub fn save_config(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_config())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// JSON prior config.
///
/// ```json
/// {"channels": ["t1", "t2s", "pd"],
///  "classes": [{"name": "CSF", "mean_t1_ms": 4000, "mean_t2s_ms": 200, "mean_pd": 100,
///               "var_t1": 250000, "var_t2s": 2500, "var_pd": 25, "weight": 0.2}, ...],
///  "background_pd_threshold": 10}
/// ```
///
/// Variances are in squared channel units. `cov` (a full matrix in channel
/// order) replaces the `var_*` entries. `channels` defaults to
/// `["t1", "t2s", "pd"]`; an absent threshold means 5% of the 99th
/// percentile of PD in the segmented volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<Channel>>,
    pub classes: Vec<ClassConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_pd_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_t1_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_t2s_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_t1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_t2s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_pd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_mt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl PriorConfig {
    pub fn build(&self) -> Result<TissueGmmPrior> {
        let channels = self
            .channels
            .clone()
            .unwrap_or_else(|| vec![Channel::T1, Channel::T2s, Channel::Pd]);
        let mut specs = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let field = |ch: &Channel| match ch {
                Channel::T1 => (c.mean_t1_ms, c.var_t1, "t1"),
                Channel::T2s => (c.mean_t2s_ms, c.var_t2s, "t2s"),
                Channel::Pd => (c.mean_pd, c.var_pd, "pd"),
                Channel::Mt => (c.mean_mt, c.var_mt, "mt"),
            };
            let mut mean = Vec::new();
            let mut vars = Vec::new();
            for ch in &channels {
                let (m, v, key) = field(ch);
                mean.push(m.ok_or_else(|| {
                    Error::Schema(format!("class {}: missing mean for channel {key}", c.name))
                })?);
                vars.push(v);
            }
            let covariance = match &c.cov {
                Some(m) => Covariance::Full(m.clone()),
                None => Covariance::Diagonal(
                    vars.into_iter()
                        .zip(&channels)
                        .map(|(v, ch)| {
                            v.ok_or_else(|| {
                                Error::Schema(format!(
                                    "class {}: missing variance for channel {}",
                                    c.name,
                                    field(ch).2
                                ))
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            specs.push((c.name.clone(), mean, covariance, c.weight));
        }
        TissueGmmPrior::new(channels, specs, self.background_pd_threshold)
    }
}

/// Physics gold standard segmentation.
///
/// Voxels below the PD threshold (and invalid voxels) are background with
/// probability one; elsewhere background is zero and CSF/GM/WM receive the
/// mixture responsibilities. The prior must name exactly the classes CSF,
/// GM and WM (any order, case-insensitive).
pub fn pgs_segment(mpm: &MultiParametricMap, prior: &TissueGmmPrior) -> Result<SoftSegmentation> {
    let mut slot = Vec::with_capacity(prior.classes.len());
    for c in &prior.classes {
        match TissueClass::parse(&c.name) {
            Some(t) if t != TissueClass::Background && !slot.contains(&t) => slot.push(t),
            _ => {
                return Err(Error::validation(format!(
                    "prior class '{}' is not a distinct CSF/GM/WM class",
                    c.name
                )))
            }
        }
    }
    if slot.len() != 3 {
        return Err(Error::validation("prior must define CSF, GM and WM"));
    }
    let chans: Vec<&[f64]> = prior
        .channels
        .iter()
        .map(|ch| {
            ch.data(mpm).ok_or_else(|| {
                Error::SequenceMismatch(format!("map has no {ch:?} channel required by the prior"))
            })
        })
        .collect::<Result<_>>()?;

    let pd = mpm.pd();
    let threshold = match prior.background_pd_threshold {
        Some(t) => t,
        None => DEFAULT_BACKGROUND_FRACTION * stats::percentile(pd, 99.0),
    };
    let invalid = mpm.invalid_mask();
    let n = mpm.grid().n_voxels();
    let mut probs = vec![0.0; n * TissueClass::COUNT];
    let mut v = vec![0.0; chans.len()];
    let mut post = vec![0.0; slot.len()];
    for i in 0..n {
        if invalid[i] || pd[i] < threshold {
            probs[i] = 1.0;
            continue;
        }
        for (k, ch) in chans.iter().enumerate() {
            v[k] = ch[i];
        }
        prior.posteriors_into(&v, &mut post)?;
        for (p, t) in post.iter().zip(&slot) {
            probs[t.index() * n + i] = *p;
        }
    }
    SoftSegmentation::new(mpm.grid().clone(), probs)
}

/// Labels a simulated image with a one-dimensional intensity mixture whose
/// per-class means, variances and weights are the gold-standard-weighted
/// moments of the image itself.
///
/// This is the acquisition-dependent stand-in segmenter used by sweeps:
/// where a contrast separates tissues poorly, its volumes drift away from
/// the gold standard. Voxels whose background probability is at least 0.5
/// are background.
pub fn pgs_seeded_labels(image: &SimulatedVolume, pgs: &SoftSegmentation) -> Result<LabelMap> {
    image.grid.ensure_matches(pgs.grid(), "image vs gold standard")?;
    let n = image.grid.n_voxels();
    let x = &image.intensity;
    let fg: Vec<bool> = (0..n).map(|i| pgs.prob(TissueClass::Background, i) < 0.5).collect();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let var_floor = (1e-6 * scale).powi(2);

    let mut models = Vec::new();
    for c in TissueClass::TISSUES {
        let p = pgs.channel(c);
        let (mut w, mut s1) = (0.0, 0.0);
        for i in (0..n).filter(|&i| fg[i]) {
            w += p[i];
            s1 += p[i] * x[i];
        }
        if w <= 0.0 {
            continue;
        }
        let mu = s1 / w;
        let var = (0..n)
            .filter(|&i| fg[i])
            .map(|i| p[i] * (x[i] - mu) * (x[i] - mu))
            .sum::<f64>()
            / w
            + var_floor;
        models.push((c, w, mu, var));
    }
    let total: f64 = models.iter().map(|m| m.1).sum();
    let labels = (0..n)
        .map(|i| {
            if !fg[i] || models.is_empty() {
                return TissueClass::Background.index() as u8;
            }
            let mut best = (f64::NEG_INFINITY, TissueClass::Background);
            for &(c, w, mu, var) in &models {
                let ll = (w / total).ln() - 0.5 * var.ln() - (x[i] - mu) * (x[i] - mu) / (2.0 * var);
                if ll > best.0 {
                    best = (ll, c);
                }
            }
            best.1.index() as u8
        })
        .collect();
    LabelMap::new(image.grid.clone(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;

    fn one_d(mu: [f64; 2], var: [f64; 2], w: Option<[f64; 2]>) -> TissueGmmPrior {
        TissueGmmPrior::new(
            vec![Channel::T1],
            vec![
                ("A".into(), vec![mu[0]], Covariance::Diagonal(vec![var[0]]), w.map(|w| w[0])),
                ("B".into(), vec![mu[1]], Covariance::Diagonal(vec![var[1]]), w.map(|w| w[1])),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn analytic_two_class() {
        let p = one_d([0.0, 2.0], [1.0, 1.0], Some([0.5, 0.5]));
        let post = p.posteriors(&[0.5]).unwrap();
        // exponent difference ((v - 2)^2 - v^2) / 2 = 1
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((post[0] - expected).abs() < 1e-12);
        assert!((post[0] + post[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_symmetry() {
        let p = one_d([10.0, 30.0], [4.0, 4.0], None);
        let post = p.posteriors(&[20.0]).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-12 && (post[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_tail_has_no_nan() {
        let p = one_d([0.0, 1.0], [1e-4, 1e-4], None);
        // log-likelihoods around -5e7
        let post = p.posteriors(&[100.0]).unwrap();
        assert!(post.iter().all(|x| x.is_finite()));
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(post[1] > 0.999);
    }

    #[test]
    fn weights_default_and_rescale() {
        let p = one_d([0.0, 1.0], [1.0, 1.0], None);
        assert!(p.classes().iter().all(|c| c.weight == 0.5));
        let q = one_d([0.0, 1.0], [1.0, 1.0], Some([2.0, 6.0]));
        assert_eq!(q.classes()[0].weight, 0.25);
    }

    #[test]
    fn bad_covariances() {
        let bad = TissueGmmPrior::new(
            vec![Channel::T1],
            vec![("A".into(), vec![0.0], Covariance::Diagonal(vec![0.0]), None)],
            None,
        );
        assert!(matches!(bad, Err(Error::Validation(_))));
        let singular = TissueGmmPrior::new(
            vec![Channel::T1, Channel::Pd],
            vec![(
                "A".into(),
                vec![0.0, 0.0],
                Covariance::Full(vec![vec![1.0, 1.0], vec![1.0, 1.0]]),
                None,
            )],
            None,
        );
        assert!(matches!(singular, Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn full_covariance_matches_diagonal_when_diagonal() {
        let mk = |cov| {
            TissueGmmPrior::new(
                vec![Channel::T1, Channel::Pd],
                vec![
                    ("A".into(), vec![0.0, 0.0], cov, None),
                    ("B".into(), vec![1.0, 2.0], Covariance::Diagonal(vec![2.0, 3.0]), None),
                ],
                None,
            )
            .unwrap()
        };
        let a = mk(Covariance::Diagonal(vec![2.0, 3.0]));
        let b = mk(Covariance::Full(vec![vec![2.0, 0.0], vec![0.0, 3.0]]));
        let v = [0.3, 1.7];
        let (pa, pb) = (a.posteriors(&v).unwrap(), b.posteriors(&v).unwrap());
        assert!((pa[0] - pb[0]).abs() < 1e-14);
    }

    #[test]
    fn segment_background_and_classes() {
        let prior = PriorConfig {
            description: None,
            channels: Some(vec![Channel::T1]),
            classes: ["WM", "CSF", "GM"]
                .iter()
                .zip([800.0, 4000.0, 1400.0])
                .map(|(n, m)| ClassConfig {
                    name: n.to_string(),
                    mean_t1_ms: Some(m),
                    var_t1: Some(100.0),
                    ..ClassConfig::default()
                })
                .collect(),
            background_pd_threshold: Some(0.5),
        }
        .build()
        .unwrap();
        let g = VoxelGrid::isotropic([4, 1, 1]);
        let mpm = MultiParametricMap::new(
            g,
            vec![800.0, 4000.0, 1400.0, 1400.0],
            None,
            vec![1.0, 1.0, 1.0, 0.1],
            None,
            "s",
        )
        .unwrap();
        let seg = pgs_segment(&mpm, &prior).unwrap();
        assert_eq!(seg.to_labels().labels(), &[3, 1, 2, 0]);
        assert_eq!(seg.prob(TissueClass::Background, 3), 1.0);
    }

    #[test]
    fn segment_requires_tissue_names() {
        let p = one_d([0.0, 1.0], [1.0, 1.0], None);
        let g = VoxelGrid::isotropic([1, 1, 1]);
        let mpm = MultiParametricMap::new(g, vec![1.0], None, vec![1.0], None, "s").unwrap();
        assert!(pgs_segment(&mpm, &p).is_err());
    }
}
