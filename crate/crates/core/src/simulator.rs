//! Static signal equations for spoiled gradient echo (SPGR) and MPRAGE,
//! applied voxelwise to a [`MultiParametricMap`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats;
use crate::volume::{GridField, MultiParametricMap, SimulatedVolume};

pub const SIMULATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default MPRAGE delay time (ms).
pub const DEFAULT_TD_MS: f64 = 0.0;
/// Default MPRAGE slice imaging time (ms).
pub const DEFAULT_TAU_MS: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spgr {
    pub tr_ms: f64,
    pub te_ms: f64,
    pub fa_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mprage {
    pub ti_ms: f64,
    pub td_ms: f64,
    pub tau_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sequence {
    Spgr(Spgr),
    Mprage(Mprage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Mprage,
    Spgr,
}

impl SequenceKind {
    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::Mprage => "mprage",
            SequenceKind::Spgr => "spgr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SequenceKind::Mprage => "MPRAGE",
            SequenceKind::Spgr => "SPGR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mprage" => Ok(SequenceKind::Mprage),
            "spgr" => Ok(SequenceKind::Spgr),
            other => Err(Error::validation(format!("unknown sequence '{other}'"))),
        }
    }
}

/// Acquisition parameters plus scanner gain. JSON form:
/// `{"seq": "spgr", "tr_ms": .., "te_ms": .., "fa_deg": .., "gain": ..}` or
/// `{"seq": "mprage", "ti_ms": .., "td_ms": .., "tau_ms": .., "gain": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct SequenceParams {
    pub sequence: Sequence,
    pub gain: f64,
}

impl SequenceParams {
    pub fn spgr(tr_ms: f64, te_ms: f64, fa_deg: f64) -> Self {
        Self {
            sequence: Sequence::Spgr(Spgr {
                tr_ms,
                te_ms,
                fa_deg,
            }),
            gain: 1.0,
        }
    }

    pub fn mprage(ti_ms: f64, td_ms: f64, tau_ms: f64) -> Self {
        Self {
            sequence: Sequence::Mprage(Mprage {
                ti_ms,
                td_ms,
                tau_ms,
            }),
            gain: 1.0,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn kind(&self) -> SequenceKind {
        match self.sequence {
            Sequence::Spgr(_) => SequenceKind::Spgr,
            Sequence::Mprage(_) => SequenceKind::Mprage,
        }
    }

    /// Named parameter values in a fixed order (`tr_ms, te_ms, fa_deg` or
    /// `ti_ms, td_ms, tau_ms`).
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        match self.sequence {
            Sequence::Spgr(p) => vec![("tr_ms", p.tr_ms), ("te_ms", p.te_ms), ("fa_deg", p.fa_deg)],
            Sequence::Mprage(p) => {
                vec![("ti_ms", p.ti_ms), ("td_ms", p.td_ms), ("tau_ms", p.tau_ms)]
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        if key == "gain" {
            return Some(self.gain);
        }
        self.named_values()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} = {v} must be > 0")))
            }
        }
        positive("gain", self.gain)?;
        match self.sequence {
            Sequence::Spgr(p) => {
                positive("tr_ms", p.tr_ms)?;
                if !(p.te_ms >= 0.0 && p.te_ms.is_finite()) {
                    return Err(Error::validation(format!("te_ms = {} must be >= 0", p.te_ms)));
                }
                if !(0.0..=180.0).contains(&p.fa_deg) {
                    return Err(Error::validation(format!(
                        "fa_deg = {} outside [0, 180]",
                        p.fa_deg
                    )));
                }
            }
            Sequence::Mprage(p) => {
                positive("ti_ms", p.ti_ms)?;
                positive("tau_ms", p.tau_ms)?;
                if !(p.td_ms >= 0.0 && p.td_ms.is_finite()) {
                    return Err(Error::validation(format!("td_ms = {} must be >= 0", p.td_ms)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    seq: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tr_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    te_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fa_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ti_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    td_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gain: Option<f64>,
}

impl TryFrom<RawParams> for SequenceParams {
    type Error = String;

    fn try_from(r: RawParams) -> std::result::Result<Self, String> {
        let need = |name: &str, v: Option<f64>| v.ok_or_else(|| format!("missing field {name}"));
        let sequence = match SequenceKind::parse(&r.seq).map_err(|e| e.to_string())? {
            SequenceKind::Spgr => {
                if r.ti_ms.is_some() || r.td_ms.is_some() || r.tau_ms.is_some() {
                    return Err("MPRAGE fields given for an SPGR sequence".into());
                }
                Sequence::Spgr(Spgr {
                    tr_ms: need("tr_ms", r.tr_ms)?,
                    te_ms: need("te_ms", r.te_ms)?,
                    fa_deg: need("fa_deg", r.fa_deg)?,
                })
            }
            SequenceKind::Mprage => {
                if r.tr_ms.is_some() || r.te_ms.is_some() || r.fa_deg.is_some() {
                    return Err("SPGR fields given for an MPRAGE sequence".into());
                }
                Sequence::Mprage(Mprage {
                    ti_ms: need("ti_ms", r.ti_ms)?,
                    td_ms: r.td_ms.unwrap_or(DEFAULT_TD_MS),
                    tau_ms: r.tau_ms.unwrap_or(DEFAULT_TAU_MS),
                })
            }
        };
        Ok(SequenceParams {
            sequence,
            gain: r.gain.unwrap_or(1.0),
        })
    }
}

impl From<SequenceParams> for RawParams {
    fn from(p: SequenceParams) -> Self {
        let mut r = RawParams {
            seq: p.kind().name().to_string(),
            tr_ms: None,
            te_ms: None,
            fa_deg: None,
            ti_ms: None,
            td_ms: None,
            tau_ms: None,
            gain: Some(p.gain),
        };
        match p.sequence {
            Sequence::Spgr(s) => {
                r.tr_ms = Some(s.tr_ms);
                r.te_ms = Some(s.te_ms);
                r.fa_deg = Some(s.fa_deg);
            }
            Sequence::Mprage(m) => {
                r.ti_ms = Some(m.ti_ms);
                r.td_ms = Some(m.td_ms);
                r.tau_ms = Some(m.tau_ms);
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    MaxToOne,
    /// Divide by the given percentile (0, 100] of the output.
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Output |signal| (MPRAGE is negative for short TI).
    pub magnitude: bool,
    /// Applied after the magnitude step.
    pub normalize: Normalize,
    pub invalid_voxel_value: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            magnitude: true,
            normalize: Normalize::None,
            invalid_voxel_value: 0.0,
        }
    }
}

impl SimOptions {
    pub fn raw() -> Self {
        Self {
            magnitude: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Normalize::Percentile(p) = self.normalize {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::validation(format!(
                    "normalization percentile {p} outside (0, 100]"
                )));
            }
        }
        if !self.invalid_voxel_value.is_finite() {
            return Err(Error::validation("invalid_voxel_value must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    pub params: SequenceParams,
    /// Stream the parameters were drawn from, if sampled.
    pub rng: Option<RngStream>,
    pub simulator_version: String,
    pub options: SimOptions,
}

/// SPGR steady-state signal:
/// `G PD sin(a) (1 - E1) / (1 - cos(a) E1) exp(-TE / T2*)`, `E1 = exp(-TR / T1)`.
#[inline]
pub fn spgr_signal(t1: f64, t2s: f64, pd: f64, p: &Spgr, gain: f64) -> f64 {
    let (sin_a, cos_a) = p.fa_deg.to_radians().sin_cos();
    spgr_kernel(t1, t2s, pd, p.tr_ms, p.te_ms, sin_a, cos_a, gain)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn spgr_kernel(t1: f64, t2s: f64, pd: f64, tr: f64, te: f64, sin_a: f64, cos_a: f64, gain: f64) -> f64 {
    let e1 = (-tr / t1).exp();
    gain * pd * sin_a * (1.0 - e1) / (1.0 - cos_a * e1) * (-te / t2s).exp()
}

/// MPRAGE signal:
/// `G PD (1 - 2 exp(-TI / T1) / (1 + exp(-(TI + TD + tau) / T1)))`.
/// Negative for short TI; no magnitude is taken here.
#[inline]
pub fn mprage_signal(t1: f64, pd: f64, p: &Mprage, gain: f64) -> f64 {
    let total = p.ti_ms + p.td_ms + p.tau_ms;
    gain * pd * (1.0 - 2.0 * (-p.ti_ms / t1).exp() / (1.0 + (-total / t1).exp()))
}

/// Flip angle (degrees) maximizing the SPGR signal: `acos(exp(-TR / T1))`.
pub fn ernst_angle(t1: f64, tr: f64) -> f64 {
    (-tr / t1).exp().acos().to_degrees()
}

const CHUNK: usize = 1 << 14;

/// Voxelwise simulation. Output is identical for any rayon pool size: each
/// voxel is computed independently and normalization uses an order
/// statistic or max, both order-independent.
pub fn simulate_volume(
    mpm: &MultiParametricMap,
    params: &SequenceParams,
    opts: &SimOptions,
) -> Result<SimulatedVolume> {
    params.validate()?;
    opts.validate()?;
    let n = mpm.grid().n_voxels();
    let t1 = mpm.t1();
    let pd = mpm.pd();
    let invalid = mpm.invalid_mask();
    let gain = params.gain;
    let mut out = vec![0.0; n];
    // Invalid voxels keep the fill value as given, sign included.
    let magnitude = opts.magnitude;
    let mag = move |s: f64| if magnitude { s.abs() } else { s };

    match params.sequence {
        Sequence::Spgr(p) => {
            let t2s = mpm.t2s().ok_or_else(|| {
                Error::SequenceMismatch(format!(
                    "SPGR needs a T2* channel, subject {} has none",
                    mpm.subject_id()
                ))
            })?;
            let (sin_a, cos_a) = p.fa_deg.to_radians().sin_cos();
            out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
                let base = ci * CHUNK;
                for (k, o) in chunk.iter_mut().enumerate() {
                    let i = base + k;
                    *o = if invalid[i] {
                        opts.invalid_voxel_value
                    } else if pd[i] == 0.0 {
                        0.0
                    } else {
                        mag(spgr_kernel(t1[i], t2s[i], pd[i], p.tr_ms, p.te_ms, sin_a, cos_a, gain))
                    };
                }
            });
        }
        Sequence::Mprage(p) => {
            out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
                let base = ci * CHUNK;
                for (k, o) in chunk.iter_mut().enumerate() {
                    let i = base + k;
                    *o = if invalid[i] {
                        opts.invalid_voxel_value
                    } else if pd[i] == 0.0 {
                        0.0
                    } else {
                        mag(mprage_signal(t1[i], pd[i], &p, gain))
                    };
                }
            });
        }
    }

    let scale = match opts.normalize {
        Normalize::None => None,
        Normalize::MaxToOne => Some(out.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Normalize::Percentile(p) => Some(stats::percentile(&out, p)),
    };
    if let Some(s) = scale.filter(|s| *s > 0.0 && s.is_finite()) {
        out.par_iter_mut().for_each(|v| *v /= s);
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite intensity at voxel {i}")));
    }

    Ok(SimulatedVolume {
        grid: mpm.grid().clone(),
        intensity: out,
        provenance: Provenance {
            subject_id: mpm.subject_id().to_string(),
            params: *params,
            rng: None,
            simulator_version: SIMULATOR_VERSION.to_string(),
            options: *opts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGrid;

    // Reference values from a 30-digit evaluation of the two equations.
    const SPGR_REF: f64 = 0.125_217_503_888_297_56;
    const MPRAGE_REF: f64 = 0.254_491_670_345_286;

    fn spgr(tr: f64, te: f64, fa: f64) -> Spgr {
        Spgr {
            tr_ms: tr,
            te_ms: te,
            fa_deg: fa,
        }
    }

    #[test]
    fn spgr_zero_flip() {
        assert_eq!(spgr_signal(800.0, 40.0, 1.3, &spgr(20.0, 4.0, 0.0), 1.0), 0.0);
    }

    #[test]
    fn spgr_full_recovery_limit() {
        let v = spgr_signal(1000.0, 50.0, 2.0, &spgr(1e9, 0.0, 90.0), 1.0);
        assert!((v - 2.0).abs() < 1e-9);
    }

    #[test]
    fn spgr_reference_point() {
        let v = spgr_signal(1000.0, 50.0, 1.0, &spgr(50.0, 5.0, 30.0), 1.0);
        assert!(((v - SPGR_REF) / SPGR_REF).abs() < 1e-13, "{v}");
    }

    #[test]
    fn mprage_limits_and_reference() {
        let long = Mprage {
            ti_ms: 1e9,
            td_ms: 0.0,
            tau_ms: 1000.0,
        };
        assert!((mprage_signal(1000.0, 3.0, &long, 1.0) - 3.0).abs() < 1e-9);
        assert_eq!(mprage_signal(1000.0, 0.0, &long, 1.0), 0.0);
        let p = Mprage {
            ti_ms: 900.0,
            td_ms: 500.0,
            tau_ms: 1000.0,
        };
        let v = mprage_signal(1000.0, 1.0, &p, 1.0);
        assert!(((v - MPRAGE_REF) / MPRAGE_REF).abs() < 1e-13, "{v}");
    }

    #[test]
    fn ernst_limits() {
        assert!((ernst_angle(1.0, 1e6) - 90.0).abs() < 1e-9);
        assert!(ernst_angle(1e9, 1e-6).abs() < 1e-3);
        assert!((ernst_angle(1000.0, 50.0) - 17.967_912_910_405_25).abs() < 1e-9);
    }

    #[test]
    fn param_validation_names_bound() {
        let err = SequenceParams::spgr(20.0, 5.0, 200.0).validate().unwrap_err();
        assert!(err.to_string().contains("fa_deg = 200 outside [0, 180]"), "{err}");
        assert!(SequenceParams::mprage(900.0, -1.0, 1000.0).validate().is_err());
        assert!(SequenceParams::mprage(900.0, 0.0, 1000.0).validate().is_ok());
        assert!(SequenceParams::mprage(900.0, 0.0, 1000.0)
            .with_gain(0.0)
            .validate()
            .is_err());
    }

    #[test]
    fn params_json() {
        let p: SequenceParams = serde_json::from_str(r#"{"seq":"mprage","ti_ms":900}"#).unwrap();
        assert_eq!(p, SequenceParams::mprage(900.0, DEFAULT_TD_MS, DEFAULT_TAU_MS));
        let q: SequenceParams = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(p, q);
        let s: SequenceParams =
            serde_json::from_str(r#"{"seq":"spgr","tr_ms":20,"te_ms":5,"fa_deg":30,"gain":2}"#)
                .unwrap();
        assert_eq!(s, SequenceParams::spgr(20.0, 5.0, 30.0).with_gain(2.0));
        assert!(serde_json::from_str::<SequenceParams>(r#"{"seq":"spgr","tr_ms":20}"#).is_err());
        assert!(
            serde_json::from_str::<SequenceParams>(r#"{"seq":"spgr","tr_ms":20,"te_ms":5,"fa_deg":30,"x":1}"#)
                .is_err()
        );
        assert!(serde_json::from_str::<SequenceParams>(
            r#"{"seq":"mprage","ti_ms":900,"fa_deg":30}"#
        )
        .is_err());
    }

    fn phantom(n: usize, t2s: bool) -> MultiParametricMap {
        let g = VoxelGrid::isotropic([n, n, n]);
        let m = g.n_voxels();
        MultiParametricMap::new(
            g,
            vec![1000.0; m],
            t2s.then(|| vec![50.0; m]),
            vec![1.0; m],
            None,
            "phantom",
        )
        .unwrap()
    }

    #[test]
    fn constant_phantom() {
        let v = simulate_volume(
            &phantom(4, true),
            &SequenceParams::spgr(50.0, 5.0, 30.0),
            &SimOptions::default(),
        )
        .unwrap();
        assert!(v
            .intensity
            .iter()
            .all(|x| ((x - SPGR_REF) / SPGR_REF).abs() < 1e-13));
        assert_eq!(v.provenance.subject_id, "phantom");
    }

    #[test]
    fn spgr_needs_t2s() {
        let err = simulate_volume(
            &phantom(2, false),
            &SequenceParams::spgr(50.0, 5.0, 30.0),
            &SimOptions::default(),
        );
        assert!(matches!(err, Err(Error::SequenceMismatch(_))));
        assert!(simulate_volume(
            &phantom(2, false),
            &SequenceParams::mprage(900.0, 0.0, 1000.0),
            &SimOptions::default()
        )
        .is_ok());
    }

    #[test]
    fn magnitude_and_normalization() {
        let m = phantom(2, true);
        let short = SequenceParams::mprage(100.0, 0.0, 1000.0);
        let raw = simulate_volume(&m, &short, &SimOptions::raw()).unwrap();
        assert!(raw.intensity.iter().all(|&v| v < 0.0));
        let mag = simulate_volume(&m, &short, &SimOptions::default()).unwrap();
        assert!(mag
            .intensity
            .iter()
            .zip(&raw.intensity)
            .all(|(a, b)| *a == b.abs()));
        let norm = simulate_volume(
            &m,
            &short,
            &SimOptions {
                normalize: Normalize::MaxToOne,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert!(norm.intensity.iter().all(|&v| v == 1.0));
        let bad = SimOptions {
            normalize: Normalize::Percentile(0.0),
            ..SimOptions::default()
        };
        assert!(simulate_volume(&m, &short, &bad).is_err());
    }

    #[test]
    fn invalid_voxels_take_fill_value() {
        let g = VoxelGrid::isotropic([3, 1, 1]);
        let m = MultiParametricMap::new(
            g,
            vec![1000.0, 0.0, 0.0],
            Some(vec![50.0, 50.0, 0.0]),
            vec![1.0, 1.0, 0.0],
            None,
            "s",
        )
        .unwrap();
        let opts = SimOptions {
            invalid_voxel_value: -7.0,
            magnitude: false,
            ..SimOptions::default()
        };
        let v = simulate_volume(&m, &SequenceParams::spgr(50.0, 0.0, 30.0), &opts).unwrap();
        assert_eq!(v.intensity[1], -7.0);
        assert_eq!(v.intensity[2], 0.0);
    }
}
