//! Acquisition-parameter sampling and single-subject ("stratified")
//! training batches.
//!
//! A batch holds `n` simulations of one subject at one patch location, each
//! under independently drawn sequence parameters, plus the shared gold
//! standard target for that patch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngCursor, RngStream};
use crate::simulator::{
    simulate_volume, Normalize, Sequence, SequenceKind, SequenceParams, SimOptions, DEFAULT_TAU_MS,
    DEFAULT_TD_MS,
};
use crate::volume::{GridField, MultiParametricMap, PatchSpec, SoftSegmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RangeTag {
    #[serde(rename = "iod")]
    InDistribution,
    #[serde(rename = "ood")]
    OutOfDistribution,
}

impl RangeTag {
    pub fn label(self) -> &'static str {
        match self {
            RangeTag::InDistribution => "IoD",
            RangeTag::OutOfDistribution => "OoD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iod" => Ok(RangeTag::InDistribution),
            "ood" => Ok(RangeTag::OutOfDistribution),
            other => Err(Error::validation(format!("unknown distribution tag '{other}'"))),
        }
    }
}

/// Closed interval `[lo, hi]`; `lo == hi` pins the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::validation(format!(
                "interval [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    /// Affine map of `[lo, hi]` onto `[0, 1]`; values outside extrapolate.
    pub fn unit(&self, v: f64) -> f64 {
        if self.hi == self.lo {
            0.0
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    pub fn lerp(&self, t: f64) -> f64 {
        self.lo + t * (self.hi - self.lo)
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = String;
    fn try_from(v: [f64; 2]) -> std::result::Result<Self, String> {
        Interval::new(v[0], v[1]).map_err(|e| e.to_string())
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeKind {
    /// TI is sampled; TD and tau stay fixed.
    Mprage {
        ti_ms: Interval,
        td_ms: f64,
        tau_ms: f64,
    },
    Spgr {
        tr_ms: Interval,
        te_ms: Interval,
        fa_deg: Interval,
    },
}

/// Per-sequence sampling intervals. JSON:
/// `{"seq": "mprage", "ti_ms": [600, 1200], "tag": "iod"}` or
/// `{"seq": "spgr", "tr_ms": [..], "te_ms": [..], "fa_deg": [..], "tag": "ood"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRange", into = "RawRange")]
pub struct ParamRange {
    pub kind: RangeKind,
    pub tag: RangeTag,
}

pub const PRESET_NAMES: [&str; 4] = ["mprage-iod", "mprage-ood", "spgr-iod", "spgr-ood"];

impl ParamRange {
    pub fn mprage(ti_ms: Interval, tag: RangeTag) -> Self {
        Self {
            kind: RangeKind::Mprage {
                ti_ms,
                td_ms: DEFAULT_TD_MS,
                tau_ms: DEFAULT_TAU_MS,
            },
            tag,
        }
    }

    pub fn spgr(tr_ms: Interval, te_ms: Interval, fa_deg: Interval, tag: RangeTag) -> Self {
        Self {
            kind: RangeKind::Spgr {
                tr_ms,
                te_ms,
                fa_deg,
            },
            tag,
        }
    }

    /// Built-in ranges: TI 600-1200 ms (OoD 100-2000 ms) for MPRAGE;
    /// TR 15-100 ms, TE 4-10 ms, FA 15-75 deg (OoD 10-200 ms, 2-20 ms,
    /// 5-90 deg) for SPGR.
    pub fn preset(name: &str) -> Result<Self> {
        let iv = |a, b| Interval { lo: a, hi: b };
        Ok(match name {
            "mprage-iod" => Self::mprage(iv(600.0, 1200.0), RangeTag::InDistribution),
            "mprage-ood" => Self::mprage(iv(100.0, 2000.0), RangeTag::OutOfDistribution),
            "spgr-iod" => Self::spgr(
                iv(15.0, 100.0),
                iv(4.0, 10.0),
                iv(15.0, 75.0),
                RangeTag::InDistribution,
            ),
            "spgr-ood" => Self::spgr(
                iv(10.0, 200.0),
                iv(2.0, 20.0),
                iv(5.0, 90.0),
                RangeTag::OutOfDistribution,
            ),
            other => {
                return Err(Error::validation(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    /// The in-distribution preset for a sequence.
    pub fn iod_for(kind: SequenceKind) -> Self {
        match kind {
            SequenceKind::Mprage => Self::preset("mprage-iod"),
            SequenceKind::Spgr => Self::preset("spgr-iod"),
        }
        .expect("built-in preset")
    }

    pub fn sequence(&self) -> SequenceKind {
        match self.kind {
            RangeKind::Mprage { .. } => SequenceKind::Mprage,
            RangeKind::Spgr { .. } => SequenceKind::Spgr,
        }
    }

    /// Sampled parameters with their intervals, in draw order.
    pub fn intervals(&self) -> Vec<(&'static str, Interval)> {
        match self.kind {
            RangeKind::Mprage { ti_ms, .. } => vec![("ti_ms", ti_ms)],
            RangeKind::Spgr {
                tr_ms,
                te_ms,
                fa_deg,
            } => vec![("tr_ms", tr_ms), ("te_ms", te_ms), ("fa_deg", fa_deg)],
        }
    }

    pub fn interval(&self, key: &str) -> Option<Interval> {
        self.intervals()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, i)| i)
    }

    /// True when every sampled parameter of `p` lies inside this range.
    pub fn contains(&self, p: &SequenceParams) -> bool {
        p.kind() == self.sequence()
            && self
                .intervals()
                .iter()
                .all(|(k, iv)| p.get(k).is_some_and(|v| iv.contains(v)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    seq: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ti_ms: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    td_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tr_ms: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    te_ms: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fa_deg: Option<Interval>,
    tag: RangeTag,
}

impl TryFrom<RawRange> for ParamRange {
    type Error = String;

    fn try_from(r: RawRange) -> std::result::Result<Self, String> {
        let need = |k: &str, v: Option<Interval>| v.ok_or_else(|| format!("missing field {k}"));
        let kind = match SequenceKind::parse(&r.seq).map_err(|e| e.to_string())? {
            SequenceKind::Mprage => {
                if r.tr_ms.is_some() || r.te_ms.is_some() || r.fa_deg.is_some() {
                    return Err("SPGR intervals given for an MPRAGE range".into());
                }
                let td_ms = r.td_ms.unwrap_or(DEFAULT_TD_MS);
                let tau_ms = r.tau_ms.unwrap_or(DEFAULT_TAU_MS);
                if !(td_ms >= 0.0 && tau_ms > 0.0) {
                    return Err("td_ms must be >= 0 and tau_ms > 0".into());
                }
                RangeKind::Mprage {
                    ti_ms: need("ti_ms", r.ti_ms)?,
                    td_ms,
                    tau_ms,
                }
            }
            SequenceKind::Spgr => {
                if r.ti_ms.is_some() || r.td_ms.is_some() || r.tau_ms.is_some() {
                    return Err("MPRAGE fields given for an SPGR range".into());
                }
                let fa = need("fa_deg", r.fa_deg)?;
                if fa.hi > 180.0 {
                    return Err(format!("fa_deg upper bound {} exceeds 180", fa.hi));
                }
                RangeKind::Spgr {
                    tr_ms: need("tr_ms", r.tr_ms)?,
                    te_ms: need("te_ms", r.te_ms)?,
                    fa_deg: fa,
                }
            }
        };
        Ok(ParamRange { kind, tag: r.tag })
    }
}

impl From<ParamRange> for RawRange {
    fn from(p: ParamRange) -> Self {
        let mut r = RawRange {
            seq: p.sequence().name().into(),
            ti_ms: None,
            td_ms: None,
            tau_ms: None,
            tr_ms: None,
            te_ms: None,
            fa_deg: None,
            tag: p.tag,
        };
        match p.kind {
            RangeKind::Mprage {
                ti_ms,
                td_ms,
                tau_ms,
            } => {
                r.ti_ms = Some(ti_ms);
                r.td_ms = Some(td_ms);
                r.tau_ms = Some(tau_ms);
            }
            RangeKind::Spgr {
                tr_ms,
                te_ms,
                fa_deg,
            } => {
                r.tr_ms = Some(tr_ms);
                r.te_ms = Some(te_ms);
                r.fa_deg = Some(fa_deg);
            }
        }
        r
    }
}

/// Draws each sampled parameter independently and uniformly from its
/// interval (one draw per parameter, in [`ParamRange::intervals`] order).
/// Gain is 1.
pub fn sample_params(range: &ParamRange, rng: &mut RngCursor) -> SequenceParams {
    match range.kind {
        RangeKind::Mprage {
            ti_ms,
            td_ms,
            tau_ms,
        } => SequenceParams::mprage(rng.uniform_in(ti_ms.lo, ti_ms.hi), td_ms, tau_ms),
        RangeKind::Spgr {
            tr_ms,
            te_ms,
            fa_deg,
        } => {
            let tr = rng.uniform_in(tr_ms.lo, tr_ms.hi);
            let te = rng.uniform_in(te_ms.lo, te_ms.hi);
            let fa = rng.uniform_in(fa_deg.lo, fa_deg.hi);
            SequenceParams::spgr(tr, te, fa)
        }
    }
}

/// Physics-branch encoding of a parameter set.
///
/// Layout: `[is_mprage, is_spgr, ti]` for MPRAGE and
/// `[is_mprage, is_spgr, tr, te, fa]` for SPGR, each parameter mapped
/// affinely so the in-distribution interval becomes `[0, 1]`. When `range`
/// is tagged out-of-distribution the built-in in-distribution preset of the
/// same sequence supplies the intervals, so OoD values land outside `[0, 1]`.
pub fn normalize_physics_vector(params: &SequenceParams, range: &ParamRange) -> Result<Vec<f64>> {
    if params.kind() != range.sequence() {
        return Err(Error::SequenceMismatch(format!(
            "{} parameters against a {} range",
            params.kind().label(),
            range.sequence().label()
        )));
    }
    let reference = match range.tag {
        RangeTag::InDistribution => *range,
        RangeTag::OutOfDistribution => ParamRange::iod_for(range.sequence()),
    };
    let mut v = match params.sequence {
        Sequence::Mprage(_) => vec![1.0, 0.0],
        Sequence::Spgr(_) => vec![0.0, 1.0],
    };
    for (key, iv) in reference.intervals() {
        v.push(iv.unit(params.get(key).expect("key of matching sequence")));
    }
    Ok(v)
}

/// Where a batch's patch comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchChoice {
    Fixed(PatchSpec),
    /// Origin drawn uniformly over all valid origins.
    Random { size: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub params: SequenceParams,
    /// Simulated intensities on the patch grid.
    pub intensity: Vec<f64>,
    pub physics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedBatch {
    pub subject_id: String,
    pub patch: PatchSpec,
    pub items: Vec<BatchItem>,
    /// Gold standard restricted to the patch, shared by all items.
    pub target: SoftSegmentation,
    pub rng: RngStream,
}

/// Builds one single-subject batch.
///
/// Draw order on `rng`: three origin draws (x, y, z) when the patch is
/// random, then the parameters of item 0, item 1, ... Item `i` equals
/// `extract_patch(simulate_volume(mpm, params_i, opts))`. Without
/// normalization only the patch is simulated, which gives the same bits.
pub fn make_stratified_batch(
    mpm: &MultiParametricMap,
    pgs: &SoftSegmentation,
    range: &ParamRange,
    n: usize,
    patch: PatchChoice,
    rng: RngStream,
    opts: &SimOptions,
) -> Result<StratifiedBatch> {
    if n == 0 {
        return Err(Error::validation("batch size must be >= 1"));
    }
    pgs.grid().ensure_matches(mpm.grid(), "gold standard vs map")?;
    if range.sequence() == SequenceKind::Spgr && mpm.t2s().is_none() {
        return Err(Error::SequenceMismatch(
            "SPGR range requested but the map has no T2* channel".into(),
        ));
    }
    let mut cursor = rng.cursor();
    let dims = mpm.grid().dims();
    let spec = match patch {
        PatchChoice::Fixed(s) => s,
        PatchChoice::Random { size } => {
            let mut origin = [0usize; 3];
            for a in 0..3 {
                if size[a] == 0 || size[a] > dims[a] {
                    return Err(Error::PatchOutOfBounds(format!(
                        "patch size {size:?} does not fit dims {dims:?}"
                    )));
                }
                origin[a] = cursor.below((dims[a] - size[a] + 1) as u64) as usize;
            }
            PatchSpec::new(origin, size)
        }
    };
    spec.check(mpm.grid())?;

    let params: Vec<SequenceParams> = (0..n).map(|_| sample_params(range, &mut cursor)).collect();
    let local = opts.normalize == Normalize::None;
    let source = if local {
        mpm.extract_patch(&spec)?
    } else {
        mpm.clone()
    };
    let items = params
        .par_iter()
        .map(|p| {
            let mut vol = simulate_volume(&source, p, opts)?;
            if !local {
                vol = vol.extract_patch(&spec)?;
            }
            Ok(BatchItem {
                params: *p,
                intensity: vol.intensity,
                physics: normalize_physics_vector(p, range)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StratifiedBatch {
        subject_id: mpm.subject_id().to_string(),
        patch: spec,
        items,
        target: pgs.extract_patch(&spec)?,
        rng,
    })
}
