//! Segmentation agreement and harmonisation statistics, plus the report
//! tables built from them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::function::erf::erfc;

use crate::augmentation::{ParamRange, RangeTag};
use crate::error::{Error, Result};
use crate::simulator::{SequenceKind, SequenceParams};
use crate::stats;
use crate::volume::{LabelMap, TissueClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub class: TissueClass,
    pub score: f64,
    pub intersection: usize,
    pub a: usize,
    pub b: usize,
    /// Both masks empty; `score` is then defined as 1.
    pub empty: bool,
}

/// `2|A n B| / (|A| + |B|)` for one class.
pub fn dice(a: &LabelMap, b: &LabelMap, class: TissueClass) -> Result<DiceResult> {
    a.grid().ensure_matches(b.grid(), "dice")?;
    let c = class.index() as u8;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == c, y == c);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    let empty = na + nb == 0;
    let score = if empty {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    };
    Ok(DiceResult {
        class,
        score,
        intersection: inter,
        a: na,
        b: nb,
        empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovResult {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub sd: f64,
    pub cov: f64,
    pub n: usize,
}

/// Coefficient of variation, `sd / mean` with the sample standard deviation.
pub fn cov(volumes: &[f64]) -> Result<CovResult> {
    if volumes.len() < 2 {
        return Err(Error::validation(format!(
            "CoV needs at least 2 volumes, got {}",
            volumes.len()
        )));
    }
    if volumes.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("CoV: non-finite volume"));
    }
    let mean = stats::mean(volumes);
    if mean <= 0.0 {
        return Err(Error::validation(format!("CoV undefined for mean volume {mean}")));
    }
    let sd = stats::sample_sd(volumes);
    Ok(CovResult {
        mean,
        sd,
        cov: sd / mean,
        n: volumes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Largest effective sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 12;
pub const WILCOXON_MIN_PAIRS: usize = 5;

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j share rank ((i+1) + (j+1)) / 2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped, ties get average ranks. Exact null distribution for
/// `n_effective <= 12`, otherwise the normal approximation with continuity
/// and tie corrections.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::validation(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| v.is_nan()) {
        return Err(Error::validation("NaN in paired samples"));
    }
    let d: Vec<f64> = d.into_iter().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n < WILCOXON_MIN_PAIRS {
        return Err(Error::validation(format!(
            "Wilcoxon needs at least {WILCOXON_MIN_PAIRS} non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = doubled_ranks(&abs);
    let total2: u64 = ranks.iter().sum();
    let wp2: u64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let wm2 = total2 - wp2;
    let w2 = wp2.min(wm2);

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        // Counts of sign assignments by doubled positive-rank sum.
        let mut dp = vec![0u64; total2 as usize + 1];
        dp[0] = 1;
        for &r in &ranks {
            for s in (r as usize..dp.len()).rev() {
                dp[s] += dp[s - r as usize];
            }
        }
        let below: u64 = dp[..=w2 as usize].iter().sum();
        let p = (2.0 * below as f64 / (1u64 << n) as f64).min(1.0);
        (p, WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
        let wp = wp2 as f64 / 2.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((wp - mu).abs() - 0.5).max(0.0) / var.sqrt();
            erfc(z / std::f64::consts::SQRT_2).min(1.0)
        };
        (p, WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        statistic: w2 as f64 / 2.0,
        w_plus: wp2 as f64 / 2.0,
        w_minus: wm2 as f64 / 2.0,
        p_value: p,
        n_effective: n,
        method,
    })
}

/// One evaluated segmentation: a subject imaged with one parameter setting
/// under one experiment (model).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: String,
    pub subject_id: String,
    pub seq: SequenceKind,
    pub dist: RangeTag,
    pub params: SequenceParams,
    pub csf_ml: f64,
    pub gm_ml: f64,
    pub wm_ml: f64,
    pub dice_gm: Option<f64>,
    pub dice_wm: Option<f64>,
    /// Calibrated bounds on the tissue of interest.
    pub lo_ml: Option<f64>,
    pub hi_ml: Option<f64>,
}

pub const RUN_CSV_HEADER: [&str; 12] = [
    "experiment",
    "subject_id",
    "seq",
    "dist",
    "param_json",
    "csf_ml",
    "gm_ml",
    "wm_ml",
    "dice_gm",
    "dice_wm",
    "lo_ml",
    "hi_ml",
];

impl RunRecord {
    pub fn volume(&self, class: TissueClass) -> Option<f64> {
        match class {
            TissueClass::Csf => Some(self.csf_ml),
            TissueClass::Gm => Some(self.gm_ml),
            TissueClass::Wm => Some(self.wm_ml),
            TissueClass::Background => None,
        }
    }

    pub fn dice(&self, class: TissueClass) -> Option<f64> {
        match class {
            TissueClass::Gm => self.dice_gm,
            TissueClass::Wm => self.dice_wm,
            _ => None,
        }
    }

    /// Sequence tag must match the parameters; an IoD tag requires the
    /// parameters to lie in the IoD preset.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.kind() != self.seq {
            return Err(Error::validation(format!(
                "run tagged {} carries {} parameters",
                self.seq.label(),
                self.params.kind().label()
            )));
        }
        if self.dist == RangeTag::InDistribution && !ParamRange::iod_for(self.seq).contains(&self.params) {
            return Err(Error::validation(format!(
                "run tagged IoD has parameters outside the IoD range: {}",
                self.params.to_json()
            )));
        }
        for (name, v) in [("csf_ml", self.csf_ml), ("gm_ml", self.gm_ml), ("wm_ml", self.wm_ml)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        for (name, v) in [("dice_gm", self.dice_gm), ("dice_wm", self.dice_wm)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        if let (Some(lo), Some(hi)) = (self.lo_ml, self.hi_ml) {
            if lo > hi {
                return Err(Error::validation(format!("lo_ml {lo} > hi_ml {hi}")));
            }
        }
        Ok(())
    }

    fn to_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.experiment.clone(),
            self.subject_id.clone(),
            self.seq.label().to_string(),
            self.dist.label().to_string(),
            self.params.to_json(),
            self.csf_ml.to_string(),
            self.gm_ml.to_string(),
            self.wm_ml.to_string(),
            opt(self.dice_gm),
            opt(self.dice_wm),
            opt(self.lo_ml),
            opt(self.hi_ml),
        ]
    }

    fn from_row(rec: &csv::StringRecord, row: usize) -> Result<Self> {
        let schema = |msg: String| Error::Schema(format!("row {row}: {msg}"));
        if rec.len() != RUN_CSV_HEADER.len() {
            return Err(schema(format!("{} fields, expected {}", rec.len(), RUN_CSV_HEADER.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| schema(format!("{} = '{}' is not a number", RUN_CSV_HEADER[i], &rec[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].trim().is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let params: SequenceParams =
            serde_json::from_str(&rec[4]).map_err(|e| schema(format!("param_json: {e}")))?;
        let r = RunRecord {
            experiment: rec[0].to_string(),
            subject_id: rec[1].to_string(),
            seq: SequenceKind::parse(&rec[2])?,
            dist: RangeTag::parse(&rec[3])?,
            params,
            csf_ml: num(5)?,
            gm_ml: num(6)?,
            wm_ml: num(7)?,
            dice_gm: opt(8)?,
            dice_wm: opt(9)?,
            lo_ml: opt(10)?,
            hi_ml: opt(11)?,
        };
        r.validate()?;
        Ok(r)
    }
}

/// Writes run records as CSV. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_runs_csv<W: Write>(runs: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_CSV_HEADER)?;
    for r in runs {
        w.write_record(r.to_row())?;
    }
    w.flush().map_err(|e| Error::Schema(format!("csv flush: {e}")))?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != RUN_CSV_HEADER {
        return Err(Error::Schema(format!(
            "run CSV header {header:?}, expected {}",
            RUN_CSV_HEADER.join(",")
        )));
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| RunRecord::from_row(&rec?, i + 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Cov,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Cov => "cov",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Metric::Dice),
            "cov" => Ok(Metric::Cov),
            other => Err(Error::Schema(format!("unknown metric '{other}'"))),
        }
    }

    fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dice)
    }

    /// Display scale: CoV is shown x10^3.
    pub fn scale(self) -> f64 {
        match self {
            Metric::Dice => 1.0,
            Metric::Cov => 1e3,
        }
    }

    pub fn format(self, v: f64) -> String {
        match self {
            Metric::Dice => format!("{:.3}", v * self.scale()),
            Metric::Cov => format!("{:.2}", v * self.scale()),
        }
    }
}

/// Table column: sequence, tissue, distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColumnKey {
    pub seq: SequenceKind,
    pub tissue: TissueClass,
    pub dist: RangeTag,
}

impl ColumnKey {
    pub fn label(&self) -> String {
        format!("{} {} {}", self.seq.label(), self.tissue.name(), self.dist.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub metric: Metric,
    pub experiment: String,
    pub column: ColumnKey,
    /// Mean across subjects (unscaled).
    pub mean: f64,
    /// Standard deviation across subjects; absent for a single subject.
    pub sd: Option<f64>,
    pub n_subjects: usize,
    /// Wilcoxon p against the column's best experiment; absent for the best
    /// itself and when the test is not applicable.
    pub p_vs_best: Option<f64>,
    pub bold: bool,
}

impl ReportCell {
    pub fn text(&self) -> String {
        let sd = self
            .sd
            .map(|s| self.metric.format(s))
            .unwrap_or_else(|| "n/a".into());
        format!("{} ({sd})", self.metric.format(self.mean))
    }
}

/// Dice and CoV tables in the annealing-study layout.
///
/// Dice cells are the mean over subjects of each subject's mean Dice; CoV
/// cells are the mean over subjects of each subject's CoV across parameter
/// realisations. Brackets hold the across-subject standard deviation.
/// Experiments are ordered by name, columns by sequence, tissue, then
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingReport {
    pub alpha: f64,
    pub experiments: Vec<String>,
    pub cells: Vec<ReportCell>,
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "metric",
    "experiment",
    "seq",
    "tissue",
    "dist",
    "mean",
    "sd",
    "n_subjects",
    "p_vs_best",
    "bold",
    "cell",
];

type SubjectValues = BTreeMap<String, f64>;

/// Builds the report. In each column the best experiment (highest Dice,
/// lowest CoV) is bold, as is every experiment whose paired Wilcoxon test
/// against it gives `p >= alpha` or cannot be run.
pub fn annealing_report(runs: &[RunRecord], alpha: f64) -> Result<AnnealingReport> {
    if runs.is_empty() {
        return Err(Error::validation("no runs to report"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("alpha = {alpha} outside (0, 1)")));
    }
    let mut groups: BTreeMap<(String, SequenceKind, RangeTag), BTreeMap<&str, Vec<&RunRecord>>> =
        BTreeMap::new();
    for r in runs {
        r.validate()?;
        groups
            .entry((r.experiment.clone(), r.seq, r.dist))
            .or_default()
            .entry(r.subject_id.as_str())
            .or_default()
            .push(r);
    }

    let mut per_subject: BTreeMap<(Metric, ColumnKey), BTreeMap<String, SubjectValues>> = BTreeMap::new();
    for ((exp, seq, dist), subjects) in &groups {
        for tissue in [TissueClass::Gm, TissueClass::Wm] {
            let column = ColumnKey { seq: *seq, tissue, dist: *dist };
            let mut covs = SubjectValues::new();
            let mut dices = SubjectValues::new();
            for (subject, rs) in subjects {
                let mut vols: Vec<f64> = rs.iter().map(|r| r.volume(tissue).unwrap()).collect();
                vols.sort_by(f64::total_cmp);
                let c = cov(&vols)
                    .map_err(|e| e.context(format!("{exp} / {} / subject {subject}", column.label())))?;
                covs.insert(subject.to_string(), c.cov);

                let ds: Vec<f64> = rs.iter().filter_map(|r| r.dice(tissue)).collect();
                if !ds.is_empty() {
                    if ds.len() != rs.len() {
                        return Err(Error::validation(format!(
                            "{exp} / {} / subject {subject}: Dice missing for some runs",
                            column.label()
                        )));
                    }
                    let mut ds = ds;
                    ds.sort_by(f64::total_cmp);
                    dices.insert(subject.to_string(), stats::mean(&ds));
                }
            }
            per_subject
                .entry((Metric::Cov, column))
                .or_default()
                .insert(exp.clone(), covs);
            if !dices.is_empty() {
                per_subject
                    .entry((Metric::Dice, column))
                    .or_default()
                    .insert(exp.clone(), dices);
            }
        }
    }

    let mut cells = Vec::new();
    for ((metric, column), by_exp) in &per_subject {
        let summary: Vec<(&String, f64, Option<f64>, usize)> = by_exp
            .iter()
            .map(|(exp, vals)| {
                let v: Vec<f64> = vals.values().copied().collect();
                let sd = (v.len() >= 2).then(|| stats::sample_sd(&v));
                (exp, stats::mean(&v), sd, v.len())
            })
            .collect();
        let mut best = 0;
        for (k, s) in summary.iter().enumerate() {
            let better = if metric.higher_is_better() {
                s.1 > summary[best].1
            } else {
                s.1 < summary[best].1
            };
            if better {
                best = k;
            }
        }
        let best_vals = &by_exp[summary[best].0];
        for (k, (exp, mean, sd, n)) in summary.iter().enumerate() {
            let p = if k == best {
                None
            } else {
                let vals = &by_exp[*exp];
                let (x, y): (Vec<f64>, Vec<f64>) = best_vals
                    .iter()
                    .filter_map(|(s, b)| vals.get(s).map(|v| (*b, *v)))
                    .unzip();
                wilcoxon_signed_rank(&x, &y).ok().map(|w| w.p_value)
            };
            cells.push(ReportCell {
                metric: *metric,
                experiment: (*exp).clone(),
                column: *column,
                mean: *mean,
                sd: *sd,
                n_subjects: *n,
                p_vs_best: p,
                bold: k == best || p.is_none_or(|p| p >= alpha),
            });
        }
    }
    let mut report = AnnealingReport {
        alpha,
        experiments: groups.keys().map(|k| k.0.clone()).collect(),
        cells,
    };
    report.experiments.dedup();
    report.sort_cells();
    Ok(report)
}

impl AnnealingReport {
    fn sort_cells(&mut self) {
        self.cells.sort_by(|a, b| {
            (a.metric, &a.experiment, a.column).cmp(&(b.metric, &b.experiment, b.column))
        });
    }

    pub fn columns(&self, metric: Metric) -> Vec<ColumnKey> {
        let mut cols: Vec<ColumnKey> = self
            .cells
            .iter()
            .filter(|c| c.metric == metric)
            .map(|c| c.column)
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn cell(&self, metric: Metric, experiment: &str, column: ColumnKey) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.experiment == experiment && c.column == column)
    }

    /// Header row plus one row per experiment. Bold cells are wrapped in
    /// `**`; missing cells are `-`.
    pub fn render_table(&self, metric: Metric) -> Vec<Vec<String>> {
        let cols = self.columns(metric);
        let mut rows = vec![std::iter::once("Experiment".to_string())
            .chain(cols.iter().map(ColumnKey::label))
            .collect::<Vec<_>>()];
        for exp in &self.experiments {
            let mut row = vec![exp.clone()];
            for col in &cols {
                row.push(match self.cell(metric, exp, *col) {
                    Some(c) if c.bold => format!("**{}**", c.text()),
                    Some(c) => c.text(),
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        rows
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for (metric, title) in [(Metric::Dice, "Dice"), (Metric::Cov, "CoV (x10^3)")] {
            let rows = self.render_table(metric);
            if rows[0].len() == 1 {
                continue;
            }
            out.push_str(&format!("## {title}\n\n"));
            for (i, row) in rows.iter().enumerate() {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
                if i == 0 {
                    out.push_str(&format!("|{}\n", "---|".repeat(row.len())));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.metric.name().to_string(),
                c.experiment.clone(),
                c.column.seq.label().to_string(),
                c.column.tissue.name().to_string(),
                c.column.dist.label().to_string(),
                c.mean.to_string(),
                opt(c.sd),
                c.n_subjects.to_string(),
                opt(c.p_vs_best),
                c.bold.to_string(),
                c.text(),
            ])?;
        }
        w.flush().map_err(|e| Error::Schema(format!("csv flush: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    /// Rebuilds a report from [`write_csv`](Self::write_csv) output.
    pub fn from_csv<R: Read>(input: R, alpha: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<&str> = rdr.headers()?.iter().collect();
        if header != REPORT_CSV_HEADER {
            return Err(Error::Schema(format!("report CSV header {header:?}")));
        }
        let mut cells = Vec::new();
        let mut experiments: Vec<String> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let schema = |m: &str| Error::Schema(format!("report row {}: {m}", row + 1));
            let num = |s: &str| s.parse::<f64>().map_err(|_| schema("bad number"));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let cell = ReportCell {
                metric: Metric::parse(&rec[0])?,
                experiment: rec[1].to_string(),
                column: ColumnKey {
                    seq: SequenceKind::parse(&rec[2])?,
                    tissue: TissueClass::parse(&rec[3]).ok_or_else(|| schema("bad tissue"))?,
                    dist: RangeTag::parse(&rec[4])?,
                },
                mean: num(&rec[5])?,
                sd: opt(&rec[6])?,
                n_subjects: rec[7].parse().map_err(|_| schema("bad n_subjects"))?,
                p_vs_best: opt(&rec[8])?,
                bold: rec[9].parse().map_err(|_| schema("bad bold flag"))?,
            };
            if cell.text() != rec[10] {
                return Err(schema("cell text disagrees with its numbers"));
            }
            if !experiments.contains(&cell.experiment) {
                experiments.push(cell.experiment.clone());
            }
            cells.push(cell);
        }
        experiments.sort();
        let mut report = AnnealingReport {
            alpha,
            experiments,
            cells,
        };
        report.sort_cells();
        Ok(report)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let table = |metric: Metric| {
            let cols = self.columns(metric);
            json!({
                "columns": cols.iter().map(ColumnKey::label).collect::<Vec<_>>(),
                "rows": self.experiments.iter().map(|exp| json!({
                    "experiment": exp,
                    "cells": cols.iter().map(|col| self.cell(metric, exp, *col).map(|c| json!({
                        "mean": c.mean,
                        "sd": c.sd,
                        "n_subjects": c.n_subjects,
                        "p_vs_best": c.p_vs_best,
                        "bold": c.bold,
                        "text": c.text(),
                    }))).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            })
        };
        json!({
            "alpha": self.alpha,
            "cov_scale": Metric::Cov.scale(),
            "dice": table(Metric::Dice),
            "cov": table(Metric::Cov),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    /// Ascending parameter value.
    ByParam,
    /// Ascending distance of the volume from the series median.
    ByConsistency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param: f64,
    pub volume_ml: f64,
    pub lo_ml: Option<f64>,
    pub hi_ml: Option<f64>,
    pub iod: bool,
    pub fa_below_10: bool,
    pub params: SequenceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub subject_id: String,
    pub seq: SequenceKind,
    pub tissue: TissueClass,
    pub param_key: String,
    /// IoD training range of the swept parameter.
    pub iod_lo: f64,
    pub iod_hi: f64,
    pub points: Vec<SweepPoint>,
}

/// Volume-vs-parameter series for one subject and tissue. A point is IoD
/// iff its parameters lie in the IoD preset of its sequence.
pub fn sweep_curve(
    runs: &[RunRecord],
    param_key: &str,
    tissue: TissueClass,
    order: SweepOrder,
) -> Result<SweepCurve> {
    let first = runs.first().ok_or_else(|| Error::validation("no runs in sweep"))?;
    let vol_of = |r: &RunRecord| {
        r.volume(tissue)
            .ok_or_else(|| Error::validation("sweeps need a tissue class, not background"))
    };
    let iod_range = ParamRange::iod_for(first.seq);
    let iod_iv = iod_range.interval(param_key).ok_or_else(|| {
        Error::validation(format!("'{param_key}' is not a {} parameter", first.seq.label()))
    })?;
    let mut points = Vec::with_capacity(runs.len());
    for r in runs {
        r.validate()?;
        if r.subject_id != first.subject_id {
            return Err(Error::validation(format!(
                "sweep mixes subjects '{}' and '{}'",
                first.subject_id, r.subject_id
            )));
        }
        if r.seq != first.seq {
            return Err(Error::validation("sweep mixes sequences"));
        }
        points.push(SweepPoint {
            param: r.params.get(param_key).unwrap(),
            volume_ml: vol_of(r)?,
            lo_ml: r.lo_ml,
            hi_ml: r.hi_ml,
            iod: iod_range.contains(&r.params),
            fa_below_10: r.params.get("fa_deg").is_some_and(|fa| fa < 10.0),
            params: r.params,
        });
    }
    let tiebreak = |a: &SweepPoint, b: &SweepPoint| {
        a.param
            .total_cmp(&b.param)
            .then_with(|| a.params.to_json().cmp(&b.params.to_json()))
            .then_with(|| a.volume_ml.total_cmp(&b.volume_ml))
    };
    match order {
        SweepOrder::ByParam => points.sort_by(tiebreak),
        SweepOrder::ByConsistency => {
            let v: Vec<f64> = points.iter().map(|p| p.volume_ml).collect();
            let med = stats::percentile(&v, 50.0);
            points.sort_by(|a, b| {
                (a.volume_ml - med)
                    .abs()
                    .total_cmp(&(b.volume_ml - med).abs())
                    .then_with(|| tiebreak(a, b))
            });
        }
    }
    Ok(SweepCurve {
        subject_id: first.subject_id.clone(),
        seq: first.seq,
        tissue,
        param_key: param_key.to_string(),
        iod_lo: iod_iv.lo,
        iod_hi: iod_iv.hi,
        points,
    })
}

impl SweepCurve {
    /// Columns: parameter, volume, bounds, IoD flag, FA < 10 flag, IoD range
    /// limits, full parameter JSON.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            self.param_key.as_str(),
            "volume_ml",
            "lo_ml",
            "hi_ml",
            "iod",
            "fa_below_10",
            "iod_lo",
            "iod_hi",
            "param_json",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            w.write_record([
                p.param.to_string(),
                p.volume_ml.to_string(),
                opt(p.lo_ml),
                opt(p.hi_ml),
                p.iod.to_string(),
                p.fa_below_10.to_string(),
                self.iod_lo.to_string(),
                self.iod_hi.to_string(),
                p.params.to_json(),
            ])?;
        }
        w.flush().map_err(|e| Error::Schema(format!("csv flush: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}
