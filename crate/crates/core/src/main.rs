use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use physeg::augmentation::{make_stratified_batch, sample_params, ParamRange, PatchChoice, RangeTag};
use physeg::gold_standard::{pgs_seeded_labels, pgs_segment, TissueGmmPrior};
use physeg::metrics::{
    annealing_report, dice, read_runs_csv, sweep_curve, write_runs_csv, RunRecord, SweepOrder,
};
use physeg::nifti::{Dtype, NiftiImage, VoxelData};
use physeg::phantom::{phantom_prior, shell_phantom};
use physeg::rng::RngStream;
use physeg::simulator::{
    simulate_volume, Normalize, Provenance, SequenceKind, SequenceParams, SimOptions,
};
use physeg::uncertainty::{
    aleatoric_segmentation_samples, calibrated_volume_bounds, volumes_from_labelmaps, LogitField,
    SigmaField,
};
use physeg::volume::{save_volume, VolumeFile};
use physeg::{Error, GridField, LabelMap, MultiParametricMap, PatchSpec, Result, SoftSegmentation, TissueClass};

/// Physics-informed MR simulation, gold-standard segmentation and
/// acquisition-invariance reports.
#[derive(Parser, Debug)]
#[command(name = "physeg", version)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Never changes output bytes.
    #[arg(long, global = true, env = "PHYSEG_THREADS")]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Directory receiving all output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one contrast from quantitative maps.
    Simulate(SimulateArgs),
    /// Gold-standard soft segmentation and its argmax labels.
    Pgs(PgsArgs),
    /// Preview a stratified training batch.
    Augment(AugmentArgs),
    /// Volume-vs-parameter sweep over one acquisition parameter.
    Sweep(SweepArgs),
    /// Dice / CoV tables with significance marks.
    Evaluate(EvaluateArgs),
    /// Write the synthetic phantom maps, labels and matching prior.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
struct MpmSource {
    /// Multi-parametric map: 4D NIfTI (t1, t2s, pd[, mt]) or JSON manifest.
    /// Without it the built-in phantom is used.
    #[arg(long)]
    mpm: Option<PathBuf>,
    /// Phantom size when no map is given.
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    phantom_dims: Vec<usize>,
}

impl MpmSource {
    fn load(&self) -> Result<MultiParametricMap> {
        match &self.mpm {
            Some(p) => MultiParametricMap::load(p),
            None => Ok(shell_phantom(dims3(&self.phantom_dims)?, "phantom")?.0),
        }
    }
}

fn dims3(v: &[usize]) -> Result<[usize; 3]> {
    match v {
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(Error::validation(format!("expected three sizes, got {v:?}"))),
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SeqArg {
    Mprage,
    Spgr,
}

#[derive(Args, Debug)]
struct ParamArgs {
    /// Sequence for explicit parameters.
    #[arg(long, value_enum)]
    seq: Option<SeqArg>,
    #[arg(long)]
    ti: Option<f64>,
    #[arg(long)]
    td: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tr: Option<f64>,
    #[arg(long)]
    te: Option<f64>,
    #[arg(long)]
    fa: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: MpmSource,
    #[command(flatten)]
    params: ParamArgs,
    /// Parameters as JSON text or a path to a JSON file.
    #[arg(long = "params", conflicts_with_all = ["seq", "preset"])]
    params_json: Option<String>,
    /// Draw the parameters from a named range.
    #[arg(long, conflicts_with = "seq")]
    preset: Option<String>,
    /// Random stream for preset draws.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// none, max, or pNN (divide by the NNth percentile).
    #[arg(long, default_value = "none")]
    normalize: String,
    /// Keep the signed signal instead of its magnitude.
    #[arg(long)]
    signed: bool,
    #[arg(long, default_value = "simulated.nii.gz")]
    out: PathBuf,
    /// f32 or f64.
    #[arg(long, default_value = "f32")]
    dtype: String,
}

#[derive(Args, Debug)]
struct PgsArgs {
    #[command(flatten)]
    source: MpmSource,
    /// Mixture prior config (JSON).
    #[arg(long)]
    prior: PathBuf,
    #[arg(long, default_value = "pgs_soft.nii.gz")]
    soft_out: PathBuf,
    #[arg(long, default_value = "pgs_labels.nii.gz")]
    labels_out: PathBuf,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[command(flatten)]
    source: MpmSource,
    /// Prior for the target; the phantom prior when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value = "mprage-iod")]
    preset: String,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Patch size; the origin is drawn at random.
    #[arg(long, value_delimiter = ',', default_value = "16,16,16")]
    patch: Vec<usize>,
    /// Fixed patch origin instead of a random one.
    #[arg(long, value_delimiter = ',')]
    origin: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OrderArg {
    Param,
    Consistency,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    source: MpmSource,
    /// Prior config; the phantom prior when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Range preset fixing the sequence and the default grid.
    #[arg(long, default_value = "mprage-ood")]
    preset: String,
    /// Swept parameter key (ti_ms, tr_ms, te_ms, fa_deg).
    #[arg(long)]
    param: Option<String>,
    /// Explicit parameter values.
    #[arg(long, value_delimiter = ',', conflicts_with = "n_points")]
    values: Option<Vec<f64>>,
    /// Evenly spaced grid over the preset interval.
    #[arg(long, default_value_t = 10)]
    n_points: usize,
    /// Fixed values for the other parameters.
    #[command(flatten)]
    fixed: ParamArgs,
    #[arg(long, default_value = "wm")]
    tissue: String,
    #[arg(long, default_value = "sweep")]
    experiment: String,
    /// 4D logits (one volume per class) for aleatoric bounds.
    #[arg(long, requires = "sigma")]
    logits: Option<PathBuf>,
    /// 4D per-class noise scales matching --logits.
    #[arg(long, requires = "logits")]
    sigma: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, value_enum, default_value = "param")]
    order: OrderArg,
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run-record CSV files.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Label-map manifest CSV:
    /// experiment,subject_id,seq,dist,param_json,labelmap_path,pgs_path.
    #[arg(long)]
    labelmaps: Option<PathBuf>,
    /// Score label maps against their gold standard.
    #[arg(long)]
    dice: bool,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Output file stem inside --out-dir.
    #[arg(long, default_value = "report")]
    prefix: String,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    dims: Vec<usize>,
    #[arg(long, default_value = "phantom")]
    subject: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::validation("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    }
    if !cli.out_dir.is_dir() {
        return Err(Error::io(
            &cli.out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory missing"),
        ));
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Pgs(a) => cmd_pgs(cli, a),
        Command::Augment(a) => cmd_augment(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Phantom(a) => cmd_phantom(cli, a),
    }
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn explicit_params(p: &ParamArgs, kind: SequenceKind) -> Result<SequenceParams> {
    let need = |v: Option<f64>, flag: &str| {
        v.ok_or_else(|| Error::validation(format!("--{flag} is required for {}", kind.label())))
    };
    let params = match kind {
        SequenceKind::Mprage => SequenceParams::mprage(
            need(p.ti, "ti")?,
            p.td.unwrap_or(physeg::simulator::DEFAULT_TD_MS),
            p.tau.unwrap_or(physeg::simulator::DEFAULT_TAU_MS),
        ),
        SequenceKind::Spgr => SequenceParams::spgr(need(p.tr, "tr")?, need(p.te, "te")?, need(p.fa, "fa")?),
    };
    let params = params.with_gain(p.gain.unwrap_or(1.0));
    params.validate()?;
    Ok(params)
}

fn seq_kind(s: SeqArg) -> SequenceKind {
    match s {
        SeqArg::Mprage => SequenceKind::Mprage,
        SeqArg::Spgr => SequenceKind::Spgr,
    }
}

fn parse_normalize(s: &str) -> Result<Normalize> {
    match s {
        "none" => Ok(Normalize::None),
        "max" => Ok(Normalize::MaxToOne),
        p if p.starts_with('p') => p[1..]
            .parse()
            .map(Normalize::Percentile)
            .map_err(|_| Error::validation(format!("bad normalization '{s}'"))),
        _ => Err(Error::validation(format!("bad normalization '{s}' (none, max, pNN)"))),
    }
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let dtype = Dtype::parse(&a.dtype)?;
    if dtype == Dtype::U8 {
        return Err(Error::UnsupportedDtype("u8 cannot hold intensities".into()));
    }
    let opts = SimOptions {
        magnitude: !a.signed,
        normalize: parse_normalize(&a.normalize)?,
        ..SimOptions::default()
    };
    opts.validate()?;
    let (params, rng) = if let Some(text) = &a.params_json {
        let body = if Path::new(text).is_file() {
            std::fs::read_to_string(text).map_err(|e| Error::io(text, e))?
        } else {
            text.clone()
        };
        let p: SequenceParams = serde_json::from_str(&body)?;
        p.validate()?;
        (p, None)
    } else if let Some(name) = &a.preset {
        let range = ParamRange::preset(name)?;
        let rng = RngStream::new(cli.seed, a.stream);
        (sample_params(&range, &mut rng.cursor()), Some(rng))
    } else {
        let seq = a
            .params
            .seq
            .ok_or_else(|| Error::validation("give --seq with its parameters, --params, or --preset"))?;
        (explicit_params(&a.params, seq_kind(seq))?, None)
    };
    let mpm = a.source.load()?;
    log(cli, format!("simulating {} on {:?}", params.to_json(), mpm.grid().dims()));
    let mut vol = simulate_volume(&mpm, &params, &opts)?;
    vol.provenance.rng = rng;
    save_volume(&vol, cli.out_dir.join(&a.out), Some(dtype))?;
    print_json(&provenance_json(&vol.provenance))
}

fn provenance_json(p: &Provenance) -> serde_json::Value {
    serde_json::to_value(p).expect("provenance serializes")
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn load_prior(path: &Path) -> Result<TissueGmmPrior> {
    if !path.is_file() {
        return Err(Error::validation(format!("prior config {} not found", path.display())));
    }
    TissueGmmPrior::from_config_file(path)
}

fn class_volumes_ml(labels: &LabelMap) -> serde_json::Value {
    let ml = labels.grid().voxel_volume_mm3() / 1000.0;
    let mut m = serde_json::Map::new();
    for c in TissueClass::TISSUES {
        m.insert(format!("{}_ml", c.name().to_lowercase()), json!(labels.count(c) as f64 * ml));
    }
    serde_json::Value::Object(m)
}

fn cmd_pgs(cli: &Cli, a: &PgsArgs) -> Result<()> {
    let prior = load_prior(&a.prior)?;
    let mpm = a.source.load()?;
    let soft = pgs_segment(&mpm, &prior)?;
    let labels = soft.to_labels();
    let soft_path = cli.out_dir.join(&a.soft_out);
    let labels_path = cli.out_dir.join(&a.labels_out);
    save_volume(&soft, &soft_path, None)?;
    save_volume(&labels, &labels_path, None)?;
    // Reload checks the stored probabilities still sum to one.
    SoftSegmentation::load(&soft_path)?;
    print_json(&json!({
        "subject_id": mpm.subject_id(),
        "soft": soft_path,
        "labels": labels_path,
        "volumes": class_volumes_ml(&labels),
    }))
}

fn cmd_augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    let mpm = a.source.load()?;
    let prior = match &a.prior {
        Some(p) => load_prior(p)?,
        None => phantom_prior(),
    };
    let pgs = pgs_segment(&mpm, &prior)?;
    let range = ParamRange::preset(&a.preset)?;
    let size = dims3(&a.patch)?;
    let patch = match &a.origin {
        Some(o) => PatchChoice::Fixed(PatchSpec::new(dims3(o)?, size)),
        None => PatchChoice::Random { size },
    };
    let rng = RngStream::new(cli.seed, a.stream);
    let batch = make_stratified_batch(&mpm, &pgs, &range, a.n, patch, rng, &SimOptions::default())?;

    let grid = batch.target.grid().clone();
    let data: Vec<f64> = batch.items.iter().flat_map(|it| it.intensity.iter().copied()).collect();
    let d = grid.dims();
    let mut dims = d.to_vec();
    dims.push(batch.items.len());
    NiftiImage {
        dims,
        voxel_size: grid.voxel_size(),
        affine: *grid.affine(),
        data: VoxelData::from_f64(&data, Dtype::F32)?,
        metadata: Some(json!({"preset": a.preset, "rng": rng})),
    }
    .write(cli.out_dir.join("batch_intensity.nii.gz"))?;
    save_volume(&batch.target, cli.out_dir.join("batch_target.nii.gz"), None)?;
    print_json(&json!({
        "subject_id": batch.subject_id,
        "patch": batch.patch,
        "rng": rng,
        "items": batch.items.iter().map(|it| json!({
            "params": it.params,
            "physics": it.physics,
        })).collect::<Vec<_>>(),
    }))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let range = ParamRange::preset(&a.preset)?;
    let kind = range.sequence();
    let key = match (&a.param, kind) {
        (Some(k), _) => k.clone(),
        (None, SequenceKind::Mprage) => "ti_ms".into(),
        (None, SequenceKind::Spgr) => "fa_deg".into(),
    };
    let interval = range
        .interval(&key)
        .ok_or_else(|| Error::validation(format!("'{key}' is not swept by preset {}", a.preset)))?;
    let values = match &a.values {
        Some(v) => v.clone(),
        None => linspace(interval.lo, interval.hi, a.n_points),
    };
    if values.is_empty() {
        return Err(Error::validation("sweep needs at least one point"));
    }
    let tissue = TissueClass::parse(&a.tissue)
        .filter(|t| *t != TissueClass::Background)
        .ok_or_else(|| Error::validation(format!("unknown tissue '{}'", a.tissue)))?;

    let mpm = a.source.load()?;
    let prior = match &a.prior {
        Some(p) => load_prior(p)?,
        None => phantom_prior(),
    };
    let pgs = pgs_segment(&mpm, &prior)?;
    let pgs_labels = pgs.to_labels();

    let bounds = match (&a.logits, &a.sigma) {
        (Some(l), Some(s)) => {
            let logits = LogitField::load(l)?;
            let sigma = SigmaField::load(s)?;
            let rng = RngStream::new(cli.seed, a.stream);
            let maps = aleatoric_segmentation_samples(&logits, &sigma, a.samples, &rng)?;
            let set = volumes_from_labelmaps(&maps, logits.grid())?;
            let b = calibrated_volume_bounds(&set, 25.0, 75.0)?;
            b.into_iter().find(|(c, _)| *c == tissue).map(|(_, b)| b)
        }
        _ => None,
    };

    let iod = ParamRange::iod_for(kind);
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let mut fixed = ParamArgs { seq: None, ..a.fixed_clone() };
        match key.as_str() {
            "ti_ms" => fixed.ti = Some(v),
            "tr_ms" => fixed.tr = Some(v),
            "te_ms" => fixed.te = Some(v),
            "fa_deg" => fixed.fa = Some(v),
            other => return Err(Error::validation(format!("cannot sweep '{other}'"))),
        }
        let params = explicit_params(&fixed, kind)?;
        log(cli, format!("sweep point {}", params.to_json()));
        let img = simulate_volume(&mpm, &params, &SimOptions::default())?;
        let labels = pgs_seeded_labels(&img, &pgs)?;
        let ml = labels.grid().voxel_volume_mm3() / 1000.0;
        let vol = |c| labels.count(c) as f64 * ml;
        runs.push(RunRecord {
            experiment: a.experiment.clone(),
            subject_id: mpm.subject_id().to_string(),
            seq: kind,
            dist: if iod.contains(&params) {
                RangeTag::InDistribution
            } else {
                RangeTag::OutOfDistribution
            },
            params,
            csf_ml: vol(TissueClass::Csf),
            gm_ml: vol(TissueClass::Gm),
            wm_ml: vol(TissueClass::Wm),
            dice_gm: Some(dice(&labels, &pgs_labels, TissueClass::Gm)?.score),
            dice_wm: Some(dice(&labels, &pgs_labels, TissueClass::Wm)?.score),
            lo_ml: bounds.map(|b| b.lo),
            hi_ml: bounds.map(|b| b.hi),
        });
    }
    let order = match a.order {
        OrderArg::Param => SweepOrder::ByParam,
        OrderArg::Consistency => SweepOrder::ByConsistency,
    };
    let curve = sweep_curve(&runs, &key, tissue, order)?;
    let runs_path = cli.out_dir.join("sweep_runs.csv");
    let curve_path = cli.out_dir.join("sweep_curve.csv");
    write_runs_csv(&runs, create(&runs_path)?)?;
    curve.write_csv(create(&curve_path)?)?;
    emit(&curve.to_csv_string())
}

impl SweepArgs {
    fn fixed_clone(&self) -> ParamArgs {
        let f = &self.fixed;
        ParamArgs {
            seq: f.seq,
            ti: f.ti,
            td: f.td,
            tau: f.tau,
            tr: f.tr.or(Some(50.0)),
            te: f.te.or(Some(5.0)),
            fa: f.fa.or(Some(30.0)),
            gain: f.gain,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Label map or soft segmentation (reduced to its argmax).
fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = NiftiImage::read(path)?;
    if img.n_channels() > 1 {
        Ok(SoftSegmentation::from_image(img, path)?.to_labels())
    } else {
        LabelMap::from_image(img, path)
    }
}

const MANIFEST_HEADER: [&str; 7] = [
    "experiment",
    "subject_id",
    "seq",
    "dist",
    "param_json",
    "labelmap_path",
    "pgs_path",
];

fn runs_from_manifest(path: &Path, with_dice: bool) -> Result<Vec<RunRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Schema(format!(
            "{}: header {header:?}, expected {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut runs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let labels = load_labels(&base.join(&rec[5]))?;
        let ml = labels.grid().voxel_volume_mm3() / 1000.0;
        let vol = |c| labels.count(c) as f64 * ml;
        let (dice_gm, dice_wm) = if with_dice {
            let pgs_path = base.join(&rec[6]);
            if rec[6].trim().is_empty() || !pgs_path.is_file() {
                return Err(Error::validation(format!(
                    "row {}: Dice requested but gold standard '{}' is missing",
                    row + 1,
                    &rec[6]
                )));
            }
            let pgs = load_labels(&pgs_path)?;
            (
                Some(dice(&labels, &pgs, TissueClass::Gm)?.score),
                Some(dice(&labels, &pgs, TissueClass::Wm)?.score),
            )
        } else {
            (None, None)
        };
        let r = RunRecord {
            experiment: rec[0].to_string(),
            subject_id: rec[1].to_string(),
            seq: SequenceKind::parse(&rec[2])?,
            dist: RangeTag::parse(&rec[3])?,
            params: serde_json::from_str(&rec[4])?,
            csf_ml: vol(TissueClass::Csf),
            gm_ml: vol(TissueClass::Gm),
            wm_ml: vol(TissueClass::Wm),
            dice_gm,
            dice_wm,
            lo_ml: None,
            hi_ml: None,
        };
        r.validate()?;
        runs.push(r);
    }
    Ok(runs)
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut runs = Vec::new();
    for p in &a.runs {
        runs.extend(read_runs_csv(open(p)?)?);
    }
    if let Some(m) = &a.labelmaps {
        runs.extend(runs_from_manifest(m, a.dice)?);
    } else if a.dice && runs.iter().any(|r| r.dice_gm.is_none() && r.dice_wm.is_none()) {
        return Err(Error::validation("Dice requested but the runs carry no Dice and no label maps were given"));
    }
    if runs.is_empty() {
        return Err(Error::validation("give --runs and/or --labelmaps"));
    }
    let report = annealing_report(&runs, a.alpha)?;
    let stem = cli.out_dir.join(&a.prefix);
    let with_ext = |ext: &str| stem.with_file_name(format!("{}.{ext}", a.prefix));
    report.write_csv(create(&with_ext("csv"))?)?;
    let json_path = with_ext("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report.to_json())? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    let md = report.to_markdown();
    let md_path = with_ext("md");
    std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    emit(&md)
}

fn cmd_phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let (mpm, labels) = shell_phantom(dims3(&a.dims)?, &a.subject)?;
    let mpm_path = cli.out_dir.join(format!("{}_mpm.nii.gz", a.subject));
    let labels_path = cli.out_dir.join(format!("{}_labels.nii.gz", a.subject));
    let prior_path = cli.out_dir.join(format!("{}_prior.json", a.subject));
    mpm.save_4d(&mpm_path, Dtype::F32)?;
    save_volume(&labels, &labels_path, None)?;
    phantom_prior().save_config(&prior_path)?;
    print_json(&json!({
        "mpm": mpm_path,
        "labels": labels_path,
        "prior": prior_path,
        "volumes": class_volumes_ml(&labels),
    }))
}
