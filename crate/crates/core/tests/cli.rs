use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use physeg::augmentation::RangeTag;
use physeg::metrics::{write_runs_csv, RunRecord};
use physeg::simulator::SequenceParams;
use physeg::volume::{save_volume, VolumeFile};
use physeg::{LabelMap, TissueClass};

fn physeg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physeg"))
        .current_dir(dir)
        .env_remove("PHYSEG_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = physeg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["simulate", "pgs", "augment", "sweep", "evaluate", "phantom"] {
        let text = ok(dir.path(), &[sub, "--help"]);
        assert!(text.contains("Usage"), "{sub}");
    }
    assert_eq!(code(&physeg(dir.path(), &[])), 2);
    assert_eq!(code(&physeg(dir.path(), &["bogus"])), 2);
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: &str, out: &str, threads: &str| {
        ok(d, &["--seed", seed, "--threads", threads, "simulate", "--phantom-dims", "20,18,16", "--preset", "spgr-iod", "--out", out]);
        fs::read(d.join(out)).unwrap()
    };
    let a = run("7", "a.nii.gz", "1");
    let b = run("7", "b.nii.gz", "3");
    let c = run("8", "c.nii.gz", "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_reports_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["simulate", "--phantom-dims", "8,8,8", "--seq", "mprage", "--ti", "900", "--td", "0", "--tau", "1000"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["params"]["ti_ms"], 900.0);
    assert!(dir.path().join("simulated.nii.gz").is_file());
}

#[test]
fn invalid_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = physeg(dir.path(), &["simulate", "--phantom-dims", "8,8,8", "--seq", "spgr", "--tr", "50", "--te", "5", "--fa", "200"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fa_deg"));
    let out = physeg(dir.path(), &["--threads", "0", "phantom", "--dims", "4,4,4"]);
    assert_eq!(code(&out), 2);
    let out = physeg(dir.path(), &["pgs", "--prior", "missing.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_output_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = physeg(dir.path(), &["--out-dir", "/nonexistent/x", "phantom", "--dims", "4,4,4"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pgs_on_phantom_recovers_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "16,14,12", "--subject", "ph"]);
    let text = ok(d, &["pgs", "--mpm", "ph_mpm.nii.gz", "--prior", "ph_prior.json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["volumes"]["wm_ml"].as_f64().unwrap() > 0.0, "{text}");
    let truth = LabelMap::load(d.join("ph_labels.nii.gz")).unwrap();
    let pgs = LabelMap::load(d.join("pgs_labels.nii.gz")).unwrap();
    assert_eq!(truth, pgs);
}

#[test]
fn augment_writes_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["augment", "--phantom-dims", "20,20,20", "--n", "3", "--patch", "8,8,8", "--preset", "spgr-ood"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["items"].as_array().unwrap().len(), 3);
    let img = physeg::nifti::NiftiImage::read(dir.path().join("batch_intensity.nii.gz")).unwrap();
    assert_eq!(img.dims, vec![8, 8, 8, 3]);
}

#[test]
fn sweep_tags_in_distribution_points() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(dir.path(), &["sweep", "--phantom-dims", "16,16,16", "--values", "100,600,900,1200,2000"]);
    let iod: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(iod, ["false", "true", "true", "true", "false"]);
    assert!(dir.path().join("sweep_runs.csv").is_file());

    let csv = ok(dir.path(), &["sweep", "--phantom-dims", "16,16,16", "--preset", "spgr-ood", "--values", "5,20,40"]);
    let low: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(low, ["true", "false", "false"]);
}

fn run(exp: &str, subject: &str, ti: f64, gm: f64, dice_gm: f64) -> RunRecord {
    RunRecord {
        experiment: exp.into(),
        subject_id: subject.into(),
        seq: physeg::simulator::SequenceKind::Mprage,
        dist: RangeTag::InDistribution,
        params: SequenceParams::mprage(ti, 0.0, 1000.0),
        csf_ml: 300.0,
        gm_ml: gm,
        wm_ml: 450.0,
        dice_gm: Some(dice_gm),
        dice_wm: Some(0.9),
        lo_ml: None,
        hi_ml: None,
    }
}

#[test]
fn evaluate_renders_report_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let half = 0.42 / std::f64::consts::SQRT_2;
    let mut runs = Vec::new();
    for s in 0..6 {
        let subject = format!("s{s}");
        let jitter = s as f64 * 1e-3;
        for (ti, sign) in [(700.0, -1.0), (1100.0, 1.0)] {
            runs.push(run("Phys-Strat-Aug", &subject, ti, 1000.0 + sign * half, 0.9 + jitter));
            runs.push(run("Baseline", &subject, ti, 1000.0 + sign * 40.0, 0.7 + jitter));
        }
    }
    let mut buf = Vec::new();
    write_runs_csv(&runs, &mut buf).unwrap();
    fs::write(d.join("runs.csv"), buf).unwrap();
    let md = ok(d, &["evaluate", "--runs", "runs.csv"]);
    let row = md.lines().find(|l| l.contains("Phys-Strat-Aug") && l.contains("0.42")).expect(&md);
    assert!(row.contains("**0.42"), "{row}");
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("cov,Phys-Strat-Aug,MPRAGE,GM,IoD") && l.ends_with("0.42 (0.00)")), "{csv}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["alpha"], 0.01);
}

#[test]
fn evaluate_label_maps_with_dice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "10,10,10", "--subject", "p"]);
    let truth = LabelMap::load(d.join("p_labels.nii.gz")).unwrap();
    let mut rows = String::from("experiment,subject_id,seq,dist,param_json,labelmap_path,pgs_path\n");
    for (k, ti) in [700.0, 800.0, 900.0].iter().enumerate() {
        // Relabel 5k GM voxels as WM.
        let mut l = truth.labels().to_vec();
        let gm: Vec<usize> = (0..l.len()).filter(|&i| l[i] == TissueClass::Gm.index() as u8).take(k * 5).collect();
        for i in gm {
            l[i] = TissueClass::Wm.index() as u8;
        }
        let name = format!("seg_{k}.nii.gz");
        save_volume(&LabelMap::new(truth.grid().clone(), l).unwrap(), d.join(&name), None).unwrap();
        let params = SequenceParams::mprage(*ti, 0.0, 1000.0).to_json().replace('"', "\"\"");
        rows.push_str(&format!("Exp,p,MPRAGE,IoD,\"{params}\",{name},p_labels.nii.gz\n"));
    }
    fs::write(d.join("manifest.csv"), &rows).unwrap();
    let md = ok(d, &["evaluate", "--labelmaps", "manifest.csv", "--dice"]);
    assert!(md.contains("MPRAGE GM IoD"), "{md}");

    fs::write(d.join("bad.csv"), rows.replace("p_labels.nii.gz", "absent.nii.gz")).unwrap();
    let out = physeg(d, &["evaluate", "--labelmaps", "bad.csv", "--dice"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
