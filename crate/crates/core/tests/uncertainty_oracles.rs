use std::fs;

use physeg::metrics::cov;
use physeg::rng::RngStream;
use physeg::uncertainty::{
    aleatoric_segmentation_samples, attenuated_ce_loss, ingest_epistemic_samples, volumes_from_labelmaps, LogitField,
    SampleSource, SigmaField,
};
use physeg::volume::{save_volume, VolumeFile};
use physeg::{LabelMap, TissueClass, VoxelGrid};

fn one_voxel(logits: &[f64], sigma: &[f64]) -> (LogitField, SigmaField) {
    let grid = VoxelGrid::isotropic([1, 1, 1]);
    let c = logits.len();
    (
        LogitField::new(grid.clone(), c, logits.to_vec()).unwrap(),
        SigmaField::new(grid, c, sigma.to_vec()).unwrap(),
    )
}

#[test]
fn single_voxel_matches_brute_force_monte_carlo() {
    let t = 100_000usize;
    let rng = RngStream::new(2021, 5);
    let (logits, sigma) = one_voxel(&[0.0, 0.0], &[1.0, 1.0]);
    let target = LabelMap::new(VoxelGrid::isotropic([1, 1, 1]), vec![0]).unwrap();
    let loss = attenuated_ce_loss(&logits, &sigma, &target, t, &rng).unwrap().total;

    // Same draws, plain probability-space average.
    let mut acc = 0.0;
    for pass in 0..t as u64 {
        let x0 = rng.normal(pass * 2);
        let x1 = rng.normal(pass * 2 + 1);
        acc += 1.0 / (1.0 + (x1 - x0).exp());
    }
    let oracle = -(acc / t as f64).ln();
    let sig3 = |v: f64| format!("{:.3e}", v);
    assert_eq!(sig3(loss), sig3(oracle), "{loss} vs {oracle}");
    // By symmetry the expected probability is 1/2.
    assert!((loss - std::f64::consts::LN_2).abs() < 0.01, "{loss}");
}

#[test]
fn loss_is_thread_count_independent() {
    let grid = VoxelGrid::isotropic([6, 5, 4]);
    let n = grid.n_voxels();
    let s = RngStream::new(3, 0);
    let logits = LogitField::new(grid.clone(), 4, (0..4 * n as u64).map(|i| s.normal(i)).collect()).unwrap();
    let sigma = SigmaField::new(grid.clone(), 4, (0..4 * n as u64).map(|i| s.uniform(10_000 + i)).collect()).unwrap();
    let target = LabelMap::new(grid, (0..n as u64).map(|i| s.below(20_000 + i, 4) as u8).collect()).unwrap();
    let run = || attenuated_ce_loss(&logits, &sigma, &target, 7, &RngStream::new(9, 1)).unwrap();
    let a = run();
    for threads in [1, 2, 5] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.per_voxel, b.per_voxel);
    }
    let samples = || aleatoric_segmentation_samples(&logits, &sigma, 5, &RngStream::new(4, 4)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    assert_eq!(samples(), pool.install(samples));
}

#[test]
fn aleatoric_sampling_frequencies() {
    let rng = RngStream::new(11, 0);
    let (logits, sigma) = one_voxel(&[10.0, 0.0, 0.0, 0.0], &[0.1; 4]);
    let maps = aleatoric_segmentation_samples(&logits, &sigma, 10_000, &rng).unwrap();
    let zero = maps.iter().filter(|m| m.labels()[0] == 0).count();
    assert!(zero as f64 >= 0.999 * 10_000.0);

    let (logits, sigma) = one_voxel(&[0.0, 0.0], &[1.0, 1.0]);
    let maps = aleatoric_segmentation_samples(&logits, &sigma, 10_000, &rng).unwrap();
    let freq = maps.iter().filter(|m| m.labels()[0] == 0).count() as f64 / 1e4;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

#[test]
fn labelmap_directory_ingest_matches_direct_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let grid = VoxelGrid::with_spacing([8, 7, 6], [1.0, 1.2, 0.8]).unwrap();
    let s = RngStream::new(12, 0);
    let maps: Vec<LabelMap> = (0..50u64)
        .map(|k| {
            let l = (0..grid.n_voxels() as u64).map(|i| s.below(k * 10_000 + i, 4) as u8).collect();
            LabelMap::new(grid.clone(), l).unwrap()
        })
        .collect();
    for (k, m) in maps.iter().enumerate() {
        let ext = if k % 2 == 0 { "nii.gz" } else { "nii" };
        save_volume(m, dir.path().join(format!("sample_{k:03}.{ext}")), None).unwrap();
    }
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let set = ingest_epistemic_samples(dir.path()).unwrap();
    let loaded: Vec<LabelMap> = (0..50)
        .map(|k| {
            let ext = if k % 2 == 0 { "nii.gz" } else { "nii" };
            LabelMap::load(dir.path().join(format!("sample_{k:03}.{ext}"))).unwrap()
        })
        .collect();
    let direct = volumes_from_labelmaps(&loaded, loaded[0].grid()).unwrap();
    assert_eq!(set.source, SampleSource::Epistemic);
    assert_eq!(set.n_samples(), 50);
    assert_eq!(set.sample_ids[7], "sample_007");
    for c in TissueClass::ALL {
        assert_eq!(set.volumes(c).unwrap(), direct.volumes(c).unwrap());
    }
}

#[test]
fn labelmap_directory_with_mixed_grids_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (k, dims) in [[4, 4, 4], [4, 4, 5]].into_iter().enumerate() {
        let g = VoxelGrid::isotropic(dims);
        let n = g.n_voxels();
        save_volume(&LabelMap::new(g, vec![2; n]).unwrap(), dir.path().join(format!("sample_{k}.nii")), None).unwrap();
    }
    assert!(ingest_epistemic_samples(dir.path()).is_err());
}

#[test]
fn csv_table_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.csv");
    let mut text = String::from("sample_id,csf_ml,gm_ml,wm_ml\n");
    for k in 0..50 {
        text.push_str(&format!("d{k},{},{},{}\n", 300.0 + k as f64, 650.5, 480.0 - k as f64 / 4.0));
    }
    fs::write(&path, &text).unwrap();
    let set = ingest_epistemic_samples(&path).unwrap();
    assert_eq!(set.n_samples(), 50);
    assert_eq!(set.volumes(TissueClass::Gm).unwrap(), &[650.5; 50][..]);
    assert!(set.volumes(TissueClass::Background).is_none());

    fs::write(&path, "sample_id,csf_ml,gm_ml,wm_ml\na,1,-2,3\n").unwrap();
    assert!(ingest_epistemic_samples(&path).is_err());
    fs::write(&path, "id,csf,gm,wm\na,1,2,3\n").unwrap();
    assert!(ingest_epistemic_samples(&path).is_err());
}

#[test]
fn cov_of_gaussian_draws() {
    let s = RngStream::new(13, 0);
    let v: Vec<f64> = (0..10_000u64).map(|i| 100.0 + s.normal(i)).collect();
    let c = cov(&v).unwrap().cov;
    assert!((c - 0.01).abs() <= 0.0005, "{c}");
}
