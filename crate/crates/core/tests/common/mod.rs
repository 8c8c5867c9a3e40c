#![allow(dead_code)]

use physeg::rng::RngCursor;
use physeg::{MultiParametricMap, VoxelGrid};

/// Prints a one-line verdict and fails the test when `ok` is false.
pub fn verdict(name: &str, ok: bool, detail: impl AsRef<str>) {
    println!("[{}] {name}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "{name}: {}", detail.as_ref());
}

/// SPGR written with expm1 and the half-angle form of `1 - cos(a)`.
pub fn spgr_oracle(t1: f64, t2s: f64, pd: f64, tr: f64, te: f64, fa_deg: f64, gain: f64) -> f64 {
    let a = fa_deg * std::f64::consts::PI / 180.0;
    let one_minus_e1 = -(-tr / t1).exp_m1();
    let half = (a / 2.0).sin();
    let one_minus_cos = 2.0 * half * half;
    let den = one_minus_cos + a.cos() * one_minus_e1;
    gain * pd * a.sin() * one_minus_e1 / den * (-te / t2s).exp()
}

/// MPRAGE over a common denominator.
pub fn mprage_oracle(t1: f64, pd: f64, ti: f64, td: f64, tau: f64, gain: f64) -> f64 {
    let e_ti = (-ti / t1).exp();
    let e_all = (-(ti + td + tau) / t1).exp();
    gain * pd * ((1.0 + e_all) - 2.0 * e_ti) / (1.0 + e_all)
}

/// Asymptotic Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        s += if k as u32 % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test against Uniform[lo, hi]: `(D, p)`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut u: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let i = i as f64;
            ((i + 1.0) / n - x).max(x - i / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

/// Random tissue-like maps: T1 in [300, 4500], T2* in [20, 250],
/// PD in [0.05, 1.1], MT in [0, 2].
pub fn random_mpm(dims: [usize; 3], c: &mut RngCursor) -> MultiParametricMap {
    let grid = VoxelGrid::isotropic(dims);
    let n = grid.n_voxels();
    let mut draw = |lo: f64, hi: f64| (0..n).map(|_| c.uniform_in(lo, hi)).collect::<Vec<_>>();
    let t1 = draw(300.0, 4500.0);
    let t2s = draw(20.0, 250.0);
    let pd = draw(0.05, 1.1);
    let mt = draw(0.0, 2.0);
    MultiParametricMap::new(grid, t1, Some(t2s), pd, Some(mt), "random").unwrap()
}

/// Sign-enumeration oracle for the two-sided exact Wilcoxon p-value.
pub fn wilcoxon_enumeration(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n < 5 {
        return None;
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
        if s <= w + 1e-9 {
            hits += 1;
        }
    }
    Some((w, (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)))
}
