//! Independent oracles shared by the integration and acceptance tests. None
//! of these call into the code they check beyond plain data access.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use soap3d::geom::ScanRecord;
use soap3d::head::{self, HeadParams, StageFlags, LOG_EPS};
use soap3d::localfeat::{self, ExtractConfig, LocalFeatureSet};
use soap3d::synthgen::{self, OrchardSpec};
use soap3d::trainer::{TrainConfig, TrainingTuple};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest per-entry violation ratio: `|a - n| / max(rel_tol * max(|a|, |n|), abs_floor)`.
/// Values <= 1 pass.
pub fn worst_ratio(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (FD_REL_TOL * a.abs().max(n.abs())).max(FD_ABS_FLOOR))
        .fold(0.0, f64::max)
}

pub fn gaussian_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, c: usize) -> DMatrix<f64> {
    let mut q = gaussian_matrix(rng, c, c);
    for j in 0..c {
        for k in 0..j {
            let proj = q.column(k).dot(&q.column(j));
            let qk = q.column(k).into_owned();
            q.column_mut(j).axpy(-proj, &qk, 1.0);
        }
        let n = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / n);
    }
    q
}

/// `Q diag(λ) Qᵀ` with eigenvalues uniform in `[lo, hi]`.
pub fn random_spd(rng: &mut impl Rng, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, c);
    let lam = DMatrix::from_diagonal(&DVector::from_fn(c, |_, _| rng.random_range(lo..hi)));
    let s = &q * lam * q.transpose();
    (&s + s.transpose()) * 0.5
}

/// Matrix exponential by Taylor series with scaling and squaring.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

pub const INSTANCES: u64 = 20;

pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Worst ratio over all instances for the pooling stage.
pub fn pooling_ratio(c: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..INSTANCES {
        let mut rng = soap3d::seed::rng(1000 + s);
        let n = rng.random_range(3..12);
        let f = gaussian_matrix(&mut rng, n, c);
        let g = gaussian_matrix(&mut rng, c, c);
        let fs = LocalFeatureSet::new(f.clone(), 0).unwrap();
        let analytic = head::soap_pool_backward(&fs, &g);
        let loss = |x: &[f64]| {
            let m = DMatrix::from_column_slice(n, c, x);
            inner(&g, head::soap_pool(&LocalFeatureSet::new(m, 0).unwrap()).unwrap().matrix())
        };
        let numeric = central_diff(loss, f.as_slice(), FD_STEP);
        worst = worst.max(worst_ratio(analytic.as_slice(), &numeric));
    }
    worst
}

/// Directional derivatives along symmetric unit perturbations `E_ij + E_ji`.
pub fn symmetric_fd(s: &DMatrix<f64>, analytic: &DMatrix<f64>, loss: impl Fn(&DMatrix<f64>) -> f64) -> f64 {
    let c = s.nrows();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for i in 0..c {
        for j in i..c {
            let mut e = DMatrix::zeros(c, c);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            let up = loss(&(s + &e * FD_STEP));
            let down = loss(&(s - &e * FD_STEP));
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(inner(analytic, &e));
        }
    }
    worst_ratio(&a, &n)
}

pub fn log_ratio(c: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..INSTANCES {
        let mut rng = soap3d::seed::rng(2000 + s);
        let spd = random_spd(&mut rng, c, 0.1, 10.0);
        let g = gaussian_matrix(&mut rng, c, c);
        let (_, cache) = head::logm_spd(&spd, LOG_EPS).unwrap();
        let analytic = head::logm_spd_backward(&cache, &g);
        let loss = |m: &DMatrix<f64>| inner(&g, &head::logm_spd(m, LOG_EPS).unwrap().0);
        worst = worst.max(symmetric_fd(&spd, &analytic, loss));
    }
    worst
}

pub fn power_ratio(c: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..INSTANCES {
        let mut rng = soap3d::seed::rng(3000 + s);
        // Entries kept away from 0, where |v|^h has unbounded slope.
        let m = DMatrix::from_fn(c, c, |_, _| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let h = rng.random_range(0.2..1.0);
        let g = gaussian_matrix(&mut rng, c, c);
        let (dm, dh) = head::power_normalize_backward(&m, h, &g);
        let loss_m = |x: &[f64]| inner(&g, &head::power_normalize(&DMatrix::from_column_slice(c, c, x), h));
        let num_m = central_diff(loss_m, m.as_slice(), FD_STEP);
        let loss_h = |x: &[f64]| inner(&g, &head::power_normalize(&m, x[0]));
        let num_h = central_diff(loss_h, &[h], FD_STEP);
        worst = worst.max(worst_ratio(dm.as_slice(), &num_m)).max(worst_ratio(&[dh], &num_h));
    }
    worst
}

/// Checks a whole head (`flags`) wrt features, W and h.
pub fn head_ratio(c: usize, n: usize, d: usize, flags: StageFlags, seed_base: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..INSTANCES {
        let mut rng = soap3d::seed::rng(seed_base + s);
        let f = gaussian_matrix(&mut rng, n, c);
        let h = rng.random_range(0.3..1.0);
        let p = HeadParams::init(c, d, flags, h, seed_base + 100 + s).unwrap();
        let g = gaussian_vector(&mut rng, p.descriptor_dim());
        let fs = LocalFeatureSet::new(f.clone(), 0).unwrap();
        let (_, cache) = head::head_forward(&fs, &p).unwrap();
        let grads = head::head_backward(&cache, &p, &g).unwrap();

        let objective = |fm: DMatrix<f64>, pp: &HeadParams| -> f64 {
            let (desc, _) = head::head_forward(&LocalFeatureSet::new(fm, 0).unwrap(), pp).unwrap();
            desc.0.dot(&g)
        };
        let num_f = central_diff(|x| objective(DMatrix::from_column_slice(n, c, x), &p), f.as_slice(), FD_STEP);
        worst = worst.max(worst_ratio(grads.features.as_slice(), &num_f));
        if flags.use_fc {
            let num_w = central_diff(
                |x| {
                    let mut q = p.clone();
                    q.w = DMatrix::from_column_slice(d, c * c, x);
                    objective(f.clone(), &q)
                },
                p.w.as_slice(),
                FD_STEP,
            );
            worst = worst.max(worst_ratio(grads.w.as_slice(), &num_w));
        }
        if flags.use_pn {
            let num_h = central_diff(
                |x| {
                    let mut q = p.clone();
                    q.h = x[0];
                    objective(f.clone(), &q)
                },
                &[p.h],
                FD_STEP,
            );
            worst = worst.max(worst_ratio(&[grads.h], &num_h));
        }
    }
    worst
}

/// Top-k by exhaustive scan: ascending squared distance, ties by lower id.
pub fn brute_topk(rows: &[Vec<f64>], ids: &[u64], q: &[f64], k: usize, excluded: impl Fn(usize) -> bool) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if excluded(i) {
            continue;
        }
        let mut d = 0.0;
        for (a, b) in r.iter().zip(q) {
            d += (a - b) * (a - b);
        }
        all.push((d, ids[i]));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn dist(a: &ScanRecord, b: &ScanRecord) -> f64 {
    let d = a.position - b.position;
    (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
}

/// Re-checks one mined tuple from raw records. Returns the first violation.
pub fn recheck_tuple(records: &[ScanRecord], t: &TrainingTuple, cfg: &TrainConfig) -> Result<(), String> {
    let find = |id: u64| {
        records
            .iter()
            .find(|r| r.scan_id == id)
            .ok_or_else(|| format!("unknown scan {id}"))
    };
    let a = find(t.anchor_id)?;
    let p = find(t.positive_id)?;
    if dist(a, p) > cfg.r_pos {
        return Err(format!("positive {} is {:.3} m from anchor {}", p.scan_id, dist(a, p), a.scan_id));
    }
    if a.pass_id == p.pass_id {
        return Err(format!("anchor {} and positive {} share pass {}", a.scan_id, p.scan_id, a.pass_id));
    }
    if a.segment_id != p.segment_id {
        return Err(format!("anchor {} and positive {} are in different segments", a.scan_id, p.scan_id));
    }
    if t.negative_ids.len() != cfg.m_neg {
        return Err(format!("anchor {} has {} negatives", a.scan_id, t.negative_ids.len()));
    }
    let mut seen = std::collections::HashSet::new();
    for &n in &t.negative_ids {
        let r = find(n)?;
        if !seen.insert(n) {
            return Err(format!("negative {n} repeated"));
        }
        if r.segment_id == a.segment_id {
            return Err(format!("negative {n} shares segment with anchor {}", a.scan_id));
        }
        if dist(a, r) <= cfg.neg_radius {
            return Err(format!("negative {n} is only {:.3} m from anchor {}", dist(a, r), a.scan_id));
        }
    }
    Ok(())
}

/// Anchors of consecutive tuples in scan order must be at least
/// `anchor_spacing` apart.
pub fn recheck_anchor_spacing(records: &[ScanRecord], tuples: &[TrainingTuple], spacing: f64) -> Result<(), String> {
    let mut anchors: Vec<&ScanRecord> = tuples
        .iter()
        .map(|t| records.iter().find(|r| r.scan_id == t.anchor_id).unwrap())
        .collect();
    anchors.sort_by_key(|r| r.scan_id);
    for w in anchors.windows(2) {
        if dist(w[0], w[1]) < spacing {
            return Err(format!(
                "anchors {} and {} are {:.3} m apart",
                w[0].scan_id,
                w[1].scan_id,
                dist(w[0], w[1])
            ));
        }
    }
    Ok(())
}

/// Generates an orchard and extracts features for every scan.
pub fn orchard_sequence(spec: &OrchardSpec, extract: &ExtractConfig) -> (Vec<ScanRecord>, Vec<LocalFeatureSet>) {
    let data = synthgen::generate_orchard(spec).expect("valid spec");
    let features = data
        .scans
        .par_iter()
        .zip(&data.truth)
        .map(|(c, t)| localfeat::extract_from_cloud(c, extract, spec.seed, t.record.scan_id).expect("extractable scan"))
        .collect();
    (data.records(), features)
}
