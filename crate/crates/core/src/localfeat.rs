//! Per-voxel local features from neighbourhood geometry, and the binary
//! feature file that lets externally computed backbone features replace them.
//!
//! Slot layout of the default 16-dimensional feature:
//!
//! | slot | feature |
//! |------|---------|
//! | 0 | linearity `(λ1-λ2)/λ1` |
//! | 1 | planarity `(λ2-λ3)/λ1` |
//! | 2 | sphericity `λ3/λ1` |
//! | 3 | omnivariance `(λ1λ2λ3)^(1/3)` |
//! | 4 | anisotropy `(λ1-λ3)/λ1` |
//! | 5 | eigen-entropy `-Σ λ̂ ln λ̂` |
//! | 6 | eigenvalue sum |
//! | 7 | curvature `λ3/Σλ` |
//! | 8 | `|n_z|` of the surface normal |
//! | 9 | height `z` |
//! | 10 | local density `k / (4/3 π r_k³)` |
//! | 11 | neighbourhood radius `r_k` |
//! | 12 | offset of the point from the neighbourhood mean |
//! | 13 | verticality `|e1_z|` of the principal direction |
//! | 14 | mean distance to the other neighbours |
//! | 15 | constant 1 |

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, PointCloud, VoxelCloud};
use crate::seed;

pub const FEATURE_DIM: usize = 16;
pub const CONSTANT_SLOT: usize = 15;
pub const HEIGHT_SLOT: usize = 9;
pub const MIN_NEIGHBORS: usize = 4;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "linearity",
    "planarity",
    "sphericity",
    "omnivariance",
    "anisotropy",
    "eigen_entropy",
    "eigen_sum",
    "curvature",
    "normal_z",
    "height",
    "density",
    "radius",
    "centroid_offset",
    "verticality",
    "mean_neighbor_distance",
    "constant",
];

/// Eigenvalue sums below this are treated as coincident points (m²).
const DEGENERATE_EIGEN: f64 = 1e-15;

/// `n' x c` matrix of local features for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureSet {
    pub features: DMatrix<f64>,
    pub source_scan_id: u64,
}

impl LocalFeatureSet {
    pub fn new(features: DMatrix<f64>, source_scan_id: u64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Validation("feature set has no rows".into()));
        }
        if features.ncols() < 2 {
            return Err(Error::Validation(format!(
                "feature dimension must be >= 2, got {}",
                features.ncols()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite local feature".into()));
        }
        Ok(Self {
            features,
            source_scan_id,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Raw (unstandardized) features of one neighbourhood, or `None` when all
/// neighbours coincide. `center` is the query point, `neighbors` its k
/// nearest points including itself.
pub fn neighborhood_features(center: &Point3<f64>, neighbors: &[Point3<f64>]) -> Option<[f64; FEATURE_DIM]> {
    let k = neighbors.len() as f64;
    let mean = neighbors.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / k;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= k;
    if !cov.iter().all(|v| v.is_finite()) {
        return None;
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let l3 = eig.eigenvalues[order[2]].max(0.0);
    let sum = l1 + l2 + l3;
    if sum <= DEGENERATE_EIGEN {
        return None;
    }
    let normal_z = eig.eigenvectors[(2, order[2])].abs();
    let principal_z = eig.eigenvectors[(2, order[0])].abs();
    let entropy = [l1, l2, l3]
        .iter()
        .map(|&l| l / sum)
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum::<f64>();
    let dists: Vec<f64> = neighbors.iter().map(|p| (p - center).norm()).collect();
    let r_k = dists.iter().cloned().fold(0.0, f64::max);
    let density = if r_k > 0.0 {
        k / (4.0 / 3.0 * std::f64::consts::PI * r_k.powi(3))
    } else {
        0.0
    };
    let others = (neighbors.len() - 1).max(1) as f64;
    let mean_dist = dists.iter().sum::<f64>() / others;

    Some([
        (l1 - l2) / l1,
        (l2 - l3) / l1,
        l3 / l1,
        (l1 * l2 * l3).cbrt(),
        (l1 - l3) / l1,
        entropy,
        sum,
        l3 / sum,
        normal_z,
        center.z,
        density,
        r_k,
        (center.coords - mean).norm(),
        principal_z,
        mean_dist,
        1.0,
    ])
}

/// Lexicographic order on (distance, x, y, z), so neighbour sets do not
/// depend on input order.
fn neighbor_order(a: &(f64, Point3<f64>), b: &(f64, Point3<f64>)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.x.total_cmp(&b.1.x))
        .then(a.1.y.total_cmp(&b.1.y))
        .then(a.1.z.total_cmp(&b.1.z))
}

/// k nearest points of `points[i]` (including itself) by exact linear scan.
pub fn k_nearest(points: &[Point3<f64>], i: usize, k: usize) -> Vec<Point3<f64>> {
    let q = points[i];
    let mut d: Vec<(f64, Point3<f64>)> = points.iter().map(|p| ((p - q).norm_squared(), *p)).collect();
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, neighbor_order);
        d.truncate(k);
    }
    d.sort_by(neighbor_order);
    d.into_iter().map(|(_, p)| p).collect()
}

/// Uniform hash grid answering the same queries as [`k_nearest`] without a
/// full scan. Results, including tie order, are identical.
pub struct NeighborGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> NeighborGrid<'a> {
    /// Cells are sized to hold about `k` points on average.
    pub fn new(points: &'a [Point3<f64>], k: usize) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(&p.coords);
            max = max.sup(&p.coords);
        }
        let ext = (max - min).map(|e| e.max(1e-3));
        let mut cell = (ext.x * ext.y * ext.z * k.max(1) as f64 / points.len().max(1) as f64).cbrt();
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let key = |p: &Point3<f64>| [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64];
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let kk = key(p);
            for a in 0..3 {
                lo[a] = lo[a].min(kk[a]);
                hi[a] = hi[a].max(kk[a]);
            }
            cells.entry(kk).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    pub fn k_nearest(&self, i: usize, k: usize) -> Vec<Point3<f64>> {
        let q = self.points[i];
        let c = [
            (q.x / self.cell).floor() as i64,
            (q.y / self.cell).floor() as i64,
            (q.z / self.cell).floor() as i64,
        ];
        let max_ring = (0..3).map(|a| (c[a] - self.lo[a]).max(self.hi[a] - c[a])).max().unwrap_or(0);
        let mut cand: Vec<(f64, Point3<f64>)> = Vec::new();
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            cand.extend(ids.iter().map(|&j| ((self.points[j] - q).norm_squared(), self.points[j])));
                        }
                    }
                }
            }
            if ring >= max_ring {
                break;
            }
            if cand.len() >= k {
                cand.select_nth_unstable_by(k - 1, neighbor_order);
                // Every point within `ring` cells of the query has been seen.
                let reach = ring as f64 * self.cell * (1.0 - 1e-9);
                if cand[k - 1].0 < reach * reach {
                    break;
                }
            }
            ring += 1;
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, neighbor_order);
            cand.truncate(k);
        }
        cand.sort_by(neighbor_order);
        cand.into_iter().map(|(_, p)| p).collect()
    }
}

/// Raw features for every voxel, with a per-row degeneracy flag.
pub fn raw_features(voxels: &VoxelCloud, k_neighbors: usize) -> Result<(DMatrix<f64>, Vec<bool>)> {
    if k_neighbors < MIN_NEIGHBORS {
        return Err(Error::Argument(format!(
            "k_neighbors must be >= {MIN_NEIGHBORS}, got {k_neighbors}"
        )));
    }
    if voxels.len() < k_neighbors {
        return Err(Error::Argument(format!(
            "{} voxels but k_neighbors = {k_neighbors}",
            voxels.len()
        )));
    }
    let grid = NeighborGrid::new(&voxels.centroids, k_neighbors);
    let rows: Vec<Option<[f64; FEATURE_DIM]>> = (0..voxels.len())
        .into_par_iter()
        .map(|i| {
            let nb = grid.k_nearest(i, k_neighbors);
            neighborhood_features(&voxels.centroids[i], &nb)
        })
        .collect();
    let mut m = DMatrix::zeros(rows.len(), FEATURE_DIM);
    let mut degenerate = vec![false; rows.len()];
    for (i, row) in rows.iter().enumerate() {
        match row {
            Some(r) => {
                for (j, v) in r.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            None => {
                degenerate[i] = true;
                m[(i, CONSTANT_SLOT)] = 1.0;
            }
        }
    }
    Ok((m, degenerate))
}

/// Order-independent sum: sorting first makes the result invariant to row
/// permutations down to the last bit.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Standardizes every column except `constant_slot` to zero mean and unit
/// variance, using statistics from rows where `skip` is false. Skipped rows
/// become zero (apart from the constant slot). Constant columns become 0.
pub fn standardize(m: &mut DMatrix<f64>, constant_slot: Option<usize>, skip: &[bool]) {
    let live: Vec<usize> = (0..m.nrows()).filter(|&i| !skip.get(i).copied().unwrap_or(false)).collect();
    for j in 0..m.ncols() {
        if Some(j) == constant_slot {
            continue;
        }
        if live.is_empty() {
            m.column_mut(j).fill(0.0);
            continue;
        }
        let n = live.len() as f64;
        let mut vals: Vec<f64> = live.iter().map(|&i| m[(i, j)]).collect();
        let mean = stable_sum(&mut vals) / n;
        let mut sq: Vec<f64> = live.iter().map(|&i| (m[(i, j)] - mean).powi(2)).collect();
        let std = (stable_sum(&mut sq) / n).sqrt();
        for i in 0..m.nrows() {
            m[(i, j)] = if skip.get(i).copied().unwrap_or(false) || std < 1e-12 {
                0.0
            } else {
                (m[(i, j)] - mean) / std
            };
        }
    }
}

/// Standardized per-voxel features for one scan. Values are rounded to f32
/// precision so that a save/load cycle through the feature file is lossless.
pub fn extract_local_features(voxels: &VoxelCloud, k_neighbors: usize, source_scan_id: u64) -> Result<LocalFeatureSet> {
    let (mut m, degenerate) = raw_features(voxels, k_neighbors)?;
    standardize(&mut m, Some(CONSTANT_SLOT), &degenerate);
    m.apply(|v| *v = *v as f32 as f64);
    LocalFeatureSet::new(m, source_scan_id)
}

pub const FEATURE_MAGIC: &[u8; 6] = b"SOAPF\0";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 6 + 4 + 4 + 4 + 8;

pub fn encode_features(fs: &LocalFeatureSet) -> Vec<u8> {
    let (n, c) = fs.features.shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * n * c);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&fs.source_scan_id.to_le_bytes());
    for i in 0..n {
        for j in 0..c {
            out.extend_from_slice(&(fs.features[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<LocalFeatureSet> {
    if bytes.len() < FEATURE_HEADER || &bytes[..6] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(6);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let n = u32_at(10) as usize;
    let c = u32_at(14) as usize;
    let scan_id = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let expected = FEATURE_HEADER + 4 * n * c;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file declares {n}x{c} but holds {} payload bytes",
            bytes.len() - FEATURE_HEADER
        )));
    }
    let body = &bytes[FEATURE_HEADER..];
    let m = DMatrix::from_row_iterator(
        n,
        c,
        body.chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64),
    );
    LocalFeatureSet::new(m, scan_id)
}

pub fn save_features(fs: &LocalFeatureSet, path: &Path) -> Result<()> {
    fs::write(path, encode_features(fs))?;
    Ok(())
}

/// Loads a feature file. With `standardize_columns`, every column except the
/// last is standardized per scan, for external backbones whose output scale
/// is unknown.
pub fn load_features(path: &Path, standardize_columns: bool) -> Result<LocalFeatureSet> {
    let bytes = fs::read(path)?;
    let mut fs = decode_features(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if standardize_columns {
        let last = fs.dim() - 1;
        standardize(&mut fs.features, Some(last), &[]);
    }
    Ok(fs)
}

/// Per-scan preprocessing ahead of feature extraction.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub downsample: usize,
    pub grid_size: f64,
    pub k_neighbors: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            downsample: 10_000,
            grid_size: 0.25,
            k_neighbors: 16,
        }
    }
}

/// Downsample, voxelize and extract. The downsampling stream is keyed by
/// `scan_id` under `root_seed`.
pub fn extract_from_cloud(cloud: &PointCloud, cfg: &ExtractConfig, root_seed: u64, scan_id: u64) -> Result<LocalFeatureSet> {
    let sampled = geom::random_downsample(cloud, cfg.downsample, seed::indexed_seed(root_seed, "downsample", scan_id))?;
    let voxels = geom::voxelize(&sampled, cfg.grid_size)?;
    extract_local_features(&voxels, cfg.k_neighbors, scan_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{voxelize, PointCloud};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn voxels_from(points: Vec<Point3<f64>>) -> VoxelCloud {
        voxelize(&PointCloud::new(points).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn collinear_neighbourhood() {
        let pts: Vec<Point3<f64>> = (-4..=4).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let f = neighborhood_features(&pts[4], &pts).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!(f[1].abs() < 1e-12);
        assert!(f[2].abs() < 1e-12);
        assert!((f[13] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn planar_neighbourhood() {
        let mut rng = crate::seed::rng(5);
        let pts: Vec<Point3<f64>> = (0..50)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 2.0))
            .collect();
        let f = neighborhood_features(&pts[0], &pts).unwrap();
        assert!((f[8] - 1.0).abs() < 1e-9);
        assert!(f[2].abs() < 1e-9);
    }

    #[test]
    fn isotropic_gaussian_monte_carlo() {
        let mut rng = crate::seed::rng(11);
        let pts: Vec<Point3<f64>> = (0..10_000)
            .map(|_| {
                Point3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                )
            })
            .collect();
        let f = neighborhood_features(&Point3::origin(), &pts).unwrap();
        assert!(f[0].abs() < 0.05, "linearity {}", f[0]);
        assert!((f[2] - 1.0).abs() < 0.05, "sphericity {}", f[2]);
    }

    #[test]
    fn degenerate_rows_zero_except_constant() {
        let mut pts: Vec<Point3<f64>> = vec![Point3::new(0.0, 0.0, 0.0); 4];
        pts.extend((0..6).map(|i| Point3::new(5.0 + i as f64, (i * i) as f64 * 0.3, i as f64 * 0.2)));
        // Duplicated voxel centroids cannot come out of voxelize; build directly.
        let v = VoxelCloud {
            voxel_keys: (0..pts.len() as i64).map(|i| [i, 0, 0]).collect(),
            centroids: pts,
            grid_size: 0.1,
        };
        let fs = extract_local_features(&v, 4, 0).unwrap();
        for i in 0..4 {
            for j in 0..FEATURE_DIM {
                let expect = if j == CONSTANT_SLOT { 1.0 } else { 0.0 };
                assert_eq!(fs.features[(i, j)], expect);
            }
        }
    }

    #[test]
    fn grid_search_matches_linear_scan() {
        let mut rng = crate::seed::rng(11);
        let mut clouds: Vec<Vec<Point3<f64>>> = (0..4)
            .map(|_| {
                (0..300)
                    .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..0.5)))
                    .collect()
            })
            .collect();
        // Integer lattice: many exact distance ties.
        clouds.push(
            (0..6)
                .flat_map(|x| (0..6).flat_map(move |y| (0..3).map(move |z| Point3::new(x as f64, y as f64, z as f64))))
                .collect(),
        );
        clouds.push(vec![Point3::new(1.0, 1.0, 1.0); 20]);
        for pts in &clouds {
            for k in [4, 16] {
                let grid = NeighborGrid::new(pts, k);
                for i in 0..pts.len() {
                    assert_eq!(grid.k_nearest(i, k), k_nearest(pts, i, k));
                }
            }
        }
    }

    #[test]
    fn too_few_voxels() {
        let v = voxels_from(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]);
        assert!(matches!(extract_local_features(&v, 4, 0), Err(Error::Argument(_))));
        assert!(matches!(extract_local_features(&v, 2, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn standardized_columns() {
        let mut rng = crate::seed::rng(2);
        let pts: Vec<Point3<f64>> = (0..200)
            .map(|_| Point3::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..1.0)))
            .collect();
        let fs = extract_local_features(&voxels_from(pts), 8, 3).unwrap();
        assert_eq!(fs.dim(), FEATURE_DIM);
        for j in 0..CONSTANT_SLOT {
            let col = fs.features.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4 || var == 0.0);
        }
        assert!(fs.features.column(CONSTANT_SLOT).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn feature_file_round_trip_and_size_check() {
        let m = DMatrix::from_fn(5, 16, |i, j| (i * 16 + j) as f32 as f64 * 0.25);
        let fs = LocalFeatureSet::new(m, 42).unwrap();
        let bytes = encode_features(&fs);
        assert_eq!(decode_features(&bytes).unwrap(), fs);

        let mut short = bytes.clone();
        short.truncate(FEATURE_HEADER + 5 * 8 * 4);
        assert!(matches!(decode_features(&short), Err(Error::Format(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes;
        bad_version[6] = 9;
        assert!(matches!(decode_features(&bad_version), Err(Error::Format(_))));
    }
}
