//! Deterministic synthetic orchard: tree lines of Gaussian crowns over a
//! gently rolling ground, traversed by a serpentine path repeated once per
//! pass. Scans are emitted in the sensor frame together with exact poses,
//! segment labels and pass ids.
//!
//! Layout: lane `i` runs along `y = i * row_spacing` for `x` in
//! `[0, row_length]`; tree line `j` sits at `y = (j - 0.5) * row_spacing`, so
//! every lane is bordered by lines `i` and `i + 1`. Segments follow traversal
//! order: lane 0, the headland connector to lane 1, lane 1, and so on, with a
//! final return segment back to the start along the headland.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, PointCloud, Pose, PoseRow, ScanFormat, ScanRecord};
use crate::seed;

pub const SENSOR_HEIGHT: f64 = 1.0;
/// Headland clearance between the row ends and the turning track (m).
pub const HEADLAND: f64 = 2.0;
pub const SPEED: f64 = 1.0;
/// Stop between consecutive passes (s).
pub const LAP_PAUSE: f64 = 10.0;
pub const TREE_PRESENCE: f64 = 0.85;
const LATERAL_OFFSET: f64 = 0.3;
const LATERAL_JITTER: f64 = 0.05;
const YAW_JITTER: f64 = 0.035;
const TRUNK_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchardSpec {
    /// Number of driving lanes; there are `n_rows + 1` tree lines.
    pub n_rows: usize,
    pub row_length: f64,
    pub row_spacing: f64,
    pub trees_per_row: usize,
    /// Points sampled per fully visible tree per scan.
    pub points_per_tree: usize,
    pub noise_sigma: f64,
    pub permeability: f64,
    pub n_passes: usize,
    pub scan_spacing: f64,
    pub seed: u64,
    /// Horizontal sensor range (m).
    pub sensor_range: f64,
    /// Ground returns per square metre at full visibility.
    pub ground_density: f64,
    /// Seed for the tree layout and terrain; `None` uses `seed`. Two specs
    /// sharing a layout seed describe the same orchard recorded twice.
    pub layout_seed: Option<u64>,
}

impl Default for OrchardSpec {
    fn default() -> Self {
        Self {
            n_rows: 4,
            row_length: 60.0,
            row_spacing: 4.0,
            trees_per_row: 24,
            points_per_tree: 60,
            noise_sigma: 0.03,
            permeability: 0.5,
            n_passes: 2,
            scan_spacing: 1.0,
            seed: 0,
            sensor_range: 15.0,
            ground_density: 0.5,
            layout_seed: None,
        }
    }
}

impl OrchardSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_rows", self.n_rows),
            ("trees_per_row", self.trees_per_row),
            ("points_per_tree", self.points_per_tree),
            ("n_passes", self.n_passes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        let positive = [
            ("row_length", self.row_length),
            ("row_spacing", self.row_spacing),
            ("scan_spacing", self.scan_spacing),
            ("sensor_range", self.sensor_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be non-negative".into()));
        }
        if !(self.ground_density >= 0.0 && self.ground_density.is_finite()) {
            return Err(Error::Validation("ground_density must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.permeability) {
            return Err(Error::Validation(format!(
                "permeability must be in [0, 1], got {}",
                self.permeability
            )));
        }
        let shortest = Path2::serpentine(self).shortest_segment();
        if self.scan_spacing > shortest {
            return Err(Error::Validation(format!(
                "scan_spacing {} exceeds the shortest segment ({shortest} m)",
                self.scan_spacing
            )));
        }
        Ok(())
    }

    fn layout_root(&self) -> u64 {
        self.layout_seed.unwrap_or(self.seed)
    }

    pub fn lane_y(&self, lane: usize) -> f64 {
        lane as f64 * self.row_spacing
    }

    pub fn line_y(&self, line: usize) -> f64 {
        (line as f64 - 0.5) * self.row_spacing
    }

    /// Length of one lap of the serpentine path.
    pub fn lap_length(&self) -> f64 {
        Path2::serpentine(self).length()
    }

    /// Segment id of lane `i` (lanes and connectors alternate).
    pub fn lane_segment(&self, lane: usize) -> u32 {
        2 * lane as u32
    }

    pub fn n_segments(&self) -> u32 {
        2 * self.n_rows as u32
    }
}

/// Planar polyline with a segment id per edge.
#[derive(Clone, Debug)]
struct Path2 {
    vertices: Vec<[f64; 2]>,
    edge_segments: Vec<u32>,
    cumulative: Vec<f64>,
}

impl Path2 {
    fn serpentine(spec: &OrchardSpec) -> Self {
        let l = spec.row_length;
        let n = spec.n_rows;
        let mut vertices = Vec::new();
        let mut edge_segments = Vec::new();
        let mut push = |v: [f64; 2], seg: Option<u32>, vs: &mut Vec<[f64; 2]>| {
            if let Some(s) = seg {
                edge_segments.push(s);
            }
            vs.push(v);
        };
        push([0.0, spec.lane_y(0)], None, &mut vertices);
        for i in 0..n {
            let y = spec.lane_y(i);
            let end = if i % 2 == 0 { l } else { 0.0 };
            push([end, y], Some(2 * i as u32), &mut vertices);
            let seg = Some(2 * i as u32 + 1);
            if i + 1 < n {
                let turn = if i % 2 == 0 { l + HEADLAND } else { -HEADLAND };
                let y2 = spec.lane_y(i + 1);
                push([turn, y], seg, &mut vertices);
                push([turn, y2], seg, &mut vertices);
                push([end, y2], seg, &mut vertices);
            } else if end == 0.0 {
                push([-HEADLAND, y], seg, &mut vertices);
                push([-HEADLAND, spec.lane_y(0)], seg, &mut vertices);
                push([0.0, spec.lane_y(0)], seg, &mut vertices);
            } else {
                let outer = spec.lane_y(0) - spec.row_spacing;
                push([l + HEADLAND, y], seg, &mut vertices);
                push([l + HEADLAND, outer], seg, &mut vertices);
                push([-HEADLAND, outer], seg, &mut vertices);
                push([-HEADLAND, spec.lane_y(0)], seg, &mut vertices);
                push([0.0, spec.lane_y(0)], seg, &mut vertices);
            }
        }
        let mut cumulative = vec![0.0];
        for w in vertices.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Self {
            vertices,
            edge_segments,
            cumulative,
        }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn shortest_segment(&self) -> f64 {
        let mut lengths: Vec<(u32, f64)> = Vec::new();
        for (e, &s) in self.edge_segments.iter().enumerate() {
            let d = self.cumulative[e + 1] - self.cumulative[e];
            match lengths.last_mut() {
                Some((last, acc)) if *last == s => *acc += d,
                _ => lengths.push((s, d)),
            }
        }
        lengths.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min)
    }

    /// Position, unit heading and segment at arclength `s` in `[0, length)`.
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2], u32) {
        let e = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.vertices.len() - 1) - 1;
        let (a, b) = (self.vertices[e], self.vertices[e + 1]);
        let len = self.cumulative[e + 1] - self.cumulative[e];
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let u = s - self.cumulative[e];
        ([a[0] + dir[0] * u, a[1] + dir[1] * u], dir, self.edge_segments[e])
    }
}

/// One tree of the static layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub line: usize,
    /// Rank along its line (0 at `x` near 0).
    pub slot: usize,
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub crown_radius: f64,
    /// Vertical stretch of the crown relative to its horizontal spread.
    pub crown_stretch: f64,
}

impl Tree {
    fn crown_center_z(&self) -> f64 {
        self.height - self.crown_radius * self.crown_stretch
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub trees: Vec<Tree>,
    /// Per line, whether each slot holds a tree.
    pub present: Vec<Vec<bool>>,
    terrain: [f64; 4],
}

impl Layout {
    pub fn generate(spec: &OrchardSpec) -> Self {
        let mut rng = seed::rng(seed::sub_seed(spec.layout_root(), "synthgen.layout"));
        let pitch = spec.row_length / spec.trees_per_row as f64;
        let mut trees = Vec::new();
        let mut present = Vec::with_capacity(spec.n_rows + 1);
        for line in 0..=spec.n_rows {
            let mut row = Vec::with_capacity(spec.trees_per_row);
            for slot in 0..spec.trees_per_row {
                let here = rng.random_bool(TREE_PRESENCE);
                let height = rng.random_range(2.0..4.5);
                let crown_radius = rng.random_range(0.6..1.4);
                let crown_stretch = rng.random_range(0.8..1.5);
                let jitter = rng.random_range(-0.15..0.15);
                row.push(here);
                if here {
                    trees.push(Tree {
                        line,
                        slot,
                        x: (slot as f64 + 0.5) * pitch + jitter,
                        y: spec.line_y(line),
                        height,
                        crown_radius,
                        crown_stretch,
                    });
                }
            }
            present.push(row);
        }
        let terrain = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.1..0.2),
        ];
        Self {
            trees,
            present,
            terrain,
        }
    }

    pub fn ground_z(&self, x: f64, y: f64) -> f64 {
        let [a, b, c, amp] = self.terrain;
        amp * (0.23 * x + a).sin() * (0.31 * y + b).cos() + 0.1 * (0.07 * x + c).sin()
    }
}

/// Where the sensor is relative to the tree block, which decides how many
/// tree barriers a beam crosses.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Regime {
    /// Inside the block's `x` extent: barriers are whole tree lines.
    Lateral,
    /// On a headland: barriers are trees of the same line.
    Longitudinal,
}

fn regime(spec: &OrchardSpec, x: f64) -> Regime {
    if (0.0..=spec.row_length).contains(&x) {
        Regime::Lateral
    } else {
        Regime::Longitudinal
    }
}

fn lines_between(spec: &OrchardSpec, ys: f64, y: f64) -> usize {
    let (lo, hi) = if ys < y { (ys, y) } else { (y, ys) };
    (0..=spec.n_rows)
        .filter(|&j| {
            let yl = spec.line_y(j);
            yl > lo && yl < hi
        })
        .count()
}

fn trees_between(layout: &Layout, line: usize, spec: &OrchardSpec, xs: f64, x: f64) -> usize {
    let pitch = spec.row_length / spec.trees_per_row as f64;
    let (lo, hi) = if xs < x { (xs, x) } else { (x, xs) };
    layout.present[line]
        .iter()
        .enumerate()
        .filter(|&(slot, &p)| {
            let c = (slot as f64 + 0.5) * pitch;
            p && c > lo + 0.5 * pitch && c < hi - 0.5 * pitch
        })
        .count()
}

/// Probability that a point of `tree` reaches a sensor at `(xs, ys)`.
fn tree_visibility(spec: &OrchardSpec, layout: &Layout, tree: &Tree, xs: f64, ys: f64) -> f64 {
    let p = spec.permeability;
    let barriers = match regime(spec, xs) {
        Regime::Lateral => lines_between(spec, ys, tree.y),
        Regime::Longitudinal => trees_between(layout, tree.line, spec, xs, tree.x),
    };
    (1.0 - 0.5 * p) * p.powi(barriers as i32)
}

fn ground_visibility(spec: &OrchardSpec, xs: f64, ys: f64, x: f64, y: f64) -> f64 {
    let p = spec.permeability;
    let barriers = match regime(spec, xs) {
        Regime::Lateral => lines_between(spec, ys, y),
        Regime::Longitudinal => {
            let pitch = spec.row_length / spec.trees_per_row as f64;
            let depth = if xs < 0.0 { x } else { spec.row_length - x };
            if depth <= 0.0 || !(spec.line_y(0)..=spec.line_y(spec.n_rows)).contains(&y) {
                0
            } else {
                (depth / pitch).floor() as usize
            }
        }
    };
    p.powi(barriers as i32)
}

/// Exact ground truth for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTruth {
    pub record: ScanRecord,
    pub pose: Pose,
    pub lap: usize,
}

/// Poses and segment labels for every scan, before any point is sampled.
pub fn trajectory(spec: &OrchardSpec) -> Result<Vec<ScanTruth>> {
    spec.validate()?;
    let path = Path2::serpentine(spec);
    let lap_len = path.length();
    let lap_duration = lap_len / SPEED + LAP_PAUSE;
    let root = spec.seed;
    let mut out = Vec::new();
    for lap in 0..spec.n_passes {
        let mut rng = seed::rng(seed::indexed_seed(root, "synthgen.lap", lap as u64));
        let phase = rng.random_range(0.0..spec.scan_spacing);
        let offset = rng.random_range(-LATERAL_OFFSET..LATERAL_OFFSET);
        let jitter = Normal::new(0.0, LATERAL_JITTER).unwrap();
        let yaw_jitter = Normal::new(0.0, YAW_JITTER).unwrap();
        let mut s = phase;
        while s < lap_len {
            let (p, dir, segment_id) = path.at(s);
            let lateral = offset + jitter.sample(&mut rng);
            let x = p[0] - dir[1] * lateral;
            let y = p[1] + dir[0] * lateral;
            let yaw = dir[1].atan2(dir[0]) + yaw_jitter.sample(&mut rng);
            let position = Point3::new(x, y, SENSOR_HEIGHT);
            out.push(ScanTruth {
                record: ScanRecord {
                    scan_id: out.len() as u64,
                    timestamp: lap as f64 * lap_duration + s / SPEED,
                    position,
                    segment_id,
                    pass_id: 0,
                },
                pose: Pose::from_yaw(position.coords, yaw),
                lap,
            });
            s += spec.scan_spacing;
        }
    }
    let mut records: Vec<ScanRecord> = out.iter().map(|t| t.record.clone()).collect();
    geom::assign_pass_ids(&mut records);
    for (t, r) in out.iter_mut().zip(records) {
        t.record = r;
    }
    Ok(out)
}

/// World-frame points of one scan.
fn sample_world_points(spec: &OrchardSpec, layout: &Layout, xs: f64, ys: f64, seed: u64) -> Vec<Point3<f64>> {
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let std = Normal::new(0.0, 1.0).unwrap();
    let range2 = spec.sensor_range * spec.sensor_range;
    let half = 0.5 * spec.row_spacing;
    let mut pts = Vec::new();
    let emit = |p: Vector3<f64>, rng: &mut rand_chacha::ChaCha8Rng, pts: &mut Vec<Point3<f64>>| {
        let q = Point3::new(p.x + noise.sample(rng), p.y + noise.sample(rng), p.z + noise.sample(rng));
        if (q.x - xs).powi(2) + (q.y - ys).powi(2) <= range2 {
            pts.push(q);
        }
    };
    for tree in &layout.trees {
        let reach = spec.sensor_range + half;
        if (tree.x - xs).powi(2) + (tree.y - ys).powi(2) > reach * reach {
            continue;
        }
        let vis = tree_visibility(spec, layout, tree, xs, ys);
        let trunk_top = tree.crown_center_z().max(0.3);
        let sigma_h = 0.5 * tree.crown_radius;
        let sigma_v = sigma_h * tree.crown_stretch;
        for _ in 0..spec.points_per_tree {
            let keep = rng.random_bool(vis);
            let trunk = rng.random_bool(TRUNK_FRACTION);
            let (dx, dy, z) = if trunk {
                let r = 0.08 * std.sample(&mut rng);
                (r, 0.08 * std.sample(&mut rng), rng.random_range(0.0..trunk_top))
            } else {
                (
                    sigma_h * std.sample(&mut rng),
                    sigma_h * std.sample(&mut rng),
                    tree.crown_center_z() + sigma_v * std.sample(&mut rng),
                )
            };
            if !keep {
                continue;
            }
            let dx = dx.clamp(-half, half);
            let dy = dy.clamp(-half, half);
            let z = z.max(0.0);
            emit(Vector3::new(tree.x + dx, tree.y + dy, z), &mut rng, &mut pts);
        }
    }
    let area = std::f64::consts::PI * range2;
    let n_ground = (spec.ground_density * area).round() as usize;
    for _ in 0..n_ground {
        let r = spec.sensor_range * rng.random::<f64>().sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let (x, y) = (xs + r * th.cos(), ys + r * th.sin());
        let keep = rng.random_bool(ground_visibility(spec, xs, ys, x, y));
        if keep {
            emit(Vector3::new(x, y, layout.ground_z(x, y)), &mut rng, &mut pts);
        }
    }
    pts
}

/// Generated scans (sensor frame) with their ground truth.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub scans: Vec<PointCloud>,
    pub truth: Vec<ScanTruth>,
}

impl SynthDataset {
    pub fn records(&self) -> Vec<ScanRecord> {
        self.truth.iter().map(|t| t.record.clone()).collect()
    }
}

/// Scans are rounded to f32 so that a write/read cycle through the scan
/// files reproduces them exactly.
pub fn generate_orchard(spec: &OrchardSpec) -> Result<SynthDataset> {
    let truth = trajectory(spec)?;
    let layout = Layout::generate(spec);
    let root = seed::sub_seed(spec.seed, "synthgen");
    let scans = truth
        .par_iter()
        .map(|t| {
            let p = t.record.position;
            let world = sample_world_points(spec, &layout, p.x, p.y, seed::indexed_seed(root, "scan", t.record.scan_id));
            // f32 rounding matches what the scan files store.
            let local = world
                .iter()
                .map(|q| t.pose.inverse_transform(q).map(|v| v as f32 as f64))
                .collect();
            PointCloud::new(local)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { scans, truth })
}

pub fn scan_path(dir: &Path, scan_id: u64) -> PathBuf {
    dir.join("scans").join(format!("{scan_id:06}.bin"))
}

/// Writes `scans/NNNNNN.bin` (bin-xyz), `poses.csv`, `segments.csv` and
/// `orchard.json` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &SynthDataset, spec: &OrchardSpec) -> Result<()> {
    fs::create_dir_all(dir.join("scans"))?;
    for (cloud, t) in data.scans.iter().zip(&data.truth) {
        geom::save_scan(cloud, &scan_path(dir, t.record.scan_id), ScanFormat::BinXyz)?;
    }
    let poses: Vec<PoseRow> = data
        .truth
        .iter()
        .map(|t| PoseRow {
            scan_id: t.record.scan_id,
            timestamp: t.record.timestamp,
            pose: t.pose,
        })
        .collect();
    geom::write_poses(&dir.join("poses.csv"), &poses)?;
    geom::write_segments(&dir.join("segments.csv"), &data.records())?;
    fs::write(dir.join("orchard.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}
