//! Point-cloud ingestion, downsampling, voxelization, sub-map merging and
//! trajectory metadata.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Point3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::seed;

/// A single LiDAR scan (or merged sub-map).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        let cloud = Self {
            points,
            intensity: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_intensity(points: Vec<Point3<f64>>, intensity: Vec<f32>) -> Result<Self> {
        if points.len() != intensity.len() {
            return Err(Error::Argument(format!(
                "{} points but {} intensity values",
                points.len(),
                intensity.len()
            )));
        }
        let cloud = Self {
            points,
            intensity: Some(intensity),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.coords.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// On-disk scan encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanFormat {
    /// Little-endian f32 `x y z` triples.
    BinXyz,
    /// Little-endian f32 `x y z intensity` quadruples (KITTI layout).
    BinXyzi,
    /// ASCII PLY with a `vertex` element.
    PlyAscii,
}

impl ScanFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "bin" => Some(Self::BinXyz),
            "ply" => Some(Self::PlyAscii),
            _ => None,
        }
    }
}

impl FromStr for ScanFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin-xyz" => Ok(Self::BinXyz),
            "bin-xyzi" => Ok(Self::BinXyzi),
            "ply-ascii" => Ok(Self::PlyAscii),
            other => Err(Error::Argument(format!("unknown scan format `{other}`"))),
        }
    }
}

impl fmt::Display for ScanFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BinXyz => "bin-xyz",
            Self::BinXyzi => "bin-xyzi",
            Self::PlyAscii => "ply-ascii",
        })
    }
}

pub fn load_scan(path: &Path, format: ScanFormat) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    parse_scan(&bytes, format).map_err(|e| match e {
        Error::Parse { offset, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        },
        other => other,
    })
}

/// Decodes an in-memory scan. Parse errors carry an empty path.
pub fn parse_scan(bytes: &[u8], format: ScanFormat) -> Result<PointCloud> {
    match format {
        ScanFormat::BinXyz => parse_bin(bytes, false),
        ScanFormat::BinXyzi => parse_bin(bytes, true),
        ScanFormat::PlyAscii => parse_ply(bytes),
    }
}

fn parse_error(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::new(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn parse_bin(bytes: &[u8], with_intensity: bool) -> Result<PointCloud> {
    let stride = if with_intensity { 16 } else { 12 };
    if !bytes.len().is_multiple_of(stride) {
        return Err(parse_error(
            bytes.len() - bytes.len() % stride,
            format!("file size {} is not a multiple of {stride}", bytes.len()),
        ));
    }
    if bytes.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = bytes.len() / stride;
    let mut points = Vec::with_capacity(n);
    let mut intensity = with_intensity.then(|| Vec::with_capacity(n));
    for (i, rec) in bytes.chunks_exact(stride).enumerate() {
        let f = |j: usize| f32::from_le_bytes(rec[4 * j..4 * j + 4].try_into().unwrap());
        let (x, y, z) = (f(0), f(1), f(2));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(parse_error(i * stride, "non-finite coordinate"));
        }
        points.push(Point3::new(x as f64, y as f64, z as f64));
        if let Some(v) = intensity.as_mut() {
            v.push(f(3));
        }
    }
    Ok(PointCloud { points, intensity })
}

fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_error(e.valid_up_to(), "invalid UTF-8"))?;
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let start = offset;
        offset += l.len();
        (start, l.trim())
    });

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_error(0, "missing `ply` magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (at, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_error(at, format!("unsupported PLY format `{other}`")))
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse()
                            .map_err(|_| parse_error(at, format!("bad vertex count `{count}`")))?,
                    );
                } else if vertex_count.is_none() {
                    return Err(parse_error(at, "elements before `vertex` are not supported"));
                }
            }
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_error(at, format!("unexpected header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_error(bytes.len(), "missing `end_header`"));
    }
    let n = vertex_count.ok_or_else(|| parse_error(0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_error(0, "vertex element lacks x/y/z properties")),
    };
    let ii = col("intensity");
    if n == 0 {
        return Err(Error::EmptyCloud);
    }

    let mut points = Vec::with_capacity(n);
    let mut intensity = ii.map(|_| Vec::with_capacity(n));
    for (at, line) in lines {
        if points.len() == n {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(parse_error(at, format!("expected {} values", props.len())));
        }
        let num = |j: usize| -> Result<f64> {
            let v: f64 = vals[j]
                .parse()
                .map_err(|_| parse_error(at, format!("bad number `{}`", vals[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_error(at, "non-finite value"))
            }
        };
        // Coordinates are stored as f32 on disk in every supported format.
        points.push(Point3::new(
            num(ix)? as f32 as f64,
            num(iy)? as f32 as f64,
            num(iz)? as f32 as f64,
        ));
        if let (Some(v), Some(j)) = (intensity.as_mut(), ii) {
            v.push(num(j)? as f32);
        }
    }
    if points.len() != n {
        return Err(parse_error(
            bytes.len(),
            format!("header declares {n} vertices, found {}", points.len()),
        ));
    }
    Ok(PointCloud { points, intensity })
}

pub fn encode_scan(cloud: &PointCloud, format: ScanFormat) -> Vec<u8> {
    match format {
        ScanFormat::BinXyz | ScanFormat::BinXyzi => {
            let with_i = format == ScanFormat::BinXyzi;
            let mut out = Vec::with_capacity(cloud.len() * if with_i { 16 } else { 12 });
            for (i, p) in cloud.points.iter().enumerate() {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
                if with_i {
                    let v = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out
        }
        ScanFormat::PlyAscii => {
            let mut s = String::new();
            s.push_str("ply\nformat ascii 1.0\n");
            s.push_str(&format!("element vertex {}\n", cloud.len()));
            s.push_str("property float x\nproperty float y\nproperty float z\n");
            if cloud.intensity.is_some() {
                s.push_str("property float intensity\n");
            }
            s.push_str("end_header\n");
            for (i, p) in cloud.points.iter().enumerate() {
                s.push_str(&format!("{} {} {}", p.x as f32, p.y as f32, p.z as f32));
                if let Some(v) = &cloud.intensity {
                    s.push_str(&format!(" {}", v[i]));
                }
                s.push('\n');
            }
            s.into_bytes()
        }
    }
}

pub fn save_scan(cloud: &PointCloud, path: &Path, format: ScanFormat) -> Result<()> {
    fs::write(path, encode_scan(cloud, format))?;
    Ok(())
}

/// Uniform random subset of `target` points without replacement, kept in
/// input order. Clouds with at most `target` points are returned unchanged.
pub fn random_downsample(cloud: &PointCloud, target: usize, seed: u64) -> Result<PointCloud> {
    if target == 0 {
        return Err(Error::Argument("downsample target must be >= 1".into()));
    }
    if cloud.len() <= target {
        return Ok(cloud.clone());
    }
    let mut rng = seed::rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), target).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// Occupied voxels of a cloud, one centroid per voxel, ordered by key.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCloud {
    pub centroids: Vec<Point3<f64>>,
    pub voxel_keys: Vec<[i64; 3]>,
    pub grid_size: f64,
}

impl VoxelCloud {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

pub fn voxel_key(p: &Point3<f64>, grid_size: f64) -> [i64; 3] {
    [
        (p.x / grid_size).floor() as i64,
        (p.y / grid_size).floor() as i64,
        (p.z / grid_size).floor() as i64,
    ]
}

/// Voxel-grid reduction. Keys are `floor(coord / grid_size)`, so a point on
/// a cell boundary belongs to the higher-index cell.
pub fn voxelize(cloud: &PointCloud, grid_size: f64) -> Result<VoxelCloud> {
    if !(grid_size > 0.0 && grid_size.is_finite()) {
        return Err(Error::Argument(format!("grid size must be positive, got {grid_size}")));
    }
    struct Acc {
        sum: Vector3<f64>,
        min: Vector3<f64>,
        max: Vector3<f64>,
        count: usize,
    }
    let mut cells: BTreeMap<[i64; 3], Acc> = BTreeMap::new();
    for p in &cloud.points {
        let acc = cells.entry(voxel_key(p, grid_size)).or_insert(Acc {
            sum: Vector3::zeros(),
            min: p.coords,
            max: p.coords,
            count: 0,
        });
        acc.sum += p.coords;
        acc.min = acc.min.inf(&p.coords);
        acc.max = acc.max.sup(&p.coords);
        acc.count += 1;
    }
    let mut centroids = Vec::with_capacity(cells.len());
    let mut voxel_keys = Vec::with_capacity(cells.len());
    for (key, acc) in cells {
        // Rounding in the mean can step past the extreme member; clamp so the
        // centroid always stays in its own cell.
        let mean = (acc.sum / acc.count as f64).sup(&acc.min).inf(&acc.max);
        centroids.push(Point3::from(mean));
        voxel_keys.push(key);
    }
    Ok(VoxelCloud {
        centroids,
        voxel_keys,
        grid_size,
    })
}

/// Rigid transform from sensor frame to world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a raw `(qx, qy, qz, qw)` quaternion, renormalizing
    /// small deviations from unit norm left by text round-trips.
    pub fn from_parts(translation: Vector3<f64>, q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Validation(format!("quaternion norm {norm} is not 1")));
        }
        Ok(Self {
            translation,
            rotation: UnitQuaternion::from_quaternion(quat),
        })
    }

    pub fn from_yaw(translation: Vector3<f64>, yaw: f64) -> Self {
        Self {
            translation,
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        }
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse_transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.inverse() * (p.coords - self.translation))
    }
}

/// Concatenates every `stride`-th scan, transformed into the world frame.
/// The merged sub-map takes the first scan as its timestamp reference.
pub fn merge_submap(scans: &[PointCloud], poses: &[Pose], stride: usize) -> Result<PointCloud> {
    if scans.len() != poses.len() {
        return Err(Error::Argument(format!(
            "{} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    if scans.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let picked: Vec<usize> = (0..scans.len()).step_by(stride).collect();
    let keep_intensity = picked.iter().all(|&i| scans[i].intensity.is_some());
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for &i in &picked {
        points.extend(scans[i].points.iter().map(|p| poses[i].transform(p)));
        if keep_intensity {
            intensity.extend_from_slice(scans[i].intensity.as_ref().unwrap());
        }
    }
    Ok(PointCloud {
        points,
        intensity: keep_intensity.then_some(intensity),
    })
}

/// Index of the sample in `times` (sorted ascending) nearest to `t`.
/// Equidistant neighbours resolve to the earlier timestamp.
pub fn nearest_timestamp(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let hi = times.partition_point(|&x| x < t);
    if hi == 0 {
        return Some(0);
    }
    if hi == times.len() {
        return Some(times.len() - 1);
    }
    let lo = hi - 1;
    if t - times[lo] <= times[hi] - t {
        Some(lo)
    } else {
        Some(hi)
    }
}

/// Per-scan trajectory metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub scan_id: u64,
    pub timestamp: f64,
    pub position: Point3<f64>,
    pub segment_id: u32,
    /// Zero-based count of earlier entries into the same segment.
    pub pass_id: u32,
}

/// One row of a poses CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRow {
    pub scan_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let base = ["scan_id", "timestamp", "x", "y", "z"];
    let quat = ["qx", "qy", "qz", "qw"];
    let has_quat = match header.len() {
        5 => false,
        9 => true,
        _ => {
            return Err(Error::Format(format!(
                "{}: expected header scan_id,timestamp,x,y,z[,qx,qy,qz,qw]",
                path.display()
            )))
        }
    };
    let expected = base.iter().chain(quat.iter().take(if has_quat { 4 } else { 0 }));
    if !header.iter().zip(expected).all(|(h, e)| h == e) {
        return Err(Error::Format(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| {
                Error::Format(format!("{} line {line}: bad number `{}`", path.display(), &rec[i]))
            })
        };
        let scan_id: u64 = rec[0].parse().map_err(|_| {
            Error::Format(format!("{} line {line}: bad scan id `{}`", path.display(), &rec[0]))
        })?;
        let t = Vector3::new(field(2)?, field(3)?, field(4)?);
        let pose = if has_quat {
            Pose::from_parts(t, [field(5)?, field(6)?, field(7)?, field(8)?])?
        } else {
            Pose::from_translation(t)
        };
        rows.push(PoseRow {
            scan_id,
            timestamp: field(1)?,
            pose,
        });
    }
    Ok(rows)
}

pub fn load_segments(path: &Path) -> Result<Vec<(u64, u32)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["scan_id", "segment_id"] {
        return Err(Error::Format(format!(
            "{}: expected header scan_id,segment_id",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = || Error::Format(format!("{} line {line}: bad row", path.display()));
        out.push((
            rec[0].parse().map_err(|_| parse_err())?,
            rec[1].parse().map_err(|_| parse_err())?,
        ));
    }
    Ok(out)
}

pub fn write_poses(path: &Path, rows: &[PoseRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "scan_id,timestamp,x,y,z,qx,qy,qz,qw")?;
    for r in rows {
        let t = r.pose.translation;
        let q = r.pose.rotation.quaternion();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.scan_id, r.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_segments(path: &Path, records: &[ScanRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "scan_id,segment_id")?;
    for r in records {
        writeln!(f, "{},{}", r.scan_id, r.segment_id)?;
    }
    f.flush()?;
    Ok(())
}

/// Assigns pass ids in place. Records must already be in scan order. A new
/// pass starts whenever the segment differs from the previous scan's.
pub fn assign_pass_ids(records: &mut [ScanRecord]) {
    let mut entries: HashMap<u32, u32> = HashMap::new();
    let mut prev: Option<u32> = None;
    for r in records.iter_mut() {
        if prev != Some(r.segment_id) {
            *entries.entry(r.segment_id).or_insert(0) += 1;
        }
        r.pass_id = entries[&r.segment_id] - 1;
        prev = Some(r.segment_id);
    }
}

/// Joins poses and segment labels into scan-ordered records with pass ids.
/// Poses without a segment label are ignored.
pub fn build_records(poses: &[PoseRow], segments: &[(u64, u32)]) -> Result<Vec<ScanRecord>> {
    let by_id: HashMap<u64, &PoseRow> = poses.iter().map(|r| (r.scan_id, r)).collect();
    if by_id.len() != poses.len() {
        return Err(Error::Validation("duplicate scan_id in poses".into()));
    }
    let mut records = Vec::with_capacity(segments.len());
    for &(scan_id, segment_id) in segments {
        let row = by_id
            .get(&scan_id)
            .ok_or_else(|| Error::Reference(format!("scan_id {scan_id} has no pose")))?;
        records.push(ScanRecord {
            scan_id,
            timestamp: row.timestamp,
            position: Point3::from(row.pose.translation),
            segment_id,
            pass_id: 0,
        });
    }
    records.sort_by_key(|r| r.scan_id);
    for w in records.windows(2) {
        if w[0].scan_id == w[1].scan_id {
            return Err(Error::Validation(format!(
                "scan_id {} labelled twice",
                w[0].scan_id
            )));
        }
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::Validation(format!(
                "timestamp decreases between scans {} and {}",
                w[0].scan_id, w[1].scan_id
            )));
        }
    }
    assign_pass_ids(&mut records);
    Ok(records)
}

pub fn load_trajectory(poses_path: &Path, segments_path: &Path) -> Result<Vec<ScanRecord>> {
    build_records(&load_poses(poses_path)?, &load_segments(segments_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn record(scan_id: u64, segment_id: u32) -> ScanRecord {
        ScanRecord {
            scan_id,
            timestamp: scan_id as f64,
            position: Point3::origin(),
            segment_id,
            pass_id: 0,
        }
    }

    #[test]
    fn single_point_bin_xyz() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_scan(&bytes, ScanFormat::BinXyz).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert!(c.intensity.is_none());
        assert_eq!(encode_scan(&c, ScanFormat::BinXyz), bytes);
    }

    #[test]
    fn bin_xyzi_size_check() {
        let err = parse_scan(&[0u8; 40], ScanFormat::BinXyzi).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 32),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        assert!(matches!(parse_scan(&[], ScanFormat::BinXyz), Err(Error::EmptyCloud)));
    }

    #[test]
    fn ply_with_intensity() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\n\
                    property float y\nproperty float z\nproperty float intensity\nend_header\n\
                    1 2 3 0.5\n4 5 6 0.25\n";
        let c = parse_scan(text.as_bytes(), ScanFormat::PlyAscii).unwrap();
        assert_eq!(c.points[1], Point3::new(4.0, 5.0, 6.0));
        assert_eq!(c.intensity, Some(vec![0.5, 0.25]));
        let again = parse_scan(&encode_scan(&c, ScanFormat::PlyAscii), ScanFormat::PlyAscii).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn ply_bad_number_reports_offset() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n\
                    property float y\nproperty float z\nend_header\n1 two 3\n";
        let at = text.find("1 two").unwrap() as u64;
        match parse_scan(text.as_bytes(), ScanFormat::PlyAscii).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, at),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn downsample_noop_and_exact_count() {
        let c = cloud(&[[0.0; 3], [1.0; 3], [2.0; 3], [3.0; 3], [4.0; 3]]);
        assert_eq!(random_downsample(&c, 10, 1).unwrap(), c);
        assert_eq!(random_downsample(&c, 5, 1).unwrap(), c);
        assert_eq!(random_downsample(&c, 3, 1).unwrap().len(), 3);
        assert!(random_downsample(&c, 0, 1).is_err());
    }

    #[test]
    fn voxel_mean_of_two_points() {
        let v = voxelize(&cloud(&[[0.01; 3], [0.05; 3]]), 0.1).unwrap();
        assert_eq!(v.len(), 1);
        for k in 0..3 {
            assert!((v.centroids[0][k] - 0.03).abs() < 1e-15);
        }
    }

    #[test]
    fn voxel_cell_boundary() {
        let v = voxelize(&cloud(&[[0.05, 0.0, 0.0], [0.15, 0.0, 0.0]]), 0.1).unwrap();
        assert_eq!(v.len(), 2);
        // A point exactly on a boundary goes to the higher cell.
        let v = voxelize(&cloud(&[[0.5, 0.0, 0.0]]), 0.5).unwrap();
        assert_eq!(v.voxel_keys[0], [1, 0, 0]);
        assert!(voxelize(&cloud(&[[0.0; 3]]), 0.0).is_err());
        assert!(voxelize(&cloud(&[[0.0; 3]]), -1.0).is_err());
    }

    #[test]
    fn merge_identity_and_translation() {
        let a = cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(merge_submap(std::slice::from_ref(&a), &[Pose::identity()], 1).unwrap(), a);

        let o = cloud(&[[0.0; 3]]);
        let poses = [
            Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)),
        ];
        let m = merge_submap(&[o.clone(), o], &poses, 1).unwrap();
        assert_eq!(m.points, vec![Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)]);
    }

    #[test]
    fn merge_stride_counts() {
        let scans: Vec<PointCloud> = (1..=8)
            .map(|n| cloud(&vec![[0.0; 3]; n]))
            .collect();
        let poses = vec![Pose::identity(); 8];
        let m = merge_submap(&scans, &poses, 2).unwrap();
        assert_eq!(m.len(), 1 + 3 + 5 + 7);
        assert!(merge_submap(&scans, &poses[..7], 2).is_err());
        assert!(merge_submap(&scans, &poses, 0).is_err());
    }

    #[test]
    fn nearest_timestamp_prefers_earlier_on_tie() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(nearest_timestamp(&t, 0.5), Some(0));
        assert_eq!(nearest_timestamp(&t, 0.6), Some(1));
        assert_eq!(nearest_timestamp(&t, -3.0), Some(0));
        assert_eq!(nearest_timestamp(&t, 9.0), Some(2));
        assert_eq!(nearest_timestamp(&[], 9.0), None);
    }

    #[test]
    fn pass_ids_count_reentries() {
        let mut r: Vec<ScanRecord> = [2, 2, 3, 3, 2, 2]
            .iter()
            .enumerate()
            .map(|(i, &s)| record(i as u64, s))
            .collect();
        assign_pass_ids(&mut r);
        let passes: Vec<u32> = r.iter().map(|x| x.pass_id).collect();
        assert_eq!(passes, vec![0, 0, 0, 0, 1, 1]);

        let mut single: Vec<ScanRecord> = (0..5).map(|i| record(i, 4)).collect();
        assign_pass_ids(&mut single);
        assert!(single.iter().all(|x| x.pass_id == 0));
    }

    #[test]
    fn records_reject_unknown_and_non_monotone() {
        let poses: Vec<PoseRow> = (0..3)
            .map(|i| PoseRow {
                scan_id: i,
                timestamp: [0.0, 2.0, 1.0][i as usize],
                pose: Pose::identity(),
            })
            .collect();
        assert!(matches!(
            build_records(&poses, &[(0, 0), (7, 0)]),
            Err(Error::Reference(_))
        ));
        assert!(matches!(
            build_records(&poses, &[(0, 0), (1, 0), (2, 0)]),
            Err(Error::Validation(_))
        ));
        assert_eq!(build_records(&poses, &[(1, 0), (0, 0)]).unwrap().len(), 2);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn pose_quaternion_validation() {
        assert!(Pose::from_parts(Vector3::zeros(), [0.0, 0.0, 0.0, 2.0]).is_err());
        let p = Pose::from_parts(Vector3::zeros(), [0.0, 0.0, 0.7071068, 0.7071068]).unwrap();
        assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
    }
}
