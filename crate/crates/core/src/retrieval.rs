//! Descriptor database, exact top-k search, recall metrics and the
//! evaluation protocols (fixed radius, radius sweep, leave-one-out).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ScanRecord;
use crate::head::{self, Descriptor, HeadParams};
use crate::localfeat::LocalFeatureSet;
use crate::trainer::{self, TrainConfig, TrainingSequence};

/// Rows deviating from unit norm by less than this are renormalized.
pub const NORM_TOL: f64 = 1e-6;

/// Immutable set of database descriptors with their scan metadata.
#[derive(Clone, Debug)]
pub struct DescriptorDB {
    ids: Vec<u64>,
    dim: usize,
    matrix: Vec<f64>,
    positions: Vec<Point3<f64>>,
    timestamps: Vec<f64>,
    segment_ids: Vec<u32>,
    pass_ids: Vec<u32>,
}

impl DescriptorDB {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, i: usize) -> Point3<f64> {
        self.positions[i]
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.timestamps[i]
    }

    pub fn segment_id(&self, i: usize) -> u32 {
        self.segment_ids[i]
    }

    pub fn pass_id(&self, i: usize) -> u32 {
        self.pass_ids[i]
    }
}

/// Builds a database from descriptors aligned row-by-row with `records`.
pub fn build_db(descriptors: &[Vec<f64>], records: &[ScanRecord]) -> Result<DescriptorDB> {
    if descriptors.len() != records.len() {
        return Err(Error::Reference(format!(
            "{} descriptors for {} records",
            descriptors.len(),
            records.len()
        )));
    }
    let dim = descriptors.first().map_or(0, Vec::len);
    let mut seen = HashSet::with_capacity(records.len());
    let mut matrix = Vec::with_capacity(dim * records.len());
    let mut renormalized = 0usize;
    for (row, r) in descriptors.iter().zip(records) {
        if !seen.insert(r.scan_id) {
            return Err(Error::Reference(format!("duplicate scan_id {}", r.scan_id)));
        }
        if row.len() != dim {
            return Err(Error::Validation(format!(
                "descriptor for scan {} has dimension {}, expected {dim}",
                r.scan_id,
                row.len()
            )));
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dev = (norm - 1.0).abs();
        if !(dev < NORM_TOL) {
            return Err(Error::Validation(format!(
                "descriptor for scan {} has norm {norm}",
                r.scan_id
            )));
        }
        if dev > 1e-9 {
            renormalized += 1;
            matrix.extend(row.iter().map(|v| v / norm));
        } else {
            matrix.extend_from_slice(row);
        }
    }
    if renormalized > 0 {
        log::warn!("renormalized {renormalized} descriptors with small norm deviations");
    }
    Ok(DescriptorDB {
        ids: records.iter().map(|r| r.scan_id).collect(),
        dim,
        matrix,
        positions: records.iter().map(|r| r.position).collect(),
        timestamps: records.iter().map(|r| r.timestamp).collect(),
        segment_ids: records.iter().map(|r| r.segment_id).collect(),
        pass_ids: records.iter().map(|r| r.pass_id).collect(),
    })
}

/// One retrieved candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: u64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub hits: Vec<Hit>,
    /// True when every database row was excluded.
    pub empty: bool,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All admissible rows ranked by ascending squared Euclidean distance, ties
/// by lower scan id.
fn rank_all(db: &DescriptorDB, q: &[f64], exclude: impl Fn(usize) -> bool) -> Vec<(f64, u64, usize)> {
    let mut cand: Vec<(f64, u64, usize)> = (0..db.len())
        .filter(|&i| !exclude(i))
        .map(|i| (squared_distance(db.row(i), q), db.ids[i], i))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand
}

/// Exact k nearest rows of `db` to `q`; `exclude` filters row indices.
/// `k` is capped at the number of admissible rows.
pub fn query_topk(db: &DescriptorDB, q: &[f64], k: usize, exclude: impl Fn(usize) -> bool) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    if q.len() != db.dim {
        return Err(Error::Argument(format!(
            "query dimension {} does not match database dimension {}",
            q.len(),
            db.dim
        )));
    }
    let mut ranked = rank_all(db, q, exclude);
    let empty = ranked.is_empty();
    ranked.truncate(k);
    Ok(TopK {
        hits: ranked
            .into_iter()
            .map(|(d2, id, index)| Hit {
                index,
                id,
                distance: d2.sqrt(),
            })
            .collect(),
        empty,
    })
}

/// A query descriptor with its ground-truth pose information.
#[derive(Clone, Debug)]
pub struct Query {
    pub id: u64,
    pub descriptor: Vec<f64>,
    pub position: Point3<f64>,
    pub timestamp: f64,
    pub segment_id: u32,
}

impl Query {
    pub fn from_record(r: &ScanRecord, descriptor: Vec<f64>) -> Self {
        Self {
            id: r.scan_id,
            descriptor,
            position: r.position,
            timestamp: r.timestamp,
            segment_id: r.segment_id,
        }
    }
}

/// Which database rows a query may retrieve. The query's own id is always
/// excluded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Exclusion {
    None,
    /// Only rows strictly earlier than `timestamp - window` are admissible.
    Temporal { window: f64 },
}

impl Exclusion {
    fn excludes(&self, db: &DescriptorDB, i: usize, q: &Query) -> bool {
        if db.ids[i] == q.id {
            return true;
        }
        match *self {
            Exclusion::None => false,
            Exclusion::Temporal { window } => {
                let t = db.timestamps[i];
                !(t < q.timestamp && q.timestamp - t > window)
            }
        }
    }
}

/// Per-query ranking summary: `prefix_min_geo[i]` is the smallest metric
/// distance to the query among the top `i + 1` retrieved rows.
#[derive(Clone, Debug)]
pub struct RankedQuery {
    pub id: u64,
    pub segment_id: u32,
    pub prefix_min_geo: Vec<f64>,
}

impl RankedQuery {
    /// Is a row within `r_th` among the top `k`?
    pub fn hit(&self, k: usize, r_th: f64) -> bool {
        let n = self.prefix_min_geo.len();
        n > 0 && self.prefix_min_geo[k.min(n) - 1] <= r_th
    }

    /// Does any admissible row lie within `r_th`?
    pub fn attainable(&self, r_th: f64) -> bool {
        self.prefix_min_geo.last().is_some_and(|&g| g <= r_th)
    }
}

pub fn rank_queries(db: &DescriptorDB, queries: &[Query], exclusion: Exclusion) -> Result<Vec<RankedQuery>> {
    if let Some(q) = queries.iter().find(|q| q.descriptor.len() != db.dim) {
        return Err(Error::Argument(format!(
            "query {} has dimension {}, database has {}",
            q.id,
            q.descriptor.len(),
            db.dim
        )));
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let ranked = rank_all(db, &q.descriptor, |i| exclusion.excludes(db, i, q));
            let mut best = f64::INFINITY;
            let prefix_min_geo = ranked
                .iter()
                .map(|&(_, _, i)| {
                    best = best.min((db.positions[i] - q.position).norm());
                    best
                })
                .collect();
            RankedQuery {
                id: q.id,
                segment_id: q.segment_id,
                prefix_min_geo,
            }
        })
        .collect())
}

/// Recall with its counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallStat {
    pub k: usize,
    pub r_th: f64,
    pub recall: f64,
    pub hits: usize,
    pub eligible: usize,
    /// Queries with no admissible row within `r_th`, left out of the ratio.
    pub skipped: usize,
}

pub fn recall_from_ranked(ranked: &[RankedQuery], k: usize, r_th: f64) -> Result<RecallStat> {
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    let mut hits = 0;
    let mut eligible = 0;
    for q in ranked {
        if q.attainable(r_th) {
            eligible += 1;
            if q.hit(k, r_th) {
                hits += 1;
            }
        }
    }
    if eligible == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no query has an attainable positive within {r_th} m"
        )));
    }
    Ok(RecallStat {
        k,
        r_th,
        recall: hits as f64 / eligible as f64,
        hits,
        eligible,
        skipped: ranked.len() - eligible,
    })
}

/// Fraction of eligible queries whose top-k holds a row within `r_th`.
pub fn recall_at_k(db: &DescriptorDB, queries: &[Query], k: usize, r_th: f64, exclusion: Exclusion) -> Result<RecallStat> {
    recall_from_ranked(&rank_queries(db, queries, exclusion)?, k, r_th)
}

/// `k = max(1, ceil(pct/100 * N_db))`.
pub fn k_for_percent(pct: f64, db_len: usize) -> usize {
    ((pct / 100.0 * db_len as f64).ceil() as usize).max(1)
}

pub fn recall_at_percent(db: &DescriptorDB, queries: &[Query], pct: f64, r_th: f64, exclusion: Exclusion) -> Result<RecallStat> {
    recall_at_k(db, queries, k_for_percent(pct, db.len()), r_th, exclusion)
}

/// One point of a radius sweep. `recall` is `None` when no query is eligible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub r_th: f64,
    pub recall: Option<f64>,
    pub hits: usize,
    pub eligible: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub k_list: Vec<usize>,
    pub r_values: Vec<f64>,
    pub overall: Vec<SweepPoint>,
    pub per_segment: BTreeMap<u32, Vec<SweepPoint>>,
}

fn sweep_points(ranked: &[&RankedQuery], k_list: &[usize], r_values: &[f64]) -> Vec<SweepPoint> {
    // A fixed denominator across the sweep: queries attainable at the largest
    // radius. Smaller radii count their misses, so curves cannot decrease.
    let r_max = r_values.last().copied().unwrap_or(0.0);
    let pool: Vec<&&RankedQuery> = ranked.iter().filter(|q| q.attainable(r_max)).collect();
    let mut out = Vec::with_capacity(k_list.len() * r_values.len());
    for &k in k_list {
        for &r in r_values {
            let hits = pool.iter().filter(|q| q.hit(k, r)).count();
            out.push(SweepPoint {
                k,
                r_th: r,
                recall: (!pool.is_empty()).then(|| hits as f64 / pool.len() as f64),
                hits,
                eligible: pool.len(),
            });
        }
    }
    out
}

/// Recall over a grid of `k` and radii, overall and per query segment.
/// The denominator is the set of queries with an attainable positive at the
/// largest radius.
pub fn segment_sweep(ranked: &[RankedQuery], k_list: &[usize], r_values: &[f64]) -> Result<SweepReport> {
    if k_list.is_empty() || r_values.is_empty() || k_list.contains(&0) {
        return Err(Error::Argument("sweep needs non-empty k_list (k >= 1) and radii".into()));
    }
    if r_values.windows(2).any(|w| !(w[0] < w[1])) || !(r_values[0] > 0.0) {
        return Err(Error::Argument("sweep radii must be positive and strictly ascending".into()));
    }
    let all: Vec<&RankedQuery> = ranked.iter().collect();
    let mut by_seg: BTreeMap<u32, Vec<&RankedQuery>> = BTreeMap::new();
    for q in ranked {
        by_seg.entry(q.segment_id).or_default().push(q);
    }
    Ok(SweepReport {
        k_list: k_list.to_vec(),
        r_values: r_values.to_vec(),
        overall: sweep_points(&all, k_list, r_values),
        per_segment: by_seg
            .into_iter()
            .map(|(s, qs)| (s, sweep_points(&qs, k_list, r_values)))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// True-positive radius for the fixed-radius experiment (m).
    pub r_th: f64,
    pub k_list: Vec<usize>,
    /// Percentage for recall@pct.
    pub pct: f64,
    /// Temporal exclusion window around each query (s).
    pub exclusion_window: f64,
    pub sweep_k: Vec<usize>,
    pub sweep_radii: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_th: 10.0,
            k_list: vec![1, 5, 10],
            pct: 1.0,
            exclusion_window: 30.0,
            sweep_k: vec![1, 10],
            sweep_radii: (1..=30).map(f64::from).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_th > 0.0) {
            return Err(Error::Argument("r_th must be positive".into()));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Argument("k_list must be non-empty with k >= 1".into()));
        }
        if !(self.pct > 0.0 && self.pct <= 100.0) {
            return Err(Error::Argument("pct must be in (0, 100]".into()));
        }
        if !(self.exclusion_window >= 0.0) {
            return Err(Error::Argument("exclusion_window must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n_queries: usize,
    pub n_db: usize,
    pub recall_at_k: Vec<RecallStat>,
    pub recall_at_pct: RecallStat,
    pub sweep: SweepReport,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall_at_k.iter().find(|s| s.k == k).map(|s| s.recall)
    }

    /// Flat CSV rows: `kind,segment,k,r_th,recall,hits,eligible`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,segment,k,r_th,recall,hits,eligible\n");
        let mut row = |kind: &str, seg: &str, k: usize, r: f64, recall: Option<f64>, hits: usize, el: usize| {
            let rec = recall.map_or_else(String::new, |v| v.to_string());
            s.push_str(&format!("{kind},{seg},{k},{r},{rec},{hits},{el}\n"));
        };
        for st in &self.recall_at_k {
            row("recall_at_k", "all", st.k, st.r_th, Some(st.recall), st.hits, st.eligible);
        }
        let p = &self.recall_at_pct;
        row("recall_at_pct", "all", p.k, p.r_th, Some(p.recall), p.hits, p.eligible);
        for pt in &self.sweep.overall {
            row("sweep", "all", pt.k, pt.r_th, pt.recall, pt.hits, pt.eligible);
        }
        for (seg, pts) in &self.sweep.per_segment {
            for pt in pts {
                row("sweep", &seg.to_string(), pt.k, pt.r_th, pt.recall, pt.hits, pt.eligible);
            }
        }
        s
    }
}

/// Evaluates precomputed descriptors (aligned with `records`). Queries are
/// scans with `pass_id >= 1`; the database is every scan, filtered per query
/// by the temporal exclusion rule.
pub fn evaluate_descriptors(records: &[ScanRecord], descriptors: &[Vec<f64>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let db = build_db(descriptors, records)?;
    let queries: Vec<Query> = records
        .iter()
        .zip(descriptors)
        .filter(|(r, _)| r.pass_id >= 1)
        .map(|(r, d)| Query::from_record(r, d.clone()))
        .collect();
    if queries.is_empty() {
        return Err(Error::UndefinedMetric("sequence has no revisit (pass_id >= 1) queries".into()));
    }
    let ranked = rank_queries(
        &db,
        &queries,
        Exclusion::Temporal {
            window: cfg.exclusion_window,
        },
    )?;
    let recall_at_k = cfg
        .k_list
        .iter()
        .map(|&k| recall_from_ranked(&ranked, k, cfg.r_th))
        .collect::<Result<Vec<_>>>()?;
    let recall_at_pct = recall_from_ranked(&ranked, k_for_percent(cfg.pct, db.len()), cfg.r_th)?;
    let sweep = segment_sweep(&ranked, &cfg.sweep_k, &cfg.sweep_radii)?;
    Ok(EvalReport {
        config: cfg.clone(),
        n_queries: queries.len(),
        n_db: db.len(),
        recall_at_k,
        recall_at_pct,
        sweep,
    })
}

/// Descriptors for every scan, computed in parallel.
pub fn compute_descriptors(features: &[LocalFeatureSet], params: &HeadParams) -> Result<Vec<Vec<f64>>> {
    features
        .par_iter()
        .map(|f| head::head_forward(f, params).map(|(d, _)| d.0.as_slice().to_vec()))
        .collect()
}

/// Descriptors from scans already prepared for `params.flags`.
pub fn compute_descriptors_prepared(scans: &[head::PreparedScan], params: &HeadParams) -> Result<Vec<Vec<f64>>> {
    scans
        .par_iter()
        .map(|s| head::forward_prepared(s, params).map(|(d, _): (Descriptor, _)| d.0.as_slice().to_vec()))
        .collect()
}

pub fn evaluate_sequence(records: &[ScanRecord], features: &[LocalFeatureSet], params: &HeadParams, cfg: &EvalConfig) -> Result<EvalReport> {
    if records.len() != features.len() {
        return Err(Error::Argument("records and features are not aligned".into()));
    }
    let desc = compute_descriptors(features, params)?;
    evaluate_descriptors(records, &desc, cfg)
}

/// A named sequence for cross-validation.
#[derive(Clone, Debug)]
pub struct NamedSequence {
    pub name: String,
    pub records: Vec<ScanRecord>,
    pub features: Vec<LocalFeatureSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub train_sequences: Vec<String>,
    pub tuples_per_epoch: usize,
    pub final_h: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldReport>,
    /// Arithmetic means over folds: recall@1 and recall@pct.
    pub mean_recall_at_1: f64,
    pub mean_recall_at_pct: f64,
}

impl CrossValReport {
    /// Table layout: one row per held-out sequence plus a MEAN row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,recall_at_1,recall_at_pct\n");
        for f in &self.folds {
            s.push_str(&format!(
                "{},{},{}\n",
                f.held_out,
                f.report.recall_at(1).unwrap_or(f64::NAN),
                f.report.recall_at_pct.recall
            ));
        }
        s.push_str(&format!("MEAN,{},{}\n", self.mean_recall_at_1, self.mean_recall_at_pct));
        s
    }
}

/// Leave-one-out: for each sequence, train on the union of the others'
/// tuples starting from `init`, then evaluate on the held-out one.
pub fn cross_validate(
    sequences: &[NamedSequence],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    init: &HeadParams,
) -> Result<CrossValReport> {
    if sequences.len() < 2 {
        return Err(Error::Argument("leave-one-out needs at least two sequences".into()));
    }
    let mut eval_cfg = eval_cfg.clone();
    if !eval_cfg.k_list.contains(&1) {
        eval_cfg.k_list.insert(0, 1);
    }
    let prepared = sequences
        .iter()
        .map(|s| TrainingSequence::prepare(s.records.clone(), &s.features, init))
        .collect::<Result<Vec<_>>>()?;
    let mut folds = Vec::with_capacity(sequences.len());
    for (held, seq) in sequences.iter().enumerate() {
        let train_set: Vec<TrainingSequence> = prepared
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held)
            .map(|(_, s)| s.clone())
            .collect();
        let outcome = trainer::train_sequences(&train_set, train_cfg, init.clone(), None)?;
        let desc = compute_descriptors_prepared(&prepared[held].scans, &outcome.params)?;
        let report = evaluate_descriptors(&seq.records, &desc, &eval_cfg)?;
        folds.push(FoldReport {
            held_out: seq.name.clone(),
            train_sequences: sequences
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != held)
                .map(|(_, s)| s.name.clone())
                .collect(),
            tuples_per_epoch: outcome.tuples_per_epoch,
            final_h: outcome.params.h,
            report,
        });
    }
    let n = folds.len() as f64;
    let mean_recall_at_1 = folds.iter().map(|f| f.report.recall_at(1).unwrap()).sum::<f64>() / n;
    let mean_recall_at_pct = folds.iter().map(|f| f.report.recall_at_pct.recall).sum::<f64>() / n;
    Ok(CrossValReport {
        folds,
        mean_recall_at_1,
        mean_recall_at_pct,
    })
}

pub const DESCRIPTOR_MAGIC: &[u8; 6] = b"SOAPD\0";
pub const DESCRIPTOR_VERSION: u32 = 1;
const DESCRIPTOR_HEADER: usize = 6 + 4 + 4 + 4;

/// Descriptors keyed by scan id, as stored on disk (f32 precision).
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
}

impl DescriptorFile {
    /// Rows reordered to follow `records`; every record must be present.
    pub fn aligned_to(&self, records: &[ScanRecord]) -> Result<Vec<Vec<f64>>> {
        let index: HashMap<u64, usize> = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        records
            .iter()
            .map(|r| {
                index
                    .get(&r.scan_id)
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::Reference(format!("no descriptor for scan {}", r.scan_id)))
            })
            .collect()
    }
}

pub fn encode_descriptors(file: &DescriptorFile) -> Result<Vec<u8>> {
    let d = file.rows.first().map_or(0, Vec::len);
    if file.ids.len() != file.rows.len() || file.rows.iter().any(|r| r.len() != d) {
        return Err(Error::Argument("descriptor rows are ragged or misaligned with ids".into()));
    }
    let n = file.ids.len();
    let mut out = Vec::with_capacity(DESCRIPTOR_HEADER + 8 * n + 4 * n * d);
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for id in &file.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for r in &file.rows {
        for v in r {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorFile> {
    if bytes.len() < DESCRIPTOR_HEADER || &bytes[..6] != DESCRIPTOR_MAGIC {
        return Err(Error::Format("not a descriptor file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(6) as u32 != DESCRIPTOR_VERSION {
        return Err(Error::Format(format!("unsupported descriptor file version {}", u32_at(6))));
    }
    let (n, d) = (u32_at(10), u32_at(14));
    if bytes.len() != DESCRIPTOR_HEADER + 8 * n + 4 * n * d {
        return Err(Error::Format(format!("descriptor file size does not match N={n}, d={d}")));
    }
    let ids_end = DESCRIPTOR_HEADER + 8 * n;
    let ids = bytes[DESCRIPTOR_HEADER..ids_end]
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let vals: Vec<f64> = bytes[ids_end..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let rows = if d == 0 {
        vec![Vec::new(); n]
    } else {
        vals.chunks_exact(d).map(<[f64]>::to_vec).collect()
    };
    Ok(DescriptorFile { ids, rows })
}

pub fn save_descriptors(file: &DescriptorFile, path: &Path) -> Result<()> {
    fs::write(path, encode_descriptors(file)?)?;
    Ok(())
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorFile> {
    decode_descriptors(&fs::read(path)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
