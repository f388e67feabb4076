//! Tuple mining, the lazy triplet loss, AdamW and the training loop.
//!
//! Only the head parameters (`h`, `W`) are trained; local features are fixed
//! inputs. One optimizer step is taken per tuple.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ScanRecord;
use crate::head::{self, HeadParams, PreparedScan, H_MIN};
use crate::localfeat::LocalFeatureSet;
use crate::seed;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Anchor-positive search radius (m).
    pub r_pos: f64,
    /// Minimum distance between consecutive retained anchors (m).
    pub anchor_spacing: f64,
    /// Negatives must be farther than this from the anchor (m).
    pub neg_radius: f64,
    pub m_neg: usize,
    pub margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r_pos: 2.0,
            anchor_spacing: 0.5,
            neg_radius: 10.0,
            m_neg: 20,
            margin: 0.5,
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_pos", self.r_pos),
            ("anchor_spacing", self.anchor_spacing),
            ("neg_radius", self.neg_radius),
            ("margin", self.margin),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.m_neg == 0 {
            return Err(Error::Argument("m_neg must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Argument("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anchor, its positive and the sampled negatives, all by scan id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub anchor_id: u64,
    pub positive_id: u64,
    pub negative_ids: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningOutcome {
    pub tuples: Vec<TrainingTuple>,
    /// Anchors with a positive whose negative pool was smaller than `m_neg`.
    pub skipped_short_pool: usize,
}

/// Nearest valid positive for `anchor`: same segment, different pass, within
/// `r_pos`. Ties go to the lower scan id.
pub fn find_positive(records: &[ScanRecord], anchor: usize, r_pos: f64) -> Option<usize> {
    let a = &records[anchor];
    let mut best: Option<(f64, u64, usize)> = None;
    for (j, r) in records.iter().enumerate() {
        if j == anchor || r.segment_id != a.segment_id || r.pass_id == a.pass_id {
            continue;
        }
        let d = (r.position - a.position).norm();
        if d > r_pos {
            continue;
        }
        let cand = (d, r.scan_id, j);
        if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
            best = Some(cand);
        }
    }
    best.map(|b| b.2)
}

/// Scans that may serve as negatives for `anchor`.
pub fn negative_pool(records: &[ScanRecord], anchor: usize, neg_radius: f64) -> Vec<usize> {
    let a = &records[anchor];
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.segment_id != a.segment_id && (r.position - a.position).norm() > neg_radius)
        .map(|(j, _)| j)
        .collect()
}

fn sample_negatives(pool: &[usize], m: usize, rng: &mut impl rand::Rng) -> Option<Vec<usize>> {
    if pool.len() < m {
        return None;
    }
    Some(
        rand::seq::index::sample(rng, pool.len(), m)
            .into_iter()
            .map(|i| pool[i])
            .collect(),
    )
}

/// Anchor/positive index pairs in scan order, with greedy anchor thinning.
fn anchor_pairs(records: &[ScanRecord], cfg: &TrainConfig) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut last: Option<usize> = None;
    for i in 0..records.len() {
        let Some(p) = find_positive(records, i, cfg.r_pos) else {
            continue;
        };
        if let Some(l) = last {
            if (records[i].position - records[l].position).norm() < cfg.anchor_spacing {
                continue;
            }
        }
        last = Some(i);
        pairs.push((i, p));
    }
    pairs
}

/// Mines training tuples. `records` must be in scan order with pass ids set.
pub fn mine_tuples(records: &[ScanRecord], cfg: &TrainConfig) -> Result<MiningOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Argument("no scan records to mine".into()));
    }
    let mut rng = seed::rng(seed::sub_seed(cfg.seed, "mining"));
    let mut out = MiningOutcome::default();
    for (a, p) in anchor_pairs(records, cfg) {
        let pool = negative_pool(records, a, cfg.neg_radius);
        match sample_negatives(&pool, cfg.m_neg, &mut rng) {
            Some(negs) => out.tuples.push(TrainingTuple {
                anchor_id: records[a].scan_id,
                positive_id: records[p].scan_id,
                negative_ids: negs.iter().map(|&j| records[j].scan_id).collect(),
            }),
            None => out.skipped_short_pool += 1,
        }
    }
    if out.skipped_short_pool > 0 {
        log::warn!(
            "{} anchors skipped: fewer than {} negatives available",
            out.skipped_short_pool,
            cfg.m_neg
        );
    }
    Ok(out)
}

/// Result of the lazy triplet loss for one tuple.
#[derive(Clone, Debug)]
pub struct TripletLoss {
    pub loss: f64,
    pub d_ap: f64,
    pub d_an: f64,
    /// Index of the hardest (closest) negative.
    pub hardest: usize,
    pub grad_anchor: DVector<f64>,
    pub grad_positive: DVector<f64>,
    /// Zero for every negative except `hardest` (when the hinge is active).
    pub grad_negatives: Vec<DVector<f64>>,
}

/// `max(d_ap - d_an + margin, 0)`.
pub fn hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

fn unit_diff(a: &DVector<f64>, b: &DVector<f64>) -> (f64, DVector<f64>) {
    let diff = a - b;
    let d = diff.norm();
    if d > 0.0 {
        (d, diff / d)
    } else {
        (0.0, DVector::zeros(a.len()))
    }
}

/// Lazy triplet loss with the hardest negative. Exactly one negative gets a
/// gradient; ties go to the lowest index. At the hinge point (`loss == 0`)
/// every gradient is zero.
pub fn lazy_triplet_loss(
    anchor: &DVector<f64>,
    positive: &DVector<f64>,
    negatives: &[DVector<f64>],
    margin: f64,
) -> Result<TripletLoss> {
    if negatives.is_empty() {
        return Err(Error::Argument("lazy triplet loss needs at least one negative".into()));
    }
    let (d_ap, u_ap) = unit_diff(anchor, positive);
    let mut hardest = 0;
    let mut d_an = f64::INFINITY;
    for (i, n) in negatives.iter().enumerate() {
        let d = (anchor - n).norm();
        if d < d_an {
            d_an = d;
            hardest = i;
        }
    }
    let loss = hinge(d_ap, d_an, margin);
    let dim = anchor.len();
    let mut grad_negatives = vec![DVector::zeros(dim); negatives.len()];
    let (grad_anchor, grad_positive) = if loss > 0.0 {
        let (_, u_an) = unit_diff(anchor, &negatives[hardest]);
        grad_negatives[hardest] = u_an.clone();
        (&u_ap - &u_an, -u_ap)
    } else {
        (DVector::zeros(dim), DVector::zeros(dim))
    };
    Ok(TripletLoss {
        loss,
        d_ap,
        d_an,
        hardest,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m_w: DMatrix<f64>,
    pub v_w: DMatrix<f64>,
    pub m_h: f64,
    pub v_h: f64,
    pub step: u64,
    /// Completed epochs, so a resumed run continues the per-epoch seeds.
    pub epochs_done: u64,
}

impl OptimizerState {
    pub fn new(p: &HeadParams) -> Self {
        Self {
            m_w: DMatrix::zeros(p.w.nrows(), p.w.ncols()),
            v_w: DMatrix::zeros(p.w.nrows(), p.w.ncols()),
            m_h: 0.0,
            v_h: 0.0,
            step: 0,
            epochs_done: 0,
        }
    }
}

/// Gradients of the loss wrt the trainable parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub w: DMatrix<f64>,
    pub h: f64,
}

/// One AdamW step. `W` gets decoupled weight decay; `h` is not decayed and is
/// clamped to `[H_MIN, 1]` afterwards. Parameters of disabled stages are left
/// alone.
pub fn adamw_step(p: &mut HeadParams, g: &ParamGrads, st: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if g.w.shape() != p.w.shape() || st.m_w.shape() != p.w.shape() {
        return Err(Error::Usage("gradient/optimizer shapes do not match parameters".into()));
    }
    if !g.h.is_finite() || g.w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            st.step + 1
        )));
    }
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    if p.flags.use_fc {
        let decay = 1.0 - lr * weight_decay;
        let params = p.w.as_mut_slice().iter_mut();
        let moments = st.m_w.as_mut_slice().iter_mut().zip(st.v_w.as_mut_slice().iter_mut());
        for ((w, (m, v)), &gk) in params.zip(moments).zip(g.w.as_slice()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gk;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gk * gk;
            *w = *w * decay - lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }
    if p.flags.use_pn {
        st.m_h = ADAM_BETA1 * st.m_h + (1.0 - ADAM_BETA1) * g.h;
        st.v_h = ADAM_BETA2 * st.v_h + (1.0 - ADAM_BETA2) * g.h * g.h;
        p.h -= lr * (st.m_h / bc1) / ((st.v_h / bc2).sqrt() + ADAM_EPS);
        p.h = p.h.clamp(H_MIN, 1.0);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub h_value: f64,
}

/// One sequence prepared for training: records plus parameter-independent
/// per-scan head inputs, aligned by index.
#[derive(Clone, Debug)]
pub struct TrainingSequence {
    pub records: Vec<ScanRecord>,
    pub scans: Vec<PreparedScan>,
}

impl TrainingSequence {
    pub fn prepare(records: Vec<ScanRecord>, features: &[LocalFeatureSet], params: &HeadParams) -> Result<Self> {
        if records.len() != features.len() {
            return Err(Error::Argument(format!(
                "{} records but {} feature sets",
                records.len(),
                features.len()
            )));
        }
        for (r, f) in records.iter().zip(features) {
            if r.scan_id != f.source_scan_id {
                return Err(Error::Reference(format!(
                    "record {} paired with features of scan {}",
                    r.scan_id, f.source_scan_id
                )));
            }
        }
        let scans = features
            .par_iter()
            .map(|f| head::prepare(f, params.flags))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, scans })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub state: OptimizerState,
    pub log: Vec<EpochLog>,
    pub tuples_per_epoch: usize,
}

/// Index form of a tuple: (sequence, anchor, positive, negative pool).
struct TupleSlot {
    seq: usize,
    anchor: usize,
    positive: usize,
    pool: Vec<usize>,
}

/// Trains on the union of the sequences' mined tuples.
///
/// Each epoch shuffles the tuples and resamples negatives, both from
/// per-epoch sub-seeds of `cfg.seed`, so runs are bit-reproducible.
pub fn train_sequences(
    sequences: &[TrainingSequence],
    cfg: &TrainConfig,
    init: HeadParams,
    resume: Option<OptimizerState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    let mut slots = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        let mined = mine_tuples(&seq.records, cfg)?;
        let index: HashMap<u64, usize> = seq.records.iter().enumerate().map(|(i, r)| (r.scan_id, i)).collect();
        for t in mined.tuples {
            let anchor = index[&t.anchor_id];
            slots.push(TupleSlot {
                seq: s,
                anchor,
                positive: index[&t.positive_id],
                pool: negative_pool(&seq.records, anchor, cfg.neg_radius),
            });
        }
    }
    let mut params = init;
    let mut state = match resume {
        Some(st) => {
            if st.m_w.shape() != params.w.shape() {
                return Err(Error::Usage("optimizer state does not match the model shape".into()));
            }
            st
        }
        None => OptimizerState::new(&params),
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            state,
            log,
            tuples_per_epoch: slots.len(),
        });
    }
    if slots.is_empty() {
        return Err(Error::Argument(
            "no training tuples: need revisits of the same segment within r_pos".into(),
        ));
    }

    for _ in 0..cfg.epochs {
        let epoch = state.epochs_done;
        let mut order: Vec<usize> = (0..slots.len()).collect();
        order.shuffle(&mut seed::rng(seed::indexed_seed(cfg.seed, "shuffle", epoch)));
        let mut neg_rng = seed::rng(seed::indexed_seed(cfg.seed, "negatives", epoch));
        let mut loss_sum = 0.0;
        let mut active = 0usize;
        let mut used = 0usize;
        for &ti in &order {
            let slot = &slots[ti];
            let Some(negs) = sample_negatives(&slot.pool, cfg.m_neg, &mut neg_rng) else {
                continue;
            };
            let scans = &sequences[slot.seq].scans;
            let (loss, grads) = tuple_step(scans, slot.anchor, slot.positive, &negs, &params, cfg.margin)?;
            loss_sum += loss;
            used += 1;
            if loss > 0.0 {
                active += 1;
            }
            adamw_step(&mut params, &grads, &mut state, cfg.lr, cfg.weight_decay).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
        }
        state.epochs_done += 1;
        let denom = used.max(1) as f64;
        log.push(EpochLog {
            epoch: state.epochs_done,
            mean_loss: loss_sum / denom,
            active_fraction: active as f64 / denom,
            h_value: params.h,
        });
        log::debug!(
            "epoch {} loss {:.5} active {:.3} h {:.4}",
            state.epochs_done,
            loss_sum / denom,
            active as f64 / denom,
            params.h
        );
    }
    Ok(TrainOutcome {
        params,
        state,
        log,
        tuples_per_epoch: slots.len(),
    })
}

/// Forward all descriptors of a tuple, evaluate the loss and backpropagate
/// through the (at most three) descriptors that receive a gradient.
fn tuple_step(
    scans: &[PreparedScan],
    anchor: usize,
    positive: usize,
    negatives: &[usize],
    params: &HeadParams,
    margin: f64,
) -> Result<(f64, ParamGrads)> {
    let batch: Vec<&PreparedScan> = [anchor, positive].iter().chain(negatives).map(|&j| &scans[j]).collect();
    let caches = head::forward_prepared_batch(&batch, params)?;
    let neg_desc: Vec<DVector<f64>> = caches[2..].iter().map(|c| c.descriptor.0.clone()).collect();
    let (ca, cp) = (&caches[0], &caches[1]);
    let tl = lazy_triplet_loss(&ca.descriptor.0, &cp.descriptor.0, &neg_desc, margin)?;
    let mut grads = ParamGrads {
        w: DMatrix::zeros(params.w.nrows(), params.w.ncols()),
        h: 0.0,
    };
    if tl.loss > 0.0 {
        let parts = [
            (ca, &tl.grad_anchor),
            (cp, &tl.grad_positive),
            (&caches[2 + tl.hardest], &tl.grad_negatives[tl.hardest]),
        ];
        for (cache, g) in parts {
            grads.h += head::accumulate_prepared(cache, params, g, &mut grads.w)?;
        }
    }
    Ok((tl.loss, grads))
}

/// Single-sequence convenience wrapper around [`train_sequences`].
pub fn train(records: &[ScanRecord], features: &[LocalFeatureSet], cfg: &TrainConfig, init: HeadParams) -> Result<TrainOutcome> {
    let seq = TrainingSequence::prepare(records.to_vec(), features, &init)?;
    train_sequences(std::slice::from_ref(&seq), cfg, init, None)
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "epoch,mean_loss,active_fraction,h_value")?;
    for e in log {
        writeln!(f, "{},{},{},{}", e.epoch, e.mean_loss, e.active_fraction, e.h_value)?;
    }
    f.flush()?;
    Ok(())
}

pub const STATE_MAGIC: &[u8; 6] = b"SOAPO\0";
pub const STATE_VERSION: u32 = 1;
const STATE_HEADER: usize = 6 + 4 + 8 + 8 + 4 + 4 + 8 + 8;

/// Optimizer sidecar: magic, version, step, epochs, rows, cols, m_h, v_h,
/// then `m_W` and `v_W` row-major, all little-endian.
pub fn encode_state(st: &OptimizerState) -> Vec<u8> {
    let (r, c) = st.m_w.shape();
    let mut out = Vec::with_capacity(STATE_HEADER + 16 * r * c);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&st.step.to_le_bytes());
    out.extend_from_slice(&st.epochs_done.to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&st.m_h.to_le_bytes());
    out.extend_from_slice(&st.v_h.to_le_bytes());
    for m in [&st.m_w, &st.v_w] {
        for i in 0..r {
            for j in 0..c {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<OptimizerState> {
    if bytes.len() < STATE_HEADER || &bytes[..6] != STATE_MAGIC {
        return Err(Error::Format("not an optimizer state file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(6) != STATE_VERSION {
        return Err(Error::Format(format!("unsupported optimizer state version {}", u32_at(6))));
    }
    let (r, c) = (u32_at(26) as usize, u32_at(30) as usize);
    if bytes.len() != STATE_HEADER + 16 * r * c {
        return Err(Error::Format("optimizer state size does not match its header".into()));
    }
    let body = &bytes[STATE_HEADER..];
    let read = |off: usize| {
        DMatrix::from_row_iterator(
            r,
            c,
            body[off..off + 8 * r * c]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
        )
    };
    Ok(OptimizerState {
        step: u64_at(10),
        epochs_done: u64_at(18),
        m_h: f64_at(34),
        v_h: f64_at(42),
        m_w: read(0),
        v_w: read(8 * r * c),
    })
}

pub fn save_state(st: &OptimizerState, path: &Path) -> Result<()> {
    fs::write(path, encode_state(st))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<OptimizerState> {
    decode_state(&fs::read(path)?)
}
