//! Descriptor head: second-order average pooling, Log-Euclidean projection,
//! signed power normalization and a bias-free linear projection followed by
//! L2 normalization. Every stage has a hand-written backward pass.
//!
//! The pooled and log-projected matrices do not depend on trainable
//! parameters, so training precomputes them once per scan ([`prepare`]) and
//! runs only the parameter-dependent tail ([`forward_prepared`]).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::localfeat::LocalFeatureSet;
use crate::seed;

/// Lower clamp for the power exponent.
pub const H_MIN: f64 = 0.01;
pub const H_INIT: f64 = 0.75;
/// Relative regularization added to the pooled matrix before the log.
pub const LOG_EPS: f64 = 1e-6;
/// Floor on the trace scale used by the regularizer.
pub const EPS_FLOOR: f64 = 1e-12;
/// Eigenvalue pairs closer than this (relative to the largest) use the
/// diagonal limit in the log backward.
pub const DEGENERATE_GAP: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Which optional stages of the head are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StageFlags {
    pub use_log: bool,
    pub use_pn: bool,
    pub use_fc: bool,
}

impl StageFlags {
    pub const FULL: Self = Self {
        use_log: true,
        use_pn: true,
        use_fc: true,
    };
    pub const POOL_ONLY: Self = Self {
        use_log: false,
        use_pn: false,
        use_fc: false,
    };

    pub fn bits(self) -> u8 {
        self.use_log as u8 | (self.use_pn as u8) << 1 | (self.use_fc as u8) << 2
    }

    pub fn from_bits(b: u8) -> Result<Self> {
        if b & !0b111 != 0 {
            return Err(Error::Format(format!("unknown stage flag bits {b:#04x}")));
        }
        Ok(Self {
            use_log: b & 1 != 0,
            use_pn: b & 2 != 0,
            use_fc: b & 4 != 0,
        })
    }

    /// Short label, e.g. `FC+LOG+PN` or `none`.
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.use_fc {
            parts.push("FC");
        }
        if self.use_log {
            parts.push("LOG");
        }
        if self.use_pn {
            parts.push("PN");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for StageFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// Trainable head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Power-normalization exponent, kept in `[H_MIN, 1]`.
    pub h: f64,
    /// `d x c²` projection weights. Present even when the FC stage is off.
    pub w: DMatrix<f64>,
    pub flags: StageFlags,
}

impl HeadParams {
    /// Weights drawn from `uniform(-1/c, 1/c)`.
    pub fn init(c: usize, d: usize, flags: StageFlags, h: f64, seed: u64) -> Result<Self> {
        if c < 2 || d < 1 {
            return Err(Error::Argument(format!("invalid head shape c={c}, d={d}")));
        }
        let bound = 1.0 / c as f64;
        let dist = Uniform::new(-bound, bound).expect("valid bounds");
        let mut rng = seed::rng(seed);
        let w = DMatrix::from_fn(d, c * c, |_, _| dist.sample(&mut rng));
        let p = Self { h, w, flags };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(H_MIN..=1.0).contains(&self.h) {
            return Err(Error::Validation(format!("h = {} outside [{H_MIN}, 1]", self.h)));
        }
        let c = self.c();
        if c * c != self.w.ncols() {
            return Err(Error::Validation(format!(
                "weight matrix has {} columns, not a square count",
                self.w.ncols()
            )));
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite projection weight".into()));
        }
        Ok(())
    }

    pub fn c(&self) -> usize {
        (self.w.ncols() as f64).sqrt().round() as usize
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn descriptor_dim(&self) -> usize {
        if self.flags.use_fc {
            self.d()
        } else {
            self.w.ncols()
        }
    }
}

/// Symmetric positive semidefinite `c x c` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Argument(format!("matrix is {}x{}", m.nrows(), m.ncols())));
    }
    let tol = SYMMETRY_TOL * m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::Argument(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Unit-norm place descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(pub DVector<f64>);

impl Descriptor {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `(1/n') Σ f_i f_iᵀ`.
///
/// Rows are accumulated in a canonical (sorted) order, which makes the result
/// bit-identical under any permutation of the input rows.
pub fn soap_pool(fs: &LocalFeatureSet) -> Result<SpdMatrix> {
    let f = &fs.features;
    let (n, c) = f.shape();
    if n == 0 {
        return Err(Error::Argument("cannot pool an empty feature set".into()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature in pooling input".into()));
    }
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| f.row(i).iter().copied().collect()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = DMatrix::<f64>::zeros(c, c);
    for r in &rows {
        for i in 0..c {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..c {
                acc[(i, j)] += ri * r[j];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for i in 0..c {
        for j in i..c {
            let v = acc[(i, j)] * inv;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    Ok(SpdMatrix(acc))
}

/// Gradient wrt the feature rows given the gradient `g` at the pooled matrix:
/// `dL/df_i = (g + gᵀ) f_i / n'`.
pub fn soap_pool_backward(fs: &LocalFeatureSet, g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = fs.len() as f64;
    let gs = (g + g.transpose()) / n;
    &fs.features * gs
}

/// Eigendecomposition kept from the forward matrix log.
#[derive(Clone, Debug)]
pub struct LogCache {
    /// Eigenpairs of the regularized matrix.
    pub eigen: SymEigen,
    /// Derivative of the regularizer's ε wrt the trace, 0 when the floor is active.
    eps_slope: f64,
}

/// Principal matrix logarithm of a symmetric PSD matrix via its eigenvalues.
///
/// The input is first regularized as `S + εI` with
/// `ε = eps * max(trace(S)/c, EPS_FLOOR)`; `eps = 0` disables regularization.
pub fn logm_spd(s: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, LogCache)> {
    check_symmetric(s)?;
    let c = s.nrows();
    let mean_diag = s.trace() / c as f64;
    let (scale, eps_slope) = if mean_diag > EPS_FLOOR {
        (mean_diag, eps / c as f64)
    } else {
        (EPS_FLOOR, 0.0)
    };
    let mut reg = s.clone();
    for i in 0..c {
        reg[(i, i)] += eps * scale;
    }
    let eigen = linalg::sym_eigen(&reg)?;
    let lmin = eigen.values[c - 1];
    if !(lmin > 0.0) {
        return Err(Error::Numeric(format!(
            "matrix log needs a positive definite input; smallest eigenvalue {lmin:.3e}, largest {:.3e}",
            eigen.values[0]
        )));
    }
    let mut out = linalg::reconstruct(&eigen, f64::ln);
    symmetrize(&mut out);
    Ok((out, LogCache { eigen, eps_slope }))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Daleckii-Krein backward of the matrix log:
/// `Q (K ∘ Qᵀ sym(G) Q) Qᵀ` with `K_ij = (ln λi - ln λj)/(λi - λj)` and
/// `K_ii = 1/λi`, plus the trace-dependence of the regularizer.
pub fn logm_spd_backward(cache: &LogCache, g: &DMatrix<f64>) -> DMatrix<f64> {
    let q = &cache.eigen.vectors;
    let lam = &cache.eigen.values;
    let c = lam.len();
    let lmax = lam[0];
    let gs = (g + g.transpose()) * 0.5;
    let mut inner = q.transpose() * gs * q;
    for i in 0..c {
        for j in 0..c {
            let (li, lj) = (lam[i], lam[j]);
            let delta = li - lj;
            let k = if delta.abs() < DEGENERATE_GAP * lmax {
                1.0 / li
            } else {
                (delta / lj).ln_1p() / delta
            };
            inner[(i, j)] *= k;
        }
    }
    let mut out = q * inner * q.transpose();
    symmetrize(&mut out);
    if cache.eps_slope != 0.0 {
        let tr = out.trace() * cache.eps_slope;
        for i in 0..c {
            out[(i, i)] += tr;
        }
    }
    out
}

/// Entry-wise `sgn(v) |v|^h`.
pub fn power_normalize(m: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    m.map(|v| if v == 0.0 { 0.0 } else { v.signum() * v.abs().powf(h) })
}

/// Returns `(dL/dM, dL/dh)`. Both partials are defined as 0 at `v = 0`.
pub fn power_normalize_backward(m: &DMatrix<f64>, h: f64, g: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut dm = DMatrix::zeros(m.nrows(), m.ncols());
    let mut dh = 0.0;
    for (k, (&v, &gv)) in m.iter().zip(g.iter()).enumerate() {
        if v == 0.0 {
            continue;
        }
        let a = v.abs();
        let p = a.powf(h);
        dm[k] = gv * h * p / a;
        dh += gv * v.signum() * p * a.ln();
    }
    (dm, dh)
}

/// Parameter-independent part of the head for one scan: the pooled matrix,
/// optionally passed through the matrix log.
#[derive(Clone, Debug)]
pub struct PreparedScan {
    pub stage_input: DMatrix<f64>,
    pub log_applied: bool,
}

pub fn prepare(fs: &LocalFeatureSet, flags: StageFlags) -> Result<PreparedScan> {
    let pooled = soap_pool(fs)?.into_inner();
    if flags.use_log {
        let (m, _) = logm_spd(&pooled, LOG_EPS)?;
        Ok(PreparedScan {
            stage_input: m,
            log_applied: true,
        })
    } else {
        Ok(PreparedScan {
            stage_input: pooled,
            log_applied: false,
        })
    }
}

/// Intermediates of the parameter-dependent tail (PN, flatten, FC, L2).
#[derive(Clone, Debug)]
pub struct TailCache {
    pn_input: DMatrix<f64>,
    flat: DVector<f64>,
    pre_norm: DVector<f64>,
    pre_norm_len: f64,
    pub descriptor: Descriptor,
}

fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let c = m.nrows();
    DVector::from_fn(c * c, |k, _| m[(k / c, k % c)])
}

fn unflatten_row_major(v: &DVector<f64>, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(c, c, |i, j| v[i * c + j])
}

fn tail_forward(m: &DMatrix<f64>, p: &HeadParams) -> Result<TailCache> {
    let c = m.nrows();
    if c != p.c() {
        return Err(Error::Usage(format!(
            "feature dimension {c} does not match head dimension {}",
            p.c()
        )));
    }
    let rescaled = if p.flags.use_pn {
        power_normalize(m, p.h)
    } else {
        m.clone()
    };
    let flat = flatten_row_major(&rescaled);
    let pre_norm = if p.flags.use_fc { &p.w * &flat } else { flat.clone() };
    let len = pre_norm.norm();
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::Numeric(format!("descriptor pre-norm length is {len}")));
    }
    let descriptor = Descriptor(&pre_norm / len);
    Ok(TailCache {
        pn_input: m.clone(),
        flat,
        pre_norm,
        pre_norm_len: len,
        descriptor,
    })
}

/// Gradients of the tail: (dW, dh, gradient at the tail input).
fn tail_backward(t: &TailCache, p: &HeadParams, upstream: &DVector<f64>) -> Result<(DMatrix<f64>, f64, DMatrix<f64>)> {
    let c = t.pn_input.nrows();
    if upstream.len() != t.pre_norm.len() || c != p.c() {
        return Err(Error::Usage("cache does not match parameters or upstream gradient".into()));
    }
    let d = &t.descriptor.0;
    let dy = (upstream - d * d.dot(upstream)) / t.pre_norm_len;
    let (dw, dflat) = if p.flags.use_fc {
        (&dy * t.flat.transpose(), p.w.tr_mul(&dy))
    } else {
        (DMatrix::zeros(p.w.nrows(), p.w.ncols()), dy)
    };
    let g_rescaled = unflatten_row_major(&dflat, c);
    let (g_in, dh) = if p.flags.use_pn {
        power_normalize_backward(&t.pn_input, p.h, &g_rescaled)
    } else {
        (g_rescaled, 0.0)
    };
    Ok((dw, dh, g_in))
}

/// Descriptor from a prepared scan.
pub fn forward_prepared(scan: &PreparedScan, p: &HeadParams) -> Result<(Descriptor, TailCache)> {
    if scan.log_applied != p.flags.use_log {
        return Err(Error::Usage("prepared scan was built with different stage flags".into()));
    }
    let t = tail_forward(&scan.stage_input, p)?;
    Ok((t.descriptor.clone(), t))
}

/// [`forward_prepared`] over several scans, sharing one matrix-matrix
/// product for the projection. Values agree with the single-scan path to
/// rounding, not bit for bit.
pub fn forward_prepared_batch(scans: &[&PreparedScan], p: &HeadParams) -> Result<Vec<TailCache>> {
    let c = p.c();
    let mut flats = DMatrix::zeros(c * c, scans.len());
    let mut inputs = Vec::with_capacity(scans.len());
    for (k, scan) in scans.iter().enumerate() {
        if scan.log_applied != p.flags.use_log {
            return Err(Error::Usage("prepared scan was built with different stage flags".into()));
        }
        let m = &scan.stage_input;
        if m.nrows() != c {
            return Err(Error::Usage(format!(
                "feature dimension {} does not match head dimension {c}",
                m.nrows()
            )));
        }
        let rescaled = if p.flags.use_pn { power_normalize(m, p.h) } else { m.clone() };
        flats.set_column(k, &flatten_row_major(&rescaled));
        inputs.push(m.clone());
    }
    let projected = if p.flags.use_fc { &p.w * &flats } else { flats.clone() };
    inputs
        .into_iter()
        .enumerate()
        .map(|(k, pn_input)| {
            let pre_norm = projected.column(k).into_owned();
            let len = pre_norm.norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::Numeric(format!("descriptor pre-norm length is {len}")));
            }
            Ok(TailCache {
                pn_input,
                flat: flats.column(k).into_owned(),
                descriptor: Descriptor(&pre_norm / len),
                pre_norm,
                pre_norm_len: len,
            })
        })
        .collect()
}

/// Parameter gradients `(dW, dh)` from a prepared-scan forward.
pub fn backward_prepared(cache: &TailCache, p: &HeadParams, dl_dd: &DVector<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (dw, dh, _) = tail_backward(cache, p, dl_dd)?;
    Ok((dw, dh))
}

/// Adds this scan's `dW` into `dw` in place and returns its `dh`. Same values
/// as [`backward_prepared`] without the temporary gradient matrix.
pub fn accumulate_prepared(cache: &TailCache, p: &HeadParams, dl_dd: &DVector<f64>, dw: &mut DMatrix<f64>) -> Result<f64> {
    let c = cache.pn_input.nrows();
    if dl_dd.len() != cache.pre_norm.len() || c != p.c() || dw.shape() != p.w.shape() {
        return Err(Error::Usage("cache does not match parameters or upstream gradient".into()));
    }
    let d = &cache.descriptor.0;
    let dy = (dl_dd - d * d.dot(dl_dd)) / cache.pre_norm_len;
    if p.flags.use_fc {
        dw.ger(1.0, &dy, &cache.flat, 1.0);
    }
    if !p.flags.use_pn {
        return Ok(0.0);
    }
    let dflat = if p.flags.use_fc { p.w.tr_mul(&dy) } else { dy };
    let (_, dh) = power_normalize_backward(&cache.pn_input, p.h, &unflatten_row_major(&dflat, c));
    Ok(dh)
}

/// Everything the full backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub features: LocalFeatureSet,
    pub pooled: SpdMatrix,
    pub log: Option<LogCache>,
    pub tail: TailCache,
}

pub fn head_forward(fs: &LocalFeatureSet, p: &HeadParams) -> Result<(Descriptor, ForwardCache)> {
    p.validate()?;
    let pooled = soap_pool(fs)?;
    let (stage_input, log) = if p.flags.use_log {
        let (m, cache) = logm_spd(pooled.matrix(), LOG_EPS)?;
        (m, Some(cache))
    } else {
        (pooled.matrix().clone(), None)
    };
    let tail = tail_forward(&stage_input, p)?;
    let d = tail.descriptor.clone();
    Ok((
        d,
        ForwardCache {
            features: fs.clone(),
            pooled,
            log,
            tail,
        },
    ))
}

/// Gradients of a scalar loss wrt features, projection weights and `h`.
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub features: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub h: f64,
}

pub fn head_backward(cache: &ForwardCache, p: &HeadParams, dl_dd: &DVector<f64>) -> Result<HeadGradients> {
    if cache.log.is_some() != p.flags.use_log || cache.features.dim() != p.c() {
        return Err(Error::Usage("stale forward cache for these parameters".into()));
    }
    let (w, h, g_stage) = tail_backward(&cache.tail, p, dl_dd)?;
    let g_pool = match &cache.log {
        Some(lc) => logm_spd_backward(lc, &g_stage),
        None => g_stage,
    };
    let features = soap_pool_backward(&cache.features, &g_pool);
    Ok(HeadGradients { features, w, h })
}

pub const MODEL_MAGIC: &[u8; 6] = b"SOAPM\0";
pub const MODEL_VERSION: u32 = 1;
const MODEL_HEADER: usize = 6 + 4 + 4 + 4 + 1 + 8;

/// Binary checkpoint: magic, version, c, d, stage flags, h, then `W`
/// row-major as little-endian f64.
pub fn encode_params(p: &HeadParams) -> Vec<u8> {
    let (d, cc) = p.w.shape();
    let mut out = Vec::with_capacity(MODEL_HEADER + 8 * d * cc);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.c() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(p.flags.bits());
    out.extend_from_slice(&p.h.to_le_bytes());
    for i in 0..d {
        for j in 0..cc {
            out.extend_from_slice(&p.w[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<HeadParams> {
    if bytes.len() < MODEL_HEADER || &bytes[..6] != MODEL_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(6) as u32;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let c = u32_at(10);
    let d = u32_at(14);
    let flags = StageFlags::from_bits(bytes[18])?;
    let h = f64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let cc = c * c;
    if bytes.len() != MODEL_HEADER + 8 * d * cc {
        return Err(Error::Format(format!(
            "checkpoint declares c={c}, d={d} but has {} payload bytes",
            bytes.len() - MODEL_HEADER
        )));
    }
    let w = DMatrix::from_row_iterator(
        d,
        cc,
        bytes[MODEL_HEADER..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
    );
    let p = HeadParams { h, w, flags };
    p.validate()?;
    Ok(p)
}

/// Writes the checkpoint plus a `<path>.txt` sidecar holding `config_echo`.
pub fn save_params(p: &HeadParams, path: &Path, config_echo: &str) -> Result<()> {
    fs::write(path, encode_params(p))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(side, config_echo)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<HeadParams> {
    decode_params(&fs::read(path)?)
}
