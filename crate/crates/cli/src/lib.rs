//! Command implementations behind the `soap3d` binary.
//!
//! Dataset directory layout (as written by `gen-synth`, and expected from
//! imported data):
//!
//! ```text
//! <data>/poses.csv
//! <data>/segments.csv
//! <data>/scans/<scan_id:06>.bin        (or .ply)
//! <data>/features/<scan_id:06>.soapf   (written by `extract`)
//! ```

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;
use soap3d::geom::{self, ScanRecord};
use soap3d::head::{self, HeadParams, StageFlags};
use soap3d::localfeat::{self, LocalFeatureSet, FEATURE_DIM};
use soap3d::retrieval::{self, DescriptorFile, EvalReport, NamedSequence};
use soap3d::synthgen;
use soap3d::trainer::{self, OptimizerState};

pub use config::RunConfig;

pub const MODEL_FILE: &str = "model.soapm";
pub const STATE_FILE: &str = "optimizer.soapo";

/// Stage combinations of the ablation table, in row order.
pub const ABLATION_ROWS: [StageFlags; 4] = [
    StageFlags::POOL_ONLY,
    StageFlags {
        use_log: false,
        use_pn: false,
        use_fc: true,
    },
    StageFlags {
        use_log: true,
        use_pn: false,
        use_fc: true,
    },
    StageFlags::FULL,
];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn provenance(cfg: &RunConfig) -> serde_json::Value {
    json!({ "seed": cfg.seed, "config": cfg.to_json() })
}

pub fn features_dir(data: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| data.join("features"), Path::to_path_buf)
}

pub fn feature_path(dir: &Path, scan_id: u64) -> PathBuf {
    dir.join(format!("{scan_id:06}.soapf"))
}

pub fn load_records(data: &Path) -> Result<Vec<ScanRecord>> {
    geom::load_trajectory(&data.join("poses.csv"), &data.join("segments.csv"))
        .with_context(|| format!("cannot load trajectory from {}", data.display()))
}

pub fn load_feature_sets(records: &[ScanRecord], dir: &Path, standardize: bool) -> Result<Vec<LocalFeatureSet>> {
    records
        .par_iter()
        .map(|r| {
            let path = feature_path(dir, r.scan_id);
            let fs = localfeat::load_features(&path, standardize)
                .with_context(|| format!("cannot load features {} (run `soap3d extract`?)", path.display()))?;
            if fs.source_scan_id != r.scan_id {
                bail!("{} holds features of scan {}", path.display(), fs.source_scan_id);
            }
            Ok(fs)
        })
        .collect()
}

struct Sequence {
    records: Vec<ScanRecord>,
    features: Vec<LocalFeatureSet>,
}

fn load_sequence(cfg: &RunConfig, data: &Path, features: Option<&Path>) -> Result<Sequence> {
    let records = load_records(data)?;
    let features = load_feature_sets(&records, &features_dir(data, features), cfg.data.standardize_features)?;
    Ok(Sequence { records, features })
}

fn feature_dim(seq: &Sequence) -> Result<usize> {
    let c = seq.features.first().map(LocalFeatureSet::dim).unwrap_or(FEATURE_DIM);
    if seq.features.iter().any(|f| f.dim() != c) {
        bail!("feature files disagree on the feature dimension");
    }
    Ok(c)
}

/// `gen-synth`: writes a synthetic orchard dataset into `out`.
pub fn cmd_gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.resolved().orchard;
    spec.validate()?;
    create_dir(out)?;
    let data = synthgen::generate_orchard(&spec)?;
    synthgen::write_dataset(out, &data, &spec).with_context(|| format!("cannot write dataset to {}", out.display()))?;
    log::info!("wrote {} scans to {}", data.scans.len(), out.display());
    Ok(())
}

/// `extract`: downsample, voxelize and extract features for every scan.
pub fn cmd_extract(cfg: &RunConfig, data: &Path, out: Option<&Path>) -> Result<()> {
    let records = load_records(data)?;
    let dir = features_dir(data, out);
    create_dir(&dir)?;
    let format = cfg.data.format()?;
    let ext = cfg.data.extension()?;
    let counts = records
        .par_iter()
        .map(|r| {
            let path = data.join("scans").join(format!("{:06}.{ext}", r.scan_id));
            let cloud = geom::load_scan(&path, format).with_context(|| format!("cannot read scan {}", path.display()))?;
            let fs = localfeat::extract_from_cloud(&cloud, &cfg.extract, cfg.seed, r.scan_id)
                .with_context(|| format!("feature extraction failed for {}", path.display()))?;
            let target = feature_path(&dir, r.scan_id);
            localfeat::save_features(&fs, &target).with_context(|| format!("cannot write {}", target.display()))?;
            Ok(fs.len())
        })
        .collect::<Result<Vec<usize>>>()?;
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    log::info!("extracted {} feature sets (mean {mean:.0} voxels) into {}", counts.len(), dir.display());
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub features: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub out: &'a Path,
}

/// `train`: mine tuples, train, and save checkpoint, optimizer state and log.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let cfg = cfg.resolved();
    let seq = load_sequence(&cfg, args.data, args.features)?;
    let (init, resume) = match args.resume {
        Some(dir) => {
            let p = head::load_params(&dir.join(MODEL_FILE))
                .with_context(|| format!("cannot resume from {}", dir.display()))?;
            let st = trainer::load_state(&dir.join(STATE_FILE))
                .with_context(|| format!("cannot resume from {}", dir.display()))?;
            (p, Some(st))
        }
        None => (cfg.init_params(feature_dim(&seq)?, cfg.head.flags())?, None),
    };
    let mined = trainer::mine_tuples(&seq.records, &cfg.train)?;
    if cfg.train.epochs > 0 && mined.tuples.is_empty() {
        bail!(
            "no training tuples: no scan has a same-segment revisit from another pass within r_pos = {} m",
            cfg.train.r_pos
        );
    }
    log::info!(
        "{} tuples per epoch ({} anchors skipped for short negative pools)",
        mined.tuples.len(),
        mined.skipped_short_pool
    );
    let prepared = trainer::TrainingSequence::prepare(seq.records, &seq.features, &init)?;
    let outcome = trainer::train_sequences(&[prepared], &cfg.train, init, resume)?;
    save_run(&cfg, args.out, &outcome.params, &outcome.state)?;
    trainer::write_train_log(&args.out.join("train_log.csv"), &outcome.log)?;
    let mut report = provenance(&cfg);
    report["tuples_per_epoch"] = json!(outcome.tuples_per_epoch);
    report["skipped_short_pool"] = json!(mined.skipped_short_pool);
    report["optimizer_step"] = json!(outcome.state.step);
    report["final_h"] = json!(outcome.params.h);
    report["log"] = serde_json::to_value(&outcome.log)?;
    write_json(&args.out.join("train_report.json"), &report)?;
    if let Some(last) = outcome.log.last() {
        log::info!("epoch {} loss {:.5} h {:.4}", last.epoch, last.mean_loss, last.h_value);
    }
    Ok(())
}

fn save_run(cfg: &RunConfig, out: &Path, params: &HeadParams, state: &OptimizerState) -> Result<()> {
    create_dir(out)?;
    let echo = serde_json::to_string_pretty(&provenance(cfg))?;
    head::save_params(params, &out.join(MODEL_FILE), &echo)?;
    trainer::save_state(state, &out.join(STATE_FILE))?;
    Ok(())
}

fn model_or_untrained(cfg: &RunConfig, model: Option<&Path>, seq: &Sequence) -> Result<(HeadParams, String)> {
    match model {
        Some(path) => {
            let p = head::load_params(path).with_context(|| format!("cannot load model {}", path.display()))?;
            Ok((p, path.display().to_string()))
        }
        None => Ok((cfg.init_params(feature_dim(seq)?, cfg.head.flags())?, "untrained".into())),
    }
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub features: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub out: &'a Path,
}

fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(EvalReport, String)> {
    let seq = load_sequence(cfg, args.data, args.features)?;
    let (params, source) = model_or_untrained(cfg, args.model, &seq)?;
    let desc = retrieval::compute_descriptors(&seq.features, &params)?;
    create_dir(args.out)?;
    retrieval::save_descriptors(
        &DescriptorFile {
            ids: seq.records.iter().map(|r| r.scan_id).collect(),
            rows: desc.clone(),
        },
        &args.out.join("descriptors.soapd"),
    )?;
    let report = retrieval::evaluate_descriptors(&seq.records, &desc, &cfg.eval)?;
    Ok((report, source))
}

/// `eval`: fixed-radius recall@k and recall@pct, plus the sweep.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    let (report, source) = run_eval(&cfg, args)?;
    let mut j = provenance(&cfg);
    j["model"] = json!(source);
    j["report"] = serde_json::to_value(&report)?;
    write_json(&args.out.join("eval.json"), &j)?;
    write_file(&args.out.join("eval.csv"), report.to_csv())?;
    for s in &report.recall_at_k {
        log::info!("recall@{} = {:.4} ({}/{})", s.k, s.recall, s.hits, s.eligible);
    }
    let p = &report.recall_at_pct;
    log::info!("recall@{}% (k={}) = {:.4}", cfg.eval.pct, p.k, p.recall);
    Ok(report)
}

/// `sweep`: recall over `sweep_k` x `sweep_radii`, overall and per segment.
pub fn cmd_sweep(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    let (report, source) = run_eval(&cfg, args)?;
    let mut j = provenance(&cfg);
    j["model"] = json!(source);
    j["sweep"] = serde_json::to_value(&report.sweep)?;
    write_json(&args.out.join("sweep.json"), &j)?;
    let fmt = |r: Option<f64>| r.map_or_else(String::new, |v| v.to_string());
    let mut overall = String::from("k,r_th,recall,hits,eligible\n");
    for p in &report.sweep.overall {
        overall.push_str(&format!("{},{},{},{},{}\n", p.k, p.r_th, fmt(p.recall), p.hits, p.eligible));
    }
    write_file(&args.out.join("sweep.csv"), overall)?;
    let mut seg = String::from("segment,k,r_th,recall,hits,eligible\n");
    for (s, pts) in &report.sweep.per_segment {
        for p in pts {
            seg.push_str(&format!("{s},{},{},{},{},{}\n", p.k, p.r_th, fmt(p.recall), p.hits, p.eligible));
        }
    }
    write_file(&args.out.join("sweep_segments.csv"), seg)?;
    Ok(report)
}

/// One ablation table row.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub stages: String,
    pub trained: bool,
    pub recall_at_1: f64,
    pub recall_at_pct: f64,
    pub final_h: f64,
}

pub struct AblateArgs<'a> {
    pub data: &'a Path,
    pub eval_data: Option<&'a Path>,
    pub out: &'a Path,
}

/// `ablate`: trains each stage combination on `data` and evaluates it on
/// `eval_data` (default: `data`). Rows without FC or PN have nothing to train.
pub fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let cfg = cfg.resolved();
    let mut eval_cfg = cfg.eval.clone();
    if !eval_cfg.k_list.contains(&1) {
        eval_cfg.k_list.insert(0, 1);
    }
    let train_seq = load_sequence(&cfg, args.data, None)?;
    let eval_seq = match args.eval_data {
        Some(d) => load_sequence(&cfg, d, None)?,
        None => Sequence {
            records: train_seq.records.clone(),
            features: train_seq.features.clone(),
        },
    };
    let c = feature_dim(&train_seq)?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for flags in ABLATION_ROWS {
        let init = cfg.init_params(c, flags)?;
        let trained = flags.use_fc || flags.use_pn;
        let params = if trained {
            trainer::train(&train_seq.records, &train_seq.features, &cfg.train, init)?.params
        } else {
            init
        };
        let report = retrieval::evaluate_sequence(&eval_seq.records, &eval_seq.features, &params, &eval_cfg)?;
        let row = AblationRow {
            stages: flags.label(),
            trained,
            recall_at_1: report.recall_at(1).expect("k=1 requested"),
            recall_at_pct: report.recall_at_pct.recall,
            final_h: params.h,
        };
        log::info!("{}: recall@1 {:.4} recall@pct {:.4}", row.stages, row.recall_at_1, row.recall_at_pct);
        rows.push(row);
    }
    create_dir(args.out)?;
    let mut csv = String::from("stages,trained,recall_at_1,recall_at_pct,final_h\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.stages, r.trained, r.recall_at_1, r.recall_at_pct, r.final_h));
    }
    write_file(&args.out.join("ablation.csv"), csv)?;
    let mut j = provenance(&cfg);
    j["rows"] = serde_json::to_value(&rows)?;
    write_json(&args.out.join("ablation.json"), &j)?;
    Ok(rows)
}

/// `crossval`: leave-one-out over the given sequences.
pub fn cmd_crossval(cfg: &RunConfig, data: &[PathBuf], out: &Path) -> Result<retrieval::CrossValReport> {
    let cfg = cfg.resolved();
    if data.len() < 2 {
        bail!("crossval needs at least two --data sequences");
    }
    let mut seqs = Vec::with_capacity(data.len());
    for d in data {
        let s = load_sequence(&cfg, d, None)?;
        let name = d
            .file_name()
            .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
        seqs.push(NamedSequence {
            name,
            records: s.records,
            features: s.features,
        });
    }
    let c = seqs[0].features.first().map_or(FEATURE_DIM, LocalFeatureSet::dim);
    let init = cfg.init_params(c, cfg.head.flags())?;
    let report = retrieval::cross_validate(&seqs, &cfg.train, &cfg.eval, &init)?;
    create_dir(out)?;
    write_file(&out.join("crossval.csv"), report.to_csv())?;
    let mut j = provenance(&cfg);
    j["report"] = serde_json::to_value(&report)?;
    write_json(&out.join("crossval.json"), &j)?;
    log::info!("MEAN recall@1 {:.4} recall@pct {:.4}", report.mean_recall_at_1, report.mean_recall_at_pct);
    Ok(report)
}
