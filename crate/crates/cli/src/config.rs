//! Run configuration and its line-based file grammar.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 50
//! lr = 1e-4
//! [eval]
//! k_list = 1, 5, 10
//! sweep_radii = 1:30
//! ```
//!
//! Keys are addressed as `section.key`. Precedence, lowest to highest:
//! built-in defaults, the `--config` file, `--set section.key=value`, then the
//! dedicated `--seed` / `--threads` flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use soap3d::geom::ScanFormat;
use soap3d::head::{HeadParams, StageFlags, H_INIT};
use soap3d::localfeat::ExtractConfig;
use soap3d::retrieval::EvalConfig;
use soap3d::synthgen::OrchardSpec;
use soap3d::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    /// `bin-xyz`, `bin-xyzi` or `ply-ascii`.
    pub scan_format: String,
    /// Standardize imported feature columns on load.
    pub standardize_features: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scan_format: ScanFormat::BinXyz.to_string(),
            standardize_features: false,
        }
    }
}

impl DataConfig {
    pub fn format(&self) -> Result<ScanFormat> {
        Ok(self.scan_format.parse()?)
    }

    pub fn extension(&self) -> Result<&'static str> {
        Ok(match self.format()? {
            ScanFormat::BinXyz | ScanFormat::BinXyzi => "bin",
            ScanFormat::PlyAscii => "ply",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadConfig {
    /// Descriptor dimension when the linear projection is on.
    pub d: usize,
    pub h_init: f64,
    pub use_log: bool,
    pub use_pn: bool,
    pub use_fc: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d: 256,
            h_init: H_INIT,
            use_log: true,
            use_pn: true,
            use_fc: true,
        }
    }
}

impl HeadConfig {
    pub fn flags(&self) -> StageFlags {
        StageFlags {
            use_log: self.use_log,
            use_pn: self.use_pn,
            use_fc: self.use_fc,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub orchard: OrchardSpec,
    pub extract: ExtractConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("invalid value `{v}` for {key}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("invalid value `{v}` for {key}: expected true or false"),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Comma list, or an inclusive range `start:end[:step]`.
fn parse_radii(key: &str, v: &str) -> Result<Vec<f64>> {
    if !v.contains(':') {
        return parse_list(key, v);
    }
    let parts: Vec<f64> = v.split(':').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    let (start, end, step) = match parts[..] {
        [a, b] => (a, b, 1.0),
        [a, b, s] => (a, b, s),
        _ => bail!("invalid range `{v}` for {key}"),
    };
    if !(step > 0.0) || end < start {
        bail!("invalid range `{v}` for {key}");
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

impl RunConfig {
    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.threads" => self.threads = Some(parse(key, v)?),
            "data.scan_format" => {
                v.parse::<ScanFormat>()?;
                self.data.scan_format = v.to_string();
            }
            "data.standardize_features" => self.data.standardize_features = parse_bool(key, v)?,
            "orchard.n_rows" => self.orchard.n_rows = parse(key, v)?,
            "orchard.row_length" => self.orchard.row_length = parse(key, v)?,
            "orchard.row_spacing" => self.orchard.row_spacing = parse(key, v)?,
            "orchard.trees_per_row" => self.orchard.trees_per_row = parse(key, v)?,
            "orchard.points_per_tree" => self.orchard.points_per_tree = parse(key, v)?,
            "orchard.noise_sigma" => self.orchard.noise_sigma = parse(key, v)?,
            "orchard.permeability" => self.orchard.permeability = parse(key, v)?,
            "orchard.n_passes" => self.orchard.n_passes = parse(key, v)?,
            "orchard.scan_spacing" => self.orchard.scan_spacing = parse(key, v)?,
            "orchard.sensor_range" => self.orchard.sensor_range = parse(key, v)?,
            "orchard.ground_density" => self.orchard.ground_density = parse(key, v)?,
            "orchard.layout_seed" => self.orchard.layout_seed = Some(parse(key, v)?),
            "extract.downsample" => self.extract.downsample = parse(key, v)?,
            "extract.grid_size" => self.extract.grid_size = parse(key, v)?,
            "extract.k_neighbors" => self.extract.k_neighbors = parse(key, v)?,
            "head.d" => self.head.d = parse(key, v)?,
            "head.h_init" => self.head.h_init = parse(key, v)?,
            "head.use_log" => self.head.use_log = parse_bool(key, v)?,
            "head.use_pn" => self.head.use_pn = parse_bool(key, v)?,
            "head.use_fc" => self.head.use_fc = parse_bool(key, v)?,
            "train.r_pos" => self.train.r_pos = parse(key, v)?,
            "train.anchor_spacing" => self.train.anchor_spacing = parse(key, v)?,
            "train.neg_radius" => self.train.neg_radius = parse(key, v)?,
            "train.m_neg" => self.train.m_neg = parse(key, v)?,
            "train.margin" => self.train.margin = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "eval.r_th" => self.eval.r_th = parse(key, v)?,
            "eval.k_list" => self.eval.k_list = parse_list(key, v)?,
            "eval.pct" => self.eval.pct = parse(key, v)?,
            "eval.exclusion_window" => self.eval.exclusion_window = parse(key, v)?,
            "eval.sweep_k" => self.eval.sweep_k = parse_list(key, v)?,
            "eval.sweep_radii" => self.eval.sweep_radii = parse_radii(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies a config file's entries on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", i + 1);
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("{}: malformed section header `{line}`", at()))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}: expected `key = value`, got `{line}`", at()))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| anyhow!("{}: `{}` appears before any [section]", at(), k.trim()))?;
            self.set(&format!("{sec}.{}", k.trim()), v).with_context(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `--set section.key=value`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects section.key=value, got `{kv}`"))?;
        self.set(k.trim(), v)
    }

    /// Root seed propagated into every component that owns a seed field.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.orchard.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn init_params(&self, c: usize, flags: StageFlags) -> Result<HeadParams> {
        let seed = soap3d::seed::sub_seed(self.seed, "init");
        Ok(HeadParams::init(c, self.head.d, flags, self.head.h_init, seed)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# demo\n[train]\nepochs = 3   # short\nlr=0.01\n\n[eval]\nk_list = 1, 2\nsweep_radii = 1:3\n[head]\nuse_pn = false\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.eval.k_list, vec![1, 2]);
        assert_eq!(c.eval.sweep_radii, vec![1.0, 2.0, 3.0]);
        assert!(!c.head.use_pn);
        c.apply_override("train.epochs=7").unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        let e = c.apply_text("[train]\nepoch = 3\n", "f").unwrap_err();
        assert!(format!("{e:#}").contains("f:2"), "{e:#}");
        assert!(format!("{e:#}").contains("unknown config key"), "{e:#}");
        assert!(c.apply_text("epochs = 3\n", "f").is_err());
        assert!(c.apply_text("[train\n", "f").is_err());
        assert!(c.apply_text("[train]\nepochs\n", "f").is_err());
        assert!(c.apply_text("[train]\nepochs = many\n", "f").is_err());
        assert!(c.apply_text("[data]\nscan_format = las\n", "f").is_err());
        assert!(c.apply_override("train.epochs").is_err());
    }

    #[test]
    fn radii_ranges() {
        assert_eq!(parse_radii("r", "0.5:2:0.5").unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(parse_radii("r", "2, 4").unwrap(), vec![2.0, 4.0]);
        assert!(parse_radii("r", "3:1").is_err());
    }

    #[test]
    fn root_seed_reaches_components() {
        let c = RunConfig {
            seed: 42,
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!(c.orchard.seed, 42);
        assert_eq!(c.train.seed, 42);
    }
}
