//! The JSON run configuration.
//!
//! ```
//! use optstop::config::RunConfig;
//!
//! let cfg: RunConfig = serde_json::from_str(r#"{
//!     "problem": {
//!         "interval": ["-inf", "inf"],
//!         "left": "inaccessible", "right": "inaccessible",
//!         "drift": "0", "sigma": "1", "rate": "0.5",
//!         "reward": "if(x<=0, 0, if(x<=1, 1, 2))",
//!         "breakpoints": [0, 1]
//!     },
//!     "grid": { "n_nodes": 2001, "trunc": { "lo": -8, "hi": 8 } }
//! }"#).unwrap();
//! assert_eq!(cfg.grid.n_nodes, 2001);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::grid::Spacing;
use crate::model::BoundaryKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Output directory, relative paths resolved against the config file.
    pub fn output_dir(&self, config_path: &Path) -> PathBuf {
        let dir = Path::new(&self.outputs.dir);
        if dir.is_absolute() {
            dir.to_path_buf()
        } else {
            config_path.parent().unwrap_or(Path::new(".")).join(dir)
        }
    }
}

/// A possibly infinite interval endpoint: a number or one of the strings
/// `"inf"`, `"+inf"`, `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound(pub f64);

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Bound, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Bound;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\" / \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Bound, E> {
                Ok(Bound(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Bound, E> {
                Ok(Bound(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Bound, E> {
                Ok(Bound(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Bound, E> {
                match v {
                    "inf" | "+inf" => Ok(Bound(f64::INFINITY)),
                    "-inf" => Ok(Bound(f64::NEG_INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub interval: [Bound; 2],
    pub left: BoundaryKind,
    pub right: BoundaryKind,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    pub drift: String,
    pub sigma: String,
    pub rate: String,
    pub reward: String,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    #[serde(default)]
    pub reward_at_left: Option<f64>,
    #[serde(default)]
    pub reward_at_right: Option<f64>,
    #[serde(default = "default_r_floor")]
    pub r_floor: f64,
    #[serde(default)]
    pub running_reward: Option<String>,
}

fn default_r_floor() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AutoKeyword {
    Auto,
}

/// Truncation of the state interval: `"auto"` or `{"lo": .., "hi": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "TruncRaw", into = "TruncRaw")]
pub enum TruncConfig {
    Auto,
    Explicit(Span),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum TruncRaw {
    Keyword(AutoKeyword),
    Span(Span),
}

impl From<TruncRaw> for TruncConfig {
    fn from(r: TruncRaw) -> Self {
        match r {
            TruncRaw::Keyword(AutoKeyword::Auto) => TruncConfig::Auto,
            TruncRaw::Span(s) => TruncConfig::Explicit(s),
        }
    }
}

impl From<TruncConfig> for TruncRaw {
    fn from(t: TruncConfig) -> Self {
        match t {
            TruncConfig::Auto => TruncRaw::Keyword(AutoKeyword::Auto),
            TruncConfig::Explicit(s) => TruncRaw::Span(s),
        }
    }
}

impl Default for TruncConfig {
    fn default() -> Self {
        TruncConfig::Auto
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_nodes")]
    pub n_nodes: usize,
    #[serde(default)]
    pub trunc: TruncConfig,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
    #[serde(default)]
    pub spacing: Option<Spacing>,
    #[serde(default)]
    pub ref_point: Option<f64>,
}

fn default_nodes() -> usize {
    2001
}

fn default_tail_tol() -> f64 {
    1e-8
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_nodes: default_nodes(),
            trunc: TruncConfig::Auto,
            tail_tol: default_tail_tol(),
            spacing: None,
            ref_point: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default = "default_tol_contact")]
    pub tol_contact: f64,
}

fn default_tol_contact() -> f64 {
    1e-9
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol_contact: default_tol_contact(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub x0: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default = "default_true")]
    pub bridge_correction: bool,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_paths() -> usize {
    10_000
}
fn default_seed() -> u64 {
    20_240_901
}
fn default_max_time() -> f64 {
    60.0
}
fn default_true() -> bool {
    true
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            x0: None,
            dt: default_dt(),
            n_paths: default_paths(),
            seed: default_seed(),
            max_time: default_max_time(),
            bridge_correction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> String {
    "out".into()
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}
