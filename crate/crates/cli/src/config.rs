//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys not listed here are handed to [`TrainConfig::set`]. Relative paths in
//! a config file resolve against the file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bgad_core::data::SynthKind;
use bgad_core::metrics::{DEFAULT_FPR_LIMIT, DEFAULT_SMOOTHING_SIGMA};
use bgad_core::racp::DEFAULT_SUBSET_SIZE;
use bgad_core::{Error, Result, TrainConfig};

/// Whether pixel-level metrics are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Localization {
    /// Only when every abnormal sample has a mask and maps exist.
    Auto,
    /// Required; missing masks or maps are an error.
    On,
    Off,
}

impl Localization {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Auto => "auto",
            Self::On => "on",
            Self::Off => "off",
        }
    }
}

impl FromStr for Localization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            "on" | "true" => Ok(Self::On),
            "off" | "false" => Ok(Self::Off),
            other => Err(invalid(format!("localization: expected auto|on|off, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub dim: usize,
    pub train_normal: usize,
    pub train_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    /// `1×1` writes one vector per sample; larger grids plant patches.
    pub grid: (usize, usize),
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            kind: SynthKind::GaussianCluster,
            dim: 8,
            train_normal: 2000,
            train_abnormal: 5,
            test_normal: 500,
            test_abnormal: 100,
            grid: (1, 1),
        }
    }
}

fn kind_name(kind: SynthKind) -> &'static str {
    match kind {
        SynthKind::GaussianCluster => "gaussian-cluster",
        SynthKind::Ring => "ring",
        SynthKind::TwoMoons => "two-moons",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// Image score CSV read by `eval`; defaults to `<out>/scores.csv`.
    pub scores: Option<PathBuf>,
    /// Anomaly-map directory read by `eval`; defaults to `maps` next to the
    /// scores file.
    pub maps: Option<PathBuf>,
    pub out: PathBuf,
    pub fpr_limit: f64,
    pub smoothing_sigma: f64,
    pub localization: Localization,
    /// Bound-report margin; `None` means `0.05·τ`.
    pub epsilon: Option<f64>,
    pub racp_subset: usize,
    /// Composites to generate; `None` means one per normal image.
    pub racp_count: Option<usize>,
    pub synth: SynthOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_manifest: None,
            test_manifest: None,
            checkpoint: None,
            scores: None,
            maps: None,
            out: PathBuf::from("out"),
            fpr_limit: DEFAULT_FPR_LIMIT,
            smoothing_sigma: DEFAULT_SMOOTHING_SIGMA,
            localization: Localization::Auto,
            epsilon: None,
            racp_subset: DEFAULT_SUBSET_SIZE,
            racp_count: None,
            synth: SynthOptions::default(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Error {
    Error::InvalidArgument(message.into())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid(format!("{key}: cannot parse '{value}'")))
}

fn parse_grid(value: &str) -> Result<(usize, usize)> {
    let bad = || invalid(format!("synth_grid: expected HxW, got '{value}'"));
    let (h, w) = value.trim().split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim() == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(invalid(format!("line {}: empty key", i + 1)));
        }
        if let Some((first, ..)) = out.iter().find(|(_, k, _)| *k == key) {
            return Err(invalid(format!(
                "line {}: key '{key}' already set on line {first}",
                i + 1
            )));
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Self::default();
        for (line, key, value) in parse_pairs(&text)? {
            cfg.set_relative(&key, &value, &base)
                .map_err(|e| invalid(format!("{}:{line}: {}", path.display(), message(&e))))?;
        }
        Ok(cfg)
    }

    /// Applies one setting; relative paths are kept as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_relative(key, value, Path::new(""))
    }

    fn set_relative(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || {
            let p = PathBuf::from(value.trim());
            if p.as_os_str().is_empty() {
                None
            } else if p.is_absolute() || base.as_os_str().is_empty() {
                Some(p)
            } else {
                Some(base.join(p))
            }
        };
        match key {
            "train_manifest" => self.train_manifest = path(),
            "test_manifest" => self.test_manifest = path(),
            "checkpoint" => self.checkpoint = path(),
            "scores" => self.scores = path(),
            "maps" => self.maps = path(),
            "out" => self.out = path().ok_or_else(|| invalid("out: empty path"))?,
            "fpr_limit" => self.fpr_limit = parse(key, value)?,
            "smoothing_sigma" => self.smoothing_sigma = parse(key, value)?,
            "localization" => self.localization = value.parse()?,
            "epsilon" => self.epsilon = optional(key, value)?,
            "racp_subset" => self.racp_subset = parse(key, value)?,
            "racp_count" => self.racp_count = optional(key, value)?,
            "synth_kind" => self.synth.kind = value.parse()?,
            "synth_dim" => self.synth.dim = parse(key, value)?,
            "synth_train_normal" => self.synth.train_normal = parse(key, value)?,
            "synth_train_abnormal" => self.synth.train_abnormal = parse(key, value)?,
            "synth_test_normal" => self.synth.test_normal = parse(key, value)?,
            "synth_test_abnormal" => self.synth.test_abnormal = parse(key, value)?,
            "synth_grid" => self.synth.grid = parse_grid(value)?,
            _ => {
                if !self.train.set(key, value)? {
                    return Err(invalid(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Checks every setting that does not depend on the command.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(invalid(format!("fpr_limit must lie in (0, 1], got {}", self.fpr_limit)));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(invalid(format!(
                "smoothing_sigma must be >= 0, got {}",
                self.smoothing_sigma
            )));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(invalid(format!("epsilon must be positive, got {e}")));
            }
        }
        if self.racp_subset == 0 || self.racp_subset > bgad_core::racp::TransformKind::ALL.len() {
            return Err(invalid(format!(
                "racp_subset must lie in 1..={}, got {}",
                bgad_core::racp::TransformKind::ALL.len(),
                self.racp_subset
            )));
        }
        if self.synth.dim < 2 {
            return Err(invalid(format!("synth_dim must be >= 2, got {}", self.synth.dim)));
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    pub fn scores_path(&self) -> PathBuf {
        self.scores.clone().unwrap_or_else(|| self.out.join("scores.csv"))
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.maps.clone().unwrap_or_else(|| {
            self.scores_path()
                .parent()
                .map_or_else(|| PathBuf::from("maps"), |p| p.join("maps"))
        })
    }

    /// Every setting, one `key = value` line each, in a fixed order.
    pub fn echo(&self, command: &str) -> String {
        let mut s = format!("# bgad {command}\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("train_manifest", show_path(&self.train_manifest));
        line("test_manifest", show_path(&self.test_manifest));
        line("checkpoint", self.checkpoint_dir().display().to_string());
        line("scores", self.scores_path().display().to_string());
        line("maps", self.maps_dir().display().to_string());
        line("out", self.out.display().to_string());
        line("fpr_limit", format!("{:?}", self.fpr_limit));
        line("smoothing_sigma", format!("{:?}", self.smoothing_sigma));
        line("localization", self.localization.as_str().into());
        line("epsilon", show(&self.epsilon.map(|e| format!("{e:?}"))));
        line("racp_subset", self.racp_subset.to_string());
        line("racp_count", show(&self.racp_count));
        line("synth_kind", kind_name(self.synth.kind).into());
        line("synth_dim", self.synth.dim.to_string());
        line("synth_train_normal", self.synth.train_normal.to_string());
        line("synth_train_abnormal", self.synth.train_abnormal.to_string());
        line("synth_test_normal", self.synth.test_normal.to_string());
        line("synth_test_abnormal", self.synth.test_abnormal.to_string());
        line("synth_grid", format!("{}x{}", self.synth.grid.0, self.synth.grid.1));
        for (k, v) in self.train.to_pairs() {
            line(k, v);
        }
        s
    }
}

fn message(e: &Error) -> String {
    match e {
        Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_skip_comments_and_blanks() {
        let text = "# header\n\nepochs = 12 # trailing\n  lr=0.001\n";
        let pairs = parse_pairs(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], (3, "epochs".into(), "12".into()));
        assert_eq!(pairs[1], (4, "lr".into(), "0.001".into()));
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(parse_pairs("a = 1\na = 2\n").is_err());
        assert!(parse_pairs("just words\n").is_err());
        assert!(parse_pairs(" = 3\n").is_err());
    }

    #[test]
    fn settings_reach_both_layers() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "7").unwrap();
        cfg.set("fpr_limit", "0.2").unwrap();
        cfg.set("synth_grid", "4x6").unwrap();
        cfg.set("epsilon", "auto").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.fpr_limit, 0.2);
        assert_eq!(cfg.synth.grid, (4, 6));
        assert_eq!(cfg.epsilon, None);
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("synth_grid", "4by6").is_err());
        assert!(cfg.set("localization", "maybe").is_err());
    }

    #[test]
    fn file_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train_manifest = data/train.csv\nout = /abs/out\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.train_manifest.unwrap(), dir.path().join("data/train.csv"));
        assert_eq!(cfg.out, PathBuf::from("/abs/out"));
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs = 3\nlr = fast\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn validation_catches_bad_values() {
        let cfg = RunConfig {
            fpr_limit: 0.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.phase1_epochs = cfg.train.epochs;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            racp_subset: 10,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn echo_is_stable_and_complete() {
        let cfg = RunConfig::default();
        let a = cfg.echo("train");
        assert_eq!(a, cfg.echo("train"));
        assert!(a.starts_with("# bgad train\n"));
        for key in ["fpr_limit", "smoothing_sigma", "epochs", "lambda", "seed"] {
            assert!(a.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
    }
}
