//! CSV sample manifests.
//!
//! Header: `id,label,image_path,mask_path` followed by one `feat_<level>`
//! column per feature level (e.g. `feat_l0,feat_l1,feat_l2`). Empty cells
//! mean "absent". Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::objective::Label;
use crate::{Error, Result};

const BASE_COLUMNS: [&str; 4] = ["id", "label", "image_path", "mask_path"];
const FEATURE_PREFIX: &str = "feat_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: Label,
    pub image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub feature_paths: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub split: Split,
    /// Level ids in column order.
    pub levels: Vec<String>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidationOptions {
    /// Abnormal records must carry a mask.
    pub localization: bool,
    /// Every record must name a feature file for every level.
    pub require_features: bool,
    /// Referenced files must exist; masks must match image dims.
    pub check_files: bool,
}

impl Manifest {
    pub fn new(split: Split, levels: Vec<String>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            split,
            levels,
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.levels.iter().map(|l| format!("{FEATURE_PREFIX}{l}")));
        w.write_record(&header).expect("in-memory csv");
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.label.as_str().to_string(),
                show(&r.image_path),
                show(&r.mask_path),
            ];
            for level in &self.levels {
                row.push(show(&r.feature_paths.get(level).cloned()));
            }
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

fn cell(s: &str) -> Option<PathBuf> {
    let t = s.trim();
    (!t.is_empty()).then(|| PathBuf::from(t))
}

/// Parses a manifest and checks its structure: required columns, labels,
/// unique ids. File-level checks live in [`validate_manifest`].
pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, split, base)
}

pub fn parse_manifest(text: &str, split: Split, base_dir: PathBuf) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(vec![format!("unreadable header: {e}")]))?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let mut problems = Vec::new();
    let mut base_idx = [0usize; 4];
    for (slot, col) in base_idx.iter_mut().zip(BASE_COLUMNS) {
        match names.iter().position(|n| n == col) {
            Some(i) => *slot = i,
            None => problems.push(format!("missing column '{col}'")),
        }
    }
    let level_cols: Vec<(String, usize)> = names
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.strip_prefix(FEATURE_PREFIX).map(|l| (l.to_string(), i)))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }

    let mut manifest = Manifest::new(split, level_cols.iter().map(|(l, _)| l.clone()).collect(), base_dir);
    let mut seen = HashSet::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = get(base_idx[0]).trim().to_string();
        if id.is_empty() {
            problems.push(format!("line {line}: empty id"));
            continue;
        }
        if !seen.insert(id.clone()) {
            problems.push(format!("line {line}: duplicate id '{id}'"));
        }
        let label = match get(base_idx[1]).parse::<Label>() {
            Ok(l) => l,
            Err(_) => {
                problems.push(format!(
                    "line {line}: record '{id}' has unknown label '{}'",
                    get(base_idx[1])
                ));
                continue;
            }
        };
        let feature_paths = level_cols
            .iter()
            .filter_map(|(level, i)| cell(get(*i)).map(|p| (level.clone(), p)))
            .collect();
        manifest.records.push(SampleRecord {
            id,
            label,
            image_path: cell(get(base_idx[2])),
            mask_path: cell(get(base_idx[3])),
            feature_paths,
        });
    }
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Manifest(problems))
    }
}

/// Full validation; every problem found is reported, not just the first.
pub fn validate_manifest(manifest: &Manifest, opts: ValidationOptions) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    if opts.require_features && manifest.levels.is_empty() {
        problems.push("no feature columns (feat_<level>)".to_string());
    }
    for r in &manifest.records {
        if !seen.insert(r.id.as_str()) {
            problems.push(format!("duplicate id '{}'", r.id));
        }
        if opts.localization && r.label == Label::Abnormal && r.mask_path.is_none() {
            problems.push(format!(
                "abnormal record '{}' has no mask (needed for localization)",
                r.id
            ));
        }
        if opts.require_features {
            for level in &manifest.levels {
                if !r.feature_paths.contains_key(level) {
                    problems.push(format!("record '{}' has no feature file for level '{level}'", r.id));
                }
            }
        }
        if opts.check_files {
            let mut paths: Vec<(&str, &PathBuf)> = r.feature_paths.values().map(|p| ("feature", p)).collect();
            paths.extend(r.image_path.iter().map(|p| ("image", p)));
            paths.extend(r.mask_path.iter().map(|p| ("mask", p)));
            let mut all_exist = true;
            for (kind, p) in paths {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    all_exist = false;
                    problems.push(format!(
                        "record '{}': {kind} file {} does not exist",
                        r.id,
                        full.display()
                    ));
                }
            }
            if all_exist {
                if let (Some(img), Some(mask)) = (&r.image_path, &r.mask_path) {
                    let dims = (
                        super::raster::png_dims(manifest.resolve(img)),
                        super::raster::png_dims(manifest.resolve(mask)),
                    );
                    match dims {
                        (Ok(a), Ok(b)) if a != b => problems.push(format!(
                            "record '{}': mask is {}x{} but image is {}x{}",
                            r.id, b.0, b.1, a.0, a.1
                        )),
                        (Err(e), _) | (_, Err(e)) => problems.push(format!("record '{}': {e}", r.id)),
                        _ => {}
                    }
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(problems))
    }
}
