//! Dataset ingestion and persistence.
//!
//! Features arrive as FBT tensors (see [`fbt`]), one `C×H×W` map per sample
//! and level; samples are listed in a CSV manifest (see [`manifest`]); masks
//! and images are PNG files (see [`raster`]).

pub mod dataset;
pub mod fbt;
pub mod manifest;
pub mod raster;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use dataset::{Dataset, FeatureMap, Sample};
pub use fbt::{read_fbt, write_fbt, FbtError, Tensor};
pub use manifest::{load_manifest, validate_manifest, Manifest, SampleRecord, Split, ValidationOptions};
pub use raster::{BinaryMask, RasterImage};
pub use synth::{synth_dataset, synth_map_dataset, SynthKind};

use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
