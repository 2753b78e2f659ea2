use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One line of a JSON-lines manifest. Relative paths are resolved against
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub id: String,
    pub cam: String,
    pub split: Split,
}

impl ManifestRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.cam.is_empty() {
            return Err("empty cam".into());
        }
        Ok(())
    }

    /// Copy with image and mask paths joined onto `base`.
    pub fn resolved(&self, base: &Path) -> ManifestRecord {
        ManifestRecord {
            image: base.join(&self.image),
            mask: self.mask.as_ref().map(|m| base.join(m)),
            ..self.clone()
        }
    }
}

/// Reads a manifest and resolves its paths against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", n + 1)))?;
        rec.validate()
            .map_err(|m| Error::data(path, format!("line {}: {m}", n + 1)))?;
        out.push(rec.resolved(base));
    }
    Ok(out)
}

/// Writes records verbatim, one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
