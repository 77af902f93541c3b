//! On-disk formats: velocity grid files, matrix caches and corpus manifests.
//!
//! Grid file (`.vgrd`), little-endian:
//!
//! ```text
//! magic    4 bytes  "VGRD"
//! version  u32      1
//! frames   u32      T
//! keys     u32      P
//! fps      f64      frames per second
//! values   T*P f32  row-major, each in [0, 1]
//! ```
//!
//! Matrix cache (`.vmat`) is the same without the fps field and the range
//! restriction, under magic `"VMAT"`.
//!
//! Manifest (TOML): one `[[item]]` table per piece with `id`, `midi`,
//! `split` (`train`, `val` or `test`) and exactly one of `audio` or `grid`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {reason}")]
    Parse { what: String, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

fn parse_err(what: &str, reason: impl Into<String>) -> FormatError {
    FormatError::Parse {
        what: what.into(),
        reason: reason.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const GRID_MAGIC: &[u8; 4] = b"VGRD";
pub const MATRIX_MAGIC: &[u8; 4] = b"VMAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub frames_per_second: f64,
    pub values: Array2<f32>,
}

impl GridFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, p) = self.values.dim();
        let mut out = Vec::with_capacity(24 + 4 * t * p);
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(p as u32).to_le_bytes());
        out.extend_from_slice(&self.frames_per_second.to_le_bytes());
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Cursor::new(bytes, "grid file");
        r.magic(GRID_MAGIC)?;
        let (t, p) = (r.u32()? as usize, r.u32()? as usize);
        let fps = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(parse_err("grid file", format!("invalid frame rate {fps}")));
        }
        let values = r.matrix(t, p)?;
        if let Some(((row, key), v)) = values
            .indexed_iter()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(parse_err("grid file", format!("value {v} at ({row}, {key}) outside [0, 1]")));
        }
        Ok(Self {
            frames_per_second: fps,
            values,
        })
    }
}

pub fn matrix_to_bytes(m: &Array2<f32>) -> Vec<u8> {
    let (r, c) = m.dim();
    let mut out = Vec::with_capacity(16 + 4 * r * c);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Array2<f32>, FormatError> {
    let mut r = Cursor::new(bytes, "matrix file");
    r.magic(MATRIX_MAGIC)?;
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    r.matrix(rows, cols)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if n > self.data.len() - self.pos {
            return Err(parse_err(self.what, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        if self.take(4)? != magic {
            return Err(parse_err(self.what, "bad magic"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(parse_err(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>, FormatError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| parse_err(self.what, "dimensions overflow"))?;
        if self.data.len() - self.pos != n {
            return Err(parse_err(
                self.what,
                format!("payload is {} bytes, header implies {n}", self.data.len() - self.pos),
            ));
        }
        let data: Vec<f32> = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub midi: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    pub split: Split,
}

/// Where an item's preliminary velocities come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemSource {
    Audio(PathBuf),
    Grid(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "item", default)]
    pub items: Vec<ManifestItem>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parses and checks structure (unique ids, one source per item) without
    /// touching the file system.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, FormatError> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| parse_err("manifest", e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.check_structure()?;
        Ok(m)
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| parse_err("manifest", "not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let m = Self::from_toml(&text, &base)?;
        for item in &m.items {
            let src = match m.source(item) {
                ItemSource::Audio(p) | ItemSource::Grid(p) => p,
            };
            for p in [m.resolve(&item.midi), src] {
                if !p.is_file() {
                    return Err(FormatError::Manifest(format!(
                        "item {}: missing file {}",
                        item.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn check_structure(&self) -> Result<(), FormatError> {
        let mut ids = HashSet::new();
        for item in &self.items {
            if item.id.is_empty() || !ids.insert(item.id.as_str()) {
                return Err(FormatError::Manifest(format!("duplicate or empty id {:?}", item.id)));
            }
            if item.audio.is_some() == item.grid.is_some() {
                return Err(FormatError::Manifest(format!(
                    "item {} must name exactly one of audio or grid",
                    item.id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn source(&self, item: &ManifestItem) -> ItemSource {
        match (&item.audio, &item.grid) {
            (Some(a), _) => ItemSource::Audio(self.resolve(a)),
            (None, Some(g)) => ItemSource::Grid(self.resolve(g)),
            (None, None) => unreachable!("checked at load"),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.id == id)
    }
}
