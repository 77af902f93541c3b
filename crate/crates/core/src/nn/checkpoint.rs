//! Checkpoint file format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes   "VCORCKPT"
//! version      u32       1
//! digest       32 bytes  SHA-256 of the architecture text
//! arch         u32 length + UTF-8 architecture text
//! meta         u32 length + UTF-8 JSON training metadata
//! step         u64       optimizer updates applied (0 without optimizer state)
//! count        u32       number of arrays
//! per array:   u32 name length + UTF-8 name,
//!              u32 rank, rank x u32 dims,
//!              prod(dims) x f32 values, row-major
//! ```
//!
//! Model parameters come first under their own names; optimizer moments
//! follow as `adam.m/<name>` and `adam.v/<name>`.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::{Adam, NnError, Parameterized};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"VCORCKPT";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    fn to_array<T: Scalar>(&self) -> ArrayD<T> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
        )
        .expect("validated at decode")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub digest: [u8; 32],
    pub meta: serde_json::Value,
    pub step: u64,
    pub arrays: Vec<NamedArray>,
}

pub fn arch_digest(arch: &str) -> [u8; 32] {
    Sha256::digest(arch.as_bytes()).into()
}

pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn named<T: Scalar>(name: String, a: ndarray::ArrayViewD<'_, T>) -> NamedArray {
    NamedArray {
        name,
        shape: a.shape().to_vec(),
        data: a.iter().map(|v| v.to_f64_lossy() as f32).collect(),
    }
}

/// Serializes parameters (and optionally optimizer state). Values are
/// stored as `f32`.
pub fn save_checkpoint<T: Scalar, P: Parameterized<T>>(
    arch: &str,
    params: &P,
    optimizer: Option<&Adam<T>>,
    meta: &serde_json::Value,
) -> Vec<u8> {
    let mut arrays: Vec<NamedArray> = params
        .params()
        .into_iter()
        .map(|(n, a)| named(n, a))
        .collect();
    let mut step = 0;
    if let Some(opt) = optimizer {
        step = opt.step_count();
        for (n, m, v) in opt.moments() {
            arrays.push(named(format!("{M_PREFIX}{n}"), m.view()));
            arrays.push(named(format!("{V_PREFIX}{n}"), v.view()));
        }
    }
    let meta = serde_json::to_string(meta).expect("JSON value serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&arch_digest(arch));
    put_str(&mut out, arch);
    put_str(&mut out, &meta);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in &arrays {
        put_str(&mut out, &a.name);
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if n > self.data.len() - self.pos {
            return Err(NnError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let arch = r.string()?;
    if arch_digest(&arch) != digest {
        return Err(NnError::Checkpoint("architecture digest does not match its text".into()));
    }
    let meta_text = r.string()?;
    let meta = serde_json::from_str(&meta_text)
        .map_err(|e| NnError::Checkpoint(format!("metadata: {e}")))?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("array {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NnError::Checkpoint(format!("array {name} is too large")))?;
        let raw = r.take(len)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        arch,
        digest,
        meta,
        step,
        arrays,
    })
}

impl Checkpoint {
    /// Fails unless this checkpoint was written for `arch`.
    pub fn expect_arch(&self, arch: &str) -> Result<(), NnError> {
        let expected = arch_digest(arch);
        if expected != self.digest {
            return Err(NnError::Architecture {
                expected: hex(&expected),
                found: hex(&self.digest),
            });
        }
        Ok(())
    }

    pub fn param_arrays(&self) -> impl Iterator<Item = &NamedArray> {
        self.arrays
            .iter()
            .filter(|a| !a.name.starts_with(M_PREFIX) && !a.name.starts_with(V_PREFIX))
    }

    /// Writes the stored parameters into `params`. Nothing is modified on
    /// error.
    pub fn apply<T: Scalar, P: Parameterized<T>>(&self, params: &mut P) -> Result<(), NnError> {
        let values: Vec<(String, ArrayD<T>)> = self
            .param_arrays()
            .map(|a| (a.name.clone(), a.to_array()))
            .collect();
        params.assign_params(&values)
    }

    pub fn restore_optimizer<T: Scalar>(&self, adam: &mut Adam<T>) -> Result<(), NnError> {
        let mut moments = Vec::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(M_PREFIX)) {
            let name = &a.name[M_PREFIX.len()..];
            let v = self
                .arrays
                .iter()
                .find(|b| b.name.strip_prefix(V_PREFIX) == Some(name))
                .ok_or_else(|| NnError::Checkpoint(format!("missing second moment for {name}")))?;
            moments.push((name.to_string(), a.to_array(), v.to_array()));
        }
        adam.restore(self.step, moments);
        Ok(())
    }
}
