use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of 2-D parameter tensors. Vectors are stored
/// as `1 x n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

const MAGIC: &[u8; 4] = b"GZFP";
const FORMAT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, v) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a parameter file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter format version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data: Vec<f64> = r
                .take(rows * cols * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(name, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(store)
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(
                "parameter names do not match the model layout".into(),
            ));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    a.dim(),
                    b.dim()
                )));
            }
        }
        self.values = other.values;
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated parameter file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Array2<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.0.iter()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|a| a.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flat_map(|a| a.iter()).all(|v| v.is_finite())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn,
    Zeros,
    Ones,
}

pub fn init_tensor(rng: &mut impl Rng, rows: usize, cols: usize, init: Init) -> Array2<f64> {
    match init {
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
        }
        Init::FanIn => {
            let bound = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        }
        Init::Zeros => Array2::zeros((rows, cols)),
        Init::Ones => Array2::ones((rows, cols)),
    }
}
