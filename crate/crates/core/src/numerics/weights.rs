//! Named tensor store and its little-endian binary container.
//!
//! Layout: 4-byte magic, `u32` version (1), `u32` tensor count, then per
//! tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims and a
//! row-major `f32` payload. The same framing is reused for keypoint files
//! under a different magic.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::{DenseMatrix, MlpParams};
use super::mlp::{Activation, Layer};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"IMPW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated data at byte offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at byte offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),
    #[error("architecture mismatch: missing required tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor {0:?} is not a valid metadata scalar")]
    BadMetadata(String),
}

/// An `f32` tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { dims, data }
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Self::new(vec![m.rows(), m.cols()], m.data().iter().map(|&v| v as f32).collect())
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self::new(vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        let (rows, cols) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => (1, self.data.len()),
        };
        DenseMatrix::new(rows, cols, self.data.iter().map(|&v| v as f64).collect())
            .expect("tensor data matches dims")
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Architecture metadata carried under the reserved `meta/*` names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchMeta {
    /// Descriptor dimension.
    pub d: usize,
    /// Attention head count.
    pub h: usize,
    /// Number of iteration blocks.
    pub t: usize,
}

pub const ATTENTION_BRANCHES: [&str; 2] = ["self", "cross"];
pub const PROJECTIONS: [&str; 6] = ["q", "k", "v", "p", "vbar", "pbar"];
pub const MESSAGE_MLPS: [&str; 2] = ["mlp", "mlp_shared"];

impl ArchMeta {
    /// Layer widths of the position encoder `(u, v, c) → d`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        vec![3, 32, 64, self.d]
    }

    /// Layer widths of the 3-layer message MLP `[message ‖ x] → d`.
    pub fn message_mlp_widths(&self) -> Vec<usize> {
        vec![2 * self.d, 2 * self.d, self.d, self.d]
    }

    /// Every tensor the architecture needs, with its shape.
    pub fn required_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("meta/d".to_string(), vec![1]),
            ("meta/h".to_string(), vec![1]),
            ("meta/T".to_string(), vec![1]),
            ("transport/alpha".to_string(), vec![1]),
        ];
        push_mlp(&mut out, "enc", &self.encoder_widths());
        for t in 0..self.t {
            for branch in ATTENTION_BRANCHES {
                for proj in PROJECTIONS {
                    let base = format!("block{t}/{branch}/{proj}");
                    out.push((format!("{base}/w"), vec![self.d, self.d]));
                    out.push((format!("{base}/b"), vec![self.d]));
                }
                for mlp in MESSAGE_MLPS {
                    push_mlp(&mut out, &format!("block{t}/{branch}/{mlp}"), &self.message_mlp_widths());
                }
            }
        }
        out
    }
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, widths: &[usize]) {
    for (k, w) in widths.windows(2).enumerate() {
        out.push((format!("{prefix}/l{k}/w"), vec![w[1], w[0]]));
        out.push((format!("{prefix}/l{k}/b"), vec![w[1]]));
    }
}

/// Name → tensor map. An empty store (or one without `meta/*`) is
/// "untrained": the pipeline bypasses the attention blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), WeightsError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(WeightsError::NameCollision(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn meta_scalar(&self, name: &str) -> Result<Option<usize>, WeightsError> {
        match self.tensors.get(name) {
            None => Ok(None),
            Some(t) if t.data.len() == 1 && t.data[0] >= 1.0 && t.data[0].fract() == 0.0 => {
                Ok(Some(t.data[0] as usize))
            }
            Some(_) => Err(WeightsError::BadMetadata(name.to_string())),
        }
    }

    /// Declared architecture, if all three `meta/*` scalars are present.
    pub fn meta(&self) -> Result<Option<ArchMeta>, WeightsError> {
        let d = self.meta_scalar("meta/d")?;
        let h = self.meta_scalar("meta/h")?;
        let t = self.meta_scalar("meta/T")?;
        Ok(match (d, h, t) {
            (Some(d), Some(h), Some(t)) => Some(ArchMeta { d, h, t }),
            _ => None,
        })
    }

    /// Checks the store against its declared architecture.
    ///
    /// Returns `Ok(None)` for an untrained (empty) store.
    pub fn validate(&self) -> Result<Option<ArchMeta>, WeightsError> {
        if self.tensors.is_empty() {
            return Ok(None);
        }
        let meta = self
            .meta()?
            .ok_or_else(|| WeightsError::MissingTensor(first_missing_meta(self)))?;
        for (name, shape) in meta.required_tensors() {
            match self.tensors.get(&name) {
                None => return Err(WeightsError::MissingTensor(name)),
                Some(t) if t.dims != shape => {
                    return Err(WeightsError::ShapeMismatch {
                        name,
                        expected: shape,
                        found: t.dims.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Some(meta))
    }

    /// True when the store carries a complete architecture.
    pub fn is_trained(&self) -> bool {
        matches!(self.validate(), Ok(Some(_)))
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix, WeightsError> {
        self.tensors
            .get(name)
            .map(Tensor::to_matrix)
            .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>, WeightsError> {
        self.tensors
            .get(name)
            .map(Tensor::to_vector)
            .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
    }

    /// Assembles an MLP stored under `prefix/l{k}/{w,b}`.
    pub fn mlp(&self, prefix: &str, layers: usize) -> Result<MlpParams, WeightsError> {
        let mut out = Vec::with_capacity(layers);
        for k in 0..layers {
            let w = self.matrix(&format!("{prefix}/l{k}/w"))?;
            let b = self.vector(&format!("{prefix}/l{k}/b"))?;
            let act = if k + 1 == layers {
                Activation::Linear
            } else {
                Activation::Relu
            };
            let expected = vec![w.rows()];
            let found = vec![b.len()];
            out.push(Layer::new(w, b, act).map_err(|_| WeightsError::ShapeMismatch {
                name: format!("{prefix}/l{k}/b"),
                expected,
                found,
            })?);
        }
        MlpParams::new(out).map_err(|_| WeightsError::ShapeMismatch {
            name: prefix.to_string(),
            expected: vec![],
            found: vec![],
        })
    }

    pub fn insert_mlp(&mut self, prefix: &str, mlp: &MlpParams) {
        for (k, layer) in mlp.layers().iter().enumerate() {
            self.set(format!("{prefix}/l{k}/w"), Tensor::from_matrix(&layer.weight));
            self.set(format!("{prefix}/l{k}/b"), Tensor::from_vector(&layer.bias));
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_tensors(&WEIGHTS_MAGIC, self.tensors.iter())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut store = WeightStore::new();
        for (name, tensor) in decode_tensors(&WEIGHTS_MAGIC, bytes)? {
            store.insert(name, tensor)?;
        }
        Ok(store)
    }
}

fn first_missing_meta(store: &WeightStore) -> String {
    ["meta/d", "meta/h", "meta/T"]
        .into_iter()
        .find(|n| store.get(n).is_none())
        .unwrap_or("meta/d")
        .to_string()
}

/// Serializes tensors in iteration order with the given magic.
pub fn encode_tensors<'a>(
    magic: &[u8; 4],
    tensors: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a tensor container, keeping file order. Nothing is returned
/// unless the whole buffer parses.
pub fn decode_tensors(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<(String, Tensor)>, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let found: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &found != magic {
        return Err(WeightsError::BadMagic {
            expected: *magic,
            found,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightsError::InvalidName(name_at))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(WeightsError::NameCollision(name));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let payload = r.take(len.checked_mul(4).ok_or(WeightsError::Truncated {
            offset: r.pos,
            needed: usize::MAX,
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor { dims, data }));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

/// Reads and validates a weight file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore, WeightsError> {
    let bytes = std::fs::read(path)?;
    let store = WeightStore::from_bytes(&bytes)?;
    store.validate()?;
    Ok(store)
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}
