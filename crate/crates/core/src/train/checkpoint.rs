use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::arch::ModelSpec;
use crate::network::ModelParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors plus the metadata needed to restore them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub fingerprint: [u8; 32],
    pub epoch: usize,
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: String,
    fingerprint: String,
    epoch: usize,
    config: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_params(spec: &ModelSpec, params: &ModelParams, epoch: usize, config: serde_json::Value) -> Result<Self, TrainError> {
        Ok(Self {
            model: spec.name.clone(),
            fingerprint: spec.fingerprint()?,
            epoch,
            config,
            tensors: params.iter().map(|(n, e)| (n.to_string(), e.tensor.clone())).collect(),
        })
    }

    /// Rebuild parameters for `spec`, refusing checkpoints written for a different architecture.
    pub fn into_params(self, spec: &ModelSpec) -> Result<ModelParams, TrainError> {
        let expected = spec.fingerprint()?;
        if expected != self.fingerprint {
            return Err(TrainError::Compatibility {
                model: spec.name.clone(),
                expected: hex(&expected),
                found: hex(&self.fingerprint),
            });
        }
        Ok(ModelParams::from_tensors(spec, self.tensors)?)
    }
}

/// Binary layout: magic, version, fingerprint, tensor count, then per tensor its name,
/// rank, extents and little-endian `f32` data.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.fingerprint);
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| TrainError::Format(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| TrainError::Format(format!("tensor `{name}` has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TrainError::Format(format!("tensor `{name}` extent {d} overflows")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Inverse of [`encode_checkpoint`]. Metadata fields other than the fingerprint are left empty.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(TrainError::Format("missing OVCK magic".into()));
    }
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Format(format!("unsupported version {version}")));
    }
    let fingerprint: [u8; 32] = r.take(32, "header")?.try_into().unwrap();
    let count = r.u32("header")? as usize;
    let mut tensors = IndexMap::new();
    for i in 0..count {
        let idx = format!("tensor #{i} name");
        let len = u16::from_le_bytes(r.take(2, &idx)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len, &idx)?.to_vec())
            .map_err(|_| TrainError::Format(format!("tensor #{i} name is not UTF-8")))?;
        let what = format!("tensor `{name}`");
        let rank = r.take(1, &what)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &what)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| TrainError::Format(format!("{what}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(TrainError::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model: String::new(),
        fingerprint,
        epoch: 0,
        config: serde_json::Value::Null,
        tensors,
    })
}

/// Write the binary checkpoint and its `<path>.meta.json` sidecar.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| TrainError::Io { path: p, source }
    };
    fs::write(path, encode_checkpoint(ck)?).map_err(io(path))?;
    let meta = Sidecar {
        model: ck.model.clone(),
        fingerprint: hex(&ck.fingerprint),
        epoch: ck.epoch,
        config: ck.config.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serialises");
    fs::write(&side, json).map_err(io(&side))
}

/// Read a checkpoint; the sidecar is optional.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ck = decode_checkpoint(&bytes)?;
    if let Ok(text) = fs::read_to_string(sidecar_path(path)) {
        let meta: Sidecar = serde_json::from_str(&text).map_err(|e| TrainError::Format(format!("sidecar: {e}")))?;
        ck.model = meta.model;
        ck.epoch = meta.epoch;
        ck.config = meta.config;
    }
    Ok(ck)
}
