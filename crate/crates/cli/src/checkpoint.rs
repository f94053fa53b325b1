//! Binary checkpoint format.
//!
//! ```text
//! "RSAK"  u32 version  u32 tensor_count
//! per tensor:
//!     u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
//!     u8 trainable, f64 values (row-major)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The model configuration and
//! the freeze policy travel as `meta.*` tensors ahead of the weights.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rsak_core::model::{AdapterMode, AdapterVariant, ModelConfig, ModelWeights};
use rsak_core::FreezePolicy;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RSAK";
pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("{0} unexpected bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor name at byte {0} is not valid UTF-8")]
    Name(usize),
    #[error("tensor `{name}` declares {declared} values but has dims {dims:?}")]
    Dims {
        name: String,
        declared: usize,
        dims: Vec<u32>,
    },
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("missing metadata `{0}`")]
    MissingMeta(String),
    #[error("invalid metadata `{name}`: {reason}")]
    BadMeta { name: String, reason: String },
    #[error("tensor `{0}` does not belong to the configured model")]
    Unexpected(String),
    #[error("tensor `{name}` must be rank {expected}")]
    Rank { name: String, expected: usize },
    #[error(transparent)]
    Model(#[from] rsak_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub trainable: bool,
    pub values: Vec<f64>,
}

impl Tensor {
    fn scalar(name: &str, value: f64) -> Self {
        Tensor {
            name: format!("{META}{name}"),
            dims: vec![],
            trainable: false,
            values: vec![value],
        }
    }
}

/// A decoded checkpoint: tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

fn dims_len(dims: &[u32]) -> usize {
    dims.iter().map(|&d| d as usize).product()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            assert_eq!(dims_len(&t.dims), t.values.len(), "tensor {} dims", t.name);
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(u8::from(t.trainable));
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint. The checksum is checked before
    /// anything else is interpreted.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 4 + 4 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Name(at))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let trainable = r.u8()? != 0;
            let n = dims_len(&dims);
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                name,
                dims,
                trainable,
                values,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Trailing(body.len() - r.pos));
        }
        Ok(Checkpoint { tensors })
    }

    /// Snapshot of `w`, with trainable flags set by `policy`.
    pub fn from_model(w: &ModelWeights, policy: FreezePolicy) -> Self {
        let mut tensors = meta_tensors(&w.cfg, policy, w.is_merged());
        w.visit(&mut |name, (rows, cols), values| {
            tensors.push(Tensor {
                name: name.to_string(),
                dims: vec![rows as u32, cols as u32],
                trainable: policy.is_trainable(name),
                values: values.to_vec(),
            })
        });
        Checkpoint { tensors }
    }

    /// Rebuilds the model. The weight tensors must be exactly the set the
    /// stored configuration implies, in either its trainable or merged form.
    pub fn to_model(&self) -> Result<(ModelWeights, FreezePolicy)> {
        let mut seen = BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(CheckpointError::Duplicate(t.name.clone()));
            }
            if dims_len(&t.dims) != t.values.len() {
                return Err(CheckpointError::Dims {
                    name: t.name.clone(),
                    declared: t.values.len(),
                    dims: t.dims.clone(),
                });
            }
        }
        let (cfg, policy, merged) = self.read_meta()?;
        let mut w = ModelWeights::skeleton(&cfg, merged)?;
        let expected: BTreeSet<String> = w.param_shapes().into_iter().map(|(n, _)| n).collect();
        for t in self.tensors.iter().filter(|t| !t.name.starts_with(META)) {
            if !expected.contains(&t.name) {
                return Err(CheckpointError::Unexpected(t.name.clone()));
            }
            if t.dims.len() != 2 {
                return Err(CheckpointError::Rank {
                    name: t.name.clone(),
                    expected: 2,
                });
            }
        }
        w.load_from(|name| {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| ((t.dims[0] as usize, t.dims[1] as usize), t.values.clone()))
        })?;
        Ok((w, policy))
    }

    fn meta(&self, key: &str) -> Result<&Tensor> {
        let name = format!("{META}{key}");
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or(CheckpointError::MissingMeta(name))
    }

    fn meta_f64(&self, key: &str) -> Result<f64> {
        let t = self.meta(key)?;
        match t.values.as_slice() {
            [v] if t.dims.is_empty() => Ok(*v),
            _ => Err(bad_meta(key, "expected a scalar")),
        }
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta_f64(key)?;
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(bad_meta(key, &format!("{v} is not a count")))
        }
    }

    fn meta_bool(&self, key: &str) -> Result<bool> {
        match self.meta_usize(key)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad_meta(key, &format!("{v} is not 0 or 1"))),
        }
    }

    fn read_meta(&self) -> Result<(ModelConfig, FreezePolicy, bool)> {
        let mode = self.meta_usize("adapter_mode")?;
        let adapter_mode = AdapterMode::from_code(mode as u8)
            .filter(|_| mode <= u8::MAX as usize)
            .ok_or_else(|| bad_meta("adapter_mode", &format!("unknown code {mode}")))?;
        let adapter_variant = match self.meta_usize("adapter_variant")? {
            0 => AdapterVariant::Plain,
            1 => AdapterVariant::Rs,
            v => return Err(bad_meta("adapter_variant", &format!("unknown code {v}"))),
        };
        let policy = match self.meta_usize("policy")? {
            0 => FreezePolicy::LinearProbe,
            1 => FreezePolicy::FullFinetune,
            2 => FreezePolicy::Adapters,
            v => return Err(bad_meta("policy", &format!("unknown code {v}"))),
        };
        let mask = self.meta("adapter_layer_mask")?;
        if mask.dims.len() != 1 {
            return Err(bad_meta("adapter_layer_mask", "expected a vector"));
        }
        let adapter_layer_mask = mask
            .values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(bad_meta("adapter_layer_mask", &format!("{v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig {
            d: self.meta_usize("d")?,
            n_layers: self.meta_usize("n_layers")?,
            n_heads: self.meta_usize("n_heads")?,
            d_prime: self.meta_usize("d_prime")?,
            vocab_size: self.meta_usize("vocab_size")?,
            max_text_len: self.meta_usize("max_text_len")?,
            image_side: self.meta_usize("image_side")?,
            patch_grid: self.meta_usize("patch_grid")?,
            patch_channels: self.meta_usize("patch_channels")?,
            n_answers: self.meta_usize("n_answers")?,
            head_hidden: self.meta_usize("head_hidden")?,
            adapter_mode,
            adapter_variant,
            skip_connection_in_adapter: self.meta_bool("skip_connection_in_adapter")?,
            scaling_enabled: self.meta_bool("scaling_enabled")?,
            adapter_layer_mask,
            init_std: self.meta_f64("init_std")?,
        };
        cfg.validate()?;
        Ok((cfg, policy, self.meta_bool("merged")?))
    }
}

fn bad_meta(key: &str, reason: &str) -> CheckpointError {
    CheckpointError::BadMeta {
        name: format!("{META}{key}"),
        reason: reason.to_string(),
    }
}

fn meta_tensors(cfg: &ModelConfig, policy: FreezePolicy, merged: bool) -> Vec<Tensor> {
    let policy_code = match policy {
        FreezePolicy::LinearProbe => 0.0,
        FreezePolicy::FullFinetune => 1.0,
        FreezePolicy::Adapters => 2.0,
    };
    let variant = match cfg.adapter_variant {
        AdapterVariant::Plain => 0.0,
        AdapterVariant::Rs => 1.0,
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mut out = vec![
        Tensor::scalar("d", cfg.d as f64),
        Tensor::scalar("n_layers", cfg.n_layers as f64),
        Tensor::scalar("n_heads", cfg.n_heads as f64),
        Tensor::scalar("d_prime", cfg.d_prime as f64),
        Tensor::scalar("vocab_size", cfg.vocab_size as f64),
        Tensor::scalar("max_text_len", cfg.max_text_len as f64),
        Tensor::scalar("image_side", cfg.image_side as f64),
        Tensor::scalar("patch_grid", cfg.patch_grid as f64),
        Tensor::scalar("patch_channels", cfg.patch_channels as f64),
        Tensor::scalar("n_answers", cfg.n_answers as f64),
        Tensor::scalar("head_hidden", cfg.head_hidden as f64),
        Tensor::scalar("adapter_mode", cfg.adapter_mode.code() as f64),
        Tensor::scalar("adapter_variant", variant),
        Tensor::scalar("skip_connection_in_adapter", flag(cfg.skip_connection_in_adapter)),
        Tensor::scalar("scaling_enabled", flag(cfg.scaling_enabled)),
        Tensor::scalar("init_std", cfg.init_std),
        Tensor::scalar("policy", policy_code),
        Tensor::scalar("merged", flag(merged)),
    ];
    out.push(Tensor {
        name: format!("{META}adapter_layer_mask"),
        dims: vec![cfg.adapter_layer_mask.len() as u32],
        trainable: false,
        values: cfg.adapter_layer_mask.iter().map(|&b| flag(b)).collect(),
    });
    out
}

pub fn save(path: &Path, w: &ModelWeights, policy: FreezePolicy) -> Result<()> {
    fs::write(path, Checkpoint::from_model(w, policy).encode()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(ModelWeights, FreezePolicy)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::decode(&bytes)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelWeights {
        let mut cfg = ModelConfig::toy();
        cfg.d = 16;
        cfg.n_layers = 2;
        cfg.d_prime = 4;
        cfg.head_hidden = 8;
        cfg.adapter_layer_mask = vec![true, false];
        ModelWeights::init(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let w = model();
        let bytes = Checkpoint::from_model(&w, FreezePolicy::Adapters).encode();
        let (back, policy) = Checkpoint::decode(&bytes).unwrap().to_model().unwrap();
        assert_eq!(back, w);
        assert_eq!(policy, FreezePolicy::Adapters);
        assert_eq!(Checkpoint::from_model(&back, policy).encode(), bytes);
    }

    #[test]
    fn merged_models_round_trip() {
        let m = model().merged().unwrap();
        let bytes = Checkpoint::from_model(&m, FreezePolicy::Adapters).encode();
        let (back, _) = Checkpoint::decode(&bytes).unwrap().to_model().unwrap();
        assert!(back.is_merged());
        assert_eq!(back, m);
    }

    #[test]
    fn trainable_flags_follow_policy() {
        let ck = Checkpoint::from_model(&model(), FreezePolicy::LinearProbe);
        for t in &ck.tensors {
            assert_eq!(t.trainable, t.name.starts_with("head."), "{}", t.name);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_model(&model(), FreezePolicy::Adapters).encode();
        assert_eq!(&bytes[..4], b"RSAK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(n, Checkpoint::decode(&bytes).unwrap().tensors.len());
        let body = &bytes[..bytes.len() - 4];
        assert_eq!(crc32fast::hash(body).to_le_bytes(), bytes[bytes.len() - 4..]);
    }

    #[test]
    fn rejects_damage() {
        let bytes = Checkpoint::from_model(&model(), FreezePolicy::Adapters).encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Crc { .. })
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&flipped), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn rejects_foreign_tensors() {
        let mut ck = Checkpoint::from_model(&model(), FreezePolicy::Adapters);
        ck.tensors.push(Tensor {
            name: "layers.00.extra".into(),
            dims: vec![1, 1],
            trainable: false,
            values: vec![0.0],
        });
        let err = Checkpoint::decode(&ck.encode()).unwrap().to_model().unwrap_err();
        assert!(matches!(err, CheckpointError::Unexpected(_)));

        let mut ck = Checkpoint::from_model(&model(), FreezePolicy::Adapters);
        ck.tensors.retain(|t| t.name != "meta.d");
        let err = ck.to_model().unwrap_err();
        assert!(err.to_string().contains("meta.d"));
    }
}
