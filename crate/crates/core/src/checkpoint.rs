//! Binary checkpoint format.
//!
//! ```text
//! "TLRA" | version u32 | count u32
//! count × ( name_len u16 | name utf-8 | rows u64 | cols u64 | rows·cols f64, row-major )
//! meta_len u64 | metadata utf-8 JSON
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in name
//! order, so equal models produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, FrozenInit, InitVariant, LinearAdapter, MaskSchedule};
use crate::config::ScheduleConfig;
use crate::diffusion::{hidden_layer_name, ConditionEmbedding, DatasetConfig, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::gradnet::{Activation, Layer, Linear, Mlp, Param};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"TLRA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Matrix>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for (name, m) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = u64::from_le_bytes(r.array()?) as usize;
            let cols = u64::from_le_bytes(r.array()?) as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} overruns the file")))?;
            let data = (0..n)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), m).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let meta_len = u64::from_le_bytes(r.array()?) as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after metadata".into()));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn tensor(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub layer: String,
    pub kind: AdapterKind,
    pub r: usize,
    pub r_min: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    pub variant: Option<InitVariant>,
    pub seed: u64,
}

/// Everything besides tensors needed to rebuild a [`Denoiser`] and its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub stage: String,
    pub seed: u64,
    pub contexts: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub dataset_seed: u64,
    pub adapters: Vec<AdapterMeta>,
}

/// Serializes a denoiser with the given metadata. The `adapters` field of
/// `meta` is filled in from the network.
pub fn from_denoiser(denoiser: &Denoiser, mut meta: ModelMeta) -> Result<Checkpoint> {
    let mut tensors = BTreeMap::new();
    meta.adapters.clear();
    for layer in &denoiser.net.layers {
        let name = &layer.name;
        tensors.insert(format!("{name}.b"), layer.linear.bias().value.clone());
        tensors.insert(format!("{name}.W"), layer.linear.base_weight().clone());
        if let Some(ad) = layer.linear.adapter() {
            tensors.insert(format!("{name}.A"), ad.a.value.clone());
            tensors.insert(format!("{name}.B"), ad.b.value.clone());
            if let Some(s) = &ad.s {
                tensors.insert(format!("{name}.S"), s.value.clone());
            }
            if let Some(init) = ad.frozen_init() {
                tensors.insert(format!("{name}.A0"), init.a0.clone());
                tensors.insert(format!("{name}.B0"), init.b0.clone());
                tensors.insert(
                    format!("{name}.S0"),
                    Matrix::from_vec(1, init.s0.len(), init.s0.clone())?,
                );
            }
            meta.adapters.push(AdapterMeta {
                layer: name.clone(),
                kind: ad.kind(),
                r: ad.rank(),
                r_min: ad.schedule().map(|s| s.min_rank()),
                horizon: ad.schedule().map(|s| s.horizon()),
                variant: ad.variant(),
                seed: ad.seed(),
            });
        }
    }
    tensors.insert("cond_embedding".into(), denoiser.embedding.table().clone());
    Ok(Checkpoint {
        tensors,
        metadata: serde_json::to_value(&meta)?,
    })
}

pub fn model_meta(ckpt: &Checkpoint) -> Result<ModelMeta> {
    Ok(serde_json::from_value(ckpt.metadata.clone())?)
}

/// Rebuilds the denoiser stored in `ckpt`. When adapters are present only
/// their factors are trainable.
pub fn to_denoiser(ckpt: &Checkpoint) -> Result<Denoiser> {
    let meta = model_meta(ckpt)?;
    let cfg = meta.denoiser.clone();
    let schedule = meta.schedule.build()?;
    let adapted = !meta.adapters.is_empty();
    let mut names = vec!["in".to_string()];
    names.extend((0..cfg.hidden_layers).map(hidden_layer_name));
    names.push("out".to_string());
    let mut layers = Vec::with_capacity(names.len());
    for name in names {
        let w = ckpt.tensor(&format!("{name}.W"))?;
        let b = ckpt.tensor(&format!("{name}.b"))?;
        let activation = if name == "out" {
            Activation::Identity
        } else {
            Activation::Silu
        };
        let linear = match meta.adapters.iter().find(|a| a.layer == name) {
            Some(am) => Linear::Adapted {
                adapter: Box::new(restore_adapter(ckpt, &name, am, w)?),
                bias: Param::frozen(b),
            },
            None if adapted => Linear::Dense {
                weight: Param::frozen(w),
                bias: Param::frozen(b),
            },
            None => Linear::dense(w, b),
        };
        layers.push(Layer {
            name,
            linear,
            activation,
        });
    }
    let net = Mlp::new(layers);
    check_shapes(&net, &cfg)?;
    let embedding = ConditionEmbedding::from_table(ckpt.tensor("cond_embedding")?)?;
    if embedding.contexts() != meta.contexts || embedding.dim() != cfg.cond_dim {
        return Err(Error::Format(
            "condition embedding shape disagrees with metadata".into(),
        ));
    }
    Ok(Denoiser {
        config: cfg,
        net,
        embedding,
        schedule,
    })
}

fn check_shapes(net: &Mlp, cfg: &DenoiserConfig) -> Result<()> {
    let w = cfg.hidden_width;
    let ok = net.layers.iter().enumerate().all(|(i, l)| {
        let (n, m) = (l.linear.out_features(), l.linear.in_features());
        let expected = if i == 0 {
            (w, cfg.input_dim())
        } else if i == net.layers.len() - 1 {
            (2, w)
        } else {
            (w, w)
        };
        (n, m) == expected && l.linear.bias().value.shape() == (n, 1)
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Format("layer shapes disagree with denoiser metadata".into()))
    }
}

fn restore_adapter(ckpt: &Checkpoint, name: &str, am: &AdapterMeta, base: Matrix) -> Result<LinearAdapter> {
    let get = |suffix: &str| ckpt.tensor(&format!("{name}.{suffix}"));
    let row_vec = |m: Matrix| m.into_vec();
    let s = if am.kind.has_scale() {
        Some(row_vec(get("S")?))
    } else {
        None
    };
    let init = if am.kind.is_orthogonal() {
        Some(FrozenInit {
            a0: get("A0")?,
            b0: get("B0")?,
            s0: row_vec(get("S0")?),
        })
    } else {
        None
    };
    let schedule = match (am.r_min, am.horizon) {
        (Some(r_min), Some(t)) => Some(MaskSchedule::new(am.r, r_min, t)?),
        (None, None) => None,
        _ => return Err(Error::Format(format!("{name}: r_min and T must appear together"))),
    };
    let a = get("A")?;
    if a.rows() != am.r {
        return Err(Error::Format(format!("{name}: rank in metadata differs from A")));
    }
    LinearAdapter::from_parts(base, a, get("B")?, s, init, am.kind, schedule, am.variant, am.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "b".to_string(),
            Matrix::from_rows(&[&[1.5, -0.0], &[f64::MIN_POSITIVE, 1e300]]),
        );
        tensors.insert("a".to_string(), Matrix::from_rows(&[&[3.0]]));
        Checkpoint {
            tensors,
            metadata: serde_json::json!({"k": [1, 2]}),
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TLRA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(&bytes[15..23], &1u64.to_le_bytes());
        assert_eq!(&bytes[23..31], &1u64.to_le_bytes());
        assert_eq!(&bytes[31..39], &3.0f64.to_le_bytes());
        let meta = br#"{"k":[1,2]}"#;
        let tail = &bytes[bytes.len() - meta.len() - 8..];
        assert_eq!(&tail[..8], &(meta.len() as u64).to_le_bytes());
        assert_eq!(&tail[8..], meta);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensors["b"].get(0, 1).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));
        for cut in [3, 13, 30, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));
    }
}
