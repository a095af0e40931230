//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "E2LLMCKP" | u32 version
//! model block  : 8 × u32 (vocab, d_model, layers, heads, head_dim, ffn_mult,
//!                base_window, max_seq_len), f64 rope_base
//! u8 phase | u64 step
//! policy block : u32 g_max, u8 scale dist, u32 fixed_scale, u8 offset dist,
//!                u32 sink_count, u32 base_window, u32 trained_window, u8 per_sample
//! u32 count, then per parameter: u32 name length, name, u32 rank, rank × u32
//!                dims, f32 values
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::augment::{AugmentPolicy, OffsetDistribution, ScaleDistribution};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::output::atomic_write;
use crate::tensor::Tensor;
use crate::train::Phase;

pub const MAGIC: &[u8; 8] = b"E2LLMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub phase: Phase,
    pub step: u64,
    /// Policy the weights were last trained under.
    pub policy: AugmentPolicy,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, phase: Phase, step: u64, policy: &AugmentPolicy) -> Self {
        let names = model.config().param_specs().into_iter().map(|(n, _)| n);
        Self {
            config: model.config().clone(),
            phase,
            step,
            policy: policy.clone(),
            params: names.zip(model.params().iter().cloned()).collect(),
        }
    }

    /// Rebuilds the model, checking every parameter's name and shape.
    pub fn into_model(self) -> Result<Model<f32>> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Malformed(format!(
                "checkpoint holds {} parameters, config needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for ((want_name, want_shape), (name, t)) in specs.into_iter().zip(self.params) {
            if name != want_name {
                return Err(Error::Malformed(format!(
                    "expected parameter `{want_name}`, found `{name}`"
                )));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(Error::ParamShape {
                    name,
                    expected: want_shape,
                    found: t.shape().to_vec(),
                });
            }
            tensors.push(t);
        }
        Model::from_params(self.config, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.head_dim,
            c.ffn_mult,
            c.base_window,
            c.max_seq_len,
        ] {
            w.u32(v as u32);
        }
        w.0.extend_from_slice(&c.rope_base.to_le_bytes());
        w.0.push(match self.phase {
            Phase::Pretrain => 0,
            Phase::Extend => 1,
        });
        w.0.extend_from_slice(&self.step.to_le_bytes());
        let p = &self.policy;
        w.u32(p.g_max);
        w.0.push(match p.scale_distribution {
            ScaleDistribution::Uniform => 0,
            ScaleDistribution::Fixed => 1,
        });
        w.u32(p.fixed_scale);
        w.0.push(match p.offset_distribution {
            OffsetDistribution::Uniform => 0,
            OffsetDistribution::Zero => 1,
        });
        w.u32(p.sink_count as u32);
        w.u32(p.base_window as u32);
        w.u32(p.trained_window as u32);
        w.0.push(p.per_sample as u8);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for v in t.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    /// Parses a checkpoint. The checksum is verified before anything else is
    /// interpreted, so truncated or corrupted files never yield a model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Magic);
        }
        let body_len = bytes.len().saturating_sub(4).max(MAGIC.len());
        let (body, tail) = bytes.split_at(body_len);
        let stored = (tail.len() == 4).then(|| u32::from_le_bytes(tail.try_into().expect("4 bytes")));
        let computed = crc32fast::hash(body);
        if stored != Some(computed) {
            return Err(Error::Checksum {
                stored: stored.unwrap_or(0),
                computed,
            });
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let rope_base = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            head_dim: dims[4],
            ffn_mult: dims[5],
            base_window: dims[6],
            max_seq_len: dims[7],
            rope_base,
        };
        let phase = match r.u8()? {
            0 => Phase::Pretrain,
            1 => Phase::Extend,
            x => return Err(Error::Malformed(format!("unknown phase tag {x}"))),
        };
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let g_max = r.u32()?;
        let scale_distribution = match r.u8()? {
            0 => ScaleDistribution::Uniform,
            1 => ScaleDistribution::Fixed,
            x => return Err(Error::Malformed(format!("unknown scale distribution tag {x}"))),
        };
        let fixed_scale = r.u32()?;
        let offset_distribution = match r.u8()? {
            0 => OffsetDistribution::Uniform,
            1 => OffsetDistribution::Zero,
            x => return Err(Error::Malformed(format!("unknown offset distribution tag {x}"))),
        };
        let policy = AugmentPolicy {
            g_max,
            scale_distribution,
            fixed_scale,
            offset_distribution,
            sink_count: r.u32()? as usize,
            base_window: r.u32()? as usize,
            trained_window: r.u32()? as usize,
            per_sample: r.u8()? != 0,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Malformed("parameter too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            phase,
            step,
            policy,
            params,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Malformed(format!(
                "unexpected end of checkpoint at byte {}",
                self.pos
            )));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            ffn_mult: 2,
            base_window: 16,
            rope_base: 10_000.0,
            max_seq_len: 64,
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn ckpt() -> Checkpoint {
        let policy = AugmentPolicy {
            g_max: 8,
            base_window: 16,
            trained_window: 16,
            ..AugmentPolicy::default()
        };
        Checkpoint::from_model(&model(), Phase::Extend, 1234, &policy)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = ckpt();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"E2LLMCKP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.into_model().unwrap(), model());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = ckpt().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checksum { .. })),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Magic)));
    }

    #[test]
    fn version_and_shape_errors_are_distinct() {
        let mut bytes = ckpt().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(7))));

        let mut c = ckpt();
        c.params[1].1 = Tensor::zeros(&[3]);
        assert!(matches!(c.into_model(), Err(Error::ParamShape { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ckpt()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ckpt());
    }
}
