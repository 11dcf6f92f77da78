//! Checkpoint files.
//!
//! ```text
//! "MDAE" | version u16 = 1 | meta length u32 | meta JSON (spec, epoch, val_psnr)
//! tensor count u32
//! per tensor: name length u16 | name | dtype u8 (0 = f32) | ndim u8 | dims u32 x ndim | f32 payload
//! ```
//! All integers little-endian. Batch-norm running statistics are ordinary
//! (non-trainable) tensors in the list.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::mvol::write_atomic;
use crate::error::{Error, Result};
use crate::graph::ModelSpec;
use crate::metrics::float_str;
use crate::model::MergedAutoencoder;

pub const MAGIC: &[u8; 4] = b"MDAE";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: ModelSpec,
    epoch: usize,
    #[serde(with = "float_str")]
    val_psnr: f64,
}

/// A model snapshot with the epoch and validation PSNR it was taken at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MergedAutoencoder<f32>,
    pub epoch: usize,
    pub val_psnr: f64,
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return fmt_err(self.buf.len(), format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            spec: self.model.spec().clone(),
            epoch: self.epoch,
            val_psnr: self.val_psnr,
        })?;
        let reg = self.model.registry();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
        for (_, p) in reg.iter() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(0);
            let dims = p.logical_dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return fmt_err(0, "bad magic, expected \"MDAE\"");
        }
        r.pos = 4;
        let version = r.u16("version")?;
        if version != VERSION {
            return fmt_err(4, format!("unsupported version {version}"));
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta_at = r.pos;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len, "meta")?).map_err(|e| Error::Format {
                offset: meta_at as u64,
                msg: format!("bad meta JSON: {e}"),
            })?;
        let mut model =
            MergedAutoencoder::<f32>::new(meta.spec.clone(), 0).map_err(|e| Error::Format {
                offset: meta_at as u64,
                msg: format!("invalid spec: {e}"),
            })?;
        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != model.registry().len() {
            return fmt_err(
                count_at,
                format!("{count} tensors, spec declares {}", model.registry().len()),
            );
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let at = r.pos;
            let n = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?;
            let Some(id) = model.registry().find(name) else {
                return fmt_err(at, format!("unknown tensor {name}"));
            };
            let dtype_at = r.pos;
            if r.u8("dtype")? != 0 {
                return fmt_err(dtype_at, format!("tensor {name}: only f32 is supported"));
            }
            let ndim = r.u8("ndim")? as usize;
            let dims_at = r.pos;
            let dims = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let want = model.registry().param(id).logical_dims();
            if dims != want {
                return fmt_err(
                    dims_at,
                    format!("tensor {name}: dims {dims:?}, spec expects {want:?}"),
                );
            }
            let len: usize = dims.iter().product();
            let payload = r.take(len * 4, "payload")?;
            let value = model.registry_mut().value_mut(id);
            for (v, c) in value.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes")));
            }
            if std::mem::replace(&mut seen[id.0], true) {
                return fmt_err(at, format!("tensor {name} appears twice"));
            }
        }
        if r.pos != bytes.len() {
            return fmt_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            model,
            epoch: meta.epoch,
            val_psnr: meta.val_psnr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::tensor::{Dims, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelSpec {
        ModelSpec {
            encoder_channels: vec![2, 4, 8],
            bottleneck_channels: 16,
            decoder_channels: vec![16, 8, 4],
            ..ModelSpec::default()
        }
    }

    fn trained() -> (Checkpoint, Tensor4<f32>) {
        let mut m = MergedAutoencoder::<f32>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::random_uniform(Dims::new(2, 1, 16, 16), 0.0, 1.0, &mut rng);
        let out = m.forward_all(&x, Mode::Train).unwrap();
        m.absorb_batch_stats(&out.cache);
        (
            Checkpoint {
                model: m,
                epoch: 4,
                val_psnr: 21.5,
            },
            x,
        )
    }

    #[test]
    fn byte_identical_resave_and_inference() {
        let (ck, x) = trained();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.val_psnr, 21.5);
        assert_eq!(
            back.model.predict_average(&x).unwrap(),
            ck.model.predict_average(&x).unwrap()
        );
    }

    #[test]
    fn infinite_psnr_survives() {
        let (mut ck, _) = trained();
        ck.val_psnr = f64::INFINITY;
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.val_psnr, f64::INFINITY);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected_without_touching_them() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let (ck, _) = trained();
        ck.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        assert_eq!(fs::read(&p).unwrap(), bytes);

        let good = ck.to_bytes().unwrap();
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(Error::Format { offset: 4, .. })
        ));
        for cut in [3, 7, 20, good.len() / 2, good.len() - 1] {
            assert!(Checkpoint::from_bytes(&good[..cut]).is_err(), "cut {cut}");
        }
        let mut long = good.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
