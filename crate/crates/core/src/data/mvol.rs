//! MVOL: a minimal little-endian container for 3-D volumes.
//!
//! ```text
//! 0   magic "MVOL"
//! 4   version u16 = 1
//! 6   dtype u8 (0 = f32, 1 = u16 labels)
//! 7   ndim u8 = 3
//! 8   dims 3 x u32 (slices, h, w)
//! 20  12 zero bytes
//! 32  row-major payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    Labels = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::Labels => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    F32(Volume<f32>),
    Labels(Volume<u16>),
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

fn header(dtype: Dtype, dims: [usize; 3]) -> Result<Vec<u8>> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.push(dtype as u8);
    h.push(3);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Contract(format!("dimension {d} does not fit in u32")))?;
        h.extend_from_slice(&d.to_le_bytes());
    }
    h.resize(HEADER_LEN, 0);
    Ok(h)
}

pub fn encode_f32(vol: &Volume<f32>) -> Result<Vec<u8>> {
    let mut out = header(Dtype::F32, vol.dims())?;
    out.reserve(vol.data().len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(vol: &Volume<u16>) -> Result<Vec<u8>> {
    let mut out = header(Dtype::Labels, vol.dims())?;
    out.reserve(vol.data().len() * 2);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyVolume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return fmt_err(0, "bad magic, expected \"MVOL\"");
    }
    if bytes.len() < HEADER_LEN {
        return fmt_err(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        );
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return fmt_err(4, format!("unsupported version {version}"));
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::Labels,
        d => return fmt_err(6, format!("unknown dtype {d}")),
    };
    if bytes[7] != 3 {
        return fmt_err(7, format!("ndim {} (only 3 is supported)", bytes[7]));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    if let Some(o) = bytes[20..HEADER_LEN].iter().position(|&b| b != 0) {
        return fmt_err(20 + o, "reserved header bytes must be zero");
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
    let Some((count, payload)) = count else {
        return fmt_err(8, "dims overflow the addressable size");
    };
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return fmt_err(
            bytes.len(),
            format!("truncated payload: {} of {payload} bytes", body.len()),
        );
    }
    if body.len() > payload {
        return fmt_err(
            HEADER_LEN + payload,
            format!("{} trailing bytes", body.len() - payload),
        );
    }
    Ok(match dtype {
        Dtype::F32 => {
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            AnyVolume::F32(Volume::from_vec(dims, data)?)
        }
        Dtype::Labels => {
            let data = body
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect::<Vec<_>>();
            debug_assert_eq!(data.len(), count);
            AnyVolume::Labels(Volume::from_vec(dims, data)?)
        }
    })
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_volume(path: &Path, vol: &Volume<f32>) -> Result<()> {
    write_atomic(path, &encode_f32(vol)?)
}

pub fn save_labels(path: &Path, vol: &Volume<u16>) -> Result<()> {
    write_atomic(path, &encode_labels(vol)?)
}

pub fn load_any(path: &Path) -> Result<AnyVolume> {
    decode(&fs::read(path)?)
}

pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    match load_any(path)? {
        AnyVolume::F32(v) => Ok(v),
        AnyVolume::Labels(_) => fmt_err(
            6,
            format!("{} holds labels, expected f32 intensities", path.display()),
        ),
    }
}

pub fn load_labels(path: &Path) -> Result<Volume<u16>> {
    match load_any(path)? {
        AnyVolume::Labels(v) => Ok(v),
        AnyVolume::F32(_) => fmt_err(
            6,
            format!("{} holds f32 intensities, expected labels", path.display()),
        ),
    }
}
