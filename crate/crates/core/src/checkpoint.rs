//! Versioned binary container shared by all trained models.
//!
//! Layout (little endian):
//!
//! ```text
//! magic[8] | version u32 | header_len u32 | header (JSON)
//! | n_tensors u32 | { name_len u32 | name | ndim u32 | dims u64* | f32 data }*
//! | sha256[32] over everything before it
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::hex_digest;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const DENOISER_MAGIC: &[u8; 8] = b"PDIFDNSR";
pub const AUTOENCODER_MAGIC: &[u8; 8] = b"PDIFAUTO";
pub const SEGMENTER_MAGIC: &[u8; 8] = b"PDIFSEGM";
pub const ENCODER_MAGIC: &[u8; 8] = b"PDIFFEAT";
const DIGEST_LEN: usize = 32;

fn magic_name(m: &[u8]) -> String {
    String::from_utf8_lossy(m).into_owned()
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, params: &ParamSet<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + params.numel() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex digest stored in the trailer of an encoded container.
pub fn trailer_digest(bytes: &[u8]) -> String {
    hex_digest(&bytes[bytes.len().saturating_sub(DIGEST_LEN)..])
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub struct Decoded<H> {
    pub header: H,
    pub params: ParamSet<f32>,
    pub digest: String,
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<Decoded<H>> {
    if bytes.len() < 8 + 4 + 4 + DIGEST_LEN {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("content digest mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let found_magic = r.take(8)?;
    if found_magic != magic {
        return Err(Error::WrongModelKind {
            expected: magic_name(magic),
            found: magic_name(found_magic),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::from_vec(&shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
    }
    Ok(Decoded {
        header,
        params,
        digest: hex_digest(digest),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Copies `loaded` into `fresh` after checking names and shapes agree.
pub fn assign_params(fresh: &mut ParamSet<f32>, loaded: &ParamSet<f32>) -> Result<()> {
    if fresh.len() != loaded.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {}",
            fresh.len(),
            loaded.len()
        )));
    }
    let ids: Vec<_> = fresh.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(loaded.iter()) {
        if fresh.name(id) != name || fresh.tensor(id).shape() != t.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` {:?} does not match architecture (`{}` {:?})",
                t.shape(),
                fresh.name(id),
                fresh.tensor(id).shape()
            )));
        }
        *fresh.tensor_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct H {
        a: u32,
    }

    fn params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("x.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]));
        p.add("x.bias", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, 7.0]));
        p
    }

    #[test]
    fn roundtrip_is_exact() {
        let bytes = encode(DENOISER_MAGIC, &H { a: 3 }, &params());
        let d: Decoded<H> = decode(DENOISER_MAGIC, &bytes).unwrap();
        assert_eq!(d.header, H { a: 3 });
        assert_eq!(d.params, params());
        assert_eq!(d.digest, trailer_digest(&bytes));
        assert_eq!(encode(DENOISER_MAGIC, &d.header, &d.params), bytes);
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(DENOISER_MAGIC, &H { a: 3 }, &params());
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(decode::<H>(DENOISER_MAGIC, truncated), Err(Error::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode::<H>(DENOISER_MAGIC, &flipped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode::<H>(DENOISER_MAGIC, &bytes[..10]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn magic_and_version_checked() {
        let bytes = encode(AUTOENCODER_MAGIC, &H { a: 1 }, &params());
        assert!(matches!(decode::<H>(DENOISER_MAGIC, &bytes), Err(Error::WrongModelKind { .. })));

        // Re-seal a payload with a bumped version so the digest still matches.
        let mut body = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        body[8..12].copy_from_slice(&99u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(
            decode::<H>(AUTOENCODER_MAGIC, &body),
            Err(Error::VersionMismatch { found: 99, expected: 1 })
        ));
    }
}
