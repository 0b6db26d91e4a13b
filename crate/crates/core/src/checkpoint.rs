//! Versioned binary checkpoint container: a JSON manifest plus named
//! parameter blobs (name, shape, dtype, raw little-endian data). Loading
//! validates blob shapes against the architecture being built; files are
//! addressed by SHA-256 content hash.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::optim::{hex, ParamStore};
use crate::tensor::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"VX4DCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Architecture identifier; loaders reject mismatches.
    pub arch: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Blob {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blobs: BTreeMap<String, Blob>,
    /// SHA-256 of the serialized file.
    pub content_hash: String,
}

fn scalar_bytes<F: Scalar>(data: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    match F::DTYPE {
        Dtype::F32 => {
            for v in data {
                out.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in data {
                out.extend_from_slice(&(v.to_f64().unwrap()).to_le_bytes());
            }
        }
    }
    out
}

fn bytes_to_scalars<F: Scalar>(blob: &Blob) -> Result<Vec<F>> {
    if blob.dtype != F::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint blob dtype {:?} does not match engine dtype {:?}",
            blob.dtype,
            F::DTYPE
        )));
    }
    let width = match blob.dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if blob.bytes.len() % width != 0 {
        return Err(Error::Format("blob length not a multiple of dtype width".into()));
    }
    let mut out = Vec::with_capacity(blob.bytes.len() / width);
    for chunk in blob.bytes.chunks_exact(width) {
        let v = match blob.dtype {
            Dtype::F32 => {
                F::from_f32(f32::from_le_bytes(chunk.try_into().unwrap())).unwrap()
            }
            Dtype::F64 => {
                F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())).unwrap()
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Serialize a parameter store under the given manifest; returns the bytes.
pub fn serialize_params<F: Scalar>(manifest: &Manifest, store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mjson = serde_json::to_vec(manifest).expect("manifest serializes");
    out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.code());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let bytes = scalar_bytes(&p.data);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn save_params<F: Scalar>(
    path: &Path,
    manifest: &Manifest,
    store: &ParamStore<F>,
) -> Result<String> {
    let bytes = serialize_params(manifest, store);
    let hash = hex(&Sha256::digest(&bytes));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(hash)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: expected {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
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
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!(
            "checkpoint format version {version}"
        )));
    }
    let mlen = c.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(mlen)?)
        .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    let n_blobs = c.u32()? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..n_blobs {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 blob name".into()))?;
        let dtype = Dtype::from_code(c.u8()?)
            .ok_or_else(|| Error::Format("unknown blob dtype code".into()))?;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let blen = c.u64()? as usize;
        let data = c.take(blen)?.to_vec();
        let expect = shape.iter().product::<usize>()
            * match dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
        if blen != expect {
            return Err(Error::Format(format!(
                "blob `{name}`: {blen} bytes does not match shape {shape:?}"
            )));
        }
        blobs.insert(
            name,
            Blob {
                dtype,
                shape,
                bytes: data,
            },
        );
    }
    Ok(Checkpoint {
        manifest,
        blobs,
        content_hash: hex(&Sha256::digest(bytes)),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

impl Checkpoint {
    /// Materialize as a parameter store, verifying every blob shape against
    /// `expected` (name -> shape). Mismatches are listed in the error.
    pub fn to_param_store<F: Scalar>(
        &self,
        expected: &BTreeMap<String, Vec<usize>>,
    ) -> Result<ParamStore<F>> {
        let mut mismatches = Vec::new();
        for (name, shape) in expected {
            match self.blobs.get(name) {
                None => mismatches.push(format!("missing `{name}` (want {shape:?})")),
                Some(b) if &b.shape != shape => {
                    mismatches.push(format!("`{name}`: checkpoint {:?} vs model {shape:?}", b.shape))
                }
                _ => {}
            }
        }
        for name in self.blobs.keys() {
            if !expected.contains_key(name) {
                mismatches.push(format!("unexpected blob `{name}`"));
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match architecture: {}",
                mismatches.join("; ")
            )));
        }
        let mut store = ParamStore::new();
        for (name, blob) in &self.blobs {
            store.insert(name, bytes_to_scalars::<F>(blob)?, &blob.shape);
        }
        Ok(store)
    }
}
