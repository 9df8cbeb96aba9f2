//! Tensor serialization: a text manifest next to one raw binary blob.
//!
//! `save_tensors("w")` writes `w.manifest` and `w.bin`. The manifest has one
//! line per tensor, `name dtype d0,d1,...`, in save order; the blob is the
//! little-endian elements of every tensor concatenated in that same order.
//! Loading is strict: dtype must match the requested scalar type, the blob
//! must end exactly where the manifest says, and every value must be finite.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::tensor::TensorBase;
use crate::{Error, Result, Scalar};

fn manifest_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn blob_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

/// Write `entries` to `{prefix}.manifest` + `{prefix}.bin`.
pub fn save_tensors<T: Scalar>(prefix: &Path, entries: &[(String, TensorBase<T>)]) -> Result<()> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut manifest = BufWriter::new(fs::File::create(manifest_path(prefix))?);
    let mut blob = BufWriter::new(fs::File::create(blob_path(prefix))?);
    for (name, tensor) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "tensor name {name:?} must be non-empty and whitespace-free"
            )));
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name} {} {}", T::DTYPE, dims.join(","))?;
        for &v in tensor.data() {
            blob.write_all(&v.to_le_bytes_vec())?;
        }
    }
    manifest.flush()?;
    blob.flush()?;
    Ok(())
}

/// Read back every tensor from `{prefix}.manifest` + `{prefix}.bin`, in
/// manifest order.
pub fn load_tensors<T: Scalar>(prefix: &Path) -> Result<Vec<(String, TensorBase<T>)>> {
    let manifest = fs::read_to_string(manifest_path(prefix))?;
    let mut blob = fs::File::open(blob_path(prefix))?;
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, dtype, dims) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(t), Some(d), None) => (n, t, d),
            _ => {
                return Err(Error::Parse {
                    what: "tensor manifest",
                    line: lineno + 1,
                    msg: "expected `name dtype d0,d1,...`".into(),
                })
            }
        };
        if dtype != T::DTYPE {
            return Err(Error::Parse {
                what: "tensor manifest",
                line: lineno + 1,
                msg: format!("dtype {dtype} where {} was requested", T::DTYPE),
            });
        }
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| {
                d.parse::<usize>().map_err(|_| Error::Parse {
                    what: "tensor manifest",
                    line: lineno + 1,
                    msg: format!("bad dimension {d:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * T::BYTE_WIDTH];
        if let Err(e) = blob.read_exact(&mut bytes) {
            return match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Err(Error::TruncatedBlob { name: name.into() }),
                _ => Err(e.into()),
            };
        }
        let data: Vec<T> = bytes
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::from_le_slice)
            .collect();
        entries.push((name.to_string(), TensorBase::from_vec(shape, data)?));
    }
    let mut extra = [0u8; 1];
    if blob.read(&mut extra)? != 0 {
        return Err(Error::Parse {
            what: "tensor blob",
            line: 0,
            msg: "trailing bytes beyond the last manifest entry".into(),
        });
    }
    Ok(entries)
}
