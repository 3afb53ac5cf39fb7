//! Binary tensor files.
//!
//! A container is the 8-byte magic `EQTENSOR`, a little-endian `u32` header
//! length, a JSON header `{"shape", "dtype", "byte-order"}` and the raw
//! little-endian `f64` data. Files hold any number of containers back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use equireg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"EQTENSOR";
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    #[serde(rename = "byte-order")]
    byte_order: String,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Container(msg.into())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    let header = serde_json::to_vec(&Header {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
        byte_order: "little-endian".into(),
    })
    .map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the next container, or `None` at a clean end of input.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        match r.read(&mut magic[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(bad("truncated magic")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(bad(e.to_string())),
        }
    }
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(bad("header too large"));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    if header.dtype != "f64" || header.byte_order != "little-endian" {
        return Err(bad(format!("unsupported encoding {} / {}", header.dtype, header.byte_order)));
    }
    let n: usize = header.shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Some(Tensor::new(header.shape, data)?))
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for t in tensors {
        write_tensor(&mut w, t).at(path)?;
    }
    w.flush().at(path)
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 3], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, -0.0, 7.0]).unwrap();
        let b = Tensor::scalar(3.25);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &a).unwrap();
        write_tensor(&mut buf, &b).unwrap();
        let mut r = buf.as_slice();
        let a2 = read_tensor(&mut r).unwrap().unwrap();
        assert_eq!(a2.shape(), a.shape());
        assert!(a2.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(read_tensor(&mut r).unwrap().unwrap(), b);
        assert!(read_tensor(&mut r).unwrap().is_none());
    }

    #[test]
    fn corrupted_header_is_an_error() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut broken = buf.clone();
        broken[14] = b'#';
        assert!(matches!(read_tensor(&mut broken.as_slice()), Err(HarnessError::Container(_))));
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(matches!(read_tensor(&mut magic.as_slice()), Err(HarnessError::Container(_))));
        assert!(matches!(read_tensor(&mut &buf[..buf.len() - 3]), Err(HarnessError::Container(_))));
    }
}
