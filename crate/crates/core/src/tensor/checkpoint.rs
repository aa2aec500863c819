// Checkpoint layout (little-endian):
//   "VAGT" | version u32 | records until EOF
//   record = name_len u32 | name bytes | rank u32 | dims u32[rank] | f32[prod(dims)]

use std::io::{self, Read, Write};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAGT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<'a, W, I>(mut w: W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in records {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for d in tensor.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a name-length prefix, distinguishing clean EOF from truncation.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(TensorError::Checkpoint("truncated record header".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {magic:?}, expected \"VAGT\""
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let mut out = Vec::new();
    while let Some(name_len) = read_record_start(&mut r)? {
        let truncated = |_| TensorError::Checkpoint("truncated record".into());
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::matrix(1, 2, vec![1.0f32, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        let mut expected = b"VAGT".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), vec![("w".to_string(), t)]);
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut buf = b"VAGT".to_vec();
        buf.extend_from_slice(&7u32.to_le_bytes());
        let err = read_checkpoint(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("unsupported version 7"), "{err}");

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &Tensor::vector(vec![1.0f32; 3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(buf.as_slice()).is_err());
        assert!(read_checkpoint(&b"VAG"[..]).is_err());
    }
}
