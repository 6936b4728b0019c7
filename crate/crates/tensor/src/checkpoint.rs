//! `PICT` tensor container.
//!
//! Layout, all integers unsigned 32-bit little-endian:
//!
//! ```text
//! "PICT" | version | count | count × { name_len | name (UTF-8) | rank | extents… | f32 LE payload }
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PICT";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Writes named tensors; values are stored as 32-bit floats.
pub fn write_tensors<'a, T, W, I>(w: &mut W, tensors: I) -> Result<()>
where
    T: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_tensors<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

impl<T: Scalar> ParamSet<T> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensors(w, self.iter().map(|(n, p)| (n, &p.value)))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut ps = ParamSet::new();
        for (name, t) in read_tensors(r)? {
            if ps.contains(&name) {
                return Err(TensorError::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            ps.insert(name, t);
        }
        Ok(ps)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("ab", &t)]).unwrap();
        let mut expect = b"PICT".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tensors::<f32, _>(&mut &b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("x", &Tensor::<f32>::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensors::<f32, _>(&mut buf.as_slice()).is_err());
        buf = b"PICT".to_vec();
        buf.extend(9u32.to_le_bytes());
        buf.extend(0u32.to_le_bytes());
        assert!(matches!(read_tensors::<f32, _>(&mut buf.as_slice()), Err(TensorError::Checkpoint(_))));
    }
}
