//! Named-tensor checkpoint format.
//!
//! Layout: magic `RESTCKPT` (8 ASCII bytes), version u32 LE, tensor count
//! u32 LE, then per tensor: name length u16 LE, UTF-8 name bytes, rank
//! u32 LE, one u64 LE per dim, payload f32 LE row-major. Entries are sorted
//! by name so equal parameter sets serialize identically.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{RestError, Result};
use crate::tensor::io::{read_u16, read_u32, read_u64};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"RESTCKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(RestError::Format(format!(
                "duplicate tensor name '{}'",
                pair[0].0
            )));
        }
    }
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(sorted.len() as u32).to_le_bytes())?;
    for (name, t) in sorted {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(RestError::Format(format!("tensor name too long: '{name}'")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(RestError::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(RestError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut last_name: Option<String> = None;
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| RestError::Format("tensor name is not UTF-8".into()))?;
        if let Some(prev) = &last_name {
            if *prev >= name {
                return Err(RestError::Format(format!(
                    "checkpoint entries not strictly sorted: '{prev}' then '{name}'"
                )));
            }
        }
        last_name = Some(name.clone());
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0.0f32; n];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, entries)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact_and_sorted() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[2, 3], &mut rng);
        let b = Tensor::randn(&[4], &mut rng);
        let entries = vec![("zeta".to_string(), &b), ("alpha".to_string(), &a)];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[1].0, "zeta");
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(bits(&back[1].1), bits(&b));
    }

    #[test]
    fn identical_params_serialize_identically() {
        let mut rng = Rng::new(2);
        let a = Tensor::randn(&[3, 3], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf1, &[("x".into(), &a), ("y".into(), &b)]).unwrap();
        write_checkpoint(&mut buf2, &[("y".into(), &b), ("x".into(), &a)]).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        let mut buf = Vec::new();
        let err = write_checkpoint(&mut buf, &[("x".into(), &t), ("x".into(), &t)]).unwrap_err();
        assert!(matches!(err, RestError::Format(_)));
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_checkpoint(&mut &b"NOTCKPT!\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, RestError::Format(_)));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let mut rng = Rng::new(3);
        let t = Tensor::randn(&[8], &mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("t".into(), &t)]).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
