//! Flat binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  b"HRFCKPT\0"
//! version    u32 LE   1
//! arch       u8       0 semseg, 1 resunet, 2 resunet_plus
//! out_mode   u8       0 binary_sigmoid, 1 softmax
//! seed       u64 LE
//! n_params   u32 LE
//! n_params × record:
//!   name_len u32 LE, name (UTF-8), rank u32 LE, rank × u32 LE dims,
//!   prod(dims) × f32 LE
//! ```
//!
//! Parameters are stored in single precision, so an `f32` model round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchConfig, Architecture, Model, OutputMode, Parameter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HRFCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model<f32>, mut w: W) -> Result<()> {
    let config = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[config.arch.code(), config.out_mode.code()])?;
    w.write_all(&model.seed().to_le_bytes())?;
    w.write_all(&(model.parameters().len() as u32).to_le_bytes())?;
    for p in model.parameters() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.tensor.rank() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.numel() * 4);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model<f32>> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut tags = [0u8; 2];
    read_exact(&mut r, &mut tags, "header")?;
    let arch = Architecture::from_code(tags[0])
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture tag {}", tags[0])))?;
    let out_mode = OutputMode::from_code(tags[1])
        .ok_or_else(|| Error::Checkpoint(format!("unknown output mode tag {}", tags[1])))?;
    let mut seed = [0u8; 8];
    read_exact(&mut r, &mut seed, "seed")?;
    let seed = u64::from_le_bytes(seed);
    let n = read_u32(&mut r, "parameter count")? as usize;
    // Caps guard against allocating from a corrupt header.
    if n > 100_000 {
        return Err(Error::Checkpoint(format!("implausible parameter count {n}")));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r, "name length")? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&mut r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = match numel {
            Some(n) if n <= 1 << 28 => n,
            _ => return Err(Error::Checkpoint(format!("implausible shape {dims:?} for {name}"))),
        };
        let mut bytes = vec![0u8; numel * 4];
        read_exact(&mut r, &mut bytes, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Parameter {
            name,
            tensor: Tensor::new(dims, data)?,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Model::from_parameters(ArchConfig::new(arch).with_out_mode(out_mode), seed, params)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    fn roundtrip(model: &Model<f32>) -> Model<f32> {
        let mut buf = Vec::new();
        write_checkpoint(model, &mut buf).unwrap();
        read_checkpoint(buf.as_slice()).unwrap()
    }

    #[test]
    fn bit_exact_roundtrip_all_architectures() {
        for arch in Architecture::ALL {
            for mode in [OutputMode::BinarySigmoid, OutputMode::Softmax] {
                let m = build_model::<f32>(&ArchConfig::new(arch).with_out_mode(mode), 17).unwrap();
                let back = roundtrip(&m);
                assert_eq!(back.config(), m.config());
                assert_eq!(back.seed(), 17);
                for (a, b) in m.parameters().iter().zip(back.parameters()) {
                    assert_eq!(a.name, b.name);
                    let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                    let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                    assert_eq!(bits_a, bits_b);
                }
            }
        }
    }

    #[test]
    fn header_layout() {
        let m = build_model::<f32>(&ArchConfig::new(Architecture::ResUNet), 0x0102).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], 1);
        assert_eq!(buf[13], 0);
        assert_eq!(&buf[14..22], &0x0102u64.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = build_model::<f32>(&ArchConfig::new(Architecture::SemSeg), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 3];
        let err = read_checkpoint(truncated).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut wrong_arch = buf.clone();
        wrong_arch[12] = 2;
        assert!(read_checkpoint(wrong_arch.as_slice()).is_err());

        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }
}
