//! Little-endian named-tensor container.
//!
//! Layout: magic `RGLA`, version `u32`, tensor count `u32`, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, one `u32` per dimension,
//! and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Model;
use crate::blocks::Module;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RGLA";
pub const VERSION: u32 = 1;

/// Ordered collection of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(
            &u32::try_from(self.entries.len())
                .map_err(fmt_err)?
                .to_le_bytes(),
        )?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&u16::try_from(bytes.len()).map_err(fmt_err)?.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[u8::try_from(t.rank()).map_err(fmt_err)?])?;
            for &d in t.shape() {
                w.write_all(&u32::try_from(d).map_err(fmt_err)?.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a container; any structural problem is a [`Error::Format`].
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a tensor file".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, "dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 31)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is implausibly large")))?;
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(e.to_string())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated file while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

impl<T: Scalar> Model<T> {
    /// Every parameter and running statistic under its dotted path.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::new();
        self.visit("", &mut |name, t, _| file.push(name, t));
        file
    }

    /// Replaces all weights; every tensor must be present with a matching shape.
    pub fn load_tensor_file(&mut self, file: &TensorFile) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match file.get(name) {
                None => err = Some(Error::Missing(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => *t = src.cast(),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip() {
        let mut f = TensorFile::new();
        f.push("a", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 2.5));
        f.push("teacher/x/cls", &Tensor::<f64>::scalar(1.25));
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RGLA");
        let g = TensorFile::read_from(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            TensorFile::read_from(&b"NOPE"[..]),
            Err(Error::Format(_))
        ));
        let mut f = TensorFile::new();
        f.push("a", &Tensor::<f32>::ones(&[4]));
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert!(matches!(
            TensorFile::read_from(&buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
        buf.push(0);
        assert!(matches!(
            TensorFile::read_from(buf.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(f.require("b"), Err(Error::Missing(n)) if n == "b"));
    }

    #[test]
    fn model_weights_round_trip() {
        let cfg = ModelConfig::tiny();
        let a = Model::<f32>::build(&cfg, 1).unwrap();
        let mut b = Model::<f32>::build(&cfg, 2).unwrap();
        assert_ne!(a, b);
        b.load_tensor_file(&a.to_tensor_file()).unwrap();
        assert_eq!(a, b);

        let mut partial = a.to_tensor_file();
        partial.entries.pop();
        assert!(matches!(
            b.load_tensor_file(&partial),
            Err(Error::Missing(_))
        ));
    }
}
