//! Versioned binary model container (little endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PSCK"
//! 4       2     container version (u16, currently 1)
//! 6       1     default scalar width of the stored model (4 or 8)
//! 7       1     reserved (0)
//! 8       8     training seed (u64)
//! 16      4     config echo length L (u32)
//! 20      L     config echo, UTF-8, canonical [`Config`] text
//! ..      4     tensor count (u32)
//! per tensor:
//!         2     name length (u16), then the UTF-8 name
//!         4     rows (u32)
//!         4     cols (u32)
//!         1     scalar width (4 or 8)
//!         r*c*w row-major payload
//! ```
//!
//! Tensors are stored in registration order and restored by name; batch-norm
//! running statistics ride along as frozen tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Scalar};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u16 = 1;

/// A parsed checkpoint: config echo, seed, and named tensors (as f64, the
/// widest supported precision; narrow on load as needed).
pub struct Checkpoint {
    pub config_text: String,
    pub seed: u64,
    pub tensors: Vec<(String, DenseMatrix<f64>)>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config_text)
    }
}

/// Write the model's parameters with its config echo.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    config: &Config,
    seed: u64,
    params: &crate::tensor::Parameters<S>,
) -> Result<()> {
    let echo = config.to_text();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::BYTES);
    out.push(0);
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let value = p.value();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        out.push(S::BYTES);
        match S::BYTES {
            4 => {
                for v in value.data() {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            _ => {
                for v in value.data() {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint at offset {}",
                self.path.display(),
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a checkpoint container.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a model checkpoint",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let _default_width = r.take(1)?[0];
    let _reserved = r.take(1)?[0];
    let seed = r.u64()?;
    let echo_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|_| Error::Format(format!("{}: config echo is not UTF-8", path.display())))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let width = r.take(1)?[0];
        let mut data = Vec::with_capacity(rows * cols);
        match width {
            4 => {
                let raw = r.take(rows * cols * 4)?;
                for chunk in raw.chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
            8 => {
                let raw = r.take(rows * cols * 8)?;
                for chunk in raw.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            w => {
                return Err(Error::Format(format!(
                    "{}: unsupported scalar width {w}",
                    path.display()
                )))
            }
        }
        tensors.push((name, DenseMatrix::from_vec(rows, cols, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - r.at
        )));
    }
    Ok(Checkpoint {
        config_text,
        seed,
        tensors,
    })
}

/// Restore tensor values into a parameter registry by name.
pub fn restore_params<S: Scalar>(
    ckpt: &Checkpoint,
    params: &crate::tensor::Parameters<S>,
) -> Result<()> {
    if ckpt.tensors.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            ckpt.tensors.len(),
            params.len()
        )));
    }
    for (name, value) in &ckpt.tensors {
        let p = params.get(name).ok_or_else(|| {
            Error::Format(format!("checkpoint tensor `{name}` not present in the model"))
        })?;
        if (p.rows(), p.cols()) != value.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` is {}x{}, model expects {}x{}",
                value.rows(),
                value.cols(),
                p.rows(),
                p.cols()
            )));
        }
        p.set_value(value.cast::<S>())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::heads::HeadConfig;
    use crate::model::{ModelConfig, PointStackModel};

    fn tiny_model() -> PointStackModel<f32> {
        let mut backbone = BackboneConfig::desk_scale(32);
        backbone.stages.truncate(2);
        PointStackModel::new(
            ModelConfig {
                backbone,
                head: HeadConfig::classification(vec![8], 4),
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor_bit_for_bit() {
        let model = tiny_model();
        let cfg = Config::desk_classification();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, 11, &model.params).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.seed, 11);
        assert_eq!(ckpt.config_text, cfg.to_text());
        assert_eq!(ckpt.tensors.len(), model.params.len());

        // Restoring into a differently-initialized model reproduces values.
        let other = {
            let mut backbone = BackboneConfig::desk_scale(32);
            backbone.stages.truncate(2);
            PointStackModel::<f32>::new(
                ModelConfig {
                    backbone,
                    head: HeadConfig::classification(vec![8], 4),
                },
                999,
            )
            .unwrap()
        };
        restore_params(&ckpt, &other.params).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(other.params.iter()) {
            assert_eq!(*a.value(), *b.value());
        }
    }

    #[test]
    fn truncated_checkpoint_is_reported() {
        let model = tiny_model();
        let cfg = Config::desk_classification();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, 1, &model.params).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
