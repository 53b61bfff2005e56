//! Model persistence.
//!
//! Binary layout (all little-endian): magic `ADVM`, format version, the
//! architecture kind, seed and training config, then each parameter tensor in
//! declared order as `ndim, dims.., f32 data`. A JSON sidecar `<file>.json`
//! carries the measured train/test error. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, Model, Network, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADVM";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match model.arch {
        Architecture::Mlp => 0,
        Architecture::Lenet => 1,
    });
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&(model.cfg.epochs as u32).to_le_bytes());
    buf.extend_from_slice(&(model.cfg.batch_size as u32).to_le_bytes());
    buf.extend_from_slice(&model.cfg.learning_rate.to_le_bytes());
    match model.cfg.optimizer {
        Optimizer::Adam { beta1, beta2, eps } => {
            buf.push(0);
            buf.extend_from_slice(&beta1.to_le_bytes());
            buf.extend_from_slice(&beta2.to_le_bytes());
            buf.extend_from_slice(&eps.to_le_bytes());
        }
        Optimizer::Sgd => {
            buf.push(1);
            buf.extend_from_slice(&[0u8; 24]);
        }
    }
    buf.push(model.cfg.double_precision as u8);
    buf.extend_from_slice(&(model.net.params().len() as u32).to_le_bytes());
    for p in model.net.params() {
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))?;
    let sidecar = ModelSidecar {
        train_error: model.train_error,
        test_error: model.test_error,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)
        .map_err(|e| Error::io(sidecar_path(path), e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::BadModelFile(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadModelFile(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let arch = match r.u8()? {
        0 => Architecture::Mlp,
        1 => Architecture::Lenet,
        k => return Err(Error::BadModelFile(format!("unknown architecture tag {k}"))),
    };
    let seed = r.u64()?;
    let epochs = r.u32()? as usize;
    let batch_size = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let optimizer = match r.u8()? {
        0 => {
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            Optimizer::Adam { beta1, beta2, eps }
        }
        1 => {
            r.take(24)?;
            Optimizer::Sgd
        }
        k => return Err(Error::BadModelFile(format!("unknown optimizer tag {k}"))),
    };
    let double_precision = r.u8()? != 0;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::from_vec(&shape, data)?);
    }
    let mut net = Network::<f32>::zeros(arch.layer_specs())?;
    net.set_params(params)?;

    let sidecar: ModelSidecar = match std::fs::read(sidecar_path(path)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => ModelSidecar { train_error: None, test_error: None },
    };
    Ok(Model {
        arch,
        net,
        seed,
        cfg: TrainConfig {
            seed,
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            double_precision,
        },
        train_error: sidecar.train_error,
        test_error: sidecar.test_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.advm");
        let net = Network::<f32>::init(Architecture::Lenet.layer_specs(), 42).unwrap();
        let model = Model {
            arch: Architecture::Lenet,
            net,
            seed: 42,
            cfg: TrainConfig::with_seed(42),
            train_error: Some(0.01),
            test_error: Some(0.02),
        };
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.test_error, Some(0.02));
        for (a, b) in model.net.params().iter().zip(loaded.net.params()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // a second save of the loaded model reproduces the same bytes
        let path2 = dir.path().join("m2.advm");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a model").unwrap();
        assert!(load_model(&path).is_err());
    }
}
