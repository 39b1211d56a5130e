//! Self-contained checkpoint container: magic `MDETCKPT`, version, a JSON
//! metadata block (config snapshot, scaler, epoch, metric history, weight
//! manifest), then raw little-endian f32 payloads — model weights followed
//! by Adam moment estimates so a resumed run continues the exact
//! optimizer trajectory.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, MinMaxScaler};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::optim::Adam;
use crate::train::EpochMetrics;

const MAGIC: &[u8; 8] = b"MDETCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    scaler: MinMaxScaler,
    epoch: usize,
    adam_step: u64,
    has_adam: bool,
    history: Vec<EpochMetrics>,
    weights: Vec<WeightInfo>,
}

#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub scaler: MinMaxScaler,
    /// Epochs completed when this checkpoint was taken.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub weights: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        detector: &Detector,
        scaler: &MinMaxScaler,
        epoch: usize,
        history: &[EpochMetrics],
        adam: Option<&Adam>,
    ) -> Self {
        let weights = detector
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
            .collect();
        let adam = adam.map(|a| {
            let (m, v, step) = a.state();
            AdamSnapshot {
                m: m.to_vec(),
                v: v.to_vec(),
                step,
            }
        });
        Self {
            config: config.clone(),
            scaler: scaler.clone(),
            epoch,
            history: history.to_vec(),
            weights,
            adam,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            epoch: self.epoch,
            adam_step: self.adam.as_ref().map(|a| a.step).unwrap_or(0),
            has_adam: self.adam.is_some(),
            history: self.history.clone(),
            weights: self
                .weights
                .iter()
                .map(|(name, shape, _)| WeightInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;

        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&meta_json).map_err(io_err)?;
        for (_, _, data) in &self.weights {
            write_f32s(&mut w, data).map_err(io_err)?;
        }
        if let Some(adam) = &self.adam {
            for arr in adam.m.iter().chain(adam.v.iter()) {
                write_f32s(&mut w, arr).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = std::io::BufReader::new(file);
        let perr = |msg: String| Error::parse(path.display().to_string(), msg);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(perr("bad magic; not a checkpoint file".into()));
        }
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4, path)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(perr(format!("unsupported checkpoint version {version}")));
        }
        let mut len8 = [0u8; 8];
        read_exact(&mut r, &mut len8, path)?;
        let meta_len = u64::from_le_bytes(len8) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes, path)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| perr(format!("metadata: {e}")))?;

        let mut weights = Vec::with_capacity(meta.weights.len());
        for info in &meta.weights {
            let numel: usize = info.shape.iter().product();
            let data = read_f32s(&mut r, numel, path)?;
            weights.push((info.name.clone(), info.shape.clone(), data));
        }
        let adam = if meta.has_adam {
            let mut m = Vec::with_capacity(meta.weights.len());
            for info in &meta.weights {
                m.push(read_f32s(&mut r, info.shape.iter().product(), path)?);
            }
            let mut v = Vec::with_capacity(meta.weights.len());
            for info in &meta.weights {
                v.push(read_f32s(&mut r, info.shape.iter().product(), path)?);
            }
            Some(AdamSnapshot {
                m,
                v,
                step: meta.adam_step,
            })
        } else {
            None
        };
        Ok(Self {
            config: meta.config,
            scaler: meta.scaler,
            epoch: meta.epoch,
            history: meta.history,
            weights,
            adam,
        })
    }

    /// Rebuilds the detector and anchor grid from the embedded config and
    /// restores every weight, validating names and shapes.
    pub fn build(&self) -> Result<(Detector, AnchorGrid)> {
        self.config.validate()?;
        let grid = self.config.build_grid()?;
        let detector = Detector::init(
            self.config.vit_config(),
            self.config.head_config(grid.len()),
            self.config.encoder_kind(),
            self.config.seed,
        )?;
        let params = detector.named_params();
        if params.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} weights but model expects {}",
                self.weights.len(),
                params.len()
            )));
        }
        for ((pname, tensor), (wname, shape, data)) in params.iter().zip(&self.weights) {
            if pname != wname {
                return Err(Error::Contract(format!(
                    "weight order mismatch: model '{pname}' vs checkpoint '{wname}'"
                )));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "weight '{pname}' shape {:?} does not match checkpoint {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            tensor.set_data(data)?;
        }
        Ok((detector, grid))
    }

    pub fn restore_adam(&self, adam: &mut Adam) -> Result<()> {
        match &self.adam {
            Some(s) => adam.restore(s.m.clone(), s.v.clone(), s.step),
            None => Err(Error::Contract("checkpoint carries no optimizer state".into())),
        }
    }
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s<R: Read>(r: &mut R, numel: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; numel * 4];
    read_exact(r, &mut buf, path)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: format!("truncated checkpoint: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    #[test]
    fn save_load_roundtrip_restores_weights_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let grid = cfg.build_grid().unwrap();
        let det = Detector::init(cfg.vit_config(), cfg.head_config(grid.len()), cfg.encoder_kind(), cfg.seed).unwrap();
        let scaler = MinMaxScaler::fit(&[[-0.5; 4], [0.75; 4]]).unwrap();
        let params = det.params();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        // one synthetic step so the moments are non-trivial
        {
            let tape = crate::tensor::Tape::new();
            let mut acc = tape.sum(&params[0]).unwrap();
            for p in &params[1..] {
                let s = tape.sum(p).unwrap();
                acc = tape.add(&acc, &s).unwrap();
            }
            tape.backward(&acc).unwrap();
        }
        adam.step(&params).unwrap();

        let ckpt = Checkpoint::capture(&cfg, &det, &scaler, 3, &[], Some(&adam));
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.scaler, scaler);
        assert_eq!(loaded.config, cfg);
        let (det2, grid2) = loaded.build().unwrap();
        assert_eq!(grid2.len(), grid.len());
        for ((n1, t1), (n2, t2)) in det.named_params().iter().zip(det2.named_params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "weight {n1} differs");
        }
        let snap = loaded.adam.as_ref().unwrap();
        assert_eq!(snap.step, 1);
        let (m, _, _) = adam.state();
        assert_eq!(snap.m, m);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MDETCKPT\x01\x00\x00\x00").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));
    }
}
