//! Binary checkpoint: a JSON header (config snapshot, tensor directory,
//! provenance) followed by raw little-endian f32 payloads. Parameter and
//! optimizer tensors round-trip bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainStage};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::graph::ParamId;
use crate::tensor::Tensor;
use crate::trainer::AdamW;

const MAGIC: &[u8; 4] = b"ATCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, in f32 units.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: RunConfig,
    config_hash: String,
    /// Which stage produced this checkpoint.
    stage: Option<TrainStage>,
    step: u64,
    params: Vec<TensorEntry>,
    opt_m: Vec<TensorEntry>,
    opt_v: Vec<TensorEntry>,
    opt_step: u64,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub stage: Option<TrainStage>,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub opt_m: Vec<(String, Tensor)>,
    pub opt_v: Vec<(String, Tensor)>,
    pub opt_step: u64,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer).
    pub fn capture(
        model: &Model,
        config: &RunConfig,
        stage: Option<TrainStage>,
        step: u64,
        opt: Option<&AdamW>,
    ) -> Checkpoint {
        let params = model
            .store
            .ids()
            .map(|id| (model.store.name(id).to_string(), model.store.get(id).clone()))
            .collect();
        let (opt_m, opt_v, opt_step) = match opt {
            Some(adam) => {
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                for id in model.store.ids() {
                    if let Some((m, v)) = adam.state(id) {
                        ms.push((model.store.name(id).to_string(), m.clone()));
                        vs.push((model.store.name(id).to_string(), v.clone()));
                    }
                }
                (ms, vs, adam.step_count())
            }
            None => (Vec::new(), Vec::new(), 0),
        };
        Checkpoint {
            config: config.clone(),
            config_hash: config.config_hash(),
            stage,
            step,
            params,
            opt_m,
            opt_v,
            opt_step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = |tensors: &[(String, Tensor)], cursor: &mut usize| -> Vec<TensorEntry> {
            tensors
                .iter()
                .map(|(name, t)| {
                    let e = TensorEntry {
                        name: name.clone(),
                        rows: t.rows(),
                        cols: t.cols(),
                        offset: *cursor,
                    };
                    *cursor += t.numel();
                    e
                })
                .collect()
        };
        let mut cursor = 0usize;
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            stage: self.stage,
            step: self.step,
            params: entries(&self.params, &mut cursor),
            opt_m: entries(&self.opt_m, &mut cursor),
            opt_v: entries(&self.opt_v, &mut cursor),
            opt_step: self.opt_step,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut file = fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, t) in self.params.iter().chain(&self.opt_m).chain(&self.opt_v) {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        read_exact_at(&mut file, &mut magic, 0)?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint { offset: 0, detail: "bad magic".into() });
        }
        let mut version = [0u8; 4];
        read_exact_at(&mut file, &mut version, 4)?;
        let version = u32::from_le_bytes(version);
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let mut len_bytes = [0u8; 8];
        read_exact_at(&mut file, &mut len_bytes, 8)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact_at(&mut file, &mut header_bytes, 16)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::CorruptCheckpoint {
                offset: 16,
                detail: format!("header parse: {e}"),
            })?;

        let payload_start = 16 + header_len as u64;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;

        let read_tensors = |entries: &[TensorEntry]| -> Result<Vec<(String, Tensor)>> {
            entries
                .iter()
                .map(|e| {
                    let start = e.offset * 4;
                    let end = start + e.rows * e.cols * 4;
                    if end > payload.len() {
                        return Err(Error::CorruptCheckpoint {
                            offset: payload_start + start as u64,
                            detail: format!("tensor {:?} extends past end of file", e.name),
                        });
                    }
                    let data: Vec<f32> = payload[start..end]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Ok((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)))
                })
                .collect()
        };

        Ok(Checkpoint {
            config_hash: header.config_hash,
            stage: header.stage,
            step: header.step,
            params: read_tensors(&header.params)?,
            opt_m: read_tensors(&header.opt_m)?,
            opt_v: read_tensors(&header.opt_v)?,
            opt_step: header.opt_step,
            config: header.config,
        })
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.train.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Overwrite `model`'s parameters; names and shapes must match exactly.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.store.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} tensors in checkpoint, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = model
                .store
                .lookup(name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unknown tensor {name:?}")))?;
            if model.store.get(id).shape() != tensor.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name:?} shape {:?} vs expected {:?}",
                    tensor.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = tensor.clone();
        }
        Ok(())
    }

    /// Restore optimizer moments (if present).
    pub fn restore_optimizer(&self, model: &Model, opt: &mut AdamW) -> Result<()> {
        for ((name_m, m), (name_v, v)) in self.opt_m.iter().zip(self.opt_v.iter()) {
            if name_m != name_v {
                return Err(Error::IncompatibleCheckpoint(
                    "optimizer m/v tensor order mismatch".into(),
                ));
            }
            let id: ParamId = model.store.lookup(name_m).ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("optimizer state for unknown {name_m:?}"))
            })?;
            opt.restore(id, m.clone(), v.clone());
        }
        opt.set_step_count(self.opt_step);
        Ok(())
    }
}

fn read_exact_at(file: &mut fs::File, buf: &mut [u8], offset: u64) -> Result<()> {
    file.read_exact(buf).map_err(|e| Error::CorruptCheckpoint {
        offset,
        detail: format!("short read: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, TrainConfig};
    use crate::img::ImageBuf;
    use crate::input::image_to_media;

    fn fixture() -> (Model, RunConfig) {
        let cfg = RunConfig {
            model: ModelConfig::desk_default(vec!["gelsight".into(), "digit".into()]),
            train: TrainConfig::stage1_default(3),
        };
        let model = Model::new(cfg.model.clone(), 3).unwrap();
        (model, cfg)
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = fixture();
        let path = dir.path().join("ckpt.bin");
        let ckpt = Checkpoint::capture(&model, &cfg, Some(TrainStage::Stage1), 42, None);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.stage, Some(TrainStage::Stage1));
        assert_eq!(back.config_hash, cfg.config_hash());
        for ((n1, t1), (n2, t2)) in ckpt.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data().len(), t2.data().len());
            for (a, b) in t1.data().iter().zip(t2.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {n1} not bitwise equal");
            }
        }

        // Forward outputs are bitwise identical after restore.
        let restored = back.restore_model().unwrap();
        let mut img = ImageBuf::new(32, 32);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 251) as f32 / 251.0;
        }
        let media = image_to_media(&img, &model.cfg.patch).unwrap();
        let tokens = model.bank.specific_for("gelsight").unwrap();
        let (a, _) = model.touch_embedding(&media, tokens).unwrap();
        let tokens_r = restored.bank.specific_for("gelsight").unwrap();
        let (b, _) = restored.touch_embedding(&media, tokens_r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_architecture_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = fixture();
        let path = dir.path().join("ckpt.bin");
        Checkpoint::capture(&model, &cfg, None, 0, None).save(&path).unwrap();
        let mut ckpt = Checkpoint::load(&path).unwrap();
        ckpt.config.model.encoder.layers = 2;
        assert!(matches!(ckpt.restore_model(), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn corrupted_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = fixture();
        let path = dir.path().join("ckpt.bin");
        Checkpoint::capture(&model, &cfg, None, 0, None).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint { .. }), "got {err:?}");

        fs::write(&path, b"NOPE").unwrap();
        let err2 = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(
            err2,
            Error::CorruptCheckpoint { offset: 0, .. } | Error::IoFailure(_)
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = fixture();
        let path = dir.path().join("ckpt.bin");
        Checkpoint::capture(&model, &cfg, None, 0, None).save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::VersionMismatch { found: 99, expected: 1 })
        ));
    }
}
