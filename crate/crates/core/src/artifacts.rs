//! On-disk formats: checkpoints (JSON manifest + packed AVT1 tensors),
//! 16-bit PCM WAV, PNG frame dumps, and attention heatmaps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

// ---- checkpoints ----

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<NamedShape>,
    pub optimizer: OptimizerManifest,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct NamedShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, Default)]
pub struct OptimizerManifest {
    pub step: usize,
    pub lr: f64,
    pub moment_names: Vec<String>,
    pub frozen: Vec<String>,
}

pub const CHECKPOINT_FORMAT: &str = "avdit-checkpoint-v1";

/// Write `checkpoint.json` plus `weights.avtb` (all tensors as consecutive
/// AVT1 records in manifest order: parameters, then m/v moments).
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    opt: &Adam,
    step: usize,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (opt_step, moments, frozen) = opt.state();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        step,
        seed,
        config_hash: config_hash.to_string(),
        params: store
            .iter()
            .map(|(name, t)| NamedShape {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: OptimizerManifest {
            step: opt_step,
            lr: opt.lr,
            moment_names: moments.iter().map(|(n, _, _)| n.clone()).collect(),
            frozen,
        },
    };
    write_json(&dir.join("checkpoint.json"), &manifest)?;

    let mut pack = std::io::BufWriter::new(std::fs::File::create(dir.join("weights.avtb"))?);
    for (_, tensor) in store.iter() {
        tensor.write_to(&mut pack)?;
    }
    for (_, m, v) in &moments {
        m.write_to(&mut pack)?;
        v.write_to(&mut pack)?;
    }
    pack.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join("checkpoint.json"))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CoreError::Format {
            what: "checkpoint",
            detail: format!("unknown format {}", manifest.format),
        });
    }
    let mut pack = std::io::BufReader::new(std::fs::File::open(dir.join("weights.avtb"))?);
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let tensor = Tensor::read_from(&mut pack)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(CoreError::Format {
                what: "checkpoint",
                detail: format!("{}: shape {:?} vs {:?}", entry.name, tensor.shape(), entry.shape),
            });
        }
        store.insert(&entry.name, tensor);
    }
    let mut moments = Vec::new();
    for name in &manifest.optimizer.moment_names {
        let m = Tensor::read_from(&mut pack)?;
        let v = Tensor::read_from(&mut pack)?;
        moments.push((name.clone(), m, v));
    }
    Ok(LoadedCheckpoint {
        manifest,
        store,
        moments,
    })
}

/// Rebuild the optimizer recorded in a checkpoint.
pub fn restore_optimizer(loaded: &LoadedCheckpoint) -> Adam {
    let mut opt = Adam::new(loaded.manifest.optimizer.lr);
    opt.restore(
        loaded.manifest.optimizer.step,
        loaded.moments.clone(),
        loaded.manifest.optimizer.frozen.clone(),
    );
    opt
}

// ---- json helpers ----

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ---- wav ----

/// 16-bit PCM stereo WAV.
pub fn write_wav(path: &Path, channels: &[Vec<f64>; 2], sample_rate: u32) -> Result<()> {
    if channels[0].len() != channels[1].len() {
        return Err(CoreError::invalid("write_wav", "channel lengths differ"));
    }
    let n = channels[0].len();
    let data_bytes = (n * 4) as u32; // 2 channels x 2 bytes
    let mut out = Vec::with_capacity(44 + n * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&2u16.to_le_bytes()); // stereo
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 4).to_le_bytes()); // byte rate
    out.extend_from_slice(&4u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for i in 0..n {
        for ch in channels {
            let v = (ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---- png ----

/// Dump `[T, H, W, 3]` frames in [0, 1] as zero-padded PNG files; returns
/// the written paths.
pub fn write_frames(dir: &Path, frames: &Tensor) -> Result<Vec<PathBuf>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(CoreError::shape(
            "write_frames",
            format!("expected [T, H, W, 3], got {shape:?}"),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let mut paths = Vec::with_capacity(t);
    for frame in 0..t {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(frames.at(&[frame, y, x, 0])),
                    to_u8(frames.at(&[frame, y, x, 1])),
                    to_u8(frames.at(&[frame, y, x, 2])),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(format!("frame_{frame:04}.png"));
        img.save(&path)
            .map_err(|e| CoreError::Format {
                what: "png",
                detail: e.to_string(),
            })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Normalized grayscale heatmap of a non-negative 2-D map.
pub fn write_heatmap(path: &Path, map: &Tensor) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(CoreError::shape(
            "write_heatmap",
            format!("expected 2-D map, got {shape:?}"),
        ));
    }
    let max = map.data().iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let (h, w) = (shape[0], shape[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(map.at(&[y, x]) / max)]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| CoreError::Format {
        what: "png",
        detail: e.to_string(),
    })?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Step metrics sink writing `step,loss_video,loss_audio,grad_norm` rows.
pub struct MetricsCsv {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<MetricsCsv> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "step,loss_video,loss_audio,grad_norm")?;
        Ok(MetricsCsv { file })
    }

    pub fn append(&mut self, step: usize, loss_v: f64, loss_a: f64, grad_norm: f64) -> Result<()> {
        writeln!(self.file, "{step},{loss_v},{loss_a},{grad_norm}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Named tensors for a dataset cache entry.
pub fn save_tensor_map(dir: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, tensor) in entries {
        tensor.save(&dir.join(format!("{name}.avt")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::tensor::seeded_rng;

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(31, &[0]);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 4], &mut rng));
        store.insert("b.gain", Tensor::randn(&[7], &mut rng));
        let mut opt = Adam::new(1e-3);
        opt.freeze("b.gain");
        // run a step so the optimizer has state
        let mut grads = BTreeMap::new();
        grads.insert("a.w".to_string(), Tensor::full(&[3, 4], 0.5));
        opt.apply(&mut store, &grads);

        save_checkpoint(dir.path(), &store, &opt, 17, 99, "cfg-hash").unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.manifest.step, 17);
        assert_eq!(loaded.manifest.seed, 99);
        assert_eq!(loaded.manifest.config_hash, "cfg-hash");
        assert_eq!(loaded.store.get("a.w").data(), store.get("a.w").data());
        assert_eq!(loaded.store.get("b.gain").data(), store.get("b.gain").data());
        let restored = restore_optimizer(&loaded);
        assert_eq!(restored.step, 1);
        assert!(restored.is_frozen("b.gain"));
    }

    #[test]
    fn wav_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.wav");
        let left = vec![0.0, 0.5, -0.5, 1.0];
        let right = vec![0.25; 4];
        write_wav(&path, &[left, right], 24_000).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(&bytes[8..16], b"WAVEfmt ");
        assert_eq!(bytes.len(), 44 + 4 * 4);
        // sample 1, left channel = 0.5 -> 16384
        let v = i16::from_le_bytes([bytes[48], bytes[49]]);
        assert_eq!(v, 16384);
    }

    #[test]
    fn frames_and_heatmap_write_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Tensor::full(&[2, 4, 4, 3], 0.5);
        let paths = write_frames(&dir.path().join("frames"), &frames).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[0].exists());
        let map = Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let hm = dir.path().join("attn.png");
        write_heatmap(&hm, &map).unwrap();
        assert!(hm.exists());
    }
}
