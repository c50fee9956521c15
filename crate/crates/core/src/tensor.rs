//! Dense row-major f64 tensors, the value type the autodiff graph and all
//! model code operate on.
//!
//! Buffers are shared via `Arc`, so cloning a tensor is cheap and the graph
//! can capture inputs for backward passes without copying.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// Magic bytes of the tensor file format: magic, u32 rank, u64 dims,
/// little-endian f64 payload.
pub const AVT1_MAGIC: &[u8; 4] = b"AVT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Standard-normal samples, deterministic in the rng stream.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle on the buffer, used by the graph to capture values.
    pub fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    /// Copy of the payload for mutation; pair with `from_vec` to rebuild.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    /// Checked error state: any NaN or infinity is reported.
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(AVT1_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &dim in &self.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.numel() * 8);
        for &v in self.data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut file = std::fs::File::open(path)?;
        Tensor::read_from(&mut file)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != AVT1_MAGIC {
            return Err(CoreError::Format {
                what: "avt1",
                detail: format!("bad magic {magic:?}"),
            });
        }
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf)?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank > 16 {
            return Err(CoreError::Format {
                what: "avt1",
                detail: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut dim_buf = [0u8; 8];
            r.read_exact(&mut dim_buf)?;
            shape.push(u64::from_le_bytes(dim_buf) as usize);
        }
        let n = numel(&shape);
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len());
    let mut flat = 0;
    for (dim, (&s, &i)) in shape.iter().zip(index).enumerate() {
        assert!(i < s, "index {i} out of bounds for axis {dim} (len {s})");
        flat = flat * s + i;
    }
    flat
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Deterministic per-purpose rng: mixes the base seed with tag words so
/// independent streams never overlap and do not depend on call order.
pub fn seeded_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &t in tags {
        state = splitmix(state ^ t);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit mix, also used by the stub text encoder.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_row_major() {
        let shape = [2, 3, 4];
        assert_eq!(flat_index(&shape, &[0, 0, 0]), 0);
        assert_eq!(flat_index(&shape, &[0, 0, 3]), 3);
        assert_eq!(flat_index(&shape, &[0, 1, 0]), 4);
        assert_eq!(flat_index(&shape, &[1, 2, 3]), 23);
    }

    #[test]
    fn validate_flags_nan_and_inf() {
        let ok = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        assert!(ok.validate("t").is_ok());
        let bad = Tensor::from_vec(&[2], vec![1.0, f64::NAN]);
        assert!(bad.validate("t").is_err());
        let inf = Tensor::from_vec(&[2], vec![f64::INFINITY, 0.0]);
        assert!(inf.validate("t").is_err());
    }

    #[test]
    fn avt1_round_trip() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], AVT1_MAGIC);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn avt1_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn seeded_rng_is_stable_and_tag_sensitive() {
        let a: f64 = seeded_rng(7, &[1, 2]).gen();
        let b: f64 = seeded_rng(7, &[1, 2]).gen();
        let c: f64 = seeded_rng(7, &[1, 3]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
