//! Rotary positional embeddings on a shared seconds-based time axis.
//!
//! Video self-attention uses a 3D split of the head dimension over (t, x, y);
//! audio self-attention and every audio-visual cross-attention use the 1D
//! temporal form only. Positions are measured in seconds and multiplied by
//! [`TIME_SCALE`] before rotation, so one audio token step is about one
//! position unit.

use crate::error::{CoreError, Result};
use crate::graph::RotationTable;

/// Seconds-to-position-units factor applied before computing angles.
pub const TIME_SCALE: f64 = 25.0;

/// Default rotary frequency base.
pub const ROPE_BASE: f64 = 10000.0;

/// Per-token coordinates. Audio tokens carry no spatial indices.
#[derive(Clone, Debug)]
pub struct TokenCoords {
    pub t_seconds: Vec<f64>,
    /// (x index, y index) per token, video only.
    pub spatial: Option<(Vec<f64>, Vec<f64>)>,
}

impl TokenCoords {
    pub fn temporal(t_seconds: Vec<f64>) -> TokenCoords {
        TokenCoords {
            t_seconds,
            spatial: None,
        }
    }

    pub fn len(&self) -> usize {
        self.t_seconds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_seconds.is_empty()
    }
}

/// Head-dimension split for rotary embeddings.
#[derive(Clone, Copy, Debug)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub t_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
}

impl RopeConfig {
    /// All of the head dimension on the time axis.
    pub fn temporal(head_dim: usize, base: f64) -> Result<RopeConfig> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(CoreError::invalid(
                "rope_config",
                format!("head_dim {head_dim} must be even and positive"),
            ));
        }
        Ok(RopeConfig {
            head_dim,
            base,
            t_dim: head_dim,
            x_dim: 0,
            y_dim: 0,
        })
    }

    /// Half of the head dimension on time, a quarter on each spatial axis.
    /// Every group must stay even (pairs rotate), so head_dim % 8 == 0.
    pub fn spatiotemporal(head_dim: usize, base: f64) -> Result<RopeConfig> {
        if head_dim % 8 != 0 {
            return Err(CoreError::invalid(
                "rope_config",
                format!("head_dim {head_dim} must be divisible by 8 for the 3D split"),
            ));
        }
        let quarter = head_dim / 4;
        Ok(RopeConfig {
            head_dim,
            base,
            t_dim: 2 * quarter,
            x_dim: quarter,
            y_dim: quarter,
        })
    }
}

/// position_i = i / rate, in seconds. For video the positions are per latent
/// frame; spatial tokens of one frame share the frame's time (see
/// [`video_coords`]).
pub fn temporal_positions(n_tokens: usize, rate: f64) -> Result<Vec<f64>> {
    if n_tokens == 0 {
        return Err(CoreError::invalid("temporal_positions", "zero tokens"));
    }
    if rate <= 0.0 {
        return Err(CoreError::invalid(
            "temporal_positions",
            format!("rate {rate} must be positive"),
        ));
    }
    Ok((0..n_tokens).map(|i| i as f64 / rate).collect())
}

/// Coordinates of audio tokens at `token_rate` per second.
pub fn audio_coords(n_tokens: usize, token_rate: f64) -> Result<TokenCoords> {
    Ok(TokenCoords::temporal(temporal_positions(n_tokens, token_rate)?))
}

/// Coordinates of a flattened [t, y, x] video latent grid at `latent_fps`.
pub fn video_coords(t_lat: usize, h_lat: usize, w_lat: usize, latent_fps: f64) -> Result<TokenCoords> {
    let frame_times = temporal_positions(t_lat, latent_fps)?;
    if h_lat == 0 || w_lat == 0 {
        return Err(CoreError::invalid("video_coords", "empty spatial grid"));
    }
    let n = t_lat * h_lat * w_lat;
    let mut t_seconds = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for &ft in &frame_times {
        for y in 0..h_lat {
            for x in 0..w_lat {
                t_seconds.push(ft);
                xs.push(x as f64);
                ys.push(y as f64);
            }
        }
    }
    Ok(TokenCoords {
        t_seconds,
        spatial: Some((xs, ys)),
    })
}

fn axis_angles(position: f64, pairs: usize, head_dim: usize, base: f64, out: &mut Vec<f64>) {
    for i in 0..pairs {
        let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
        out.push(position * theta);
    }
}

/// 1D temporal rotation table: consecutive coordinate pairs rotated by
/// `seconds * TIME_SCALE * theta_i` with geometrically spaced `theta_i`.
pub fn rope_1d_table(seconds: &[f64], head_dim: usize, base: f64) -> Result<RotationTable> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(CoreError::invalid(
            "rope_1d",
            format!("head_dim {head_dim} must be even and positive"),
        ));
    }
    let pairs = head_dim / 2;
    let angles: Vec<Vec<f64>> = seconds
        .iter()
        .map(|&s| {
            let mut row = Vec::with_capacity(pairs);
            axis_angles(s * TIME_SCALE, pairs, head_dim, base, &mut row);
            row
        })
        .collect();
    Ok(RotationTable::from_angles(&angles))
}

/// 3D rotation table: the head dimension is partitioned into contiguous
/// (t, x, y) groups and each group is rotated by its own axis position.
pub fn rope_3d_table(coords: &TokenCoords, cfg: &RopeConfig) -> Result<RotationTable> {
    let (xs, ys) = coords.spatial.as_ref().ok_or_else(|| {
        CoreError::invalid("rope_3d", "missing spatial coordinates")
    })?;
    if xs.len() != coords.t_seconds.len() || ys.len() != coords.t_seconds.len() {
        return Err(CoreError::shape("rope_3d", "coordinate axes differ in length"));
    }
    if cfg.t_dim % 2 != 0 || cfg.x_dim % 2 != 0 || cfg.y_dim % 2 != 0 {
        return Err(CoreError::invalid("rope_3d", "per-axis dims must be even"));
    }
    if cfg.t_dim + cfg.x_dim + cfg.y_dim != cfg.head_dim {
        return Err(CoreError::invalid(
            "rope_3d",
            "axis split does not sum to head_dim",
        ));
    }
    let angles: Vec<Vec<f64>> = coords
        .t_seconds
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(&t, (&x, &y))| {
            let mut row = Vec::with_capacity(cfg.head_dim / 2);
            axis_angles(t * TIME_SCALE, cfg.t_dim / 2, cfg.t_dim, cfg.base, &mut row);
            axis_angles(x, cfg.x_dim / 2, cfg.x_dim, cfg.base, &mut row);
            axis_angles(y, cfg.y_dim / 2, cfg.y_dim, cfg.base, &mut row);
            row
        })
        .collect();
    Ok(RotationTable::from_angles(&angles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Tensor};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn rotate_one(v: &Tensor, seconds: f64, head_dim: usize) -> Tensor {
        let table = rope_1d_table(&[seconds], head_dim, ROPE_BASE).unwrap();
        table.rotate(&v.reshaped(&[1, head_dim]))
    }

    #[test]
    fn zero_position_is_identity() {
        let mut rng = seeded_rng(21, &[0]);
        let v = Tensor::randn(&[8], &mut rng);
        let out = rotate_one(&v, 0.0, 8);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = seeded_rng(22, &[0]);
        for _ in 0..20 {
            let v = Tensor::randn(&[16], &mut rng);
            let out = rotate_one(&v, 3.7, 16);
            let n_in: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_out: f64 = out.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n_in - n_out).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_position_property_100_pairs() {
        let mut rng = seeded_rng(23, &[0]);
        let d = 16;
        for _ in 0..100 {
            let q = Tensor::randn(&[d], &mut rng);
            let k = Tensor::randn(&[d], &mut rng);
            let a = dot(
                rotate_one(&q, 5.0, d).data(),
                rotate_one(&k, 3.0, d).data(),
            );
            let b = dot(
                rotate_one(&q, 12.0, d).data(),
                rotate_one(&k, 10.0, d).data(),
            );
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(rope_1d_table(&[0.0], 7, ROPE_BASE).is_err());
        assert!(RopeConfig::temporal(6, ROPE_BASE).is_ok());
        assert!(RopeConfig::spatiotemporal(6, ROPE_BASE).is_err());
    }

    #[test]
    fn audio_positions_50_tokens_at_25_per_second() {
        let pos = temporal_positions(50, 25.0).unwrap();
        assert_eq!(pos.len(), 50);
        assert_eq!(pos[0], 0.0);
        assert!((pos[1] - 0.04).abs() < 1e-15);
        assert!((pos[49] - 1.96).abs() < 1e-12);
        assert!(temporal_positions(0, 25.0).is_err());
    }

    #[test]
    fn video_frame_tokens_share_frame_time() {
        let coords = video_coords(10, 2, 3, 5.0).unwrap();
        assert_eq!(coords.len(), 60);
        for frame in 0..10 {
            let expect = frame as f64 / 5.0;
            for tok in 0..6 {
                assert_eq!(coords.t_seconds[frame * 6 + tok], expect);
            }
        }
        let (xs, ys) = coords.spatial.as_ref().unwrap();
        assert_eq!(xs[0..6], [0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert_eq!(ys[0..6], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn equal_seconds_give_equal_temporal_rotation_across_streams() {
        // one audio token at 0.2 s vs all tokens of the video frame at 0.2 s
        let audio = audio_coords(6, 25.0).unwrap();
        let video = video_coords(2, 2, 2, 5.0).unwrap();
        let d = 8;
        let audio_table = rope_1d_table(&audio.t_seconds, d, ROPE_BASE).unwrap();
        let video_table = rope_1d_table(&video.t_seconds, d, ROPE_BASE).unwrap();
        // audio token 5 is at 0.2 s; video frame 1 (tokens 4..8) is at 0.2 s
        let mut rng = seeded_rng(24, &[0]);
        let v = Tensor::randn(&[d], &mut rng);
        let audio_in = {
            let mut data = vec![0.0; 6 * d];
            data[5 * d..6 * d].copy_from_slice(v.data());
            Tensor::from_vec(&[6, d], data)
        };
        let video_in = {
            let mut data = vec![0.0; 8 * d];
            data[4 * d..5 * d].copy_from_slice(v.data());
            Tensor::from_vec(&[8, d], data)
        };
        let a = audio_table.rotate(&audio_in);
        let b = video_table.rotate(&video_in);
        for i in 0..d {
            assert_eq!(a.at(&[5, i]), b.at(&[4, i]));
        }
    }

    #[test]
    fn rope_3d_requires_spatial_coords_and_splits_axes() {
        let cfg = RopeConfig::spatiotemporal(16, ROPE_BASE).unwrap();
        assert_eq!((cfg.t_dim, cfg.x_dim, cfg.y_dim), (8, 4, 4));
        let temporal_only = TokenCoords::temporal(vec![0.0, 0.1]);
        assert!(rope_3d_table(&temporal_only, &cfg).is_err());

        // all-zero coords -> identity
        let coords = TokenCoords {
            t_seconds: vec![0.0, 0.0],
            spatial: Some((vec![0.0, 0.0], vec![0.0, 0.0])),
        };
        let mut rng = seeded_rng(25, &[0]);
        let v = Tensor::randn(&[2, 16], &mut rng);
        let out = rope_3d_table(&coords, &cfg).unwrap().rotate(&v);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn rope_3d_axis_separability_in_t() {
        let cfg = RopeConfig::spatiotemporal(16, ROPE_BASE).unwrap();
        let base = TokenCoords {
            t_seconds: vec![0.0],
            spatial: Some((vec![2.0], vec![3.0])),
        };
        let shifted = TokenCoords {
            t_seconds: vec![0.4],
            spatial: Some((vec![2.0], vec![3.0])),
        };
        let mut rng = seeded_rng(26, &[0]);
        let v = Tensor::randn(&[1, 16], &mut rng);
        let a = rope_3d_table(&base, &cfg).unwrap().rotate(&v);
        let b = rope_3d_table(&shifted, &cfg).unwrap().rotate(&v);
        // t group (dims 0..8) gets the pure temporal rotation of the delta
        let t_table = rope_1d_table(&[0.4], cfg.t_dim, ROPE_BASE).unwrap();
        let t_in = Tensor::from_vec(&[1, 8], a.data()[0..8].to_vec());
        let expect = t_table.rotate(&t_in);
        for i in 0..8 {
            assert!((b.at(&[0, i]) - expect.at(&[0, i])).abs() < 1e-12);
        }
        // x and y groups are untouched by a pure t change
        for i in 8..16 {
            assert_eq!(a.at(&[0, i]), b.at(&[0, i]));
        }
    }

    #[test]
    fn rope_3d_norm_preserved_across_random_coords() {
        let cfg = RopeConfig::spatiotemporal(24, ROPE_BASE).unwrap();
        let mut rng = seeded_rng(27, &[0]);
        for _ in 0..20 {
            let coords = TokenCoords {
                t_seconds: vec![1.3],
                spatial: Some((vec![4.0], vec![7.0])),
            };
            let v = Tensor::randn(&[1, 24], &mut rng);
            let out = rope_3d_table(&coords, &cfg).unwrap().rotate(&v);
            let n_in: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_out: f64 = out.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n_in - n_out).abs() < 1e-12);
        }
    }
}
