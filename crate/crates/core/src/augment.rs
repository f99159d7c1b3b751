//! Skeleton augmentations that produce the two views of a training sample:
//! a random shear of the coordinate channels followed by a random temporal
//! crop of a reflection-padded sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Off-diagonal shear entries are uniform in `±shear_amplitude`.
    pub shear_amplitude: f64,
    /// `floor(T * crop_pad_ratio)` frames are mirrored onto each end.
    pub crop_pad_ratio: f64,
    /// Frames in every augmented view.
    pub output_length: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            shear_amplitude: 0.5,
            crop_pad_ratio: 1.0 / 6.0,
            output_length: 64,
        }
    }
}

impl AugmentationConfig {
    pub fn identity(output_length: usize) -> Self {
        Self {
            shear_amplitude: 0.0,
            crop_pad_ratio: 0.0,
            output_length,
        }
    }

    pub fn pad_frames(&self, frames: usize) -> usize {
        (frames as f64 * self.crop_pad_ratio).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.shear_amplitude < 0.0 || self.crop_pad_ratio < 0.0 || self.output_length == 0 {
            return Err(Error::Config("augmentation amplitudes must be non-negative and output length positive".into()));
        }
        Ok(())
    }
}

/// `I + S` with zero-diagonal `S` drawn uniform in `±amplitude`, in the order
/// `s01, s02, s10, s12, s20, s21`.
pub fn draw_shear<R: Rng + ?Sized>(amplitude: f64, rng: &mut R) -> [[f64; 3]; 3] {
    let mut a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            if i != j && amplitude > 0.0 {
                *x = rng.gen_range(-amplitude..amplitude);
            }
        }
    }
    a
}

/// Multiplies every joint's coordinate vector by `m`.
pub fn apply_channel_transform(seq: &SkeletonSequence, m: &[[f64; 3]; 3]) -> Result<SkeletonSequence> {
    if seq.channels() != 3 {
        return Err(Error::shape("shear", format!("expected 3 channels, got {}", seq.channels())));
    }
    let plane = seq.frames() * seq.joints();
    let src = seq.tensor().data();
    let mut out = vec![0.0; src.len()];
    for (c, row) in m.iter().enumerate() {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for (d, &coef) in row.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            for (o, s) in dst.iter_mut().zip(&src[d * plane..(d + 1) * plane]) {
                *o += coef * s;
            }
        }
    }
    Ok(seq.with_tensor(Tensor::new(seq.tensor().shape().to_vec(), out)?))
}

pub fn shear<R: Rng + ?Sized>(seq: &SkeletonSequence, cfg: &AugmentationConfig, rng: &mut R) -> Result<SkeletonSequence> {
    if seq.channels() != 3 {
        return Err(Error::shape("shear", format!("expected 3 channels, got {}", seq.channels())));
    }
    let m = draw_shear(cfg.shear_amplitude, rng);
    apply_channel_transform(seq, &m)
}

/// Mirror index into `0..len` (edge frames are not repeated).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Copies `length` frames starting at `offset` of the sequence reflection
/// padded by `pad` frames on both ends.
pub fn window(seq: &SkeletonSequence, pad: usize, offset: usize, length: usize) -> Result<SkeletonSequence> {
    let (c, t, v) = (seq.channels(), seq.frames(), seq.joints());
    if offset + length > t + 2 * pad {
        return Err(Error::invalid(format!(
            "window of {length} frames at {offset} exceeds padded length {}",
            t + 2 * pad
        )));
    }
    let src = seq.tensor().data();
    let mut out = vec![0.0; c * length * v];
    for ch in 0..c {
        for f in 0..length {
            let s = reflect((offset + f) as isize - pad as isize, t);
            out[(ch * length + f) * v..(ch * length + f + 1) * v]
                .copy_from_slice(&src[(ch * t + s) * v..(ch * t + s + 1) * v]);
        }
    }
    Ok(seq.with_tensor(Tensor::new(vec![c, length, v], out)?))
}

/// Random crop of `output_length` frames; returns the view and its offset
/// into the padded sequence.
pub fn temporal_crop_at<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(SkeletonSequence, usize)> {
    let pad = cfg.pad_frames(seq.frames());
    let padded = seq.frames() + 2 * pad;
    if cfg.output_length > padded {
        return Err(Error::invalid(format!(
            "crop of {} frames impossible from {} padded frames",
            cfg.output_length, padded
        )));
    }
    let offset = rng.gen_range(0..=padded - cfg.output_length);
    Ok((window(seq, pad, offset, cfg.output_length)?, offset))
}

pub fn temporal_crop<R: Rng + ?Sized>(seq: &SkeletonSequence, cfg: &AugmentationConfig, rng: &mut R) -> Result<SkeletonSequence> {
    temporal_crop_at(seq, cfg, rng).map(|(s, _)| s)
}

/// Deterministic centered crop (mirror padding when the clip is too short),
/// used to feed un-augmented clips to a frozen encoder.
pub fn center_crop(seq: &SkeletonSequence, length: usize) -> Result<SkeletonSequence> {
    let t = seq.frames();
    if t >= length {
        window(seq, 0, (t - length) / 2, length)
    } else {
        let pad = (length - t).div_ceil(2);
        window(seq, pad, pad - (length - t) / 2, length)
    }
}

/// Shear then crop.
pub fn augment<R: Rng + ?Sized>(seq: &SkeletonSequence, cfg: &AugmentationConfig, rng: &mut R) -> Result<SkeletonSequence> {
    let sheared = shear(seq, cfg, rng)?;
    temporal_crop(&sheared, cfg, rng)
}

/// Two independent augmentations of the same clip.
pub fn augment_pair<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(SkeletonSequence, SkeletonSequence)> {
    let x = augment(seq, cfg, rng)?;
    let x_prime = augment(seq, cfg, rng)?;
    Ok((x, x_prime))
}
