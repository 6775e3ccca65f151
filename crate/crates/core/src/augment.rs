//! Random shifts and intensity jitter producing two views of a batch.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Clip applied to each jitter draw.
pub const JITTER_CLIP: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub shift_pad: usize,
    pub jitter_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { shift_pad: 1, jitter_scale: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedViews {
    pub view1: Tensor,
    pub view2: Tensor,
}

/// Splits a `[..., C, H, W]` shape into `(images, C, H, W)`.
fn image_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::invalid(op, format!("expected [..., C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let images = s[..s.len() - 3].iter().product();
    Ok((images, c, h, w))
}

/// Replicate-pads each image by `pad` and crops at the given per-image
/// `(dy, dx)` offsets, each in `[0, 2·pad]`.
pub fn shift_with_offsets(x: &Tensor, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let (images, c, h, w) = image_dims(x, "random_shift")?;
    if pad >= h.min(w) {
        return Err(Error::invalid("random_shift", format!("pad {pad} must be below min(H, W) = {}", h.min(w))));
    }
    if offsets.len() != images {
        return Err(Error::invalid("random_shift", format!("{} offsets for {images} images", offsets.len())));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    for (img, &(dy, dx)) in offsets.iter().enumerate() {
        if dy > 2 * pad || dx > 2 * pad {
            return Err(Error::invalid("random_shift", format!("offset ({dy}, {dx}) exceeds 2·pad")));
        }
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for y in 0..h {
                let sy = clamp(y as i64 + dy as i64 - pad as i64, h);
                for xx in 0..w {
                    let sx = clamp(xx as i64 + dx as i64 - pad as i64, w);
                    out[base + y * w + xx] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// One uniform offset in `[0, 2·pad]²` per image.
pub fn random_shift(x: &Tensor, pad: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (images, ..) = image_dims(x, "random_shift")?;
    let offsets: Vec<(usize, usize)> =
        (0..images).map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))).collect();
    shift_with_offsets(x, pad, &offsets)
}

/// Multiplies image `i` by `1 + scale·draws[i]`.
pub fn jitter_with_draws(x: &Tensor, scale: f64, draws: &[f64]) -> Result<Tensor> {
    let (images, c, h, w) = image_dims(x, "intensity_jitter")?;
    if draws.len() != images {
        return Err(Error::invalid("intensity_jitter", format!("{} draws for {images} images", draws.len())));
    }
    let per = c * h * w;
    let mut out = x.clone();
    for (chunk, r) in out.data_mut().chunks_mut(per).zip(draws) {
        let factor = 1.0 + scale * r;
        chunk.iter_mut().for_each(|p| *p *= factor);
    }
    Ok(out)
}

/// Draws `r ~ N(0, 1)` clipped to `[-2, 2]`.
pub fn jitter_draw(rng: &mut impl Rng) -> f64 {
    let r: f64 = rng.sample(StandardNormal);
    r.clamp(-JITTER_CLIP, JITTER_CLIP)
}

pub fn intensity_jitter(x: &Tensor, scale: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::invalid("intensity_jitter", format!("scale must be non-negative, got {scale}")));
    }
    let (images, ..) = image_dims(x, "intensity_jitter")?;
    let draws: Vec<f64> = (0..images).map(|_| jitter_draw(rng)).collect();
    jitter_with_draws(x, scale, &draws)
}

pub fn augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let shifted = random_shift(x, cfg.shift_pad, rng)?;
    intensity_jitter(&shifted, cfg.jitter_scale, rng)
}

/// Two views of the same observations from independent draw streams.
pub fn make_views(x: &Tensor, cfg: &AugmentConfig, rng1: &mut impl Rng, rng2: &mut impl Rng) -> Result<AugmentedViews> {
    Ok(AugmentedViews { view1: augment(x, cfg, rng1)?, view2: augment(x, cfg, rng2)? })
}
