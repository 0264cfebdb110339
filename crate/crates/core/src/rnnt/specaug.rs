use serde::{Deserialize, Serialize};

use crate::numcore::math::ceil;
use crate::numcore::{Rng, Tensor};

/// Time and feature masking applied to first-pass inputs during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub num_time_masks: usize,
    pub max_time_frac: f64,
    pub num_feat_masks: usize,
    pub max_feat_frac: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self { num_time_masks: 2, max_time_frac: 0.1, num_feat_masks: 1, max_feat_frac: 0.25 }
    }
}

impl SpecAugmentConfig {
    pub const OFF: Self = Self { num_time_masks: 0, max_time_frac: 0.0, num_feat_masks: 0, max_feat_frac: 0.0 };
}

/// Zeroes random frame spans and feature channels. Each time mask covers at
/// most `⌈max_time_frac · T′⌉` consecutive frames; each feature mask at most
/// `⌈max_feat_frac · F⌉` consecutive channels.
pub fn spec_augment(features: &Tensor, cfg: &SpecAugmentConfig, rng: &mut Rng) -> Tensor {
    let mut out = features.clone();
    let (frames, dims) = (features.rows(), features.cols());
    let max_t = (ceil(cfg.max_time_frac * frames as f64) as usize).min(frames);
    for _ in 0..cfg.num_time_masks {
        let width = rng.range_inclusive(0, max_t);
        let start = rng.range_inclusive(0, frames - width);
        for t in start..start + width {
            out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let max_f = (ceil(cfg.max_feat_frac * dims as f64) as usize).min(dims);
    for _ in 0..cfg.num_feat_masks {
        let width = rng.range_inclusive(0, max_f);
        let start = rng.range_inclusive(0, dims - width);
        for t in 0..frames {
            out.row_mut(t)[start..start + width].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}
