use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::FeatureSeq;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFill {
    /// Utterance mean over all frames and channels.
    #[default]
    Mean,
    Zero,
}

/// Masks one channel band and one frame band. Band widths are uniform in
/// `[0, width]`, clamped to the feature extents.
pub fn augment<R: Rng>(x: &FeatureSeq, f_width: usize, t_width: usize, fill: MaskFill, rng: &mut R) -> FeatureSeq {
    let (n, dim) = (x.n_frames(), x.dim());
    let value = match fill {
        MaskFill::Mean => x.mean(),
        MaskFill::Zero => 0.0,
    };
    let mut out = x.clone();
    let fw = rng.gen_range(0..=f_width.min(dim));
    let f0 = rng.gen_range(0..=dim - fw);
    let tw = rng.gen_range(0..=t_width.min(n));
    let t0 = rng.gen_range(0..=n - tw);
    let data = out.data_mut();
    for t in 0..n {
        for c in f0..f0 + fw {
            data[t * dim + c] = value;
        }
    }
    for t in t0..t0 + tw {
        data[t * dim..(t + 1) * dim].iter_mut().for_each(|v| *v = value);
    }
    out
}
