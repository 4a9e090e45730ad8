//! Samples, cropping, splitting, the synthetic generator and corpus IO.

pub mod corpus;
pub mod dtf;
pub mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::TextRecord;
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;
use crate::util::seed_from_str;

pub use corpus::{load_split, read_manifest, write_corpus, ManifestEntry, Splits, SPLITS};
pub use synth::synth_generate;

pub const NUM_FIELDS: usize = 5;
/// Reporting order for the five fields, also the mask channel order.
pub const FIELDS: [&str; NUM_FIELDS] = ["AT", "State", "County", "Grantor", "Grantee"];

/// One page: `image [3, H, W]` in `[0, 1]`, `masks [5, H, W]` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub text: String,
    pub embedding: Option<Vec<f32>>,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn record(&self) -> TextRecord {
        TextRecord { sample_id: self.sample_id.clone(), text: self.text.clone(), embedding: self.embedding.clone() }
    }

    /// Checks the shape and value invariants.
    pub fn validate(&self) -> Result<()> {
        let (is, ms) = (self.image.shape(), self.masks.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != NUM_FIELDS || is[1..] != ms[1..] {
            return Err(shape_err!("sample `{}`: image {is:?} / masks {ms:?}", self.sample_id));
        }
        if self.masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(contract_err!("sample `{}`: masks must be 0/1", self.sample_id));
        }
        Ok(())
    }
}

fn crop_chw(t: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, big_w) = (s[0], s[2]);
    let plane = s[1] * big_w;
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for yy in y..y + h {
            let row = ci * plane + yy * big_w;
            out.extend_from_slice(&t.data()[row + x..row + x + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Top-left offset used by [`random_crop`].
pub fn crop_offset(sample_id: &str, image: (usize, usize), crop: (usize, usize), seed: u64) -> Result<(usize, usize)> {
    let ((hh, ww), (h, w)) = (image, crop);
    if h > hh || w > ww || h == 0 || w == 0 {
        return Err(shape_err!("crop {h}x{w} does not fit image {hh}x{ww}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_str(seed, sample_id));
    Ok((rng.gen_range(0..=hh - h), rng.gen_range(0..=ww - w)))
}

/// Same window of image and masks; offset is uniform over valid positions
/// and fixed by `(seed, sample_id)`.
pub fn random_crop(s: &Sample, crop: (usize, usize), seed: u64) -> Result<Sample> {
    s.validate()?;
    let (y, x) = crop_offset(&s.sample_id, s.dims(), crop, seed)?;
    Ok(Sample {
        sample_id: s.sample_id.clone(),
        image: crop_chw(&s.image, y, x, crop.0, crop.1)?,
        masks: crop_chw(&s.masks, y, x, crop.0, crop.1)?,
        text: s.text.clone(),
        embedding: s.embedding.clone(),
    })
}

/// `(n_train, n_val, n_test)` for an 8:1:1 split.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 10 {
        return Err(contract_err!("need ≥ 10 samples for an 8-1-1 split, got {n}"));
    }
    let tenth = (n as f64 / 10.0).round() as usize;
    Ok((n - 2 * tenth, tenth, tenth))
}

/// Shuffles with `seed` and cuts 8:1:1.
pub fn split_dataset<S: Clone>(samples: &[S], seed: u64) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (n_train, n_val, _) = split_sizes(samples.len())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_val]), pick(&order[n_train + n_val..])))
}
