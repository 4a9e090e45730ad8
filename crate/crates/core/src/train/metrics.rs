//! Intersection-over-union per field, accumulated over a dataset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FIELDS, NUM_FIELDS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// `|pred ∧ truth| / |pred ∨ truth|`; 1.0 when both are empty.
pub fn iou<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(shape_err!("iou: pred {:?} vs truth {:?}", pred.shape(), truth.shape()));
    }
    let (i, u) = tally(pred.data(), truth.data());
    Ok(ratio(i, u))
}

fn tally<T: Real>(pred: &[T], truth: &[T]) -> (u64, u64) {
    pred.iter().zip(truth).fold((0, 0), |(i, u), (&p, &t)| {
        let (p, t) = (p > T::zero(), t > T::zero());
        (i + (p && t) as u64, u + (p || t) as u64)
    })
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// How per-field IoU is aggregated over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouMode {
    /// Sum intersections and unions over all images, then divide.
    #[default]
    Dataset,
    /// Mean of per-image IoUs.
    PerImage,
}

impl FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(IouMode::Dataset),
            "per_image" => Ok(IouMode::PerImage),
            _ => Err(Error::Config(format!("iou_mode must be dataset or per_image, got `{s}`"))),
        }
    }
}

impl fmt::Display for IouMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouMode::Dataset => "dataset",
            IouMode::PerImage => "per_image",
        })
    }
}

/// Running per-field totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    pub mode: IouMode,
    pub inter: [u64; NUM_FIELDS],
    pub union: [u64; NUM_FIELDS],
    per_image_sum: [f64; NUM_FIELDS],
    pub images: usize,
}

impl IouAccumulator {
    pub fn new(mode: IouMode) -> Self {
        IouAccumulator { mode, ..Default::default() }
    }

    /// Adds binary `pred` / `truth` of shape `[B, 5, H, W]`.
    pub fn add<T: Real>(&mut self, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(shape_err!("pred {:?} vs truth {:?}", pred.shape(), truth.shape()));
        }
        let [n, c, h, w] = pred.dims4()?;
        if c != NUM_FIELDS {
            return Err(shape_err!("expected {NUM_FIELDS} field channels, got {c}"));
        }
        let hw = h * w;
        for b in 0..n {
            for f in 0..NUM_FIELDS {
                let at = (b * c + f) * hw;
                let (i, u) = tally(&pred.data()[at..at + hw], &truth.data()[at..at + hw]);
                self.inter[f] += i;
                self.union[f] += u;
                self.per_image_sum[f] += ratio(i, u);
            }
        }
        self.images += n;
        Ok(())
    }

    pub fn ious(&self) -> [f64; NUM_FIELDS] {
        std::array::from_fn(|f| match self.mode {
            IouMode::Dataset => ratio(self.inter[f], self.union[f]),
            IouMode::PerImage if self.images == 0 => 1.0,
            IouMode::PerImage => self.per_image_sum[f] / self.images as f64,
        })
    }
}

pub fn mean_iou(ious: &[f64; NUM_FIELDS]) -> f64 {
    ious.iter().sum::<f64>() / NUM_FIELDS as f64
}

/// One evaluation (or one training epoch). Field order: AT, State, County,
/// Grantor, Grantee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub loss: f64,
    pub iou_at: f64,
    pub iou_state: f64,
    pub iou_county: f64,
    pub iou_grantor: f64,
    pub iou_grantee: f64,
    pub miou: f64,
    pub seconds: f64,
}

impl MetricsReport {
    pub fn new(epoch: usize, loss: f64, ious: [f64; NUM_FIELDS], seconds: f64) -> Self {
        let [iou_at, iou_state, iou_county, iou_grantor, iou_grantee] = ious;
        MetricsReport { epoch, loss, iou_at, iou_state, iou_county, iou_grantor, iou_grantee, miou: mean_iou(&ious), seconds }
    }

    pub fn ious(&self) -> [f64; NUM_FIELDS] {
        [self.iou_at, self.iou_state, self.iou_county, self.iou_grantor, self.iou_grantee]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("bad metrics line: {e}")))
    }

    /// Everything except `seconds`, for determinism comparisons.
    pub fn same_values(&self, other: &MetricsReport) -> bool {
        MetricsReport { seconds: 0.0, ..self.clone() } == MetricsReport { seconds: 0.0, ..other.clone() }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "mIoU")?;
        for name in FIELDS {
            write!(f, " {name:>8}")?;
        }
        writeln!(f)?;
        write!(f, "{:>8.4}", self.miou)?;
        for v in self.ious() {
            write!(f, " {v:>8.4}")?;
        }
        write!(f, "\nloss {:.6}", self.loss)
    }
}
