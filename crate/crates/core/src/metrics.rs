//! Evaluation metrics: SSIM, PCKh and gender consistency, plus hooks for
//! scorers implemented elsewhere.

use std::fmt;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::pose::{Joint, KeypointSet};
use crate::synth::read_gender_tag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    /// Canonical constants for images in `[-1, 1]`.
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 2.0 }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering, keeping only positions where the window fits.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all Gaussian windows that fit inside two single-channel
/// `width × height` images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::shape(format!("ssim inputs must both be {width}x{height}")));
    }
    if width < p.window || height < p.window {
        return Err(Error::shape(format!("image {width}x{height} is smaller than the {} px window", p.window)));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let f = |v: &[f64]| filter_valid(v, width, height, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(a), f(b));
    let (e_aa, e_bb, e_ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM of the luma channels of two RGB images.
pub fn ssim_images(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("ssim images differ in size"));
    }
    ssim(&a.luma(), &b.luma(), a.width, a.height, &SsimParams::default())
}

pub const PCKH_ALPHA: f64 = 0.5;

/// Nose-to-neck distance of `gt`.
pub fn head_size(gt: &KeypointSet) -> Result<f64> {
    let (nose, neck) = (gt.get(Joint::Nose), gt.get(Joint::Neck));
    if !nose.visible || !neck.visible {
        return Err(Error::UndefinedMetric("PCKh needs a visible nose and neck in the ground truth".into()));
    }
    let d = ((nose.x - neck.x).powi(2) + (nose.y - neck.y).powi(2)).sqrt();
    if d == 0.0 {
        return Err(Error::UndefinedMetric("nose and neck coincide".into()));
    }
    Ok(d)
}

/// `(correct, counted)` joints among those visible in both sets.
pub fn pckh_counts(pred: &KeypointSet, gt: &KeypointSet, alpha: f64) -> Result<(usize, usize)> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape("PCKh keypoint sets use different frames"));
    }
    let thresh = alpha * head_size(gt)?;
    let mut correct = 0;
    let mut counted = 0;
    for (p, g) in pred.joints().iter().zip(gt.joints()) {
        if p.visible && g.visible {
            counted += 1;
            if ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() <= thresh {
                correct += 1;
            }
        }
    }
    Ok((correct, counted))
}

/// Fraction of jointly visible joints within `alpha` head sizes of the ground truth.
pub fn pckh(pred: &KeypointSet, gt: &KeypointSet, alpha: f64) -> Result<f64> {
    let (correct, counted) = pckh_counts(pred, gt, alpha)?;
    if counted == 0 {
        return Err(Error::UndefinedMetric("no joint is visible in both sets".into()));
    }
    Ok(correct as f64 / counted as f64)
}

/// Probability that an image shows a woman (label 1).
pub trait GenderClassifier {
    fn prob_female(&self, image: &Image) -> f64;

    fn label(&self, image: &Image) -> u8 {
        u8::from(self.prob_female(image) >= 0.5)
    }
}

/// Reads the gender tag painted into synthetic images.
#[derive(Debug, Clone, Copy, Default)]
pub struct TagClassifier;

impl GenderClassifier for TagClassifier {
    fn prob_female(&self, image: &Image) -> f64 {
        match read_gender_tag(image) {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantClassifier(pub f64);

impl GenderClassifier for ConstantClassifier {
    fn prob_female(&self, _: &Image) -> f64 {
        self.0
    }
}

/// Fraction of images classified as the gender of their source.
pub fn gcr(images: &[Image], labels: &[u8], clf: &dyn GenderClassifier) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: images.len(), found: labels.len() });
    }
    let hits = images.iter().zip(labels).filter(|(im, &l)| clf.label(im) == l).count();
    Ok(hits as f64 / images.len() as f64)
}

/// A batch-level score computed outside this crate (IS, DS, LPIPS, ...).
pub trait ExternalScorer {
    fn name(&self) -> String;
    fn score(&self, images: &[Image]) -> Result<f64>;
}

/// One generated image with everything needed to score it.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub generated: Image,
    pub reference: Image,
    /// Pose of the generated image, when one is known.
    pub pred_pose: Option<KeypointSet>,
    pub gt_pose: KeypointSet,
    /// Gender of the source person, 1 for female.
    pub source_gender: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>6}", "metric", "value", "n")?;
        for r in &self.rows {
            writeln!(f, "{:<8} {:>8.3} {:>6}", r.metric, r.value, r.n)?;
        }
        Ok(())
    }
}

/// Scores a batch. PCKh pools joints over items with a defined head size;
/// GCR covers items with a known source gender.
pub fn evaluate(items: &[EvalItem], clf: Option<&dyn GenderClassifier>, scorers: &[&dyn ExternalScorer]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::new();
    let mut ssim_sum = 0.0;
    for it in items {
        ssim_sum += ssim_images(&it.generated, &it.reference)?;
    }
    rows.push(MetricRow { metric: "SSIM".into(), value: ssim_sum / items.len() as f64, n: items.len() });

    let generated: Vec<Image> = items.iter().map(|i| i.generated.clone()).collect();
    for s in scorers {
        rows.push(MetricRow { metric: s.name(), value: s.score(&generated)?, n: items.len() });
    }

    let (mut correct, mut counted, mut n) = (0, 0, 0);
    for it in items {
        if let Some(pred) = &it.pred_pose {
            if let Ok((c, k)) = pckh_counts(pred, &it.gt_pose, PCKH_ALPHA) {
                correct += c;
                counted += k;
                n += 1;
            }
        }
    }
    if counted > 0 {
        rows.push(MetricRow { metric: "PCKh".into(), value: correct as f64 / counted as f64, n });
    }

    if let Some(clf) = clf {
        let (imgs, labels): (Vec<Image>, Vec<u8>) = items.iter().filter_map(|i| i.source_gender.map(|g| (i.generated.clone(), g))).unzip();
        if !imgs.is_empty() {
            rows.push(MetricRow { metric: "GCR".into(), value: gcr(&imgs, &labels, clf)?, n: imgs.len() });
        }
    }
    Ok(EvalReport { rows })
}
