//! Deterministic stand-ins for the external providers. Everything that
//! could round differently across platforms runs on 8-bit integers.

use rand::Rng;

use super::{l2_normalize, Classifier, ImageEmbedder, Segmenter, TextEmbedder};
use crate::error::Result;
use crate::image::{BlendMask, Image, MaskProvenance};
use crate::maskops::ComponentLabeling;
use crate::scalar::Scalar;
use crate::seeds::{fnv1a64, rng_for};

/// Integer BT.601-style luma.
fn luma(px: [u8; 3]) -> u8 {
    ((77 * px[0] as u32 + 150 * px[1] as u32 + 29 * px[2] as u32 + 128) >> 8) as u8
}

fn luma_plane<T: Scalar>(image: &Image<T>) -> Vec<u8> {
    image.to_rgb8().into_iter().map(luma).collect()
}

/// Otsu threshold; pixels strictly above it are foreground. `None` when no
/// threshold separates two non-empty classes.
pub(crate) fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as u64;
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut w0, mut sum0) = (0u64, 0u64);
    // compare between-class variances as exact fractions num/den
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as u64 * hist[t];
        if w0 == 0 || w0 == total {
            continue;
        }
        let diff = (sum_all as i128 * w0 as i128 - sum0 as i128 * total as i128).unsigned_abs();
        let num = diff * diff;
        let den = w0 as u128 * (total - w0) as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Global-luminance Otsu threshold followed by keep-largest-8-connected-component.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSegmenter;

impl<T: Scalar> Segmenter<T> for StubSegmenter {
    fn segment(&self, image: &Image<T>) -> Result<BlendMask<T>> {
        let (h, w) = (image.height(), image.width());
        let plane = luma_plane(image);
        let Some(t) = otsu_threshold(&plane) else {
            log::warn!("stub segmenter: image is constant, returning an empty mask");
            return Ok(BlendMask::zeros(h, w, MaskProvenance::Segmenter));
        };
        let fg: Vec<bool> = plane.iter().map(|&v| v > t).collect();
        let labels = ComponentLabeling::of(&fg, h, w);
        let keep = labels.largest().unwrap_or(0);
        let bits: Vec<bool> = labels.labels.iter().map(|&l| l != 0 && l == keep).collect();
        BlendMask::from_bools(h, w, &bits, MaskProvenance::Segmenter)
    }
}

/// 8×8 box-averaged luma, rounded to integers.
pub fn gray_8x8<T: Scalar>(image: &Image<T>) -> [u8; 64] {
    let (h, w) = (image.height(), image.width());
    let plane = luma_plane(image);
    let mut out = [0u8; 64];
    for (i, o) in out.iter_mut().enumerate() {
        let (by, bx) = (i / 8, i % 8);
        let (r0, r1) = (by * h / 8, ((by + 1) * h / 8).max(by * h / 8 + 1).min(h));
        let (c0, c1) = (bx * w / 8, ((bx + 1) * w / 8).max(bx * w / 8 + 1).min(w));
        let (mut sum, mut n) = (0u64, 0u64);
        for r in r0.min(h - 1)..r1 {
            for c in c0.min(w - 1)..c1 {
                sum += plane[r * w + c] as u64;
                n += 1;
            }
        }
        *o = ((sum + n / 2) / n.max(1)) as u8;
    }
    out
}

fn unit_or_uniform(mut v: Vec<f64>) -> Vec<f64> {
    if v.iter().all(|&x| x == 0.0) {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
        return v;
    }
    l2_normalize(&mut v);
    v
}

/// Flattened, normalized 8×8 luma thumbnail (64-D).
#[derive(Debug, Clone, Copy, Default)]
pub struct StubImageEmbedder;

impl<T: Scalar> ImageEmbedder<T> for StubImageEmbedder {
    fn embed_image(&self, image: &Image<T>) -> Result<Vec<f64>> {
        Ok(unit_or_uniform(gray_8x8(image).iter().map(|&g| g as f64).collect()))
    }
}

/// Signed hashed bag of lower-cased tokens (64-D).
#[derive(Debug, Clone, Copy, Default)]
pub struct StubTextEmbedder;

pub const STUB_DIM: usize = 64;

impl TextEmbedder for StubTextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut counts = vec![0i64; STUB_DIM];
        for tok in text.split_whitespace() {
            let h = fnv1a64(tok.to_lowercase().as_bytes());
            let sign = if h >> 63 == 1 { -1 } else { 1 };
            counts[(h % STUB_DIM as u64) as usize] += sign;
        }
        Ok(unit_or_uniform(counts.into_iter().map(|c| c as f64).collect()))
    }
}

/// Softmax over seeded integer projections of the 8×8 luma thumbnail.
#[derive(Debug, Clone)]
pub struct StubClassifier {
    weights: Vec<i64>,
    classes: usize,
}

impl StubClassifier {
    pub fn new(seed: u64, classes: usize) -> Self {
        let mut rng = rng_for(seed, "stub-classifier");
        let weights = (0..classes.max(1) * 64).map(|_| rng.random_range(-64i64..=64)).collect();
        Self {
            weights,
            classes: classes.max(1),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

impl<T: Scalar> Classifier<T> for StubClassifier {
    fn classify(&self, image: &Image<T>) -> Result<Vec<f64>> {
        let g = gray_8x8(image);
        let logits: Vec<i64> = self
            .weights
            .chunks_exact(64)
            .map(|row| row.iter().zip(&g).map(|(&w, &x)| w * x as i64).sum())
            .collect();
        let max = *logits.iter().max().expect("at least one class");
        // scale chosen so typical thumbnails give soft but non-uniform posteriors
        let scale = 64.0 * 255.0 / 8.0;
        let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64 / scale).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }
}
