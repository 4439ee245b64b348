//! Layout-diversity and fidelity instruments: subject centre-point
//! statistics, Inception Score, and embedder-based similarity scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BlendMask, Image};
use crate::plugins::{cosine, Classifier, ImageEmbedder, TextEmbedder};
use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::{save_tensor, Tensor};

pub const DEFAULT_DENSITY_SIGMA: f64 = 0.05;
pub const DEFAULT_DENSITY_RES: usize = 32;

/// Centre of the tight foreground bounding box, normalized with pixel-centre
/// convention: `x = (c_min + c_max + 1) / (2W)`, `y` likewise.
pub fn subject_center<T: Scalar>(mask: &BlendMask<T>) -> Result<(f64, f64)> {
    let (h, w) = mask.dims();
    let bits = mask.to_bools();
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        let (r, c) = (i / w, i % w);
        bbox = Some(match bbox {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bbox.ok_or_else(|| Error::Empty("mask has no foreground".into()))?;
    Ok((
        (c0 + c1 + 1) as f64 / (2 * w) as f64,
        (r0 + r1 + 1) as f64 / (2 * h) as f64,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterStats {
    pub centers: Vec<(f64, f64)>,
    /// Mean of the population variances of x and y.
    pub sigma2_avg: f64,
    pub density_sigma: f64,
    /// Row-major `res × res` density, sums to 1.
    #[serde(skip)]
    pub density: Vec<f64>,
    pub density_res: usize,
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    pairwise_sum(&sq) / n
}

pub fn sigma2_avg(centers: &[(f64, f64)]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::Empty("no centre points".into()));
    }
    let xs: Vec<f64> = centers.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = centers.iter().map(|c| c.1).collect();
    Ok((population_variance(&xs) + population_variance(&ys)) / 2.0)
}

/// Normalized sum of isotropic Gaussians (std `sigma`) at each centre,
/// evaluated at the cell centres of a `res × res` grid over `[0, 1]²`.
pub fn center_density(centers: &[(f64, f64)], sigma: f64, res: usize) -> Result<Vec<f64>> {
    if centers.is_empty() {
        return Err(Error::Empty("no centre points".into()));
    }
    if !(sigma > 0.0) || res == 0 {
        return Err(Error::validation("density", "sigma and resolution must be positive"));
    }
    let mut grid = vec![0.0; res * res];
    for (i, g) in grid.iter_mut().enumerate() {
        let y = ((i / res) as f64 + 0.5) / res as f64;
        let x = ((i % res) as f64 + 0.5) / res as f64;
        let terms: Vec<f64> = centers
            .iter()
            .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        *g = pairwise_sum(&terms);
    }
    let total = pairwise_sum(&grid);
    if total > 0.0 {
        grid.iter_mut().for_each(|g| *g /= total);
    } else {
        let u = 1.0 / grid.len() as f64;
        grid.iter_mut().for_each(|g| *g = u);
    }
    Ok(grid)
}

pub fn center_point_stats<T: Scalar>(masks: &[BlendMask<T>], sigma: f64, res: usize) -> Result<CenterStats> {
    if masks.is_empty() {
        return Err(Error::Empty("no masks".into()));
    }
    let centers = masks.iter().map(subject_center).collect::<Result<Vec<_>>>()?;
    Ok(CenterStats {
        sigma2_avg: sigma2_avg(&centers)?,
        density: center_density(&centers, sigma, res)?,
        density_sigma: sigma,
        density_res: res,
        centers,
    })
}

impl CenterStats {
    /// Density as a grayscale map scaled so its peak is 1.
    pub fn density_mask(&self) -> BlendMask<f64> {
        let peak = self.density.iter().copied().fold(0.0, f64::max);
        let data = self
            .density
            .iter()
            .map(|&d| if peak > 0.0 { d / peak } else { 0.0 })
            .collect();
        BlendMask::new(
            Tensor::new(&[self.density_res, self.density_res], data).expect("square grid"),
            crate::image::MaskProvenance::Composite,
        )
        .expect("values in [0, 1]")
    }
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` over one split.
pub fn inception_score_from_posteriors(posteriors: &[Vec<f64>]) -> Result<f64> {
    if posteriors.len() < 2 {
        return Err(Error::Empty("inception score needs at least two images".into()));
    }
    let k = posteriors[0].len();
    if k == 0 || posteriors.iter().any(|p| p.len() != k) {
        return Err(Error::validation("posteriors", "all posteriors need the same non-zero length"));
    }
    let n = posteriors.len() as f64;
    let marginal: Vec<f64> = (0..k)
        .map(|c| {
            let col: Vec<f64> = posteriors.iter().map(|p| p[c]).collect();
            pairwise_sum(&col) / n
        })
        .collect();
    let kls: Vec<f64> = posteriors
        .iter()
        .map(|p| {
            let terms: Vec<f64> = p
                .iter()
                .zip(&marginal)
                .map(|(&pi, &mi)| if pi > 0.0 { pi * (pi / mi).ln() } else { 0.0 })
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    Ok((pairwise_sum(&kls) / n).exp())
}

pub fn inception_score<T: Scalar, C: Classifier<T> + ?Sized>(images: &[Image<T>], classifier: &C) -> Result<f64> {
    let posteriors = images
        .iter()
        .map(|img| classifier.classify(img))
        .collect::<Result<Vec<_>>>()?;
    inception_score_from_posteriors(&posteriors)
}

/// Mean pairwise cosine between two sets of vectors.
pub fn mean_cross_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("similarity needs non-empty sets".into()));
    }
    let mut sims = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            sims.push(cosine(x, y)?);
        }
    }
    Ok(pairwise_sum(&sims) / sims.len() as f64)
}

/// Mean cosine similarity over all generated × reference image pairs.
pub fn identity_score<T: Scalar, E: ImageEmbedder<T> + ?Sized>(
    generated: &[Image<T>],
    references: &[Image<T>],
    embedder: &E,
) -> Result<f64> {
    let g = embed_all(generated, embedder)?;
    let r = embed_all(references, embedder)?;
    mean_cross_cosine(&g, &r)
}

/// Mean cosine between each generated image's embedding and the prompt's.
pub fn fidelity_score<T: Scalar, E: ImageEmbedder<T> + ?Sized, X: TextEmbedder + ?Sized>(
    generated: &[Image<T>],
    prompt: &str,
    image_embedder: &E,
    text_embedder: &X,
) -> Result<f64> {
    let g = embed_all(generated, image_embedder)?;
    let t = text_embedder.embed_text(prompt)?;
    mean_cross_cosine(&g, &[t])
}

pub fn embed_all<T: Scalar, E: ImageEmbedder<T> + ?Sized>(images: &[Image<T>], embedder: &E) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|img| embedder.embed_image(img)).collect()
}

/// Writes vectors as a rank-2 `LTR1` container (one row per vector).
pub fn export_embeddings(vectors: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::validation("embeddings", "vectors differ in length"));
    }
    let data: Vec<f32> = vectors.iter().flatten().map(|&x| x as f32).collect();
    save_tensor(&Tensor::new(&[vectors.len(), dim], data)?, path)
}
