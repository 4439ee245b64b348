//! 2-D mask mathematics for adaptive blending: cross-attention mask
//! extraction, binary composition, exact Euclidean distance transform,
//! `[0.5, 1]` normalization, small-component removal, and latent blending.

use std::collections::VecDeque;

use crate::attention::AttentionTrace;
use crate::backends::AttnKind;
use crate::error::{Error, Result};
use crate::image::{BlendMask, MaskProvenance};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// 8-connected component labels of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    /// Row-major; 0 is background, components are numbered from 1 in raster order.
    pub labels: Vec<u32>,
    /// `volumes[l - 1]` is the pixel count of label `l`.
    pub volumes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn of(bits: &[bool], height: usize, width: usize) -> Self {
        assert_eq!(bits.len(), height * width);
        let mut labels = vec![0u32; bits.len()];
        let mut volumes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..bits.len() {
            if !bits[start] || labels[start] != 0 {
                continue;
            }
            let label = volumes.len() as u32 + 1;
            labels[start] = label;
            queue.push_back(start);
            let mut volume = 0;
            while let Some(p) = queue.pop_front() {
                volume += 1;
                let (r, c) = ((p / width) as isize, (p % width) as isize);
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                            continue;
                        }
                        let q = nr as usize * width + nc as usize;
                        if bits[q] && labels[q] == 0 {
                            labels[q] = label;
                            queue.push_back(q);
                        }
                    }
                }
            }
            volumes.push(volume);
        }
        Self {
            height,
            width,
            labels,
            volumes,
        }
    }

    pub fn count(&self) -> usize {
        self.volumes.len()
    }

    /// Label of the largest component; ties go to the lowest label.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &v) in self.volumes.iter().enumerate() {
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, i as u32 + 1));
            }
        }
        best.map(|(_, l)| l)
    }
}

fn binary<T: Scalar>(h: usize, w: usize, bits: &[bool], provenance: MaskProvenance) -> BlendMask<T> {
    BlendMask::from_bools(h, w, bits, provenance).expect("dimensions agree by construction")
}

/// Averages the selected tokens' cross-attention over `layers` and `steps`,
/// min-max normalizes, and keeps pixels `>= threshold`.
pub fn cross_attention_mask<T: Scalar>(
    trace: &AttentionTrace<T>,
    token_indices: &[usize],
    layers: &[usize],
    steps: &[usize],
    threshold: f64,
) -> Result<BlendMask<T>> {
    if layers.is_empty() {
        return Err(Error::Empty("no cross-attention layers selected".into()));
    }
    if steps.is_empty() {
        return Err(Error::Empty("no steps selected".into()));
    }
    if token_indices.is_empty() {
        return Err(Error::Empty("no subject tokens selected".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut grid = (0, 0);
    let mut count = 0usize;
    for &s in steps {
        for &layer in layers {
            let tap = trace.get(s, layer)?;
            if tap.kind != AttnKind::Cross {
                return Err(Error::Layer {
                    layer,
                    reason: "not a cross-attention layer".into(),
                });
            }
            let (n, m) = (tap.probs.shape()[0], tap.probs.shape()[1]);
            if let Some(&bad) = token_indices.iter().find(|&&t| t >= m) {
                return Err(Error::Layer {
                    layer,
                    reason: format!("token index {bad} out of range for {m} tokens"),
                });
            }
            let acc = acc.get_or_insert_with(|| {
                grid = square_grid(n);
                vec![0.0; n]
            });
            if acc.len() != n {
                return Err(Error::Layer {
                    layer,
                    reason: "selected layers have different resolutions".into(),
                });
            }
            for (p, a) in acc.iter_mut().enumerate() {
                for &t in token_indices {
                    *a += tap.probs.at2(p, t).as_f64();
                }
            }
            count += token_indices.len();
        }
    }
    let mut avg = acc.expect("non-empty loops");
    for a in &mut avg {
        *a /= count as f64;
    }
    threshold_normalized(&avg, grid, threshold)
}

/// Spatial grid of a flattened token map; layers here are square.
fn square_grid(n: usize) -> (usize, usize) {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        (side, side)
    } else {
        (1, n)
    }
}

/// Min-max normalizes `values` (a `grid` map) and binarizes at `threshold`.
pub fn threshold_normalized<T: Scalar>(
    values: &[f64],
    grid: (usize, usize),
    threshold: f64,
) -> Result<BlendMask<T>> {
    let (h, w) = grid;
    if values.len() != h * w {
        return Err(Error::shape(&[h, w], &[values.len()]));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        log::warn!("cross-attention map is constant; producing an empty mask");
        return Ok(BlendMask::zeros(h, w, MaskProvenance::CrossAttn));
    }
    let bits: Vec<bool> = values.iter().map(|&v| (v - lo) / (hi - lo) >= threshold).collect();
    Ok(binary(h, w, &bits, MaskProvenance::CrossAttn))
}

/// Nearest-neighbour upsampling of a binary mask.
pub fn resize_binary<T: Scalar>(m: &BlendMask<T>, target: (usize, usize)) -> Result<BlendMask<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::validation("target", "zero-sized resize target"));
    }
    let (h, w) = m.dims();
    if th < h || tw < w {
        return Err(Error::validation("target", "must not be smaller than the source"));
    }
    let src = m.to_bools();
    let bits: Vec<bool> = (0..th * tw)
        .map(|p| {
            let (r, c) = (p / tw, p % tw);
            src[(r * h / th) * w + c * w / tw]
        })
        .collect();
    Ok(binary(th, tw, &bits, m.provenance))
}

pub fn or_masks<T: Scalar>(a: &BlendMask<T>, b: &BlendMask<T>) -> Result<BlendMask<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(&[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let bits: Vec<bool> = a
        .to_bools()
        .into_iter()
        .zip(b.to_bools())
        .map(|(x, y)| x || y)
        .collect();
    Ok(binary(a.height(), a.width(), &bits, MaskProvenance::BinaryIntermediate))
}

/// Stand-in for "no background in this line"; finite so parabola
/// intersections stay well defined.
const FAR: f64 = 1e20;

/// 1-D squared distance to the lower envelope of parabolas rooted at `f`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest background
/// (zero) pixel; background pixels map to 0. A mask with no background at
/// all maps to the constant image diagonal `sqrt(H² + W²)`.
pub fn distance_transform<T: Scalar>(m: &BlendMask<T>) -> Tensor<T> {
    let (h, w) = m.dims();
    let bits = m.to_bools();
    if bits.iter().all(|&b| b) {
        let diag = ((h * h + w * w) as f64).sqrt();
        return Tensor::full(&[h, w], cast(diag));
    }
    let mut grid: Vec<f64> = bits
        .iter()
        .map(|&b| if b { FAR } else { 0.0 })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Tensor::new(&[h, w], grid.into_iter().map(|d| cast(d.sqrt())).collect())
        .expect("shape preserved")
}

/// Affine map sending `min → 0.5` and `max → 1.0`. A constant map becomes
/// 0.5 when the constant is zero and 1.0 otherwise.
pub fn normalize_half_to_one<T: Scalar>(d: &Tensor<T>) -> Tensor<T> {
    let lo = d.data().iter().copied().fold(T::infinity(), T::min);
    let hi = d.data().iter().copied().fold(T::neg_infinity(), T::max);
    let half = cast::<T>(0.5);
    if d.is_empty() {
        return d.clone();
    }
    if !(hi > lo) {
        let fill = if lo == T::zero() { half } else { T::one() };
        return Tensor::full(d.shape(), fill);
    }
    let span = hi - lo;
    d.map(|v| half + half * (v - lo) / span)
}

/// Zeros every 8-connected component with fewer than `volume_threshold` pixels.
pub fn remove_small_components<T: Scalar>(m: &BlendMask<T>, volume_threshold: usize) -> BlendMask<T> {
    let (h, w) = m.dims();
    let bits = m.to_bools();
    let labeling = ComponentLabeling::of(&bits, h, w);
    let kept: Vec<bool> = labeling
        .labels
        .iter()
        .map(|&l| l != 0 && labeling.volumes[l as usize - 1] >= volume_threshold)
        .collect();
    binary(h, w, &kept, m.provenance)
}

/// Intermediates and result of the adaptive mask composition.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMask<T> {
    /// `M^c` upsampled to image resolution.
    pub cross_resized: BlendMask<T>,
    /// `M^k = OR(Resize(M^c), M^SAM)`.
    pub union: BlendMask<T>,
    /// `C(Resize(M^c))`.
    pub confident: BlendMask<T>,
    /// `clamp(Normalize(D(M^k)) + C(M^c), 0, 1)`.
    pub blend: BlendMask<T>,
}

pub fn compose_adaptive_mask<T: Scalar>(
    cross: &BlendMask<T>,
    segmenter: &BlendMask<T>,
    volume_threshold: usize,
) -> Result<CompositeMask<T>> {
    let cross_resized = resize_binary(cross, segmenter.dims())?;
    let union = or_masks(&cross_resized, segmenter)?;
    let smooth = normalize_half_to_one(&distance_transform(&union));
    let confident = remove_small_components(&cross_resized, volume_threshold)
        .with_provenance(MaskProvenance::BinaryIntermediate);
    let raw = smooth.zip_map(confident.data(), |a, b| a + b)?;
    let blend = BlendMask::new(raw.map(|v| v.max(T::zero()).min(T::one())), MaskProvenance::Composite)?;
    Ok(CompositeMask {
        cross_resized: cross_resized.with_provenance(MaskProvenance::BinaryIntermediate),
        union,
        confident,
        blend,
    })
}

/// Bilinear resampling (half-pixel centres, edge clamped) of a real mask.
pub fn resize_bilinear<T: Scalar>(m: &BlendMask<T>, target: (usize, usize)) -> Result<BlendMask<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::validation("target", "zero-sized resize target"));
    }
    let (h, w) = m.dims();
    if (h, w) == target {
        return Ok(m.clone());
    }
    let sample = |pos: f64, n: usize, tn: usize| -> (usize, usize, f64) {
        let x = ((pos + 0.5) * n as f64 / tn as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n - 1);
        (x0, x1, x - x0 as f64)
    };
    let data = Tensor::from_fn(&[th, tw], |p| {
        let (r0, r1, fr) = sample((p / tw) as f64, h, th);
        let (c0, c1, fc) = sample((p % tw) as f64, w, tw);
        let g = |r, c| m.get(r, c).as_f64();
        let top = g(r0, c0) * (1.0 - fc) + g(r0, c1) * fc;
        let bot = g(r1, c0) * (1.0 - fc) + g(r1, c1) * fc;
        cast::<T>((top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0))
    });
    BlendMask::new(data, MaskProvenance::Composite)
}

/// `φ* = M ⊙ φ_t + (1 − M) ⊙ φ_o` for token-major `(h·w, channels)` features;
/// `mask` is resized bilinearly to `grid` when needed.
pub fn blend_latents<T: Scalar>(
    phi_t: &Tensor<T>,
    phi_o: &Tensor<T>,
    mask: &BlendMask<T>,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    phi_t.ensure_same_shape(phi_o)?;
    let n = grid.0 * grid.1;
    if phi_t.shape().len() != 2 || phi_t.shape()[0] != n {
        return Err(Error::shape(&[n, 0], phi_t.shape()));
    }
    let channels = phi_t.shape()[1];
    let m = resize_bilinear(mask, grid)?;
    let weights = m.data().data();
    let data = phi_t
        .data()
        .iter()
        .zip(phi_o.data())
        .enumerate()
        .map(|(i, (&t, &o))| {
            let wgt = weights[i / channels];
            if wgt == T::one() {
                t
            } else if wgt == T::zero() {
                o
            } else {
                wgt * t + (T::one() - wgt) * o
            }
        })
        .collect();
    Tensor::new(phi_t.shape(), data)
}
