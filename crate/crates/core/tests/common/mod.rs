#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retouch_core::image::{BlendMask, MaskProvenance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_bits(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Vec<bool> {
    (0..h * w).map(|_| rng.random_bool(density)).collect()
}

pub fn mask_from(h: usize, w: usize, bits: &[bool]) -> BlendMask<f64> {
    BlendMask::from_bools(h, w, bits, MaskProvenance::Segmenter).unwrap()
}

pub fn mask_from_rows(rows: &[&str]) -> BlendMask<f64> {
    let h = rows.len();
    let w = rows[0].len();
    let bits: Vec<bool> = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
    mask_from(h, w, &bits)
}

/// Euclidean distance from every pixel to the nearest background pixel by
/// exhaustive search; `None` when the mask has no background.
pub fn brute_force_edt(bits: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    let zeros: Vec<(i64, i64)> = (0..h * w)
        .filter(|&p| !bits[p])
        .map(|p| ((p / w) as i64, (p % w) as i64))
        .collect();
    if zeros.is_empty() {
        return None;
    }
    Some(
        (0..h * w)
            .map(|p| {
                if !bits[p] {
                    return 0.0;
                }
                let (r, c) = ((p / w) as i64, (p % w) as i64);
                let best = zeros
                    .iter()
                    .map(|&(zr, zc)| (r - zr) * (r - zr) + (c - zc) * (c - zc))
                    .min()
                    .unwrap();
                (best as f64).sqrt()
            })
            .collect(),
    )
}

/// Components by recursive-free flood fill with an explicit stack, 8-connectivity.
pub fn flood_fill_components(bits: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if bits[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

pub fn flood_fill_filter(bits: &[bool], h: usize, w: usize, v: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for comp in flood_fill_components(bits, h, w) {
        if comp.len() >= v {
            for p in comp {
                out[p] = true;
            }
        }
    }
    out
}

use retouch_core::image::Image;

/// A bright square of side `size` centred at pixel `(cy, cx)` on a dark 64×64 canvas.
pub fn square_image(cy: usize, cx: usize, size: usize) -> Image<f32> {
    let half = size / 2;
    Image::from_fn(64, 64, |ch, r, c| {
        let inside = r + half >= cy && r < cy + size - half && c + half >= cx && c < cx + size - half;
        if inside {
            0.85 + 0.05 * ch as f32
        } else {
            0.1
        }
    })
}

/// Toy generator placing the subject in each of the nine cells of a 3×3 grid.
pub fn uniform_placement_images() -> Vec<Image<f32>> {
    let cells = [11, 32, 53];
    cells
        .iter()
        .flat_map(|&cy| cells.iter().map(move |&cx| square_image(cy, cx, 12)))
        .collect()
}

/// Toy generator always placing the subject at the centre, with varying size.
pub fn centered_placement_images() -> Vec<Image<f32>> {
    (0..9).map(|k| square_image(32, 32, 10 + 2 * (k % 3))).collect()
}

/// Independent step-by-step recomputation of the composite mask.
pub fn composite_oracle(mc: &[bool], (mh, mw): (usize, usize), msam: &[bool], (h, w): (usize, usize), v: usize) -> Vec<f64> {
    let up: Vec<bool> = (0..h * w)
        .map(|p| mc[(p / w) * mh / h * mw + (p % w) * mw / w])
        .collect();
    let union: Vec<bool> = up.iter().zip(msam).map(|(&a, &b)| a || b).collect();
    let d = brute_force_edt(&union, h, w).unwrap_or_else(|| vec![((h * h + w * w) as f64).sqrt(); h * w]);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        d.iter().map(|&x| 0.5 + 0.5 * (x - lo) / (hi - lo)).collect()
    } else if lo == 0.0 {
        vec![0.5; h * w]
    } else {
        vec![1.0; h * w]
    };
    let kept = flood_fill_filter(&up, h, w, v);
    norm.iter()
        .zip(&kept)
        .map(|(&n, &k)| (n + if k { 1.0 } else { 0.0 }).clamp(0.0, 1.0))
        .collect()
}

pub fn checkerboard_fixture() -> (Vec<bool>, Vec<bool>) {
    let mut mc = vec![false; 64];
    for r in 0..4 {
        for c in 0..4 {
            mc[r * 8 + c] = (r + c) % 2 == 0;
        }
    }
    mc[6 * 8 + 6] = true;
    let disk: Vec<bool> = (0..32 * 32)
        .map(|p| {
            let (r, c) = ((p / 32) as f64 + 0.5, (p % 32) as f64 + 0.5);
            (r - 20.0).powi(2) + (c - 18.0).powi(2) <= 64.0
        })
        .collect();
    (mc, disk)
}
