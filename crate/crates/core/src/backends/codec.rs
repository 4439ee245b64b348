use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::{cast, Scalar};
use crate::seeds::rng_for;
use crate::tensor::{LatentTensor, Tensor};

/// Image ↔ latent mapping used at the pipeline boundary.
pub trait LatentCodec<T: Scalar>: Send + Sync {
    fn image_size(&self) -> (usize, usize);

    fn latent_shape(&self) -> [usize; 3];

    /// Clean latent (timestep 0) for an image.
    fn encode(&self, image: &Image<T>) -> Result<LatentTensor<T>>;

    fn decode(&self, z: &LatentTensor<T>) -> Result<Image<T>>;
}

/// Patch-wise linear codec: each `(3, ph, pw)` patch is projected onto `C`
/// orthonormal seeded directions. `encode(decode(z)) = z` up to rounding.
#[derive(Debug, Clone)]
pub struct ToyCodec<T> {
    latent_shape: [usize; 3],
    image_size: (usize, usize),
    patch: (usize, usize),
    /// `(C, 3·ph·pw)` with orthonormal rows.
    basis: Vec<T>,
    gain: T,
}

const GAIN: f64 = 1.5;

impl<T: Scalar> ToyCodec<T> {
    pub fn new(seed: u64, latent_shape: [usize; 3], image_size: (usize, usize)) -> Result<Self> {
        let [c, h, w] = latent_shape;
        let (ih, iw) = image_size;
        if c == 0 || h == 0 || w == 0 || ih % h != 0 || iw % w != 0 || ih == 0 || iw == 0 {
            return Err(Error::validation(
                "image_size",
                format!("{ih}x{iw} is not a positive multiple of latent grid {h}x{w}"),
            ));
        }
        let patch = (ih / h, iw / w);
        let p = 3 * patch.0 * patch.1;
        if c > p {
            return Err(Error::validation("latent_shape", "more channels than patch values"));
        }
        let mut rng = rng_for(seed, "toy-codec/basis");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
        while rows.len() < c {
            let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Ok(Self {
            latent_shape,
            image_size,
            patch,
            basis: rows.into_iter().flatten().map(cast).collect(),
            gain: cast(GAIN),
        })
    }

    fn patch_values(&self, image: &Image<T>, r: usize, col: usize) -> Vec<T> {
        let (ph, pw) = self.patch;
        let mut out = Vec::with_capacity(3 * ph * pw);
        for ch in 0..3 {
            for dy in 0..ph {
                for dx in 0..pw {
                    out.push(image.get(ch, r * ph + dy, col * pw + dx));
                }
            }
        }
        out
    }
}

impl<T: Scalar> LatentCodec<T> for ToyCodec<T> {
    fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    fn encode(&self, image: &Image<T>) -> Result<LatentTensor<T>> {
        if (image.height(), image.width()) != self.image_size {
            return Err(Error::shape(
                &[3, self.image_size.0, self.image_size.1],
                image.pixels().shape(),
            ));
        }
        let [c, h, w] = self.latent_shape;
        let p = self.basis.len() / c;
        let half = cast::<T>(0.5);
        let mut data = vec![T::zero(); c * h * w];
        for r in 0..h {
            for col in 0..w {
                let vals = self.patch_values(image, r, col);
                for ch in 0..c {
                    let row = &self.basis[ch * p..(ch + 1) * p];
                    let dot: T = row.iter().zip(&vals).map(|(&a, &x)| a * (x - half)).sum();
                    data[(ch * h + r) * w + col] = dot / self.gain;
                }
            }
        }
        LatentTensor::new(Tensor::new(&[c, h, w], data)?, 0)
    }

    fn decode(&self, z: &LatentTensor<T>) -> Result<Image<T>> {
        z.data.ensure_shape(&self.latent_shape)?;
        let [c, h, w] = self.latent_shape;
        let (ph, pw) = self.patch;
        let (ih, iw) = self.image_size;
        let p = self.basis.len() / c;
        let half = cast::<T>(0.5);
        let zd = z.data.data();
        let mut pixels = vec![half; 3 * ih * iw];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let coef = self.gain * zd[(ch * h + r) * w + col];
                    let row = &self.basis[ch * p..(ch + 1) * p];
                    for (k, &a) in row.iter().enumerate() {
                        let (pc, rest) = (k / (ph * pw), k % (ph * pw));
                        let (dy, dx) = (rest / pw, rest % pw);
                        pixels[(pc * ih + r * ph + dy) * iw + col * pw + dx] += coef * a;
                    }
                }
            }
        }
        Image::new(Tensor::new(&[3, ih, iw], pixels)?)
    }
}
