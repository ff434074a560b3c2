//! Procedural 4-class segmentation data: colored rectangles, discs and
//! crosses of mixed sizes on a noisy background, drawn on the 8-pixel grid
//! so every label cell of the 1/8 output grid is pure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CLASSES: usize = 4;
/// Side of a label cell in pixels.
pub const CELL: usize = 8;

/// Mean RGB of each class: background, rectangle, disc, cross.
const PALETTE: [[f64; 3]; CLASSES] = [
    [-0.6, -0.4, -0.5],
    [0.9, -0.3, -0.2],
    [-0.2, 0.8, -0.3],
    [-0.3, -0.2, 0.9],
];
const NOISE: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct ToySample<T: Scalar> {
    pub image: Tensor<T>,
    /// Row-major class per 8×8 cell.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ToyTask<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ToySample<T>>,
}

fn inside(class: usize, di: f64, dj: f64, r: f64) -> bool {
    match class {
        1 => true,
        2 => di * di + dj * dj <= r * r,
        3 => di.abs() <= r / 3.0 || dj.abs() <= r / 3.0,
        _ => unreachable!("background is not a shape"),
    }
}

/// Draws one sample; the image is fully determined by the generator state.
fn sample<T: Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ToySample<T> {
    let (gh, gw) = (h / CELL, w / CELL);
    let mut labels = vec![0usize; gh * gw];
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let class = rng.random_range(1..CLASSES);
        // size in cells: mixed scales from one cell up to half the grid
        let max = (gh.min(gw) / 2).max(1);
        let size = rng.random_range(1..=max);
        let top = rng.random_range(0..=gh - size);
        let left = rng.random_range(0..=gw - size);
        let r = size as f64 / 2.0;
        for i in top..top + size {
            for j in left..left + size {
                let di = i as f64 + 0.5 - (top as f64 + r);
                let dj = j as f64 + 0.5 - (left as f64 + r);
                if size == 1 || inside(class, di, dj, r) {
                    labels[i * gw + j] = class;
                }
            }
        }
    }
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, NOISE).expect("valid std");
    let mut data = vec![T::zero(); 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let class = labels[(y / CELL) * gw + x / CELL];
                let v = PALETTE[class][c] + tint[c] + noise.sample(rng);
                data[(c * h + y) * w + x] = T::from_f64(v);
            }
        }
    }
    ToySample {
        image: Tensor::new(&[3, h, w], data).expect("sized above"),
        labels,
    }
}

impl<T: Scalar> ToyTask<T> {
    /// `count` samples of `h × w`, determined by `(seed, count, h, w)`.
    pub fn generate(seed: u64, count: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || !h.is_multiple_of(CELL) || !w.is_multiple_of(CELL) {
            return Err(Error::invalid(
                "toy_task",
                format!("image size {h}x{w} must be a positive multiple of {CELL}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..count).map(|_| sample(&mut rng, h, w)).collect();
        Ok(ToyTask {
            height: h,
            width: w,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Names accepted by [`pattern`].
pub const PATTERNS: [&str; 4] = ["constant", "gradient", "checker", "toy"];

/// Built-in `[3 × h × w]` test images.
pub fn pattern<T: Scalar>(name: &str, h: usize, w: usize, seed: u64) -> Result<Tensor<T>> {
    let img = match name {
        "constant" => Tensor::full(&[3, h, w], T::from_f64(0.5)),
        "gradient" => {
            let data = (0..3 * h * w)
                .map(|i| {
                    let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                    let v = match c {
                        0 => x as f64 / w as f64,
                        1 => y as f64 / h as f64,
                        _ => (x + y) as f64 / (w + h) as f64,
                    };
                    T::from_f64(v - 0.5)
                })
                .collect();
            Tensor::new(&[3, h, w], data)?
        }
        "checker" => {
            let data = (0..3 * h * w)
                .map(|i| {
                    let (y, x) = ((i / w) % h, i % w);
                    T::from_f64(if (y / CELL + x / CELL).is_multiple_of(2) { 0.5 } else { -0.5 })
                })
                .collect();
            Tensor::new(&[3, h, w], data)?
        }
        "toy" => ToyTask::<T>::generate(seed, 1, h, w)?.samples.remove(0).image,
        other => {
            return Err(Error::invalid(
                "pattern",
                format!("unknown pattern `{other}`, expected one of {PATTERNS:?}"),
            ))
        }
    };
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = ToyTask::<f32>::generate(3, 4, 64, 64).unwrap();
        let b = ToyTask::<f32>::generate(3, 4, 64, 64).unwrap();
        let c = ToyTask::<f32>::generate(4, 4, 64, 64).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.labels, y.labels);
        }
        assert_ne!(a.samples[0].image.data(), c.samples[0].image.data());
    }

    #[test]
    fn labels_cover_grid_and_classes() {
        let t = ToyTask::<f64>::generate(0, 50, 64, 64).unwrap();
        let mut seen = [0usize; CLASSES];
        for s in &t.samples {
            assert_eq!(s.image.dims(), &[3, 64, 64]);
            assert_eq!(s.labels.len(), 64);
            for &l in &s.labels {
                seen[l] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    }

    #[test]
    fn rejects_off_grid_sizes() {
        assert!(ToyTask::<f32>::generate(0, 1, 60, 64).is_err());
    }

    #[test]
    fn patterns() {
        for name in PATTERNS {
            assert_eq!(pattern::<f32>(name, 32, 64, 0).unwrap().dims(), &[3, 32, 64]);
        }
        assert!(pattern::<f32>("plasma", 32, 32, 0).is_err());
    }
}
