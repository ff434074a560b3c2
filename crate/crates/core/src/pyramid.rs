//! Three-level feature pyramids (strides 8, 16, 32) and their flattened
//! token form.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Spatial size of each pyramid level for one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShapes {
    pub shapes: [(usize, usize); 3],
}

impl LevelShapes {
    pub fn for_image(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::invalid(
                "pyramid",
                format!("input {height}×{width} is not a positive multiple of 32 on both sides"),
            ));
        }
        Ok(LevelShapes {
            shapes: STRIDES.map(|s| (height / s, width / s)),
        })
    }

    pub fn tokens(&self, level: usize) -> usize {
        let (h, w) = self.shapes[level];
        h * w
    }

    /// Index of the first token of each level.
    pub fn offsets(&self) -> [usize; 3] {
        [0, self.tokens(0), self.tokens(0) + self.tokens(1)]
    }

    pub fn total(&self) -> usize {
        (0..3).map(|l| self.tokens(l)).sum()
    }

    /// Normalized token-center reference points of every token, level by level.
    pub fn reference_points(&self) -> Vec<[f64; 2]> {
        let mut refs = Vec::with_capacity(self.total());
        for &(h, w) in &self.shapes {
            for i in 0..h {
                for j in 0..w {
                    refs.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
                }
            }
        }
        refs
    }
}

impl<T: Scalar> Tape<T> {
    /// `[C × h × w] → [h·w × C]`.
    pub fn map_to_tokens(&mut self, map: Var) -> Result<Var> {
        let d = self.dims(map).to_vec();
        if d.len() != 3 {
            return Err(Error::invalid("map_to_tokens", format!("expected [C,H,W], got {d:?}")));
        }
        let flat = self.reshape(map, &[d[0], d[1] * d[2]])?;
        self.transpose2d(flat)
    }

    /// `[h·w × C] → [C × h × w]`.
    pub fn tokens_to_map(&mut self, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.dims(tokens).to_vec();
        if d.len() != 2 || d[0] != h * w {
            return Err(Error::shape("tokens_to_map", &[h * w, d.get(1).copied().unwrap_or(0)], &d));
        }
        let t = self.transpose2d(tokens)?;
        self.reshape(t, &[d[1], h, w])
    }

    /// Concatenates the levels' tokens, 1/8 first.
    pub fn flatten_pyramid(&mut self, maps: &[Var; 3]) -> Result<Var> {
        let tokens = maps
            .iter()
            .map(|&m| self.map_to_tokens(m))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&tokens, 0)
    }

    pub fn unflatten_pyramid(&mut self, tokens: Var, shapes: &LevelShapes) -> Result<[Var; 3]> {
        let parts = self.split_levels(tokens, shapes)?;
        let mut maps = parts;
        for (l, m) in maps.iter_mut().enumerate() {
            let (h, w) = shapes.shapes[l];
            *m = self.tokens_to_map(*m, h, w)?;
        }
        Ok(maps)
    }

    /// Splits a token sequence into its three levels, still in token form.
    pub fn split_levels(&mut self, tokens: Var, shapes: &LevelShapes) -> Result<[Var; 3]> {
        let sizes = [shapes.tokens(0), shapes.tokens(1), shapes.tokens(2)];
        let parts = self.split(tokens, 0, &sizes)?;
        Ok([parts[0], parts[1], parts[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_arithmetic() {
        let s = LevelShapes::for_image(64, 64).unwrap();
        assert_eq!(s.shapes, [(8, 8), (4, 4), (2, 2)]);
        assert_eq!(s.total(), 84);
        assert_eq!(s.offsets(), [0, 64, 80]);
        let s = LevelShapes::for_image(96, 96).unwrap();
        assert_eq!([s.tokens(0), s.tokens(1), s.tokens(2)], [144, 36, 9]);
        assert!(LevelShapes::for_image(65, 64).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = LevelShapes::for_image(64, 96).unwrap();
        let mut tape = Tape::<f64>::new();
        let maps = s
            .shapes
            .map(|(h, w)| tape.constant(Tensor::randn(&[5, h, w], 1.0, &mut rng)));
        let flat = tape.flatten_pyramid(&maps).unwrap();
        assert_eq!(tape.dims(flat), &[s.total(), 5]);
        let back = tape.unflatten_pyramid(flat, &s).unwrap();
        for (a, b) in maps.iter().zip(&back) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
        // token (i, j) of level 1 holds channel c of pixel (i, j)
        let (h1, w1) = s.shapes[1];
        let (i, j, c) = (1, 2, 3);
        let tok = s.offsets()[1] + i * w1 + j;
        assert_eq!(
            tape.value(flat).data()[tok * 5 + c],
            tape.value(maps[1]).data()[c * h1 * w1 + i * w1 + j]
        );
    }

    #[test]
    fn reference_points_are_cell_centers() {
        let s = LevelShapes::for_image(64, 64).unwrap();
        let refs = s.reference_points();
        assert_eq!(refs.len(), 84);
        assert_eq!(refs[0], [1.0 / 16.0, 1.0 / 16.0]);
        assert_eq!(refs[64], [0.125, 0.125]);
        assert_eq!(refs[83], [0.75, 0.75]);
    }
}
