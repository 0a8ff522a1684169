//! Synthetic token-grid distributions with closed-form statistics.
//!
//! Each class maps to a deterministic base pattern; every position is then
//! independently corrupted with probability `noise` by a uniform resample
//! over the vocabulary. Per-position marginals and pairwise co-occurrence
//! tables are therefore exact, which is what generation quality is scored
//! against.

use crate::error::{Error, Result};
use crate::migm::{TokenSequence, Vocabulary};
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Stripes,
    Blocks,
}

impl GeneratorKind {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::Stripes => "stripes",
            GeneratorKind::Blocks => "blocks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(GeneratorKind::Stripes),
            "blocks" => Ok(GeneratorKind::Blocks),
            other => Err(Error::Argument(format!("unknown generator '{other}'"))),
        }
    }
}

#[derive(Clone)]
pub struct SyntheticDataset {
    pub kind: GeneratorKind,
    pub num_classes: usize,
    pub len: usize,
    pub side: usize,
    pub vocab: Vocabulary,
    pub noise: f64,
    /// marginals[class][pos][token], computed analytically at construction.
    marginals: Vec<Vec<Vec<f64>>>,
}

impl SyntheticDataset {
    pub fn new(
        kind: GeneratorKind,
        num_classes: usize,
        len: usize,
        vocab: Vocabulary,
        noise: f64,
    ) -> Result<Self> {
        let side = (len as f64).sqrt().round() as usize;
        if side * side != len {
            return Err(Error::Argument(format!("grid length {len} is not a square")));
        }
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Argument("noise must be in [0, 1]".into()));
        }
        let mut ds = Self { kind, num_classes, len, side, vocab, noise, marginals: Vec::new() };
        let v = vocab.size();
        let uniform_share = noise / v as f64;
        for class in 0..num_classes {
            let mut per_class = Vec::with_capacity(len);
            for pos in 0..len {
                let base = ds.pattern(class, pos) as usize;
                let mut m = vec![uniform_share; v];
                m[base] += 1.0 - noise;
                per_class.push(m);
            }
            ds.marginals.push(per_class);
        }
        Ok(ds)
    }

    /// The noiseless pattern token of a class at a grid position.
    pub fn pattern(&self, class: usize, pos: usize) -> u16 {
        let (r, c) = (pos / self.side, pos % self.side);
        let v = self.vocab.size();
        match self.kind {
            GeneratorKind::Stripes => {
                let orientation = class % 2;
                let phase = class / 2;
                let line = if orientation == 0 { r } else { c };
                let idx = (line + phase) % self.side;
                ((idx * 2 + orientation) % v) as u16
            }
            GeneratorKind::Blocks => {
                let q = (r >= self.side / 2) as usize * 2 + (c >= self.side / 2) as usize;
                ((q * 2 + class) % v) as u16
            }
        }
    }

    pub fn sample(&self, class: usize, rng: &mut CounterRng) -> TokenSequence {
        let v = self.vocab.size() as u64;
        let tokens = (0..self.len)
            .map(|pos| {
                if rng.uniform() < self.noise {
                    (rng.next_u64() % v) as u16
                } else {
                    self.pattern(class, pos)
                }
            })
            .collect();
        TokenSequence { tokens }
    }

    /// Exact per-position marginal distribution for a class.
    pub fn marginal(&self, class: usize) -> &[Vec<f64>] {
        &self.marginals[class]
    }

    /// Exact joint distribution of the tokens at two distinct positions.
    /// Positions are independent given the class, so this is the product of
    /// marginals.
    pub fn pair_table(&self, class: usize, p: usize, q: usize) -> Vec<Vec<f64>> {
        let mp = &self.marginals[class][p];
        let mq = &self.marginals[class][q];
        mp.iter().map(|&a| mq.iter().map(|&b| a * b).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> SyntheticDataset {
        SyntheticDataset::new(GeneratorKind::Stripes, 4, 16, Vocabulary::new(8), 0.05).unwrap()
    }

    #[test]
    fn marginals_sum_to_one() {
        let ds = desk();
        for class in 0..4 {
            for pos in 0..16 {
                let s: f64 = ds.marginal(class)[pos].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_matches_stored_marginals() {
        let ds = desk();
        let mut rng = CounterRng::new(42);
        let n = 40_000;
        let mut counts = vec![vec![0usize; 8]; 16];
        for _ in 0..n {
            let x = ds.sample(1, &mut rng);
            for (pos, &t) in x.tokens.iter().enumerate() {
                counts[pos][t as usize] += 1;
            }
        }
        for pos in 0..16 {
            let tv: f64 = (0..8)
                .map(|v| (counts[pos][v] as f64 / n as f64 - ds.marginal(1)[pos][v]).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "pos {pos} tv {tv}");
        }
    }

    #[test]
    fn classes_have_distinct_patterns() {
        let ds = desk();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let pa: Vec<u16> = (0..16).map(|p| ds.pattern(a, p)).collect();
                let pb: Vec<u16> = (0..16).map(|p| ds.pattern(b, p)).collect();
                assert_ne!(pa, pb, "classes {a} and {b} collide");
            }
        }
    }

    #[test]
    fn pair_table_is_product_of_marginals() {
        let ds = desk();
        let t = ds.pair_table(0, 0, 5);
        let s: f64 = t.iter().flatten().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((t[2][3] - ds.marginal(0)[0][2] * ds.marginal(0)[5][3]).abs() < 1e-15);
    }

    #[test]
    fn non_square_length_rejected() {
        assert!(
            SyntheticDataset::new(GeneratorKind::Blocks, 2, 15, Vocabulary::new(4), 0.0).is_err()
        );
    }
}
