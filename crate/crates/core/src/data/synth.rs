//! Synthetic binary pattern datasets.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `K` binary prototypes with per-class counts and a bit-flip rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub prototypes: Vec<Vec<u8>>,
    pub counts: Vec<usize>,
    pub flip_rate: f64,
}

impl PatternSpec {
    /// `k` random prototypes of dimension `dim` (each bit a fair coin),
    /// with `n` instances split as evenly as possible.
    pub fn random(k: usize, dim: usize, n: usize, flip_rate: f64, rng: &mut RngStream) -> Self {
        let prototypes = (0..k)
            .map(|_| (0..dim).map(|_| u8::from(rng.uniform() < 0.5)).collect())
            .collect();
        let counts = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        PatternSpec {
            prototypes,
            counts,
            flip_rate,
        }
    }

    /// `k` block prototypes: pattern `c` switches on the `c`-th contiguous
    /// block of `dim / k` bits. Prototypes are pairwise far apart.
    pub fn blocks(k: usize, dim: usize, n: usize, flip_rate: f64) -> Self {
        let width = dim / k.max(1);
        let prototypes = (0..k)
            .map(|c| (0..dim).map(|j| u8::from(j / width.max(1) == c)).collect())
            .collect();
        let counts = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        PatternSpec {
            prototypes,
            counts,
            flip_rate,
        }
    }

    fn validate(&self) -> Result<usize> {
        if !(0.0..0.5).contains(&self.flip_rate) {
            return Err(Error::Config(format!(
                "flip rate must be in [0, 0.5), got {}",
                self.flip_rate
            )));
        }
        if self.prototypes.is_empty() || self.prototypes.len() != self.counts.len() {
            return Err(Error::Config("need one count per prototype and at least one prototype".into()));
        }
        let d = self.prototypes[0].len();
        if d == 0 || self.prototypes.iter().any(|p| p.len() != d || p.iter().any(|&b| b > 1)) {
            return Err(Error::Config("prototypes must be non-empty binary vectors of equal length".into()));
        }
        if self.counts.iter().sum::<usize>() == 0 {
            return Err(Error::Config("pattern counts sum to zero".into()));
        }
        Ok(d)
    }
}

/// Instances grouped by class in prototype order; label = prototype index.
pub fn synth_patterns(spec: &PatternSpec, rng: &mut RngStream) -> Result<Dataset> {
    let d = spec.validate()?;
    let n: usize = spec.counts.iter().sum();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, (proto, &count)) in spec.prototypes.iter().zip(&spec.counts).enumerate() {
        for _ in 0..count {
            for &bit in proto {
                let flip = rng.uniform() < spec.flip_rate;
                data.push(f64::from(bit ^ u8::from(flip)));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        Some(labels),
        Some(spec.prototypes.len()),
        format!(
            "synthetic:k={},d={},n={},p={}",
            spec.prototypes.len(),
            d,
            n,
            spec.flip_rate
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flip_rate_reproduces_prototypes() {
        let mut rng = RngStream::new(1, 1);
        let spec = PatternSpec::random(3, 10, 30, 0.0, &mut rng);
        let ds = synth_patterns(&spec, &mut rng).unwrap();
        for (i, &y) in ds.labels().unwrap().iter().enumerate() {
            let proto: Vec<f64> = spec.prototypes[y].iter().map(|&b| f64::from(b)).collect();
            assert_eq!(ds.instances().row(i), proto.as_slice());
        }
    }

    #[test]
    fn counts_are_exact() {
        let spec = PatternSpec {
            prototypes: vec![vec![0, 1], vec![1, 0], vec![1, 1]],
            counts: vec![5, 0, 2],
            flip_rate: 0.1,
        };
        let ds = synth_patterns(&spec, &mut RngStream::new(2, 1)).unwrap();
        let labels = ds.labels().unwrap();
        assert_eq!(labels, &[0, 0, 0, 0, 0, 2, 2]);
        let even = PatternSpec::blocks(4, 64, 2000, 0.05);
        assert_eq!(even.counts, vec![500; 4]);
    }

    #[test]
    fn hamming_distance_matches_binomial_mean() {
        // E[H] = p·d, Var[H] = d·p(1−p) per instance.
        let (p, d, n) = (0.05, 64, 10_000);
        let spec = PatternSpec::blocks(4, d, n, p);
        let ds = synth_patterns(&spec, &mut RngStream::new(3, 1)).unwrap();
        let labels = ds.labels().unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let proto = &spec.prototypes[labels[i]];
            total += ds
                .instances()
                .row(i)
                .iter()
                .zip(proto)
                .filter(|(&x, &b)| x != f64::from(b))
                .count() as f64;
        }
        let mean = total / n as f64;
        let se = (d as f64 * p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - p * d as f64).abs() < 4.0 * se, "{mean}");
    }

    #[test]
    fn flip_rate_validation() {
        let mut rng = RngStream::new(4, 1);
        for p in [0.5, 0.7, -0.1, f64::NAN] {
            let spec = PatternSpec::blocks(2, 8, 10, p);
            assert!(matches!(synth_patterns(&spec, &mut rng), Err(Error::Config(_))));
        }
    }
}
