//! Datasets, batching, and on-disk formats.

pub mod checkpoint;
pub mod csvio;
pub mod idx;
pub mod metrics;
pub mod synth;

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use synth::{synth_patterns, PatternSpec};

/// Immutable table of instances with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Tensor,
    labels: Option<Vec<usize>>,
    n_classes: Option<usize>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        instances: Tensor,
        labels: Option<Vec<usize>>,
        n_classes: Option<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (n, _) = instances.expect_matrix("dataset")?;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Input(format!("{} labels for {} instances", labels.len(), n)));
            }
            let k = n_classes.ok_or_else(|| Error::Input("labels given without n_classes".into()))?;
            if let Some(bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
            }
        }
        Ok(Dataset {
            instances,
            labels,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn unlabeled(instances: Tensor, provenance: impl Into<String>) -> Result<Self> {
        Self::new(instances, None, None, provenance)
    }

    pub fn instances(&self) -> &Tensor {
        &self.instances
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    /// Labels, or an error naming `what` needed them.
    pub fn require_labels(&self, what: &str) -> Result<(&[usize], usize)> {
        match (&self.labels, self.n_classes) {
            (Some(l), Some(k)) => Ok((l, k)),
            _ => Err(Error::Input(format!("{what} requires a labeled dataset"))),
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let instances = self.instances.select_rows(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(instances, labels, self.n_classes, self.provenance.clone())
    }

    /// Up to `per_class` row indices per class, chosen uniformly at random.
    /// Returned indices are sorted.
    pub fn sample_per_class(&self, per_class: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        let (labels, k) = self.require_labels("label sampling")?;
        let mut by_class = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut chosen = Vec::new();
        for mut members in by_class {
            rng.shuffle(&mut members);
            chosen.extend(members.into_iter().take(per_class));
        }
        chosen.sort_unstable();
        Ok(chosen)
    }

    /// Deterministic split into (first, second) with `first_len` rows chosen
    /// by a seeded permutation.
    pub fn split(&self, first_len: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if first_len > self.len() {
            return Err(Error::Input(format!("cannot take {first_len} of {} rows", self.len())));
        }
        let mut perm = RngStream::new(seed, streams::DATA).permutation(self.len());
        let second = perm.split_off(first_len);
        let mut first = perm;
        first.sort_unstable();
        let mut second = second;
        second.sort_unstable();
        Ok((self.subset(&first)?, self.subset(&second)?))
    }
}

/// Thresholds every value: `v ≥ threshold → 1`, otherwise 0.
pub fn binarize(dataset: &Dataset, threshold: f64) -> Result<Dataset> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("binarize threshold must be in (0, 1], got {threshold}")));
    }
    if let Some(v) = dataset.instances.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("binarize expects values in [0, 1], found {v}")));
    }
    let instances = dataset
        .instances
        .map(|v| if v >= threshold { 1.0 } else { 0.0 });
    Dataset::new(
        instances,
        dataset.labels.clone(),
        dataset.n_classes,
        format!("{} | binarized@{threshold}", dataset.provenance),
    )
}

/// Minibatches of row indices for one epoch. The permutation depends only
/// on `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let perm = RngStream::new(seed, streams::BATCHES + epoch).permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(rows: &[[f64; 2]]) -> Dataset {
        Dataset::unlabeled(Tensor::from_rows(rows).unwrap(), "test").unwrap()
    }

    #[test]
    fn binarize_boundary_and_idempotence() {
        let d = ds(&[[0.5, 0.5], [0.49, 1.0]]);
        let b = binarize(&d, 0.5).unwrap();
        assert_eq!(b.instances().data(), &[1.0, 1.0, 0.0, 1.0]);
        let bb = binarize(&b, 0.5).unwrap();
        assert_eq!(bb.instances(), b.instances());
    }

    #[test]
    fn binarize_validation() {
        let d = ds(&[[0.2, 0.3]]);
        assert!(matches!(binarize(&d, 1.0 + 1e-9), Err(Error::Config(_))));
        assert!(matches!(binarize(&d, 0.0), Err(Error::Config(_))));
        assert!(binarize(&d, 1.0).is_ok());
        assert!(matches!(binarize(&ds(&[[1.5, 0.0]]), 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn labels_are_validated() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(x.clone(), Some(vec![0, 2]), Some(2), "t").is_err());
        assert!(Dataset::new(x.clone(), Some(vec![0]), Some(2), "t").is_err());
        assert!(Dataset::new(x, Some(vec![0, 1]), Some(2), "t").is_ok());
    }

    #[test]
    fn batch_iter_single_batch_when_large() {
        let b = batch_iter(7, 100, 3, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(batch_iter(7, 0, 3, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        assert_ne!(batch_iter(50, 10, 1, 0).unwrap(), batch_iter(50, 10, 1, 1).unwrap());
        assert_eq!(batch_iter(50, 10, 1, 4).unwrap(), batch_iter(50, 10, 1, 4).unwrap());
    }

    #[test]
    fn per_class_sampling_respects_budget() {
        let x = Tensor::zeros(&[6, 1]);
        let d = Dataset::new(x, Some(vec![0, 1, 0, 1, 0, 2]), Some(3), "t").unwrap();
        let mut rng = RngStream::new(1, 1);
        let idx = d.sample_per_class(2, &mut rng).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| d.labels().unwrap()[i]).collect();
        assert_eq!(labels.iter().filter(|&&y| y == 0).count(), 2);
        assert_eq!(labels.iter().filter(|&&y| y == 1).count(), 2);
        assert_eq!(labels.iter().filter(|&&y| y == 2).count(), 1);
    }

    proptest! {
        #[test]
        fn batches_partition_the_rows(n in 0usize..300, bs in 1usize..64, seed: u64, epoch in 0u64..5) {
            let batches = batch_iter(n, bs, seed, epoch).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            prop_assert!(batches.iter().rev().skip(1).all(|b| b.len() == bs));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
