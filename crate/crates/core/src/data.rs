//! Synthetic classification data, worker partitions and epoch batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub n_classes: usize,
    pub samples: LabeledBatch,
}

impl Dataset {
    pub fn new(split: Split, n_classes: usize, samples: LabeledBatch) -> Result<Self> {
        if let Some(&bad) = samples.labels().iter().find(|&&y| y >= n_classes) {
            return Err(Error::Shape(format!(
                "label {bad} >= n_classes {n_classes}"
            )));
        }
        Ok(Dataset {
            split,
            n_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.input_dim()
    }

    pub fn labels(&self) -> &[usize] {
        self.samples.labels()
    }

    pub fn gather(&self, rows: &[usize]) -> LabeledBatch {
        self.samples.gather(rows)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in self.labels() {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `f0,...,f{f-1},label` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.samples.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.samples.label(i).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, split: Split, n_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 2 {
            return Err(Error::Shape(
                "dataset CSV needs feature columns and a label".into(),
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter().take(width - 1) {
                features.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Shape(e.to_string()))?,
                );
            }
            labels.push(
                rec[width - 1]
                    .parse::<usize>()
                    .map_err(|e| Error::Shape(e.to_string()))?,
            );
        }
        Dataset::new(
            split,
            n_classes,
            LabeledBatch::new(width - 1, features, labels)?,
        )
    }
}

/// Row indices of one worker's local data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gaussian blobs: class `c` is centered at `class_sep · u_c` with unit
/// isotropic noise. The centers `u_c` are orthonormalized random directions
/// when `f >= C` and independent random unit vectors otherwise. Each class
/// is split 80/20 into train and test.
pub fn synth_gaussian_blobs(
    n_per_class: usize,
    input_dim: usize,
    n_classes: usize,
    class_sep: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_per_class < 2 {
        return Err(Error::InvalidParameter(format!(
            "n_per_class must be >= 2, got {n_per_class}"
        )));
    }
    if !(class_sep >= 0.0) || !class_sep.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "class_sep must be non-negative, got {class_sep}"
        )));
    }
    if input_dim == 0 || n_classes == 0 {
        return Err(Error::InvalidParameter(
            "input_dim and n_classes must be positive".into(),
        ));
    }
    let mut r = rng::stream(seed);
    let centers = class_centers(input_dim, n_classes, &mut r);

    let n_train = ((n_per_class * 4) / 5).clamp(1, n_per_class - 1);
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..n_per_class {
            let (xs, ys) = if s < n_train {
                (&mut train_x, &mut train_y)
            } else {
                (&mut test_x, &mut test_y)
            };
            for &u in center {
                let noise: f64 = StandardNormal.sample(&mut r);
                xs.push(class_sep * u + noise);
            }
            ys.push(c);
        }
    }
    Ok((
        Dataset::new(
            Split::Train,
            n_classes,
            LabeledBatch::new(input_dim, train_x, train_y)?,
        )?,
        Dataset::new(
            Split::Test,
            n_classes,
            LabeledBatch::new(input_dim, test_x, test_y)?,
        )?,
    ))
}

fn class_centers(f: usize, c: usize, r: &mut rng::RngStream) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    let orthogonal = f >= c;
    if !orthogonal {
        log::warn!("input_dim {f} < n_classes {c}: using random unit class centers");
    }
    while centers.len() < c {
        let mut v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut *r)).collect();
        if orthogonal {
            for u in &centers {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            centers.push(v);
        }
    }
    centers
}

/// Random permutation cut into `n_workers` contiguous chunks whose sizes
/// differ by at most one (larger chunks first).
pub fn partition_iid(ds: &Dataset, n_workers: usize, seed: u64) -> Result<Vec<Shard>> {
    if n_workers == 0 || ds.len() < n_workers {
        return Err(Error::InvalidPartition(format!(
            "cannot split {} samples across {n_workers} workers",
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut rng::derived_stream(seed, &[tag::PARTITION]));
    let base = ds.len() / n_workers;
    let extra = ds.len() % n_workers;
    let mut start = 0;
    Ok((0..n_workers)
        .map(|owner| {
            let size = base + usize::from(owner < extra);
            let indices = perm[start..start + size].to_vec();
            start += size;
            Shard { owner, indices }
        })
        .collect())
}

/// Worker `i` receives every class `c` with `c mod N == i`.
pub fn partition_by_class(ds: &Dataset, n_workers: usize) -> Result<Vec<Shard>> {
    if n_workers == 0 || ds.n_classes < n_workers {
        return Err(Error::InvalidPartition(format!(
            "{} classes cannot cover {n_workers} workers",
            ds.n_classes
        )));
    }
    let mut shards: Vec<Shard> = (0..n_workers)
        .map(|owner| Shard {
            owner,
            indices: vec![],
        })
        .collect();
    for (row, &y) in ds.labels().iter().enumerate() {
        shards[y % n_workers].indices.push(row);
    }
    Ok(shards)
}

/// Row-index batches of one epoch. The shard is permuted with a stream
/// keyed on `(seed, owner, epoch)`; the final short batch is kept.
pub fn epoch_batch_indices(
    shard: &Shard,
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    let mut order = shard.indices.clone();
    order.shuffle(&mut rng::derived_stream(
        seed,
        &[tag::SHUFFLE, shard.owner as u64, epoch],
    ));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn epoch_batches(
    ds: &Dataset,
    shard: &Shard,
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<Vec<LabeledBatch>> {
    Ok(epoch_batch_indices(shard, batch_size, epoch, seed)?
        .iter()
        .map(|rows| ds.gather(rows))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Iid,
    ByClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub class_sep: f64,
    pub batch_size: usize,
    #[serde(default = "default_partition")]
    pub partition: Partition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

fn default_partition() -> Partition {
    Partition::Iid
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(n: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = (0..n).map(|i| i as f64).collect();
        Dataset::new(
            Split::Train,
            classes,
            LabeledBatch::new(1, features, labels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn blobs_are_seeded_and_stratified() {
        let (a_tr, a_te) = synth_gaussian_blobs(50, 8, 4, 3.0, 1).unwrap();
        let (b_tr, b_te) = synth_gaussian_blobs(50, 8, 4, 3.0, 1).unwrap();
        assert_eq!(a_tr, b_tr);
        assert_eq!(a_te, b_te);
        assert_eq!(a_tr.class_counts(), vec![40; 4]);
        assert_eq!(a_te.class_counts(), vec![10; 4]);

        let (tr, te) = synth_gaussian_blobs(2, 3, 5, 1.0, 0).unwrap();
        assert_eq!(tr.class_counts(), vec![1; 5]);
        assert_eq!(te.class_counts(), vec![1; 5]);
        assert!(synth_gaussian_blobs(1, 3, 2, 1.0, 0).is_err());
        assert!(synth_gaussian_blobs(5, 3, 2, -1.0, 0).is_err());
    }

    #[test]
    fn blobs_fall_back_when_dims_are_short() {
        let (tr, _) = synth_gaussian_blobs(10, 2, 5, 2.0, 3).unwrap();
        assert_eq!(tr.input_dim(), 2);
        assert_eq!(tr.n_classes, 5);
    }

    #[test]
    fn iid_partition_sizes() {
        let ds = toy(100, 4);
        let shards = partition_iid(&ds, 8, 3).unwrap();
        let mut sizes: Vec<usize> = shards.iter().map(Shard::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![12, 12, 12, 12, 13, 13, 13, 13]);
        let all: BTreeSet<usize> = shards
            .iter()
            .flat_map(|s| s.indices.iter().copied())
            .collect();
        assert_eq!(all.len(), 100);
        assert_eq!(all, (0..100).collect());

        let one = partition_iid(&ds, 1, 3).unwrap();
        assert_eq!(one[0].len(), 100);
        assert!(matches!(
            partition_iid(&toy(3, 1), 4, 0),
            Err(Error::InvalidPartition(_))
        ));
    }

    #[test]
    fn by_class_partition() {
        let ds = toy(80, 8);
        let shards = partition_by_class(&ds, 8).unwrap();
        for s in &shards {
            assert!(s.indices.iter().all(|&r| ds.labels()[r] == s.owner));
        }

        let ds = toy(100, 10);
        let shards = partition_by_class(&ds, 8).unwrap();
        let classes = |w: usize| -> BTreeSet<usize> {
            shards[w].indices.iter().map(|&r| ds.labels()[r]).collect()
        };
        assert_eq!(classes(0), BTreeSet::from([0, 8]));
        assert_eq!(classes(1), BTreeSet::from([1, 9]));
        assert_eq!(classes(2), BTreeSet::from([2]));
        assert_eq!(shards.iter().map(Shard::len).sum::<usize>(), 100);

        assert!(matches!(
            partition_by_class(&toy(20, 4), 8),
            Err(Error::InvalidPartition(_))
        ));
    }

    #[test]
    fn epoch_batching() {
        let shard = Shard {
            owner: 2,
            indices: (0..10).collect(),
        };
        let b = epoch_batch_indices(&shard, 4, 0, 9).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, epoch_batch_indices(&shard, 4, 0, 9).unwrap());
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let empty = Shard {
            owner: 0,
            indices: vec![],
        };
        assert!(epoch_batch_indices(&empty, 4, 0, 0).unwrap().is_empty());
        assert!(epoch_batch_indices(&shard, 0, 0, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        let shard = Shard {
            owner: 0,
            indices: (0..16).collect(),
        };
        let perms: BTreeSet<Vec<usize>> = (0..100)
            .map(|e| epoch_batch_indices(&shard, 16, e, 4).unwrap().concat())
            .collect();
        assert_eq!(perms.len(), 100);
    }

    #[test]
    fn csv_round_trip() {
        let (tr, _) = synth_gaussian_blobs(5, 3, 2, 1.0, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        tr.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, Split::Train, 2).unwrap();
        assert_eq!(back, tr);
    }
}
