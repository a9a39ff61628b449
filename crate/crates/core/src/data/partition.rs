//! Disjoint client shards and seeded minibatch plans.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Per-client example indices. Shards are pairwise disjoint and cover the
/// dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    client_indices: Vec<Vec<usize>>,
}

impl Partition {
    /// Wraps explicit shards after checking disjointness and coverage of
    /// `0..total`.
    pub fn new(client_indices: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for (c, shard) in client_indices.iter().enumerate() {
            for &i in shard {
                if i >= total {
                    return Err(Error::data(format!("client {c}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::data(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::data(format!("index {missing} not assigned")));
        }
        Ok(Self { client_indices })
    }

    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.client_indices[client]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.client_indices
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

fn check_clients(n_clients: usize, len: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::usage("n_clients must be at least 1"));
    }
    if n_clients > len {
        return Err(Error::usage(format!(
            "{n_clients} clients but only {len} examples"
        )));
    }
    Ok(())
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at
/// most one (larger chunks first).
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Shuffled, size-balanced shards.
pub fn partition_iid(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<Partition> {
    check_clients(n_clients, dataset.len())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::PARTITION, &[0]));
    Ok(Partition {
        client_indices: even_chunks(&order, n_clients),
    })
}

/// Label-skewed shards: every client receives `classes_per_client`
/// single-class shards, so it sees at most that many distinct labels.
///
/// The `n_clients * classes_per_client` shards are apportioned across the
/// present classes by the D'Hondt rule (every class gets at least one), each
/// class's shuffled examples are cut into near-equal shards, and shards are
/// dealt to clients in a seeded random order.
pub fn partition_label_skew(
    dataset: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    check_clients(n_clients, dataset.len())?;
    if classes_per_client == 0 {
        return Err(Error::config(
            "partition.classes_per_client",
            "must be at least 1",
        ));
    }
    let counts = dataset.class_counts();
    let present: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    let total_shards = n_clients * classes_per_client;
    if total_shards < present.len() {
        return Err(Error::config(
            "partition.classes_per_client",
            format!(
                "{n_clients} clients x {classes_per_client} classes cannot cover {} classes",
                present.len()
            ),
        ));
    }
    if total_shards > dataset.len() {
        return Err(Error::config(
            "partition.classes_per_client",
            format!("{total_shards} shards exceed {} examples", dataset.len()),
        ));
    }

    let mut alloc = vec![0usize; counts.len()];
    for &k in &present {
        alloc[k] = 1;
    }
    for _ in present.len()..total_shards {
        // D'Hondt: max counts[k] / (alloc[k] + 1), ties to the lower class
        let best = present
            .iter()
            .copied()
            .max_by(|&a, &b| {
                (counts[a] * (alloc[b] + 1))
                    .cmp(&(counts[b] * (alloc[a] + 1)))
                    .then(b.cmp(&a))
            })
            .expect("at least one class");
        alloc[best] += 1;
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shards = Vec::with_capacity(total_shards);
    for &k in &present {
        let mut members = std::mem::take(&mut by_class[k]);
        members.shuffle(&mut rng::stream(seed, rng::PARTITION, &[1, k as u64]));
        shards.extend(even_chunks(&members, alloc[k]));
    }
    shards.shuffle(&mut rng::stream(seed, rng::PARTITION, &[2]));
    let client_indices = shards
        .chunks(classes_per_client)
        .map(|group| group.concat())
        .collect();
    Ok(Partition { client_indices })
}

/// The ordered minibatches one client processes in one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub client: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Number of batches a shard of `shard_len` examples yields per epoch.
pub fn batches_per_epoch(shard_len: usize, batch_size: usize) -> usize {
    shard_len.div_ceil(batch_size)
}

/// Seeded shuffle of a client's shard for one epoch, cut into batches. The
/// final partial batch is kept.
pub fn batches(
    partition: &Partition,
    client: usize,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    if client >= partition.n_clients() {
        return Err(Error::usage(format!(
            "client {client} out of range for {} clients",
            partition.n_clients()
        )));
    }
    let mut order = partition.shard(client).to_vec();
    if order.is_empty() {
        return Err(Error::data(format!("client {client} has an empty shard")));
    }
    order.shuffle(&mut rng::stream(
        seed,
        rng::SHUFFLE,
        &[client as u64, epoch as u64],
    ));
    Ok(BatchPlan {
        client,
        epoch,
        batch_size,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

/// Shannon entropy (nats) of the label distribution over `indices`.
pub fn label_entropy(dataset: &Dataset, indices: &[usize]) -> f64 {
    let mut counts = vec![0usize; dataset.num_classes()];
    for &i in indices {
        counts[dataset.labels()[i]] += 1;
    }
    let n = indices.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(Tensor::zeros(&[n, 1]), labels, classes).unwrap()
    }

    fn balanced(n: usize, classes: usize) -> Dataset {
        labelled((0..n).map(|i| i % classes).collect(), classes)
    }

    fn assert_cover(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.shards().concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn iid_hundred_into_five() {
        let ds = balanced(100, 10);
        let p = partition_iid(&ds, 5, 3).unwrap();
        assert_eq!(p.sizes(), vec![20; 5]);
        assert_cover(&p, 100);
    }

    #[test]
    fn iid_rejects_zero_clients() {
        assert!(matches!(partition_iid(&balanced(10, 2), 0, 0), Err(Error::Usage(_))));
        assert!(partition_iid(&balanced(3, 2), 4, 0).is_err());
    }

    #[test]
    fn iid_class_histograms_track_global_proportions() {
        // Each shard is a draw without replacement of 100 from 1000 with 10
        // equal classes, so a class count is hypergeometric with mean 10 and
        // variance 100 * 0.1 * 0.9 * 900 / 999.
        let ds = balanced(1000, 10);
        let sd = (100.0f64 * 0.1 * 0.9 * 900.0 / 999.0).sqrt();
        let mut outside = 0;
        let mut total = 0;
        for seed in 0..100 {
            let p = partition_iid(&ds, 10, seed).unwrap();
            for shard in p.shards() {
                let mut counts = [0usize; 10];
                for &i in shard {
                    counts[ds.labels()[i]] += 1;
                }
                for c in counts {
                    total += 1;
                    if (c as f64 - 10.0).abs() > 3.0 * sd {
                        outside += 1;
                    }
                }
            }
        }
        // P(|Z| > 3) ~ 0.27%; allow slack for the discrete tails
        assert!((outside as f64) / (total as f64) < 0.01, "{outside}/{total}");
    }

    #[test]
    fn mono_class_clients_when_one_class_each() {
        let ds = balanced(200, 10);
        let p = partition_label_skew(&ds, 10, 1, 4).unwrap();
        assert_cover(&p, 200);
        for shard in p.shards() {
            let first = ds.labels()[shard[0]];
            assert!(shard.iter().all(|&i| ds.labels()[i] == first));
        }
    }

    #[test]
    fn full_class_skew_is_size_balanced() {
        let ds = balanced(1000, 10);
        let p = partition_label_skew(&ds, 10, 10, 2).unwrap();
        assert_eq!(p.sizes(), vec![100; 10]);
    }

    #[test]
    fn skew_lowers_label_entropy() {
        let ds = balanced(1000, 10);
        let iid = partition_iid(&ds, 10, 1).unwrap();
        let skew = partition_label_skew(&ds, 10, 2, 1).unwrap();
        let mean = |p: &Partition| {
            p.shards().iter().map(|s| label_entropy(&ds, s)).sum::<f64>() / 10.0
        };
        let (hi, hs) = (mean(&iid), mean(&skew));
        assert!(hs < hi, "skew {hs} vs iid {hi}");
        assert!(hs <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn infeasible_skew_is_config_error() {
        let ds = balanced(100, 10);
        assert!(matches!(
            partition_label_skew(&ds, 3, 3, 0),
            Err(Error::Config { .. })
        ));
        assert!(partition_label_skew(&ds, 3, 0, 0).is_err());
        assert!(partition_label_skew(&balanced(12, 2), 5, 3, 0).is_err());
    }

    #[test]
    fn batches_keep_partial_tail() {
        let ds = balanced(10, 2);
        let p = partition_iid(&ds, 1, 0).unwrap();
        let plan = batches(&p, 0, 3, 0, 9).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(plan, batches(&p, 0, 3, 0, 9).unwrap());
        assert_ne!(plan, batches(&p, 0, 3, 1, 9).unwrap());
        let mut seen = plan.batches.concat();
        seen.sort_unstable();
        let mut shard = p.shard(0).to_vec();
        shard.sort_unstable();
        assert_eq!(seen, shard);
    }

    #[test]
    fn empty_shard_is_data_error() {
        let p = Partition::new(vec![vec![0, 1], vec![]], 2).unwrap();
        assert!(matches!(batches(&p, 1, 2, 0, 0), Err(Error::Data(_))));
        assert!(matches!(batches(&p, 0, 0, 0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn exhaustive_small_instances_cover() {
        for n in 1..=12 {
            for clients in 1..=n.min(5) {
                for classes in 1..=3 {
                    let ds = balanced(n, classes);
                    assert_cover(&partition_iid(&ds, clients, n as u64).unwrap(), n);
                    for s in 1..=3 {
                        if let Ok(p) = partition_label_skew(&ds, clients, s, 7) {
                            assert_cover(&p, n);
                            assert_eq!(p.n_clients(), clients);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn skew_respects_class_budget(
            labels in prop::collection::vec(0usize..6, 30..200),
            clients in 1usize..8,
            s in 1usize..4,
            seed in any::<u64>(),
        ) {
            let ds = labelled(labels, 6);
            if let Ok(p) = partition_label_skew(&ds, clients, s, seed) {
                let n = ds.len();
                let mut all: Vec<usize> = p.shards().concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                for shard in p.shards() {
                    let mut cls: Vec<usize> = shard.iter().map(|&i| ds.labels()[i]).collect();
                    cls.sort_unstable();
                    cls.dedup();
                    prop_assert!(cls.len() <= s);
                }
            }
        }

        #[test]
        fn iid_sizes_within_one(n in 1usize..300, clients in 1usize..20, seed in any::<u64>()) {
            prop_assume!(clients <= n);
            let p = partition_iid(&balanced(n, 3), clients, seed).unwrap();
            let sizes = p.sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
