use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::{Error, Result};

const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rng_seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_train: 6000,
            n_val: 2000,
            n_test: 2000,
            rng_seed: 1,
            stratified: true,
        }
    }
}

/// A three-way partition, with the source indices of every part.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded partition into disjoint train/validation/test sets.
///
/// Stratified splits take an equal share of every digit class for each part.
/// Indices within a part are in ascending source order. Every part must be
/// non-empty.
pub fn stratified_split(set: &LabeledImageSet, spec: &SplitSpec) -> Result<Split> {
    let total = spec.n_train + spec.n_val + spec.n_test;
    if total > set.len() {
        return Err(Error::Capacity(format!(
            "split needs {total} samples, set has {}",
            set.len()
        )));
    }
    if spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 {
        return Err(Error::invalid("every split part needs at least one sample"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());

    if spec.stratified {
        for (name, n) in [
            ("train", spec.n_train),
            ("val", spec.n_val),
            ("test", spec.n_test),
        ] {
            if n % NUM_CLASSES != 0 {
                return Err(Error::invalid(format!(
                    "stratified {name} count {n} is not divisible by {NUM_CLASSES}"
                )));
            }
        }
        let per = [
            spec.n_train / NUM_CLASSES,
            spec.n_val / NUM_CLASSES,
            spec.n_test / NUM_CLASSES,
        ];
        let need = per.iter().sum::<usize>();
        for class in 0..NUM_CLASSES as u8 {
            let mut members: Vec<usize> = set
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            if members.len() < need {
                return Err(Error::Capacity(format!(
                    "class {class} has {} samples, split needs {need}",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            train.extend_from_slice(&members[..per[0]]);
            val.extend_from_slice(&members[per[0]..per[0] + per[1]]);
            test.extend_from_slice(&members[per[0] + per[1]..need]);
        }
    } else {
        let mut all: Vec<usize> = (0..set.len()).collect();
        all.shuffle(&mut rng);
        train.extend_from_slice(&all[..spec.n_train]);
        val.extend_from_slice(&all[spec.n_train..spec.n_train + spec.n_val]);
        test.extend_from_slice(&all[spec.n_train + spec.n_val..total]);
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let tag = |part: &str| format!("{}#{part}(seed={})", set.source(), spec.rng_seed);
    Ok(Split {
        train: set.subset(&train, tag("train"))?,
        val: set.subset(&val, tag("val"))?,
        test: set.subset(&test, tag("test"))?,
        train_indices: train,
        val_indices: val,
        test_indices: test,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::Tensor;

    fn balanced(per_class: usize) -> LabeledImageSet {
        let n = per_class * NUM_CLASSES;
        let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        let data = (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect();
        LabeledImageSet::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), labels, "t").unwrap()
    }

    fn counts(set: &LabeledImageSet) -> [usize; 10] {
        let mut c = [0; 10];
        for &l in set.labels() {
            c[l as usize] += 1;
        }
        c
    }

    #[test]
    fn per_class_counts_and_disjointness() {
        let set = balanced(10);
        let spec = SplitSpec {
            n_train: 50,
            n_val: 30,
            n_test: 20,
            rng_seed: 3,
            stratified: true,
        };
        let s = stratified_split(&set, &spec).unwrap();
        assert_eq!(counts(&s.train), [5; 10]);
        assert_eq!(counts(&s.val), [3; 10]);
        assert_eq!(counts(&s.test), [2; 10]);
        let all: HashSet<usize> = s
            .train_indices
            .iter()
            .chain(&s.val_indices)
            .chain(&s.test_indices)
            .copied()
            .collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn same_seed_same_indices() {
        let set = balanced(12);
        let spec = SplitSpec {
            n_train: 50,
            n_val: 30,
            n_test: 20,
            rng_seed: 9,
            stratified: true,
        };
        let a = stratified_split(&set, &spec).unwrap();
        let b = stratified_split(&set, &spec).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.val_indices, b.val_indices);
        assert_eq!(a.test_indices, b.test_indices);
        let c = stratified_split(
            &set,
            &SplitSpec {
                rng_seed: 10,
                ..spec
            },
        )
        .unwrap();
        assert_ne!(a.train_indices, c.train_indices);
    }

    #[test]
    fn oversized_split_is_capacity_error() {
        let set = balanced(10);
        let spec = SplitSpec {
            n_train: 200,
            n_val: 0,
            n_test: 0,
            rng_seed: 0,
            stratified: true,
        };
        assert!(matches!(
            stratified_split(&set, &spec),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn short_class_is_capacity_error() {
        let mut labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        labels[5] = 4; // class 5 now has 9 samples
        let set = LabeledImageSet::new(Tensor::zeros(&[100, 1, 2, 2]), labels, "t").unwrap();
        let spec = SplitSpec {
            n_train: 50,
            n_val: 30,
            n_test: 20,
            rng_seed: 0,
            stratified: true,
        };
        assert!(matches!(
            stratified_split(&set, &spec),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn unstratified_split_is_disjoint() {
        let set = balanced(10);
        let spec = SplitSpec {
            n_train: 33,
            n_val: 17,
            n_test: 9,
            rng_seed: 5,
            stratified: false,
        };
        let s = stratified_split(&set, &spec).unwrap();
        let mut all: Vec<usize> = s
            .train_indices
            .iter()
            .chain(&s.val_indices)
            .chain(&s.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 59);
    }
}
