use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!("split fractions {parts:?} must be non-negative")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Deterministic shuffled partition. With `stratify`, each label group is
/// partitioned separately so every split keeps the global positive rate.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if samples.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratify {
        (0..=1u8)
            .map(|y| (0..samples.len()).filter(|&i| samples[i].label == y).collect())
            .collect()
    } else {
        vec![(0..samples.len()).collect()]
    };

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_val = (spec.val * n).round() as usize;
        let n_test = ((spec.test * n).round() as usize).min(group.len() - n_val);
        val.extend_from_slice(&group[..n_val]);
        test.extend_from_slice(&group[n_val..n_val + n_test]);
        train.extend_from_slice(&group[n_val + n_test..]);
    }
    let mut take = |mut idx: Vec<usize>| {
        idx.shuffle(&mut rng);
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    Ok(Splits {
        train: take(train),
        val: take(val),
        test: take(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn samples(n: usize, positives: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                label: u8::from(i < positives),
                ehr_static: None,
                ehr_series: None,
                text_tokens: Some(vec![i % 7]),
                image_features: None,
            })
            .collect()
    }

    fn ids(v: &[Sample]) -> BTreeSet<String> {
        v.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn eighty_ten_ten() {
        for stratify in [false, true] {
            let data = samples(100, 10);
            let spec = SplitSpec {
                stratify,
                ..SplitSpec::default()
            };
            let s = split(&data, &spec).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
            let (a, b, c) = (ids(&s.train), ids(&s.val), ids(&s.test));
            assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            let union: BTreeSet<String> = a.union(&b).chain(c.iter()).cloned().collect();
            assert_eq!(union, ids(&data));
        }
    }

    #[test]
    fn stratified_rates_stay_close() {
        let data = samples(1000, 100);
        let s = split(&data, &SplitSpec::default()).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let rate = part.iter().filter(|x| x.label == 1).count() as f64 / part.len() as f64;
            assert!((0.08..=0.12).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let data = samples(50, 20);
        let spec = SplitSpec::default();
        assert_eq!(split(&data, &spec).unwrap(), split(&data, &spec).unwrap());
        let other = SplitSpec { seed: 9, ..spec };
        assert_ne!(split(&data, &spec).unwrap(), split(&data, &other).unwrap());
    }

    #[test]
    fn invalid_requests() {
        let data = samples(50, 5);
        let bad = SplitSpec {
            train: 0.9,
            ..SplitSpec::default()
        };
        assert!(split(&data, &bad).is_err());
        assert!(split(&samples(9, 2), &SplitSpec::default()).is_err());
    }
}
