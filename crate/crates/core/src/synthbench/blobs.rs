use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Example;

/// Gaussian blobs in the plane where some class pairs share a mean and are
/// told apart only by a coarse two-group tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguousBlobsSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Pairs of classes drawn from one distribution. Pairs must be disjoint.
    pub ambiguous_pairs: Vec<(usize, usize)>,
    pub blob_std: f64,
    /// Radius of the circle the distinct means are spaced on.
    pub radius: f64,
    pub seed: u64,
}

impl Default for AmbiguousBlobsSpec {
    fn default() -> Self {
        Self {
            n_train: 1200,
            n_test: 600,
            n_classes: 6,
            ambiguous_pairs: vec![(4, 5)],
            blob_std: 0.5,
            radius: 3.0,
            seed: 7,
        }
    }
}

impl AmbiguousBlobsSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if self.n_classes < 4 {
            return bad(format!("need at least 4 classes, got {}", self.n_classes));
        }
        if !(self.blob_std > 0.0 && self.blob_std.is_finite()) || !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("blob_std and radius must be positive".into());
        }
        let mut seen = vec![false; self.n_classes];
        for &(a, b) in &self.ambiguous_pairs {
            if a >= self.n_classes || b >= self.n_classes || a == b {
                return bad(format!("invalid ambiguous pair ({a}, {b})"));
            }
            for c in [a, b] {
                if std::mem::replace(&mut seen[c], true) {
                    return bad(format!("class {c} appears in more than one ambiguous pair"));
                }
            }
        }
        Ok(())
    }

    /// Group (0 or 1) of every class. Pair members land in different groups;
    /// other classes alternate by index.
    pub fn groups(&self) -> Vec<usize> {
        let mut g: Vec<usize> = (0..self.n_classes).map(|c| c % 2).collect();
        for &(a, b) in &self.ambiguous_pairs {
            g[a.min(b)] = 0;
            g[a.max(b)] = 1;
        }
        g
    }

    /// Mean of every class; pair members share their smaller member's slot.
    pub fn means(&self) -> Vec<[f64; 2]> {
        let mut slot = vec![usize::MAX; self.n_classes];
        for &(a, b) in &self.ambiguous_pairs {
            slot[a.max(b)] = a.min(b);
        }
        let owners: Vec<usize> = (0..self.n_classes).filter(|&c| slot[c] == usize::MAX).collect();
        let n = owners.len() as f64;
        let mut means = vec![[0.0; 2]; self.n_classes];
        for (j, &c) in owners.iter().enumerate() {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / n;
            means[c] = [self.radius * theta.cos(), self.radius * theta.sin()];
        }
        for c in 0..self.n_classes {
            if slot[c] != usize::MAX {
                means[c] = means[slot[c]];
            }
        }
        means
    }

    /// Classes that are indistinguishable from the input alone.
    pub fn ambiguous_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.ambiguous_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.sort_unstable();
        v
    }
}

/// One-hot group tag of `class`.
pub fn group_tag(groups: &[usize], class: usize) -> Vec<f64> {
    let mut t = vec![0.0; 2];
    t[groups[class]] = 1.0;
    t
}

/// Draws `(train, test)`; labels cycle through the classes so every class
/// is equally represented.
pub fn gen_ambiguous_blobs(spec: &AmbiguousBlobsSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.blob_std).map_err(|e| Error::Spec(e.to_string()))?;
    let means = spec.means();
    let groups = spec.groups();
    let mut draw = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let class = i % spec.n_classes;
                let [mx, my] = means[class];
                Example {
                    x: vec![mx + noise.sample(&mut rng), my + noise.sample(&mut rng)],
                    y: vec![class],
                    aux: vec![group_tag(&groups, class)],
                }
            })
            .collect()
    };
    let train = draw(spec.n_train);
    let test = draw(spec.n_test);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_share_means_and_split_groups() {
        let spec = AmbiguousBlobsSpec {
            ambiguous_pairs: vec![(0, 3), (4, 5)],
            ..Default::default()
        };
        let m = spec.means();
        let g = spec.groups();
        assert_eq!(m[0], m[3]);
        assert_eq!(m[4], m[5]);
        assert_ne!(g[0], g[3]);
        assert_ne!(g[4], g[5]);
        for a in [0, 1, 2, 4] {
            for b in [0, 1, 2, 4] {
                if a != b {
                    assert_ne!(m[a], m[b]);
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            AmbiguousBlobsSpec {
                n_classes: 3,
                ..Default::default()
            },
            AmbiguousBlobsSpec {
                ambiguous_pairs: vec![(1, 2), (2, 3)],
                ..Default::default()
            },
            AmbiguousBlobsSpec {
                ambiguous_pairs: vec![(1, 9)],
                ..Default::default()
            },
            AmbiguousBlobsSpec {
                blob_std: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(gen_ambiguous_blobs(&spec), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn deterministic_and_tagged_by_group() {
        let spec = AmbiguousBlobsSpec::default();
        let a = gen_ambiguous_blobs(&spec).unwrap();
        let b = gen_ambiguous_blobs(&spec).unwrap();
        assert_eq!(a, b);
        let groups = spec.groups();
        for ex in a.0.iter().chain(&a.1) {
            assert_eq!(ex.aux[0], group_tag(&groups, ex.y[0]));
        }
    }
}
