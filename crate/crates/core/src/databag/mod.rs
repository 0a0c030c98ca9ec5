//! Sample and cohort data model, synthetic planted-truth generation,
//! gene-set partitioning, and deterministic stratified splitting.

pub mod io;
pub mod synth;

pub use io::{load_cohort, read_bag, read_profile, write_bag, write_cohort, write_profile};
pub use synth::{generate_synthetic_cohort, synthetic_kb, SyntheticConfig};

use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::knowledge::PhenotypeKB;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One sample's bag of patch features plus its subtype label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub sample_id: String,
    /// M x d patch features.
    pub features: Matrix,
    pub label: usize,
    /// Ground-truth phenotype proportions, present for synthetic data.
    pub planted_saliency: Option<Vec<f64>>,
}

/// Gene-symbol to expression map for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptomeProfile {
    pub sample_id: String,
    pub expression: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub bags: Vec<FeatureBag>,
    /// When present, aligned 1:1 with `bags` by sample id.
    pub profiles: Option<Vec<TranscriptomeProfile>>,
    pub class_names: Vec<String>,
    /// Identity of the knowledge base this cohort was built against.
    pub kb_cancer: String,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for bag in &self.bags {
            if bag.label >= self.n_classes() {
                return Err(Error::Data(format!(
                    "bag '{}' has label {} but only {} classes",
                    bag.sample_id,
                    bag.label,
                    self.n_classes()
                )));
            }
        }
        if let Some(profiles) = &self.profiles {
            if profiles.len() != self.bags.len() {
                return Err(Error::Data(format!(
                    "{} profiles for {} bags",
                    profiles.len(),
                    self.bags.len()
                )));
            }
            for (bag, prof) in self.bags.iter().zip(profiles) {
                if bag.sample_id != prof.sample_id {
                    return Err(Error::Data(format!(
                        "profile '{}' not aligned with bag '{}'",
                        prof.sample_id, bag.sample_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Restrict to the given bag indices, keeping profile alignment.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
            profiles: self
                .profiles
                .as_ref()
                .map(|ps| indices.iter().map(|&i| ps[i].clone()).collect()),
            class_names: self.class_names.clone(),
            kb_cancer: self.kb_cancer.clone(),
        }
    }
}

/// Per-phenotype expression vectors plus a count of genes missing from the
/// profile (those contribute zero).
#[derive(Debug, Clone, PartialEq)]
pub struct GenePartition {
    pub groups: Vec<Vec<f64>>,
    pub missing: usize,
}

/// Split a profile's expression into per-phenotype vectors ordered as in the
/// knowledge base. Genes shared between phenotypes appear in every group that
/// lists them.
pub fn partition_genes(profile: &TranscriptomeProfile, kb: &PhenotypeKB) -> GenePartition {
    let mut groups = Vec::with_capacity(kb.len());
    let mut missing = 0;
    for p in &kb.phenotypes {
        let mut group = Vec::with_capacity(p.genes.len());
        for gene in &p.genes {
            match profile.expression.get(gene) {
                Some(&v) => group.push(v),
                None => {
                    group.push(0.0);
                    missing += 1;
                }
            }
        }
        groups.push(group);
    }
    GenePartition { groups, missing }
}

/// Deterministic stratified k-fold split: per-class counts across folds
/// differ by at most one.
pub fn stratified_kfold(
    cohort: &Cohort,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be >= 2, got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cohort.n_classes()];
    for (i, bag) in cohort.bags.iter().enumerate() {
        by_class[bag.label].push(i);
    }
    for (c, ids) in by_class.iter().enumerate() {
        if !ids.is_empty() && ids.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} samples, fewer than k={k}",
                ids.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_test: Vec<Vec<usize>> = vec![Vec::new(); k];
    for ids in &mut by_class {
        ids.shuffle(&mut rng);
        for (pos, &id) in ids.iter().enumerate() {
            fold_test[pos % k].push(id);
        }
    }
    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let mut test = fold_test[f].clone();
        test.sort_unstable();
        let mut train: Vec<usize> = (0..cohort.len()).filter(|i| !test.contains(i)).collect();
        train.sort_unstable();
        splits.push((train, test));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::Phenotype;

    fn kb() -> PhenotypeKB {
        PhenotypeKB {
            cancer: "TEST".into(),
            phenotypes: vec![
                Phenotype {
                    name: "A".into(),
                    description: "a".into(),
                    genes: vec!["G1".into(), "SHARED".into()],
                },
                Phenotype {
                    name: "B".into(),
                    description: "b".into(),
                    genes: vec!["G2".into()],
                },
                Phenotype {
                    name: "C".into(),
                    description: "c".into(),
                    genes: vec!["SHARED".into(), "G3".into()],
                },
            ],
        }
    }

    fn profile(entries: &[(&str, f64)]) -> TranscriptomeProfile {
        TranscriptomeProfile {
            sample_id: "s".into(),
            expression: entries
                .iter()
                .map(|(g, v)| (g.to_string(), *v))
                .collect(),
        }
    }

    #[test]
    fn partition_total_coverage() {
        let p = profile(&[("G1", 1.0), ("G2", 2.0), ("G3", 3.0), ("SHARED", 4.0)]);
        let part = partition_genes(&p, &kb());
        assert_eq!(part.groups, vec![vec![1.0, 4.0], vec![2.0], vec![4.0, 3.0]]);
        assert_eq!(part.missing, 0);
    }

    #[test]
    fn partition_empty_profile_zero_fills() {
        let p = profile(&[]);
        let part = partition_genes(&p, &kb());
        assert_eq!(part.missing, 5);
        assert!(part.groups.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn partition_shared_gene_appears_in_both_groups() {
        let p = profile(&[("SHARED", 7.5)]);
        let part = partition_genes(&p, &kb());
        assert_eq!(part.groups[0][1], 7.5);
        assert_eq!(part.groups[2][0], 7.5);
    }

    fn toy_cohort(per_class: usize, classes: usize) -> Cohort {
        let mut bags = Vec::new();
        for c in 0..classes {
            for s in 0..per_class {
                bags.push(FeatureBag {
                    sample_id: format!("c{c}s{s}"),
                    features: Matrix::zeros(1, 2),
                    label: c,
                    planted_saliency: None,
                });
            }
        }
        Cohort {
            bags,
            profiles: None,
            class_names: (0..classes).map(|c| format!("class{c}")).collect(),
            kb_cancer: "TEST".into(),
        }
    }

    #[test]
    fn kfold_exact_divisibility() {
        let cohort = toy_cohort(5, 2);
        let splits = stratified_kfold(&cohort, 5, 1).unwrap();
        for (_, test) in &splits {
            assert_eq!(test.len(), 2);
            let c0 = test.iter().filter(|&&i| cohort.bags[i].label == 0).count();
            assert_eq!(c0, 1);
        }
    }

    #[test]
    fn kfold_is_a_partition() {
        let cohort = toy_cohort(7, 3);
        let splits = stratified_kfold(&cohort, 4, 9).unwrap();
        let mut seen = vec![0usize; cohort.len()];
        for (train, test) in &splits {
            for &i in test {
                seen[i] += 1;
            }
            for &i in train {
                assert!(!test.contains(&i));
            }
            assert_eq!(train.len() + test.len(), cohort.len());
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn kfold_deterministic() {
        let cohort = toy_cohort(6, 2);
        let a = stratified_kfold(&cohort, 3, 42).unwrap();
        let b = stratified_kfold(&cohort, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kfold_rejects_small_class() {
        let cohort = toy_cohort(2, 2);
        assert!(stratified_kfold(&cohort, 3, 0).is_err());
    }
}
