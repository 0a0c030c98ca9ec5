//! Attribution and inspection tools: Shapley values over saliency channels
//! and gene sets, CSV exports for heatmaps and flow diagrams, and the
//! saliency leakage score.

use crate::databag::GenePartition;
use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::gpnn::{gpnn_forward, GpnnModel};
use crate::knowledge::PhenotypeKB;
use crate::metrics::{js_divergence, JSD_BINS};
use crate::pamil::{extract_phenotype_features, Head, PamilModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Largest player count for exact Shapley enumeration.
pub const EXACT_SHAPLEY_LIMIT: usize = 20;

/// Exact Shapley values by full subset enumeration with cached coalition
/// values. `value` maps a membership mask to the coalition's worth.
pub fn shapley_exact(n: usize, mut value: impl FnMut(&[bool]) -> f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyInput("shapley over zero players".into()));
    }
    if n > EXACT_SHAPLEY_LIMIT {
        return Err(Error::Budget(n));
    }
    let size = 1usize << n;
    let mut cache = Vec::with_capacity(size);
    let mut mask = vec![false; n];
    for bits in 0..size {
        for (i, m) in mask.iter_mut().enumerate() {
            *m = bits >> i & 1 == 1;
        }
        cache.push(value(&mask));
    }
    // weight for a coalition of size s (excluding player i): 1 / (n·C(n−1, s))
    let mut weights = vec![0.0f64; n];
    for (s, w) in weights.iter_mut().enumerate() {
        *w = 1.0 / (n as f64 * binomial(n - 1, s));
    }
    let mut phi = vec![0.0; n];
    for bits in 0..size {
        let s = (bits as u64).count_ones() as usize;
        for i in 0..n {
            if bits >> i & 1 == 0 {
                phi[i] += weights[s] * (cache[bits | 1 << i] - cache[bits]);
            }
        }
    }
    Ok(phi)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Permutation-sampling Shapley estimate (Castro et al. style): average the
/// marginal contribution of each player over random orderings. Seeded and
/// deterministic; satisfies efficiency exactly for any sample count.
pub fn shapley_sampled(
    n: usize,
    mut value: impl FnMut(&[bool]) -> f64,
    permutations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyInput("shapley over zero players".into()));
    }
    if permutations == 0 {
        return Err(Error::config("need at least one permutation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut mask = vec![false; n];
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        mask.iter_mut().for_each(|m| *m = false);
        let mut prev = value(&mask);
        for &i in &order {
            mask[i] = true;
            let cur = value(&mask);
            phi[i] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|p| *p /= permutations as f64);
    Ok(phi)
}

/// Shapley attribution of one sample's class logit over its saliency
/// channels. Absent channels are replaced by the cohort-mean baseline. Only
/// meaningful for the linear score head, where the exact values reduce to
/// `W[c,i]·(s_i − baseline_i)`.
pub fn phenotype_contributions(
    model: &PamilModel,
    saliency: &[f64],
    baseline: &[f64],
    class: usize,
) -> Result<Vec<f64>> {
    if model.cfg.head != Head::ScoreLinear {
        return Err(Error::config(
            "phenotype contributions require the linear score head",
        ));
    }
    if class >= model.cfg.n_classes {
        return Err(Error::Index(format!(
            "class {class} out of range for {} classes",
            model.cfg.n_classes
        )));
    }
    let n = model.cfg.n_phenotypes;
    if saliency.len() != n || baseline.len() != n {
        return Err(Error::shape(format!(
            "saliency/baseline length must be {n}"
        )));
    }
    let w = model.set.value(model.head_w);
    Ok((0..n)
        .map(|i| w.get(class, i) * (saliency[i] - baseline[i]))
        .collect())
}

/// Same attribution computed by subset enumeration, for cross-checking and
/// for callers that want the game-theoretic route.
pub fn phenotype_contributions_shapley(
    model: &PamilModel,
    saliency: &[f64],
    baseline: &[f64],
    class: usize,
) -> Result<Vec<f64>> {
    if model.cfg.head != Head::ScoreLinear {
        return Err(Error::config(
            "phenotype contributions require the linear score head",
        ));
    }
    let w = model.set.value(model.head_w).clone();
    let b = model.set.value(model.head_b).get(class, 0);
    let n = model.cfg.n_phenotypes;
    shapley_exact(n, |mask| {
        let mut logit = b;
        for i in 0..n {
            let s = if mask[i] { saliency[i] } else { baseline[i] };
            logit += w.get(class, i) * s;
        }
        logit
    })
}

/// One gene's contribution to a phenotype's transcriptome-derived saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneContribution {
    pub gene: String,
    pub phi: f64,
}

/// Shapley attribution of the teacher's saliency for one phenotype over that
/// phenotype's genes. Masked genes fall back to the cohort-mean baseline
/// partition. Exact up to 12 genes, permutation-sampled beyond that.
pub fn gene_phenotype_contributions(
    teacher: &GpnnModel,
    kb: &PhenotypeKB,
    part: &GenePartition,
    baseline: &GenePartition,
    phenotype: usize,
    top_k: usize,
) -> Result<Vec<GeneContribution>> {
    if phenotype >= teacher.n_phenotypes() {
        return Err(Error::Index(format!(
            "phenotype {phenotype} out of range for {}",
            teacher.n_phenotypes()
        )));
    }
    let genes = &kb.phenotypes[phenotype].genes;
    let n = genes.len();
    if part.groups[phenotype].len() != n || baseline.groups[phenotype].len() != n {
        return Err(Error::shape(format!(
            "partition group {phenotype} must have {n} genes"
        )));
    }
    let mut value = |mask: &[bool]| -> f64 {
        let mut masked = part.clone();
        for (g, &keep) in mask.iter().enumerate() {
            if !keep {
                masked.groups[phenotype][g] = baseline.groups[phenotype][g];
            }
        }
        gpnn_forward(teacher, &masked, None)
            .map(|t| t.s_hat[phenotype])
            .unwrap_or(f64::NAN)
    };
    let phi = if n <= 12 {
        shapley_exact(n, &mut value)?
    } else {
        shapley_sampled(n, &mut value, 200, 71)?
    };
    let mut out: Vec<GeneContribution> = genes
        .iter()
        .zip(&phi)
        .map(|(g, &p)| GeneContribution {
            gene: g.clone(),
            phi: p,
        })
        .collect();
    out.sort_by(|a, b| b.phi.abs().partial_cmp(&a.phi.abs()).unwrap());
    out.truncate(top_k);
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

/// Sample-by-phenotype saliency matrix as CSV.
pub fn export_saliency_heatmap(
    path: impl AsRef<Path>,
    sample_ids: &[String],
    labels: &[usize],
    phenotype_names: &[String],
    saliency: &[Vec<f64>],
) -> Result<()> {
    if sample_ids.len() != saliency.len() || labels.len() != saliency.len() {
        return Err(Error::shape("heatmap inputs are misaligned"));
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "sample_id,label,{}", phenotype_names.join(","))?;
    for ((id, &label), row) in sample_ids.iter().zip(labels).zip(saliency) {
        if row.len() != phenotype_names.len() {
            return Err(Error::shape(format!(
                "sample '{id}' has {} saliency values, expected {}",
                row.len(),
                phenotype_names.len()
            )));
        }
        let vals: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
        writeln!(f, "{id},{label},{}", vals.join(","))?;
    }
    Ok(())
}

/// Top-k attended patches per phenotype for one sample as CSV.
pub fn export_attention_heatmap(
    path: impl AsRef<Path>,
    model: &PamilModel,
    features: &Matrix,
    u: &Matrix,
    phenotype_names: &[String],
    top_k: usize,
) -> Result<()> {
    let (_, a) = extract_phenotype_features(features, u, model)?;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "phenotype,rank,patch_index,weight")?;
    for (i, name) in phenotype_names.iter().enumerate() {
        let mut order: Vec<usize> = (0..a.cols).collect();
        order.sort_by(|&x, &y| a.get(i, y).partial_cmp(&a.get(i, x)).unwrap());
        for (rank, &p) in order.iter().take(top_k).enumerate() {
            writeln!(f, "{name},{},{p},{}", rank + 1, fmt(a.get(i, p)))?;
        }
    }
    Ok(())
}

/// Phenotype-to-class flow table: for each class, the head weight times the
/// class-conditional mean saliency of that phenotype.
pub fn export_sankey(
    path: impl AsRef<Path>,
    model: &PamilModel,
    phenotype_names: &[String],
    class_names: &[String],
    labels: &[usize],
    saliency: &[Vec<f64>],
) -> Result<()> {
    if model.cfg.head != Head::ScoreLinear {
        return Err(Error::config("sankey export requires the linear score head"));
    }
    let w = model.set.value(model.head_w);
    let n = phenotype_names.len();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "source,target,value")?;
    for (c, cname) in class_names.iter().enumerate() {
        let rows: Vec<&Vec<f64>> = labels
            .iter()
            .zip(saliency)
            .filter(|(&l, _)| l == c)
            .map(|(_, s)| s)
            .collect();
        if rows.is_empty() {
            continue;
        }
        for (i, pname) in phenotype_names.iter().enumerate().take(n) {
            let mean: f64 =
                rows.iter().map(|s| s[i]).sum::<f64>() / rows.len() as f64;
            writeln!(f, "{pname},{cname},{}", fmt(w.get(c, i) * mean))?;
        }
    }
    Ok(())
}

/// Class-separability of each saliency channel plus a concentration index.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    /// Mean pairwise class-conditional JSD per phenotype.
    pub per_phenotype_jsd: Vec<f64>,
    /// max / mean of the per-phenotype JSD values. Near 1 means class
    /// information is spread evenly over channels; large values mean it is
    /// concentrated in a few.
    pub concentration: f64,
}

/// Measure how much class identity leaks into each saliency channel: for each
/// phenotype, the mean pairwise Jensen-Shannon divergence between the
/// class-conditional saliency distributions.
pub fn leakage_score(
    saliency: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<LeakageReport> {
    if saliency.is_empty() || saliency.len() != labels.len() {
        return Err(Error::shape("leakage inputs are misaligned"));
    }
    if n_classes < 2 {
        return Err(Error::config("leakage score needs at least 2 classes"));
    }
    let n = saliency[0].len();
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        let by_class: Vec<Vec<f64>> = (0..n_classes)
            .map(|c| {
                labels
                    .iter()
                    .zip(saliency)
                    .filter(|(&l, _)| l == c)
                    .map(|(_, s)| s[i])
                    .collect()
            })
            .collect();
        let all: Vec<f64> = saliency.iter().map(|s| s[i]).collect();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                if by_class[a].is_empty() || by_class[b].is_empty() {
                    continue;
                }
                sum += js_divergence(&by_class[a], &by_class[b], JSD_BINS, range)?;
                pairs += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::UndefinedMetric(
                "leakage score needs at least two classes present".into(),
            ));
        }
        per.push(sum / pairs as f64);
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let max = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let concentration = if mean > 0.0 { max / mean } else { 1.0 };
    Ok(LeakageReport {
        per_phenotype_jsd: per,
        concentration,
    })
}
