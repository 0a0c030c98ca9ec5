//! The transcriptomic teacher: per-phenotype gene-set encoders, a shared
//! bottleneck producing transcriptome-derived saliency, and a linear subtype
//! classifier.

use crate::databag::{partition_genes, Cohort, GenePartition};
use crate::diff::matrix::Matrix;
use crate::diff::tape::{Tape, Var};
use crate::diff::{adam_step, AdamConfig, ParamSet};
use crate::error::{Error, Result};
use crate::knowledge::PhenotypeKB;
use crate::pamil::{Activation, LEAKY_SLOPE, LN_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Hidden width of a gene-set encoder.
pub fn encoder_hidden(group_size: usize) -> usize {
    (2 * group_size).min(64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpnnConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub activation: Activation,
}

impl GpnnConfig {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        GpnnConfig {
            dim,
            n_classes,
            activation: Activation::LayerNorm,
        }
    }
}

/// One two-layer encoder's tensor indices: w1, b1, w2, b2.
type EncoderIdx = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct GpnnModel {
    pub set: ParamSet,
    pub cfg: GpnnConfig,
    /// Gene-set sizes in knowledge-base order.
    pub group_sizes: Vec<usize>,
    pub kb_cancer: String,
    pub encoders: Vec<EncoderIdx>,
    pub w_bottleneck: usize,
    pub head_w: usize,
    pub head_b: usize,
}

impl GpnnModel {
    /// Initialize one encoder per phenotype gene set. Encoder weights and the
    /// bottleneck are non-negative so that the pre-activation saliency of a
    /// phenotype is monotone non-decreasing in the expression of its genes;
    /// this pins the orientation of each saliency channel, which classification
    /// loss alone leaves ambiguous.
    pub fn init(cfg: GpnnConfig, kb: &PhenotypeKB, seed: u64) -> Result<Self> {
        kb.validate()?;
        if cfg.dim < 2 {
            return Err(Error::config("teacher feature dimension must be >= 2"));
        }
        if cfg.n_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut encoders = Vec::with_capacity(kb.len());
        let mut group_sizes = Vec::with_capacity(kb.len());
        for (i, p) in kb.phenotypes.iter().enumerate() {
            let g = p.genes.len();
            let h = encoder_hidden(g);
            let s1 = (2.0 / g as f64).sqrt();
            let s2 = (2.0 / h as f64).sqrt();
            let w1 = Matrix::from_fn(g, h, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * s1).abs()
            });
            let w2 = Matrix::from_fn(h, cfg.dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * s2).abs()
            });
            encoders.push([
                set.add(format!("enc.{i}.w1"), w1),
                set.add(format!("enc.{i}.b1"), Matrix::zeros(1, h)),
                set.add(format!("enc.{i}.w2"), w2),
                set.add(format!("enc.{i}.b2"), Matrix::zeros(1, cfg.dim)),
            ]);
            group_sizes.push(g);
        }
        let w_bottleneck = set.add(
            "w_bottleneck_g",
            Matrix::from_fn(cfg.dim, 1, |_, _| 1.0 / (cfg.dim as f64).sqrt()),
        );
        let head_w = set.add(
            "head.weight",
            Matrix::from_fn(cfg.n_classes, kb.len(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.02
            }),
        );
        let head_b = set.add("head.bias", Matrix::zeros(cfg.n_classes, 1));
        Ok(GpnnModel {
            set,
            cfg,
            group_sizes,
            kb_cancer: kb.cancer.clone(),
            encoders,
            w_bottleneck,
            head_w,
            head_b,
        })
    }

    pub fn n_phenotypes(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.set.tensors.len()).collect()
    }

    fn check_partition(&self, part: &GenePartition) -> Result<()> {
        if part.groups.len() != self.n_phenotypes() {
            return Err(Error::shape(format!(
                "partition has {} groups, model expects {}",
                part.groups.len(),
                self.n_phenotypes()
            )));
        }
        for (i, g) in part.groups.iter().enumerate() {
            if g.len() != self.group_sizes[i] {
                return Err(Error::shape(format!(
                    "group {i} has {} genes, model expects {}",
                    g.len(),
                    self.group_sizes[i]
                )));
            }
        }
        Ok(())
    }
}

/// Differentiable forward pass for one transcriptome.
pub struct GpnnGraph {
    pub tape: Tape,
    /// N x d phenotype features.
    pub z: Var,
    /// Pre-activation bottleneck scores, N x 1.
    pub s_raw: Var,
    /// Transcriptome-derived saliency, N x 1.
    pub s_hat: Var,
    pub logits: Var,
    pub l_ce: Option<Var>,
    pub params: Vec<(usize, Var)>,
}

/// Value-level record of a teacher forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GpnnTrace {
    pub z: Matrix,
    pub s_raw: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub logits: Vec<f64>,
    pub l_ce: Option<f64>,
}

/// Build the teacher graph for one partitioned expression profile.
pub fn build_graph(
    model: &GpnnModel,
    part: &GenePartition,
    label: Option<usize>,
) -> Result<GpnnGraph> {
    model.check_partition(part)?;
    if let Some(l) = label {
        if l >= model.cfg.n_classes {
            return Err(Error::Index(format!(
                "label {l} out of range for {} classes",
                model.cfg.n_classes
            )));
        }
    }
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut leaf = |tape: &mut Tape, idx: usize| -> Var {
        let var = tape.leaf(model.set.value(idx).clone());
        params.push((idx, var));
        var
    };
    let mut z_rows = Vec::with_capacity(model.n_phenotypes());
    for (i, group) in part.groups.iter().enumerate() {
        let [w1, b1, w2, b2] = model.encoders[i];
        let w1 = leaf(&mut tape, w1);
        let b1 = leaf(&mut tape, b1);
        let w2 = leaf(&mut tape, w2);
        let b2 = leaf(&mut tape, b2);
        let x = tape.leaf(Matrix::row_vec(group));
        let lin1 = tape.matmul(x, w1);
        let pre = tape.add(lin1, b1);
        let hidden = tape.relu(pre);
        let lin2 = tape.matmul(hidden, w2);
        z_rows.push(tape.add(lin2, b2));
    }
    let z = tape.concat_rows(&z_rows);
    let wb = leaf(&mut tape, model.w_bottleneck);
    let s_raw = tape.matmul(z, wb);
    let s_hat = match model.cfg.activation {
        Activation::LayerNorm => tape.layer_norm(s_raw, LN_EPS),
        Activation::LeakyRelu => tape.leaky_relu(s_raw, LEAKY_SLOPE),
    };
    let hw = leaf(&mut tape, model.head_w);
    let hb = leaf(&mut tape, model.head_b);
    let affine = tape.matmul(hw, s_hat);
    let logits = tape.add(affine, hb);
    let l_ce = label.map(|l| tape.cross_entropy(logits, l));
    Ok(GpnnGraph {
        tape,
        z,
        s_raw,
        s_hat,
        logits,
        l_ce,
        params,
    })
}

/// Pure forward pass for one partitioned profile.
pub fn gpnn_forward(
    model: &GpnnModel,
    part: &GenePartition,
    label: Option<usize>,
) -> Result<GpnnTrace> {
    let g = build_graph(model, part, label)?;
    Ok(GpnnTrace {
        z: g.tape.value(g.z).clone(),
        s_raw: g.tape.value(g.s_raw).data.clone(),
        s_hat: g.tape.value(g.s_hat).data.clone(),
        logits: g.tape.value(g.logits).data.clone(),
        l_ce: g.l_ce.map(|v| g.tape.scalar(v)),
    })
}

/// Per-epoch mean losses from teacher training.
#[derive(Debug, Clone, PartialEq)]
pub struct GpnnTrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Train the teacher on a cohort's transcriptomes with cross-entropy only.
///
/// Samples are shuffled each epoch from a per-epoch seed; gradients are
/// averaged over the accumulation window before each optimizer step, and a
/// final partial window is flushed at epoch end.
pub fn train_gpnn(
    model: &mut GpnnModel,
    cohort: &Cohort,
    kb: &PhenotypeKB,
    opt: &AdamConfig,
    epochs: usize,
    seed: u64,
) -> Result<GpnnTrainReport> {
    opt.validate()?;
    cohort.validate()?;
    let profiles = cohort
        .profiles
        .as_ref()
        .ok_or_else(|| Error::Data("cohort has no transcriptome profiles".into()))?;
    if profiles.is_empty() {
        return Err(Error::EmptyInput("empty cohort".into()));
    }
    let parts: Vec<GenePartition> = profiles.iter().map(|p| partition_genes(p, kb)).collect();
    let labels: Vec<usize> = cohort.bags.iter().map(|b| b.label).collect();
    let indices = model.all_indices();

    let mut report = GpnnTrainReport {
        epoch_loss: Vec::with_capacity(epochs),
    };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..parts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut window = 0usize;
        for &i in &order {
            let mut g = build_graph(model, &parts[i], Some(labels[i]))?;
            let l_ce = g.l_ce.expect("label provided");
            g.tape.backward(l_ce);
            epoch_loss += g.tape.scalar(l_ce);
            for &(idx, var) in &g.params {
                let grad = g.tape.grad(var);
                model.set.tensors[idx].grad.add_assign(grad);
            }
            window += 1;
            if window == opt.accumulation_steps {
                model.set.scale_grads(1.0 / window as f64);
                adam_step(&mut model.set, &indices, opt)?;
                window = 0;
            }
        }
        if window > 0 {
            model.set.scale_grads(1.0 / window as f64);
            adam_step(&mut model.set, &indices, opt)?;
        }
        report.epoch_loss.push(epoch_loss / parts.len() as f64);
    }
    Ok(report)
}

/// Teacher accuracy on a cohort, for quick sanity reporting.
pub fn gpnn_accuracy(model: &GpnnModel, cohort: &Cohort, kb: &PhenotypeKB) -> Result<f64> {
    let profiles = cohort
        .profiles
        .as_ref()
        .ok_or_else(|| Error::Data("cohort has no transcriptome profiles".into()))?;
    let mut correct = 0usize;
    for (prof, bag) in profiles.iter().zip(&cohort.bags) {
        let part = partition_genes(prof, kb);
        let trace = gpnn_forward(model, &part, None)?;
        let pred = argmax(&trace.logits);
        if pred == bag.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / profiles.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databag::{generate_synthetic_cohort, synthetic_kb, SyntheticConfig};
    use crate::diff::check_gradients;
    use crate::knowledge::{embed_phenotypes, EmbeddingSource};

    fn setup(n: usize, genes: usize, d: usize, c: usize) -> (PhenotypeKB, GpnnModel) {
        let kb = synthetic_kb(n, genes);
        let model = GpnnModel::init(GpnnConfig::new(d, c), &kb, 3).unwrap();
        (kb, model)
    }

    fn part(groups: Vec<Vec<f64>>) -> GenePartition {
        GenePartition { groups, missing: 0 }
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(encoder_hidden(3), 6);
        assert_eq!(encoder_hidden(32), 64);
        assert_eq!(encoder_hidden(100), 64);
    }

    #[test]
    fn init_weights_are_non_negative() {
        let (_, model) = setup(3, 4, 8, 2);
        for enc in &model.encoders {
            for &idx in &[enc[0], enc[2]] {
                assert!(model.set.value(idx).data.iter().all(|v| *v >= 0.0));
            }
        }
        assert!(model
            .set
            .value(model.w_bottleneck)
            .data
            .iter()
            .all(|v| *v > 0.0));
    }

    #[test]
    fn zero_expression_gives_bias_logits() {
        let (_, model) = setup(3, 4, 8, 2);
        let p = part(vec![vec![0.0; 4]; 3]);
        let trace = gpnn_forward(&model, &p, None).unwrap();
        // zero biases → Z = 0 → raw scores 0 → normalized scores 0 → logits = head bias = 0
        assert!(trace.s_hat.iter().all(|v| v.abs() < 1e-12));
        assert!(trace.logits.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gene_permutation_with_matching_weight_rows_is_identity() {
        let (_, mut model) = setup(3, 5, 8, 2);
        let p0 = part(vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0.5; 5],
            vec![1.5; 5],
        ]);
        let before = gpnn_forward(&model, &p0, None).unwrap();
        // reverse genes of group 0 and reverse the rows of its first layer
        let perm: Vec<usize> = (0..5).rev().collect();
        let w1_idx = model.encoders[0][0];
        let old = model.set.value(w1_idx).clone();
        let permuted = Matrix::from_fn(old.rows, old.cols, |r, c| old.get(perm[r], c));
        model.set.tensors[w1_idx].value = permuted;
        let p1 = part(vec![
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
            vec![0.5; 5],
            vec![1.5; 5],
        ]);
        let after = gpnn_forward(&model, &p1, None).unwrap();
        // identical up to summation order
        for (a, b) in before.z.data.iter().zip(&after.z.data) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
        for (a, b) in before.s_hat.iter().zip(&after.s_hat) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn perturbation_outside_gene_set_leaves_row_unchanged() {
        let (_, model) = setup(3, 4, 8, 2);
        let base = part(vec![vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]]);
        let mut bumped = base.clone();
        bumped.groups[2][0] += 10.0;
        let a = gpnn_forward(&model, &base, None).unwrap();
        let b = gpnn_forward(&model, &bumped, None).unwrap();
        assert_eq!(a.z.row(0), b.z.row(0));
        assert_eq!(a.z.row(1), b.z.row(1));
        assert_ne!(a.z.row(2), b.z.row(2));
    }

    #[test]
    fn raw_saliency_monotone_in_own_gene_expression() {
        // Non-negative weights make the pre-activation score of a phenotype
        // non-decreasing in each of its genes.
        let (_, model) = setup(3, 4, 8, 2);
        let mut prev = f64::NEG_INFINITY;
        for level in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let p = part(vec![vec![level; 4], vec![1.0; 4], vec![1.0; 4]]);
            let trace = gpnn_forward(&model, &p, None).unwrap();
            assert!(trace.s_raw[0] >= prev);
            prev = trace.s_raw[0];
        }
    }

    #[test]
    fn gradient_check_on_cross_entropy() {
        let (_, mut model) = setup(3, 4, 6, 2);
        let p = part(vec![
            vec![1.0, 0.3, 2.0, 0.1],
            vec![0.4, 0.4, 0.4, 0.4],
            vec![2.0, 1.0, 0.5, 0.25],
        ]);
        let mut set = model.set.clone();
        let err = check_gradients(
            &mut set,
            |s, acc| {
                model.set = s.clone();
                let mut g = build_graph(&model, &p, Some(1)).unwrap();
                let l = g.l_ce.unwrap();
                if acc {
                    g.tape.backward(l);
                    for &(idx, var) in &g.params {
                        let grad = g.tape.grad(var).clone();
                        s.tensors[idx].grad.add_assign(&grad);
                    }
                }
                g.tape.scalar(l)
            },
            40,
            1e-5,
            9,
        )
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let kb = synthetic_kb(3, 4);
        let u = embed_phenotypes(
            &kb,
            &EmbeddingSource::Pseudo {
                dimension: 8,
                seed: 2,
            },
        )
        .unwrap();
        let mut cfg = SyntheticConfig::new(
            16,
            8,
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]],
        );
        cfg.genes_per_phenotype = 4;
        let cohort = generate_synthetic_cohort(&kb, &u, &cfg).unwrap();

        let opt = AdamConfig {
            accumulation_steps: 8,
            ..AdamConfig::default()
        };
        let mut m1 = GpnnModel::init(GpnnConfig::new(8, 2), &kb, 5).unwrap();
        let r1 = train_gpnn(&mut m1, &cohort, &kb, &opt, 10, 77).unwrap();
        let mut m2 = GpnnModel::init(GpnnConfig::new(8, 2), &kb, 5).unwrap();
        let r2 = train_gpnn(&mut m2, &cohort, &kb, &opt, 10, 77).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        let first = r1.epoch_loss[0];
        let last = *r1.epoch_loss.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
