//! The student model: cross-attention phenotype feature extraction, cohort
//! alignment against momentum centers, bottleneck saliency, and the subtype
//! classifier heads.

use crate::databag::FeatureBag;
use crate::diff::matrix::{self, Matrix};
use crate::diff::tape::{info_nce_value, Tape, Var};
use crate::diff::ParamSet;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Epsilon used by every layer-norm activation in the models.
pub const LN_EPS: f64 = 1e-5;

/// Negative slope of the LeakyReLU saliency activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LayerNorm,
    LeakyRelu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::LayerNorm => "ln",
            Activation::LeakyRelu => "leaky",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ln" | "layer_norm" => Ok(Activation::LayerNorm),
            "leaky" | "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ScoreLinear,
    FeatureMlp,
}

impl Head {
    pub fn as_str(&self) -> &'static str {
        match self {
            Head::ScoreLinear => "score",
            Head::FeatureMlp => "feature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Head::ScoreLinear),
            "feature" => Ok(Head::FeatureMlp),
            other => Err(Error::config(format!("unknown head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PamilConfig {
    pub dim: usize,
    pub n_phenotypes: usize,
    pub n_classes: usize,
    /// Temperature of the cohort alignment loss.
    pub tau: f64,
    /// Momentum of the center update.
    pub alpha: f64,
    pub activation: Activation,
    pub head: Head,
    /// Hidden width of the feature-variant MLP head.
    pub feature_hidden: usize,
}

impl PamilConfig {
    pub fn new(dim: usize, n_phenotypes: usize, n_classes: usize) -> Self {
        PamilConfig {
            dim,
            n_phenotypes,
            n_classes,
            tau: 0.07,
            alpha: 0.9,
            activation: Activation::LayerNorm,
            head: Head::ScoreLinear,
            feature_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phenotypes < 2 {
            return Err(Error::config("need at least 2 phenotypes"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Parameter tensors plus the non-trainable momentum centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PamilModel {
    pub set: ParamSet,
    /// N x d momentum cluster centers; never receives gradient.
    pub centers: Matrix,
    pub cfg: PamilConfig,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_bottleneck: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub feat: Option<[usize; 4]>,
}

impl PamilModel {
    /// Initialize from the phenotype embeddings: attention projections start
    /// at the identity plus a small Gaussian perturbation, heads start small
    /// with zero bias, and the centers start at the embeddings themselves.
    pub fn init(cfg: PamilConfig, u: &Matrix, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if u.rows != cfg.n_phenotypes || u.cols != cfg.dim {
            return Err(Error::shape(format!(
                "embeddings are {}x{}, config says {}x{}",
                u.rows, u.cols, cfg.n_phenotypes, cfg.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Matrix {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        };
        let near_identity = |g: Matrix| -> Matrix {
            let mut m = g;
            for i in 0..m.rows {
                m.data[i * m.cols + i] += 1.0;
            }
            m
        };
        // Dual basis of the phenotype embeddings: rows ũ_i with ũ_i·u_k = δ_ik.
        // Text embeddings are only near-orthogonal, and their cross
        // correlations are the same order of magnitude as the per-phenotype
        // evidence the attention readout has to pick up, so starting from the
        // raw embeddings scrambles the saliency channels. Whitening the query
        // side makes cross-attention phenotype-selective from the first step.
        let gram = u.matmul_nt(u);
        let dual = solve_spd(&gram, u)?;

        let mut set = ParamSet::new();
        // W_q maps each embedding to its dual vector (u_i·W_q = ũ_i) and acts
        // as the identity on the orthogonal complement of the embedding span.
        let mut wq0 = Matrix::identity(d);
        let proj = u.transpose().matmul(&solve_spd(&gram, u)?);
        let lift = u.transpose().matmul(&solve_spd(&gram, &dual)?);
        wq0 = wq0.sub(&proj).add(&lift);
        let w_q = set.add("w_q", wq0.add(&gauss(d, d, 0.02)));
        let w_k = set.add("w_k", near_identity(gauss(d, d, 0.02)));
        let w_v = set.add("w_v", near_identity(gauss(d, d, 0.02)));
        // The saliency probe starts as a graded ramp over the dual basis
        // (u_i·w_b descends linearly across channels), deterministically
        // breaking the permutation symmetry between saliency channels so they
        // cannot collapse onto identical readouts. Its norm is kept tiny:
        // layer normalization makes the saliency pattern invariant to the
        // probe's scale, while Adam moves every coordinate at the same
        // absolute rate, so a small-norm probe is maximally plastic — the
        // short training schedule can fully reorient it.
        let mut probe = Matrix::zeros(d, 1);
        for i in 0..cfg.n_phenotypes {
            let grade = 0.5 * (cfg.n_phenotypes - 1) as f64 - i as f64;
            for j in 0..d {
                probe.data[j] += grade * dual.get(i, j);
            }
        }
        let norm = probe.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            probe.scale_assign(0.005 / norm);
        }
        let w_bottleneck = set.add("w_bottleneck", probe);
        // Zero-initialized head: logits start at zero and the decision
        // direction is built purely from gradient signal.
        let head_w = set.add(
            "head.weight",
            Matrix::zeros(cfg.n_classes, cfg.n_phenotypes),
        );
        let head_b = set.add("head.bias", Matrix::zeros(cfg.n_classes, 1));
        let feat = if cfg.head == Head::FeatureMlp {
            let h = cfg.feature_hidden;
            Some([
                set.add("feat.w1", gauss(d, h, 0.02)),
                set.add("feat.b1", Matrix::zeros(1, h)),
                set.add("feat.w2", gauss(h, cfg.n_classes, 0.02)),
                set.add("feat.b2", Matrix::zeros(1, cfg.n_classes)),
            ])
        } else {
            None
        };
        Ok(PamilModel {
            set,
            centers: u.clone(),
            cfg,
            w_q,
            w_k,
            w_v,
            w_bottleneck,
            head_w,
            head_b,
            feat,
        })
    }

    /// Indices of the phenotype-extraction tensors (attention + bottleneck).
    pub fn phenotype_indices(&self) -> Vec<usize> {
        vec![self.w_q, self.w_k, self.w_v, self.w_bottleneck]
    }

    /// Indices of the classifier head tensors.
    pub fn head_indices(&self) -> Vec<usize> {
        let mut v = vec![self.head_w, self.head_b];
        if let Some(f) = &self.feat {
            v.extend_from_slice(f);
        }
        v
    }

    pub fn all_indices(&self) -> Vec<usize> {
        let mut v = self.phenotype_indices();
        v.extend(self.head_indices());
        v
    }
}

/// Solve `a·x = b` for square `a` by Gaussian elimination with partial
/// pivoting. Used at initialization to compute the dual basis of the
/// phenotype embeddings; `a` is their Gram matrix.
fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols || a.rows != b.rows {
        return Err(Error::shape(format!(
            "solve needs square system, got {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = a.rows;
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                lhs.get(i, col)
                    .abs()
                    .partial_cmp(&lhs.get(j, col).abs())
                    .unwrap()
            })
            .unwrap();
        if lhs.get(pivot, col).abs() < 1e-12 {
            return Err(Error::Degenerate(
                "phenotype embeddings are linearly dependent".into(),
            ));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = lhs.get(col, j);
                lhs.set(col, j, lhs.get(pivot, j));
                lhs.set(pivot, j, tmp);
            }
            for j in 0..rhs.cols {
                let tmp = rhs.get(col, j);
                rhs.set(col, j, rhs.get(pivot, j));
                rhs.set(pivot, j, tmp);
            }
        }
        let diag = lhs.get(col, col);
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = lhs.get(i, col) / diag;
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = lhs.get(i, j) - factor * lhs.get(col, j);
                lhs.set(i, j, v);
            }
            for j in 0..rhs.cols {
                let v = rhs.get(i, j) - factor * rhs.get(col, j);
                rhs.set(i, j, v);
            }
        }
    }
    for i in 0..n {
        let diag = lhs.get(i, i);
        for j in 0..rhs.cols {
            rhs.set(i, j, rhs.get(i, j) / diag);
        }
    }
    Ok(rhs)
}

/// Cross-attention feature extraction:
/// A = softmax(W_q(U)·W_k(H)ᵀ/√d), V = A·W_v(H).
pub fn extract_phenotype_features(
    h: &Matrix,
    u: &Matrix,
    model: &PamilModel,
) -> Result<(Matrix, Matrix)> {
    check_bag_shape(h, model)?;
    let q = u.matmul(model.set.value(model.w_q));
    let k = h.matmul(model.set.value(model.w_k));
    let scores = q.matmul_nt(&k);
    let a = matrix::softmax_rows(&scores, (model.cfg.dim as f64).sqrt());
    let v = a.matmul(&h.matmul(model.set.value(model.w_v)));
    Ok((v, a))
}

/// InfoNCE between phenotype rows and the (constant) momentum centers.
pub fn alignment_loss(v: &Matrix, centers: &Matrix, tau: f64) -> f64 {
    info_nce_value(v, centers, tau)
}

/// centers <- alpha·centers + (1−alpha)·V
pub fn update_centers(centers: &mut Matrix, v: &Matrix, alpha: f64) {
    assert!(centers.same_shape(v), "center update shape");
    for (c, x) in centers.data.iter_mut().zip(&v.data) {
        *c = alpha * *c + (1.0 - alpha) * x;
    }
}

/// Shared d→1 bottleneck projection per phenotype row, then the activation.
pub fn phenotype_saliency(
    v: &Matrix,
    model: &PamilModel,
    activation: Activation,
) -> Result<Vec<f64>> {
    let raw = v.matmul(model.set.value(model.w_bottleneck));
    match activation {
        Activation::LayerNorm => matrix::layer_norm(&raw.data, LN_EPS),
        Activation::LeakyRelu => Ok(raw
            .data
            .iter()
            .map(|&x| matrix::leaky_relu(x, LEAKY_SLOPE))
            .collect()),
    }
}

/// Classifier heads: affine N→C over saliency scores, or an MLP over the
/// mean-pooled phenotype features.
pub fn classify(s: &[f64], v: &Matrix, model: &PamilModel, head: Head) -> Result<Vec<f64>> {
    match head {
        Head::ScoreLinear => {
            let sv = Matrix::col_vec(s);
            let logits = model
                .set
                .value(model.head_w)
                .matmul(&sv)
                .add(model.set.value(model.head_b));
            Ok(logits.data)
        }
        Head::FeatureMlp => {
            let f = model.feat.ok_or_else(|| {
                Error::config("feature head requested but not configured")
            })?;
            let pooled = v.mean_rows();
            let hidden = pooled
                .matmul(model.set.value(f[0]))
                .add(model.set.value(f[1]))
                .map(|x| x.max(0.0));
            let logits = hidden
                .matmul(model.set.value(f[2]))
                .add(model.set.value(f[3]));
            Ok(logits.data)
        }
    }
}

/// Per-sample record of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub v: Matrix,
    pub a: Matrix,
    pub s: Vec<f64>,
    pub logits: Vec<f64>,
    pub l_ce: f64,
    pub l_contrast: f64,
}

/// Differentiable forward graph; guidance terms are appended by the trainer.
pub struct PamilGraph {
    pub tape: Tape,
    pub v: Var,
    pub a: Var,
    pub s: Var,
    pub logits: Var,
    pub l_ce: Var,
    pub l_contrast: Var,
    /// (tensor index in the model's set, tape var) for gradient readout.
    pub params: Vec<(usize, Var)>,
}

fn check_bag_shape(h: &Matrix, model: &PamilModel) -> Result<()> {
    if h.cols != model.cfg.dim {
        return Err(Error::shape(format!(
            "bag feature dim {} does not match model dim {}",
            h.cols, model.cfg.dim
        )));
    }
    Ok(())
}

/// Build the full differentiable forward pass for one bag.
pub fn build_graph(
    model: &PamilModel,
    h: &Matrix,
    label: usize,
    u: &Matrix,
) -> Result<PamilGraph> {
    check_bag_shape(h, model)?;
    if label >= model.cfg.n_classes {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            model.cfg.n_classes
        )));
    }
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut leaf = |tape: &mut Tape, idx: usize| -> Var {
        let var = tape.leaf(model.set.value(idx).clone());
        params.push((idx, var));
        var
    };
    let hv = tape.leaf(h.clone());
    let uv = tape.leaf(u.clone());
    let wq = leaf(&mut tape, model.w_q);
    let wk = leaf(&mut tape, model.w_k);
    let wv = leaf(&mut tape, model.w_v);
    let wb = leaf(&mut tape, model.w_bottleneck);

    let q = tape.matmul(uv, wq);
    let k = tape.matmul(hv, wk);
    let scores = tape.matmul_nt(q, k);
    let a = tape.softmax_rows(scores, (model.cfg.dim as f64).sqrt());
    let projected = tape.matmul(hv, wv);
    let v = tape.matmul(a, projected);

    let raw = tape.matmul(v, wb);
    let s = match model.cfg.activation {
        Activation::LayerNorm => tape.layer_norm(raw, LN_EPS),
        Activation::LeakyRelu => tape.leaky_relu(raw, LEAKY_SLOPE),
    };

    let logits = match model.cfg.head {
        Head::ScoreLinear => {
            let hw = leaf(&mut tape, model.head_w);
            let hb = leaf(&mut tape, model.head_b);
            let affine = tape.matmul(hw, s);
            tape.add(affine, hb)
        }
        Head::FeatureMlp => {
            let f = model
                .feat
                .ok_or_else(|| Error::config("feature head requested but not configured"))?;
            let w1 = leaf(&mut tape, f[0]);
            let b1 = leaf(&mut tape, f[1]);
            let w2 = leaf(&mut tape, f[2]);
            let b2 = leaf(&mut tape, f[3]);
            let pooled = tape.mean_rows(v);
            let lin1 = tape.matmul(pooled, w1);
            let pre = tape.add(lin1, b1);
            let hidden = tape.relu(pre);
            let lin2 = tape.matmul(hidden, w2);
            tape.add(lin2, b2)
        }
    };

    let l_ce = tape.cross_entropy(logits, label);
    let l_contrast = tape.info_nce_rows(v, model.centers.clone(), model.cfg.tau);

    Ok(PamilGraph {
        tape,
        v,
        a,
        s,
        logits,
        l_ce,
        l_contrast,
        params,
    })
}

/// Pure forward pass producing a value-level trace; no state is mutated.
pub fn pamil_forward(model: &PamilModel, bag: &FeatureBag, u: &Matrix) -> Result<ForwardTrace> {
    let graph = build_graph(model, &bag.features, bag.label, u)?;
    Ok(ForwardTrace {
        v: graph.tape.value(graph.v).clone(),
        a: graph.tape.value(graph.a).clone(),
        s: graph.tape.value(graph.s).data.clone(),
        logits: graph.tape.value(graph.logits).data.clone(),
        l_ce: graph.tape.scalar(graph.l_ce),
        l_contrast: graph.tape.scalar(graph.l_contrast),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{embed_phenotypes, EmbeddingSource};

    fn setup(n: usize, d: usize, c: usize) -> (PamilModel, Matrix) {
        let kb = crate::databag::synthetic_kb(n, 3);
        let u = embed_phenotypes(
            &kb,
            &EmbeddingSource::Pseudo {
                dimension: d,
                seed: 5,
            },
        )
        .unwrap();
        let model = PamilModel::init(PamilConfig::new(d, n, c), &u, 11).unwrap();
        (model, u)
    }

    fn pseudo_bag(m: usize, d: usize, salt: u64) -> Matrix {
        let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        Matrix::from_fn(m, d, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn single_patch_attention_is_all_ones() {
        let (model, u) = setup(3, 8, 2);
        let h = pseudo_bag(1, 8, 1);
        let (v, a) = extract_phenotype_features(&h, &u, &model).unwrap();
        assert_eq!(a.rows, 3);
        assert_eq!(a.cols, 1);
        for val in &a.data {
            assert!((val - 1.0).abs() < 1e-12);
        }
        // every V row equals W_v(h1)
        let wv_h = h.matmul(model.set.value(model.w_v));
        for r in 0..v.rows {
            for c in 0..v.cols {
                assert!((v.get(r, c) - wv_h.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_v_is_a_times_projection() {
        let (model, u) = setup(4, 8, 2);
        let h = pseudo_bag(6, 8, 2);
        let (v, a) = extract_phenotype_features(&h, &u, &model).unwrap();
        for r in 0..a.rows {
            let sum: f64 = a.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let expect = a.matmul(&h.matmul(model.set.value(model.w_v)));
        assert_eq!(v, expect);
    }

    #[test]
    fn alignment_loss_hand_cases() {
        // orthonormal rows equal to centers, tau 1 → -log(e/(e+1)) per row
        let v = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = alignment_loss(&v, &v.clone(), 1.0);
        let expect = -((1.0f64.exp()) / (1.0f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((expect - 0.31326).abs() < 1e-5);

        // rows orthogonal to both centers → uniform softmax → ln 2 per row
        let v2 = Matrix::from_vec(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let centers = Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let loss2 = alignment_loss(&v2, &centers, 1.0);
        assert!((loss2 - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_decreases_with_diagonal_similarity() {
        let centers = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let weak = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let strong = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(
            alignment_loss(&strong, &centers, 1.0) < alignment_loss(&weak, &centers, 1.0)
        );
    }

    #[test]
    fn center_update_fixed_points_and_closed_form() {
        let v = pseudo_bag(3, 4, 5);
        let c0 = pseudo_bag(3, 4, 6);

        let mut c = c0.clone();
        update_centers(&mut c, &v, 1.0);
        assert_eq!(c, c0);

        let mut c = c0.clone();
        update_centers(&mut c, &v, 0.0);
        assert_eq!(c, v);

        // alpha=0.9, constant V over t steps → 0.9^t·c0 + (1−0.9^t)·V
        let mut c = c0.clone();
        for _ in 0..10 {
            update_centers(&mut c, &v, 0.9);
        }
        let w = 0.9f64.powi(10);
        for i in 0..c.data.len() {
            let expect = w * c0.data[i] + (1.0 - w) * v.data[i];
            assert!((c.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_layer_norm_of_identical_rows_is_zero() {
        let (model, _) = setup(3, 8, 2);
        let row = pseudo_bag(1, 8, 9);
        let v = Matrix::from_fn(3, 8, |_, c| row.data[c]);
        let s = phenotype_saliency(&v, &model, Activation::LayerNorm).unwrap();
        for x in s {
            assert!(x.abs() < 1e-9);
        }
    }

    #[test]
    fn leaky_relu_definition() {
        assert_eq!(matrix::leaky_relu(2.0, LEAKY_SLOPE), 2.0);
        assert_eq!(matrix::leaky_relu(-2.0, LEAKY_SLOPE), -0.02);
    }

    #[test]
    fn saliency_ln_mean_zero_any_v() {
        let (model, _) = setup(5, 8, 2);
        for salt in 0..5 {
            let v = pseudo_bag(5, 8, 100 + salt);
            let s = phenotype_saliency(&v, &model, Activation::LayerNorm).unwrap();
            let mean: f64 = s.iter().sum::<f64>() / s.len() as f64;
            assert!(mean.abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let (mut model, _) = setup(3, 8, 4);
        model.set.tensors[model.head_w].value.fill(0.0);
        model.set.tensors[model.head_b].value.fill(0.0);
        let s = vec![0.3, -0.1, 0.7];
        let v = pseudo_bag(3, 8, 3);
        let logits = classify(&s, &v, &model, Head::ScoreLinear).unwrap();
        assert!(logits.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn score_head_is_affine_in_s() {
        let (mut model, _) = setup(3, 8, 2);
        model.set.tensors[model.head_b].value.fill(0.0);
        let v = pseudo_bag(3, 8, 4);
        let s1 = vec![1.0, 0.0, -1.0];
        let s2 = vec![0.5, 2.0, 0.25];
        let a = 0.3;
        let mix: Vec<f64> = s1
            .iter()
            .zip(&s2)
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let l1 = classify(&s1, &v, &model, Head::ScoreLinear).unwrap();
        let l2 = classify(&s2, &v, &model, Head::ScoreLinear).unwrap();
        let lm = classify(&mix, &v, &model, Head::ScoreLinear).unwrap();
        for i in 0..2 {
            assert!((lm[i] - (a * l1[i] + (1.0 - a) * l2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_head_without_config_errors() {
        let (model, _) = setup(3, 8, 2);
        let v = pseudo_bag(3, 8, 4);
        assert!(classify(&[0.0; 3], &v, &model, Head::FeatureMlp).is_err());
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let (model, u) = setup(3, 8, 2);
        let bag = FeatureBag {
            sample_id: "s".into(),
            features: pseudo_bag(5, 8, 8),
            label: 1,
            planted_saliency: None,
        };
        let t1 = pamil_forward(&model, &bag, &u).unwrap();
        let t2 = pamil_forward(&model, &bag, &u).unwrap();
        assert_eq!(t1, t2);
        for r in 0..t1.a.rows {
            let sum: f64 = t1.a.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn alignment_loss_rotation_invariance() {
        // Apply the same random orthogonal rotation (Givens product) to V and
        // centers; the loss depends only on inner products.
        let v = pseudo_bag(3, 4, 31);
        let c = pseudo_bag(3, 4, 32);
        let before = alignment_loss(&v, &c, 0.5);
        let mut rot = Matrix::identity(4);
        for (i, j, theta) in [(0usize, 1usize, 0.7f64), (1, 3, -1.2), (0, 2, 2.1)] {
            let mut g = Matrix::identity(4);
            g.set(i, i, theta.cos());
            g.set(j, j, theta.cos());
            g.set(i, j, -theta.sin());
            g.set(j, i, theta.sin());
            rot = rot.matmul(&g);
        }
        let after = alignment_loss(&v.matmul(&rot), &c.matmul(&rot), 0.5);
        assert!((before - after).abs() <= 1e-8);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (mut model, u) = setup(3, 6, 2);
        let h = pseudo_bag(4, 6, 12);
        let run = |model: &PamilModel| -> (f64, Vec<(usize, Matrix)>) {
            let mut g = build_graph(model, &h, 1, &u).unwrap();
            let half = g.tape.scale(g.l_contrast, 0.5);
            let total = g.tape.add(g.l_ce, half);
            g.tape.backward(total);
            let grads = g
                .params
                .iter()
                .map(|&(idx, var)| (idx, g.tape.grad(var).clone()))
                .collect();
            (g.tape.scalar(total), grads)
        };
        let (_, grads) = run(&model);
        let eps = 1e-6;
        let mut max_rel = 0.0f64;
        for (idx, grad) in &grads {
            for j in (0..grad.data.len()).step_by(7) {
                let orig = model.set.tensors[*idx].value.data[j];
                model.set.tensors[*idx].value.data[j] = orig + eps;
                let (fp, _) = run(&model);
                model.set.tensors[*idx].value.data[j] = orig - eps;
                let (fm, _) = run(&model);
                model.set.tensors[*idx].value.data[j] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = grad.data[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-5, "max rel err {max_rel}");
    }
}
