//! Python bindings for the pamil crate.
//!
//! The module mirrors the Rust API at a coarse grain: knowledge bases and
//! their embeddings, synthetic cohorts, the transcriptome teacher, the
//! attention student, and the metric/attribution helpers. Heavy lifting
//! stays in Rust; the bindings move plain lists and dicts across the
//! boundary.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pamil::databag::{
    generate_synthetic_cohort, load_cohort, stratified_kfold, synthetic_kb, write_cohort,
    SyntheticConfig,
};
use pamil::diff::Matrix;
use pamil::explain::{leakage_score, phenotype_contributions_shapley};
use pamil::gpnn::{gpnn_accuracy, train_gpnn, GpnnConfig, GpnnModel};
use pamil::knowledge::{embed_phenotypes, load_kb, save_kb, EmbeddingSource, PhenotypeKB};
use pamil::pamil::{pamil_forward, Activation, PamilConfig, PamilModel};
use pamil::trainer::{
    predict_student, train_joint, train_sequential, GuidanceConfig, GuidanceObjective,
    TrainerConfig,
};

fn err(e: pamil::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows)
        .map(|i| m.data[i * m.cols..(i + 1) * m.cols].to_vec())
        .collect()
}

/// Phenotype knowledge base: names, descriptions, gene sets.
#[pyclass(name = "KnowledgeBase", skip_from_py_object)]
#[derive(Clone)]
struct PyKnowledgeBase {
    inner: PhenotypeKB,
}

#[pymethods]
impl PyKnowledgeBase {
    /// Build the deterministic synthetic knowledge base.
    #[staticmethod]
    #[pyo3(signature = (n_phenotypes=4, genes_per_phenotype=6))]
    fn synthetic(n_phenotypes: usize, genes_per_phenotype: usize) -> Self {
        PyKnowledgeBase {
            inner: synthetic_kb(n_phenotypes, genes_per_phenotype),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyKnowledgeBase {
            inner: load_kb(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_kb(&self.inner, path).map_err(err)
    }

    #[getter]
    fn cancer(&self) -> String {
        self.inner.cancer.clone()
    }

    #[getter]
    fn phenotype_names(&self) -> Vec<String> {
        self.inner.phenotypes.iter().map(|p| p.name.clone()).collect()
    }

    fn genes(&self, phenotype: &str) -> PyResult<Vec<String>> {
        self.inner
            .phenotype(phenotype)
            .map(|p| p.genes.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown phenotype '{phenotype}'")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Deterministic pseudo-embeddings of the phenotype descriptions
    /// (unit-norm rows, one per phenotype).
    #[pyo3(signature = (dim, seed=4))]
    fn embed(&self, dim: usize, seed: u64) -> PyResult<PyEmbeddings> {
        let u = embed_phenotypes(&self.inner, &EmbeddingSource::Pseudo { dimension: dim, seed })
            .map_err(err)?;
        Ok(PyEmbeddings { inner: u })
    }
}

/// N x d phenotype embedding matrix.
#[pyclass(name = "Embeddings", skip_from_py_object)]
#[derive(Clone)]
struct PyEmbeddings {
    inner: Matrix,
}

#[pymethods]
impl PyEmbeddings {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner)
    }
}

/// A cohort of patch-feature bags with labels and optional transcriptomes.
#[pyclass(name = "Cohort", skip_from_py_object)]
#[derive(Clone)]
struct PyCohort {
    inner: pamil::databag::Cohort,
}

#[pymethods]
impl PyCohort {
    /// Generate a planted-truth synthetic cohort against a knowledge base
    /// and its embeddings. `profiles` holds one phenotype mixture row per
    /// class; patch counts are drawn uniformly from `patches`.
    #[staticmethod]
    #[pyo3(signature = (kb, embeddings, profiles, n_per_class, noise_sigma=0.3,
                        patches=(60, 100), seed=1, class_signal=None))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        kb: &PyKnowledgeBase,
        embeddings: &PyEmbeddings,
        profiles: Vec<Vec<f64>>,
        n_per_class: usize,
        noise_sigma: f64,
        patches: (usize, usize),
        seed: u64,
        class_signal: Option<f64>,
    ) -> PyResult<Self> {
        let mut cfg = SyntheticConfig::new(n_per_class, embeddings.inner.cols, profiles);
        cfg.noise_sigma = noise_sigma;
        cfg.patches_min = patches.0;
        cfg.patches_max = patches.1;
        cfg.seed = seed;
        cfg.class_signal = class_signal;
        if let Some(p) = kb.inner.phenotypes.first() {
            cfg.genes_per_phenotype = p.genes.len();
        }
        let cohort = generate_synthetic_cohort(&kb.inner, &embeddings.inner, &cfg).map_err(err)?;
        Ok(PyCohort { inner: cohort })
    }

    #[staticmethod]
    fn load(manifest_path: &str) -> PyResult<Self> {
        Ok(PyCohort {
            inner: load_cohort(manifest_path).map_err(err)?,
        })
    }

    /// Write the cohort under `dir`; returns the manifest path.
    fn save(&self, dir: &str) -> PyResult<String> {
        let path = write_cohort(&self.inner, dir).map_err(err)?;
        Ok(path.display().to_string())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.bags.iter().map(|b| b.label).collect()
    }

    fn sample_ids(&self) -> Vec<String> {
        self.inner.bags.iter().map(|b| b.sample_id.clone()).collect()
    }

    /// Ground-truth phenotype proportions per sample (None for real data).
    fn planted_saliency(&self) -> Vec<Option<Vec<f64>>> {
        self.inner
            .bags
            .iter()
            .map(|b| b.planted_saliency.clone())
            .collect()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        for &i in &indices {
            if i >= self.inner.len() {
                return Err(PyValueError::new_err(format!("index {i} out of range")));
            }
        }
        Ok(PyCohort {
            inner: self.inner.subset(&indices),
        })
    }

    /// Deterministic stratified k-fold split: list of (train, test) indices.
    #[pyo3(signature = (k, seed=0))]
    fn kfold(&self, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
        stratified_kfold(&self.inner, k, seed).map_err(err)
    }
}

/// Gene-set MLP teacher over transcriptomes.
#[pyclass(name = "Teacher")]
struct PyTeacher {
    inner: GpnnModel,
    /// Mean training loss per epoch.
    #[pyo3(get)]
    loss_curve: Vec<f64>,
}

#[pymethods]
impl PyTeacher {
    /// Train a fresh teacher on a cohort's transcriptomes.
    #[staticmethod]
    #[pyo3(signature = (kb, cohort, dim, epochs=30, seed=0))]
    fn train(
        kb: &PyKnowledgeBase,
        cohort: &PyCohort,
        dim: usize,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = GpnnConfig::new(dim, cohort.inner.n_classes());
        let mut model = GpnnModel::init(cfg, &kb.inner, seed).map_err(err)?;
        let report = train_gpnn(
            &mut model,
            &cohort.inner,
            &kb.inner,
            &pamil::diff::AdamConfig::default(),
            epochs,
            seed,
        )
        .map_err(err)?;
        Ok(PyTeacher {
            inner: model,
            loss_curve: report.epoch_loss,
        })
    }

    fn accuracy(&self, cohort: &PyCohort, kb: &PyKnowledgeBase) -> PyResult<f64> {
        gpnn_accuracy(&self.inner, &cohort.inner, &kb.inner).map_err(err)
    }
}

/// Cross-attention multiple-instance student.
#[pyclass(name = "Student")]
struct PyStudent {
    model: PamilModel,
    u: Matrix,
}

#[pymethods]
impl PyStudent {
    /// Initialize from phenotype embeddings. `activation` is "ln" or
    /// "leaky"; the number of phenotypes and the feature dimension come
    /// from the embedding shape.
    #[new]
    #[pyo3(signature = (embeddings, n_classes, activation="ln", seed=0))]
    fn new(
        embeddings: &PyEmbeddings,
        n_classes: usize,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let u = embeddings.inner.clone();
        let mut cfg = PamilConfig::new(u.cols, u.rows, n_classes);
        cfg.activation = Activation::parse(activation).map_err(err)?;
        let model = PamilModel::init(cfg, &u, seed).map_err(err)?;
        Ok(PyStudent { model, u })
    }

    /// Train on a cohort, optionally distilling from a teacher.
    ///
    /// `guidance` is "off", "feat", "logit", or "both"; `objective` is
    /// "l2", "l1", or "cl". With `sequential=True` the extractor and head
    /// are fit in two phases instead of jointly. Returns the per-epoch
    /// loss curves.
    #[pyo3(signature = (cohort, kb, teacher=None, epochs=20, guidance="off",
                        objective="l2", lam=5.0, sequential=false, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        cohort: &PyCohort,
        kb: &PyKnowledgeBase,
        teacher: Option<&PyTeacher>,
        epochs: usize,
        guidance: &str,
        objective: &str,
        lam: f64,
        sequential: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut g = GuidanceConfig::both(GuidanceObjective::parse(objective).map_err(err)?);
        g.parse_mode(guidance).map_err(err)?;
        g.lambda = lam;
        let mut cfg = TrainerConfig::new(epochs, g);
        cfg.seed = seed;
        let t = teacher.map(|t| &t.inner);
        let report = if sequential {
            let (p1, p2) = train_sequential(
                &mut self.model,
                t,
                &cohort.inner,
                &kb.inner,
                &self.u,
                &cfg,
            )
            .map_err(err)?;
            let mut merged = p1;
            merged.epoch_total.extend(p2.epoch_total);
            merged.epoch_ce.extend(p2.epoch_ce);
            merged.epoch_contrast.extend(p2.epoch_contrast);
            merged.epoch_guidance.extend(p2.epoch_guidance);
            merged
        } else {
            train_joint(&mut self.model, t, &cohort.inner, &kb.inner, &self.u, &cfg)
                .map_err(err)?
        };
        let out = PyDict::new(py);
        out.set_item("total", report.epoch_total)?;
        out.set_item("ce", report.epoch_ce)?;
        out.set_item("contrast", report.epoch_contrast)?;
        out.set_item("guidance", report.epoch_guidance)?;
        Ok(out)
    }

    /// Predict over a cohort: labels, argmax predictions, per-class
    /// probabilities, and per-sample phenotype saliency.
    fn predict<'py>(&self, py: Python<'py>, cohort: &PyCohort) -> PyResult<Bound<'py, PyDict>> {
        let p = predict_student(&self.model, &cohort.inner, &self.u).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("labels", p.labels)?;
        out.set_item("preds", p.preds)?;
        out.set_item("probs", p.probs)?;
        out.set_item("saliency", p.saliency)?;
        Ok(out)
    }

    /// Full forward trace for one sample: attention matrix, pooled
    /// features, saliency vector, and class logits.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        cohort: &PyCohort,
        index: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let bag = cohort
            .inner
            .bags
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let trace = pamil_forward(&self.model, bag, &self.u).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("attention", matrix_to_rows(&trace.a))?;
        out.set_item("pooled", matrix_to_rows(&trace.v))?;
        out.set_item("saliency", trace.s)?;
        out.set_item("logits", trace.logits)?;
        Ok(out)
    }

    /// Shapley attribution of one class logit over the saliency channels,
    /// relative to a baseline saliency vector.
    fn explain(&self, saliency: Vec<f64>, baseline: Vec<f64>, class: usize) -> PyResult<Vec<f64>> {
        phenotype_contributions_shapley(&self.model, &saliency, &baseline, class).map_err(err)
    }
}

/// Classification metrics from labels, predictions, and probabilities.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    labels: Vec<usize>,
    preds: Vec<usize>,
    probs: Vec<Vec<f64>>,
    n_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = pamil::metrics::evaluate(&labels, &preds, &probs, n_classes).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", r.accuracy)?;
    out.set_item("balanced_accuracy", r.balanced_accuracy)?;
    out.set_item("auc", r.auc)?;
    out.set_item("weighted_f1", r.weighted_f1)?;
    out.set_item("confusion", r.confusion)?;
    Ok(out)
}

/// Spearman rank correlation between two equal-length vectors.
#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    pamil::metrics::spearman(&a, &b).map_err(err)
}

/// Binary ROC AUC from labels in {0, 1} and real-valued scores.
#[pyfunction]
fn roc_auc(labels: Vec<usize>, scores: Vec<f64>) -> PyResult<f64> {
    pamil::metrics::roc_auc(&labels, &scores).map_err(err)
}

/// Per-channel class-conditional divergence of saliency plus its
/// concentration index (max / mean over channels).
#[pyfunction]
fn leakage(saliency: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> PyResult<(Vec<f64>, f64)> {
    let r = leakage_score(&saliency, &labels, n_classes).map_err(err)?;
    Ok((r.per_phenotype_jsd, r.concentration))
}

/// Default per-class phenotype mixture profiles (interpolated ramps).
#[pyfunction]
#[pyo3(signature = (n_classes, n_phenotypes, class_independent=false))]
fn default_profiles(
    n_classes: usize,
    n_phenotypes: usize,
    class_independent: bool,
) -> Vec<Vec<f64>> {
    pamil::cli::default_profiles(n_classes, n_phenotypes, class_independent)
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKnowledgeBase>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyCohort>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyStudent>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(leakage, m)?)?;
    m.add_function(wrap_pyfunction!(default_profiles, m)?)?;
    Ok(())
}
