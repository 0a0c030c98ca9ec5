//! Phenotype knowledge base: schema, loader/validator, and the frozen
//! text-embedding provider standing in for a real text encoder.

use crate::diff::Matrix;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One phenotype: name, morphological description, associated gene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    pub name: String,
    pub description: String,
    pub genes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeKB {
    pub cancer: String,
    pub phenotypes: Vec<Phenotype>,
}

impl PhenotypeKB {
    pub fn len(&self) -> usize {
        self.phenotypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phenotypes.is_empty()
    }

    pub fn phenotype(&self, name: &str) -> Option<&Phenotype> {
        self.phenotypes.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phenotypes.len() < 2 {
            return Err(Error::Validation(format!(
                "knowledge base needs at least 2 phenotypes, got {}",
                self.phenotypes.len()
            )));
        }
        let mut names = HashSet::new();
        for p in &self.phenotypes {
            if p.name.trim().is_empty() {
                return Err(Error::Validation("phenotype with empty name".into()));
            }
            if !names.insert(p.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate phenotype name '{}'",
                    p.name
                )));
            }
            if p.genes.is_empty() {
                return Err(Error::Validation(format!(
                    "phenotype '{}' has an empty gene set",
                    p.name
                )));
            }
            let mut genes = HashSet::new();
            for g in &p.genes {
                if !genes.insert(g.as_str()) {
                    return Err(Error::Validation(format!(
                        "phenotype '{}' lists gene '{}' twice",
                        p.name, g
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load and validate a knowledge base file (JSON with `cancer` and
/// `phenotypes` top-level keys).
pub fn load_kb(path: impl AsRef<Path>) -> Result<PhenotypeKB> {
    let text = std::fs::read_to_string(path)?;
    let kb: PhenotypeKB = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    kb.validate()?;
    Ok(kb)
}

pub fn save_kb(kb: &PhenotypeKB, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(kb).expect("kb serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// Where phenotype text embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    /// Deterministic seeded pseudo-embeddings: hash the prompt string to a
    /// Gaussian vector and normalize to unit length.
    Pseudo { dimension: usize, seed: u64 },
    /// Embeddings read from a file keyed by phenotype name.
    FileBacked { dimension: usize, path: std::path::PathBuf },
}

impl EmbeddingSource {
    pub fn dimension(&self) -> usize {
        match self {
            EmbeddingSource::Pseudo { dimension, .. } => *dimension,
            EmbeddingSource::FileBacked { dimension, .. } => *dimension,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension() < 2 {
            return Err(Error::config("embedding dimension must be >= 2"));
        }
        Ok(())
    }
}

/// Embed every phenotype; row i of the result is the unit-norm embedding of
/// phenotype i. The prompt string is `name, description`.
pub fn embed_phenotypes(kb: &PhenotypeKB, src: &EmbeddingSource) -> Result<Matrix> {
    src.validate()?;
    let d = src.dimension();
    let mut u = Matrix::zeros(kb.len(), d);
    match src {
        EmbeddingSource::Pseudo { seed, .. } => {
            for (i, p) in kb.phenotypes.iter().enumerate() {
                let prompt = format!("{}, {}", p.name, p.description);
                let row = pseudo_embedding(&prompt, *seed, d);
                u.row_mut(i).copy_from_slice(&row);
            }
        }
        EmbeddingSource::FileBacked { path, .. } => {
            let table = read_embedding_file(path, d)?;
            for (i, p) in kb.phenotypes.iter().enumerate() {
                let row = table
                    .iter()
                    .find(|(name, _)| name == &p.name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| {
                        Error::Lookup(format!("embedding file has no entry for '{}'", p.name))
                    })?;
                u.row_mut(i).copy_from_slice(row);
            }
        }
    }
    Ok(u)
}

/// Seeded hash-to-Gaussian-to-normalize embedding of a prompt string.
fn pseudo_embedding(prompt: &str, seed: u64, d: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key));
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Embedding file: header `d=<int>`, then `<name>\t<comma-separated floats>`.
fn read_embedding_file(path: &Path, expect_d: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty embedding file".into(),
        })??;
    let d: usize = header
        .strip_prefix("d=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected 'd=<int>' header, got '{header}'"),
        })?;
    if d != expect_d {
        return Err(Error::shape(format!(
            "embedding file has dimension {d}, expected {expect_d}"
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 2,
            msg: "expected '<name>\\t<floats>'".into(),
        })?;
        let vals: Vec<f64> = rest
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: lineno + 2,
                msg: e.to_string(),
            })?;
        if vals.len() != d {
            return Err(Error::shape(format!(
                "embedding for '{name}' has {} values, expected {d}",
                vals.len()
            )));
        }
        out.push((name.to_string(), vals));
    }
    Ok(out)
}

pub fn write_embedding_file(
    path: impl AsRef<Path>,
    d: usize,
    entries: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "d={d}")?;
    for (name, vals) in entries {
        let joined: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{name}\t{}", joined.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_kb() -> PhenotypeKB {
        PhenotypeKB {
            cancer: "TEST".into(),
            phenotypes: vec![
                Phenotype {
                    name: "Necrosis".into(),
                    description: "dead tissue regions".into(),
                    genes: vec!["TP53".into(), "TNF".into()],
                },
                Phenotype {
                    name: "Keratinization".into(),
                    description: "keratin pearls".into(),
                    genes: vec!["FLG".into(), "TP53".into()],
                },
            ],
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut kb = tiny_kb();
        kb.phenotypes[1].name = "Necrosis".into();
        assert!(kb.validate().is_err());
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.json");
        let kb = tiny_kb();
        save_kb(&kb, &path).unwrap();
        let loaded = load_kb(&path).unwrap();
        assert_eq!(kb, loaded);
    }

    #[test]
    fn pseudo_embeddings_deterministic_and_unit_norm() {
        let kb = tiny_kb();
        let src = EmbeddingSource::Pseudo {
            dimension: 16,
            seed: 7,
        };
        let u1 = embed_phenotypes(&kb, &src).unwrap();
        let u2 = embed_phenotypes(&kb, &src).unwrap();
        assert_eq!(u1, u2);
        for r in 0..u1.rows {
            let norm: f64 = u1.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pseudo_embeddings_near_orthogonal_over_seeds() {
        // Hash-derived Gaussian directions in d=64 should rarely have high cosine.
        let kb = tiny_kb();
        let mut high = 0;
        for seed in 0..1000u64 {
            let src = EmbeddingSource::Pseudo {
                dimension: 64,
                seed,
            };
            let u = embed_phenotypes(&kb, &src).unwrap();
            let cos: f64 = u.row(0).iter().zip(u.row(1)).map(|(a, b)| a * b).sum();
            if cos.abs() >= 0.5 {
                high += 1;
            }
        }
        assert!(high <= 10, "{high} of 1000 seeds exceeded |cos| 0.5");
    }

    #[test]
    fn shipped_knowledge_bases_load_and_validate() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/kb");
        let nsclc = load_kb(format!("{root}/nsclc.json")).unwrap();
        assert_eq!(nsclc.cancer, "NSCLC");
        assert_eq!(nsclc.len(), 17);
        let ker = nsclc.phenotype("Keratinization").unwrap();
        assert!(ker.genes.iter().any(|g| g == "FLG"));

        let rcc = load_kb(format!("{root}/rcc.json")).unwrap();
        assert_eq!(rcc.cancer, "RCC");
        assert_eq!(rcc.len(), 16);
        assert!(rcc.phenotype("Clear Cytoplasm").is_some());
    }

    #[test]
    fn file_backed_embeddings_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let kb = tiny_kb();
        write_embedding_file(
            &path,
            3,
            &[("Necrosis".into(), vec![1.0, 0.0, 0.0])],
        )
        .unwrap();
        let src = EmbeddingSource::FileBacked {
            dimension: 3,
            path: path.clone(),
        };
        assert!(matches!(
            embed_phenotypes(&kb, &src),
            Err(Error::Lookup(_))
        ));
        write_embedding_file(
            &path,
            3,
            &[
                ("Necrosis".into(), vec![1.0, 0.0, 0.0]),
                ("Keratinization".into(), vec![0.0, 1.0, 0.0]),
            ],
        )
        .unwrap();
        let u = embed_phenotypes(&kb, &src).unwrap();
        assert_eq!(u.get(1, 1), 1.0);
    }
}
