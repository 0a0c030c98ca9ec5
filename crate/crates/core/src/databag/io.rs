//! Bag, transcriptome, and cohort-manifest file formats.
//!
//! Bag file layout (little-endian): magic `PAB1`, u32 patch count M, u32
//! feature dim d, u32 label, u8 has_planted flag, optionally u32 N followed
//! by N f32 planted-saliency values, then M·d f32 features row-major, then
//! u16 id length and the UTF-8 sample id.

use super::{Cohort, FeatureBag, TranscriptomeProfile};
use crate::diff::Matrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const BAG_MAGIC: &[u8; 4] = b"PAB1";
const MAX_ELEMENTS: u64 = 1 << 30;

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated payload, wanted {} bytes", buf.len()),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}

pub fn write_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(BAG_MAGIC)?;
    f.write_all(&(bag.features.rows as u32).to_le_bytes())?;
    f.write_all(&(bag.features.cols as u32).to_le_bytes())?;
    f.write_all(&(bag.label as u32).to_le_bytes())?;
    match &bag.planted_saliency {
        Some(s) => {
            f.write_all(&[1u8])?;
            f.write_all(&(s.len() as u32).to_le_bytes())?;
            for &v in s {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        None => f.write_all(&[0u8])?,
    }
    for &v in &bag.features.data {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    let id = bag.sample_id.as_bytes();
    f.write_all(&(id.len() as u16).to_le_bytes())?;
    f.write_all(id)?;
    Ok(())
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader::new(std::io::BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {:?}", magic, BAG_MAGIC),
        });
    }
    let m = r.u32()? as u64;
    let d = r.u32()? as u64;
    if m == 0 || d == 0 || m * d > MAX_ELEMENTS {
        return Err(r.fail(format!("implausible shape {m}x{d}")));
    }
    let label = r.u32()? as usize;
    let planted = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u32()? as u64;
            if n > MAX_ELEMENTS {
                return Err(r.fail(format!("implausible saliency length {n}")));
            }
            let mut v = Vec::with_capacity(n as usize);
            for _ in 0..n {
                v.push(r.f32()? as f64);
            }
            Some(v)
        }
        other => return Err(r.fail(format!("bad has_planted flag {other}"))),
    };
    let mut data = Vec::with_capacity((m * d) as usize);
    for _ in 0..m * d {
        data.push(r.f32()? as f64);
    }
    let id_len = r.u16()? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let sample_id =
        String::from_utf8(id).map_err(|e| r.fail(format!("sample id not UTF-8: {e}")))?;
    Ok(FeatureBag {
        sample_id,
        features: Matrix::from_vec(m as usize, d as usize, data)?,
        label,
        planted_saliency: planted,
    })
}

/// Transcriptome file: `sample_id=<string>` header, then `gene\tvalue` lines.
pub fn write_profile(profile: &TranscriptomeProfile, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "sample_id={}", profile.sample_id)?;
    for (gene, value) in &profile.expression {
        writeln!(f, "{gene}\t{value}")?;
    }
    Ok(())
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<TranscriptomeProfile> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty transcriptome file".into(),
    })?;
    let sample_id = header
        .strip_prefix("sample_id=")
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected 'sample_id=<string>' header, got '{header}'"),
        })?
        .to_string();
    let mut expression = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (gene, value) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected 'gene\\tvalue'".into(),
        })?;
        let value: f64 = value.trim().parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("bad expression value: {e}"),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Validation(format!(
                "expression for '{gene}' must be finite and >= 0, got {value}"
            )));
        }
        expression.insert(gene.to_string(), value);
    }
    Ok(TranscriptomeProfile {
        sample_id,
        expression,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    bag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kb_cancer: String,
    class_names: Vec<String>,
    samples: Vec<ManifestSample>,
}

/// Write every bag (and profile, when present) under `dir` and a
/// `manifest.json` tying them together. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("bags"))?;
    if cohort.profiles.is_some() {
        std::fs::create_dir_all(dir.join("profiles"))?;
    }
    let mut samples = Vec::new();
    for (i, bag) in cohort.bags.iter().enumerate() {
        let bag_rel = format!("bags/{}.bag", bag.sample_id);
        write_bag(bag, dir.join(&bag_rel))?;
        let profile_rel = match &cohort.profiles {
            Some(ps) => {
                let rel = format!("profiles/{}.tsv", ps[i].sample_id);
                write_profile(&ps[i], dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        samples.push(ManifestSample {
            bag: bag_rel,
            profile: profile_rel,
        });
    }
    let manifest = Manifest {
        kb_cancer: cohort.kb_cancer.clone(),
        class_names: cohort.class_names.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}

pub fn load_cohort(manifest_path: impl AsRef<Path>) -> Result<Cohort> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut bags = Vec::new();
    let mut profiles = Vec::new();
    let mut any_profile = false;
    for s in &manifest.samples {
        bags.push(read_bag(dir.join(&s.bag))?);
        match &s.profile {
            Some(p) => {
                any_profile = true;
                profiles.push(read_profile(dir.join(p))?);
            }
            None => {
                if any_profile {
                    return Err(Error::Data(
                        "manifest mixes samples with and without profiles".into(),
                    ));
                }
            }
        }
    }
    let cohort = Cohort {
        bags,
        profiles: if any_profile { Some(profiles) } else { None },
        class_names: manifest.class_names,
        kb_cancer: manifest.kb_cancer,
    };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_bag() -> FeatureBag {
        FeatureBag {
            sample_id: "s0".into(),
            features: Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.25).collect()).unwrap(),
            label: 1,
            planted_saliency: Some(vec![0.5, 0.25, 0.25]),
        }
    }

    #[test]
    fn bag_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bag");
        let bag = f32_bag();
        write_bag(&bag, &path).unwrap();
        let back = read_bag(&path).unwrap();
        assert_eq!(bag, back);
        // a second write of the read-back bag is byte-identical
        let path2 = dir.path().join("b.bag");
        write_bag(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bag");
        write_bag(&f32_bag(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match read_bag(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bag");
        write_bag(&f32_bag(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_bag(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn minimal_one_by_one_bag_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bag");
        let bag = FeatureBag {
            sample_id: "tiny".into(),
            features: Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            label: 0,
            planted_saliency: None,
        };
        write_bag(&bag, &path).unwrap();
        assert_eq!(read_bag(&path).unwrap(), bag);
    }

    #[test]
    fn profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let p = TranscriptomeProfile {
            sample_id: "s1".into(),
            expression: [("TP53".to_string(), 1.5), ("FLG".to_string(), 0.25)]
                .into_iter()
                .collect(),
        };
        write_profile(&p, &path).unwrap();
        assert_eq!(read_profile(&path).unwrap(), p);
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = Cohort {
            bags: vec![f32_bag()],
            profiles: Some(vec![TranscriptomeProfile {
                sample_id: "s0".into(),
                expression: [("TP53".to_string(), 2.0)].into_iter().collect(),
            }]),
            class_names: vec!["a".into(), "b".into()],
            kb_cancer: "TEST".into(),
        };
        let manifest = write_cohort(&cohort, dir.path()).unwrap();
        let back = load_cohort(&manifest).unwrap();
        assert_eq!(cohort, back);
    }
}
