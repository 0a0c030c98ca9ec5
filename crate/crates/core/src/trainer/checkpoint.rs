//! Binary checkpoints for both models.
//!
//! Layout (little-endian): 4-byte magic (`PAMC` student / `GPNC` teacher),
//! u32 format version, u32 record count, then named f64 tensor records
//! (`u16` name length, name bytes, u64 rows, u64 cols, payload), and finally
//! a u32-length-prefixed JSON config block. Optimizer state rides along as
//! `<name>.adam_m` / `<name>.adam_v` / `<name>.step` records so training can
//! resume bitwise-identically.

use crate::diff::matrix::Matrix;
use crate::diff::optim::{ParamSet, ParamTensor};
use crate::error::{Error, Result};
use crate::gpnn::{GpnnConfig, GpnnModel};
use crate::pamil::{Head, PamilConfig, PamilModel};
use std::io::{Read, Write};
use std::path::Path;

pub const PAMIL_MAGIC: &[u8; 4] = b"PAMC";
pub const GPNN_MAGIC: &[u8; 4] = b"GPNC";
pub const VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn record(&mut self, name: &str, m: &Matrix) -> Result<()> {
        let bytes = name.as_bytes();
        self.inner.write_all(&(bytes.len() as u16).to_le_bytes())?;
        self.inner.write_all(bytes)?;
        self.inner.write_all(&(m.rows as u64).to_le_bytes())?;
        self.inner.write_all(&(m.cols as u64).to_le_bytes())?;
        for v in &m.data {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("unexpected end of checkpoint: {e}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Matrix)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| self.fail("tensor name is not valid UTF-8"))?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 30) {
            return Err(self.fail(format!("implausible tensor shape {rows}x{cols}")));
        }
        let payload = self.bytes(rows * cols * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Matrix { rows, cols, data }))
    }
}

fn write_set<W: Write>(w: &mut Writer<W>, set: &ParamSet) -> Result<()> {
    for t in &set.tensors {
        w.record(&t.name, &t.value)?;
        w.record(&format!("{}.adam_m", t.name), &t.adam_m)?;
        w.record(&format!("{}.adam_v", t.name), &t.adam_v)?;
        w.record(
            &format!("{}.step", t.name),
            &Matrix::from_vec(1, 1, vec![t.step_count as f64]).unwrap(),
        )?;
    }
    Ok(())
}

/// Records come in groups of four per tensor, in save order.
fn read_set<R: Read>(r: &mut Reader<R>, n_records: usize) -> Result<ParamSet> {
    if n_records % 4 != 0 {
        return Err(r.fail(format!(
            "record count {n_records} is not a multiple of 4"
        )));
    }
    let mut set = ParamSet::new();
    for _ in 0..n_records / 4 {
        let (name, value) = r.record()?;
        let (m_name, adam_m) = r.record()?;
        let (v_name, adam_v) = r.record()?;
        let (s_name, step) = r.record()?;
        if m_name != format!("{name}.adam_m")
            || v_name != format!("{name}.adam_v")
            || s_name != format!("{name}.step")
        {
            return Err(r.fail(format!("optimizer records for '{name}' out of order")));
        }
        if !adam_m.same_shape(&value) || !adam_v.same_shape(&value) {
            return Err(r.fail(format!("optimizer state shape mismatch for '{name}'")));
        }
        let mut t = ParamTensor::new(name, value);
        t.adam_m = adam_m;
        t.adam_v = adam_v;
        t.step_count = step.data[0] as u64;
        set.tensors.push(t);
    }
    Ok(set)
}

fn write_config<W: Write>(w: &mut Writer<W>, json: &str) -> Result<()> {
    w.inner.write_all(&(json.len() as u32).to_le_bytes())?;
    w.inner.write_all(json.as_bytes())?;
    Ok(())
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("config block is not valid UTF-8"))
}

fn check_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<u32> {
    let got = r.bytes(4)?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {:?}", got, magic),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    Ok(version)
}

pub fn save_pamil(model: &PamilModel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    w.inner.write_all(PAMIL_MAGIC)?;
    w.inner.write_all(&VERSION.to_le_bytes())?;
    let n_records = model.set.tensors.len() * 4 + 1;
    w.inner.write_all(&(n_records as u32).to_le_bytes())?;
    write_set(&mut w, &model.set)?;
    w.record("centers", &model.centers)?;
    let json = serde_json::to_string(&model.cfg).expect("config serializes");
    write_config(&mut w, &json)?;
    w.inner.flush()?;
    Ok(())
}

pub fn load_pamil(path: impl AsRef<Path>) -> Result<PamilModel> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
        offset: 0,
    };
    check_header(&mut r, PAMIL_MAGIC)?;
    let n_records = r.u32()? as usize;
    if n_records < 1 {
        return Err(r.fail("checkpoint has no tensor records"));
    }
    let set = read_set(&mut r, n_records - 1)?;
    let (centers_name, centers) = r.record()?;
    if centers_name != "centers" {
        return Err(r.fail(format!(
            "expected trailing 'centers' record, got '{centers_name}'"
        )));
    }
    let json = read_config(&mut r)?;
    let cfg: PamilConfig = serde_json::from_str(&json).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let need = |name: &str| -> Result<usize> {
        set.index_of(name)
            .ok_or_else(|| Error::Lookup(format!("checkpoint is missing tensor '{name}'")))
    };
    let feat = if cfg.head == Head::FeatureMlp {
        Some([
            need("feat.w1")?,
            need("feat.b1")?,
            need("feat.w2")?,
            need("feat.b2")?,
        ])
    } else {
        None
    };
    let model = PamilModel {
        w_q: need("w_q")?,
        w_k: need("w_k")?,
        w_v: need("w_v")?,
        w_bottleneck: need("w_bottleneck")?,
        head_w: need("head.weight")?,
        head_b: need("head.bias")?,
        feat,
        set,
        centers,
        cfg,
    };
    if model.centers.rows != model.cfg.n_phenotypes || model.centers.cols != model.cfg.dim {
        return Err(Error::shape(format!(
            "centers are {}x{}, config says {}x{}",
            model.centers.rows, model.centers.cols, model.cfg.n_phenotypes, model.cfg.dim
        )));
    }
    Ok(model)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GpnnManifest {
    cfg: GpnnConfig,
    group_sizes: Vec<usize>,
    kb_cancer: String,
}

pub fn save_gpnn(model: &GpnnModel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    w.inner.write_all(GPNN_MAGIC)?;
    w.inner.write_all(&VERSION.to_le_bytes())?;
    let n_records = model.set.tensors.len() * 4;
    w.inner.write_all(&(n_records as u32).to_le_bytes())?;
    write_set(&mut w, &model.set)?;
    let manifest = GpnnManifest {
        cfg: model.cfg.clone(),
        group_sizes: model.group_sizes.clone(),
        kb_cancer: model.kb_cancer.clone(),
    };
    let json = serde_json::to_string(&manifest).expect("manifest serializes");
    write_config(&mut w, &json)?;
    w.inner.flush()?;
    Ok(())
}

pub fn load_gpnn(path: impl AsRef<Path>) -> Result<GpnnModel> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
        offset: 0,
    };
    check_header(&mut r, GPNN_MAGIC)?;
    let n_records = r.u32()? as usize;
    let set = read_set(&mut r, n_records)?;
    let json = read_config(&mut r)?;
    let manifest: GpnnManifest = serde_json::from_str(&json).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let need = |name: &str| -> Result<usize> {
        set.index_of(name)
            .ok_or_else(|| Error::Lookup(format!("checkpoint is missing tensor '{name}'")))
    };
    let mut encoders = Vec::with_capacity(manifest.group_sizes.len());
    for i in 0..manifest.group_sizes.len() {
        encoders.push([
            need(&format!("enc.{i}.w1"))?,
            need(&format!("enc.{i}.b1"))?,
            need(&format!("enc.{i}.w2"))?,
            need(&format!("enc.{i}.b2"))?,
        ]);
    }
    Ok(GpnnModel {
        w_bottleneck: need("w_bottleneck_g")?,
        head_w: need("head.weight")?,
        head_b: need("head.bias")?,
        encoders,
        set,
        cfg: manifest.cfg,
        group_sizes: manifest.group_sizes,
        kb_cancer: manifest.kb_cancer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databag::{generate_synthetic_cohort, synthetic_kb, SyntheticConfig};
    use crate::diff::AdamConfig;
    use crate::gpnn::train_gpnn;
    use crate::knowledge::{embed_phenotypes, EmbeddingSource};
    use crate::pamil::PamilConfig;

    fn trained_models() -> (PamilModel, GpnnModel) {
        let kb = synthetic_kb(3, 4);
        let u = embed_phenotypes(
            &kb,
            &EmbeddingSource::Pseudo {
                dimension: 8,
                seed: 1,
            },
        )
        .unwrap();
        let mut cfg = SyntheticConfig::new(4, 8, vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]]);
        cfg.genes_per_phenotype = 4;
        let cohort = generate_synthetic_cohort(&kb, &u, &cfg).unwrap();
        let student = PamilModel::init(PamilConfig::new(8, 3, 2), &u, 9).unwrap();
        let mut teacher =
            GpnnModel::init(crate::gpnn::GpnnConfig::new(8, 2), &kb, 9).unwrap();
        let opt = AdamConfig {
            accumulation_steps: 4,
            ..AdamConfig::default()
        };
        train_gpnn(&mut teacher, &cohort, &kb, &opt, 2, 3).unwrap();
        (student, teacher)
    }

    #[test]
    fn pamil_round_trip_is_exact_and_rewrite_is_byte_identical() {
        let (student, _) = trained_models();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_pamil(&student, &p1).unwrap();
        let loaded = load_pamil(&p1).unwrap();
        assert_eq!(student, loaded);
        save_pamil(&loaded, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn gpnn_round_trip_preserves_optimizer_state() {
        let (_, teacher) = trained_models();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_gpnn(&teacher, &path).unwrap();
        let loaded = load_gpnn(&path).unwrap();
        assert_eq!(teacher, loaded);
        // training actually populated moments, so this equality is not vacuous
        assert!(loaded.set.tensors[0].step_count > 0);
        assert!(loaded.set.tensors[0].adam_m.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn magic_mismatch_reports_offset_zero() {
        let (student, teacher) = trained_models();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_gpnn(&teacher, &path).unwrap();
        match load_pamil(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let path2 = dir.path().join("s.ckpt");
        save_pamil(&student, &path2).unwrap();
        assert!(load_gpnn(&path2).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (student, _) = trained_models();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_pamil(&student, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_pamil(&cut), Err(Error::Format { .. })));
    }
}
