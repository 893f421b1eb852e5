//! The `BVLB` embedding-bundle container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BVLB"
//! 4       4     version, u32 LE (currently 1)
//! 8       8     manifest length L, u64 LE
//! 16      32    SHA-256 of the manifest bytes
//! 48      L     manifest, UTF-8 JSON with sorted keys
//! 48+L    ...   section payloads, back to back, little-endian
//! ```
//!
//! The manifest holds a free-form `meta` object and a `sections` directory;
//! each entry records name, dtype, shape, payload offset (relative to the
//! payload start), byte length and SHA-256. The payload ends exactly at the
//! end of the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::promptbank::BankMeta;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"BVLB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 48;
/// Norm tolerance for embedding rows stored as `f32`.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl SectionData {
    pub fn dtype(&self) -> DType {
        match self {
            SectionData::F32(_) => DType::F32,
            SectionData::F64(_) => DType::F64,
            SectionData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SectionData::F32(v) => v.len(),
            SectionData::F64(v) => v.len(),
            SectionData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            SectionData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            SectionData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            SectionData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, b: &[u8]) -> Self {
        match dtype {
            DType::F32 => SectionData::F32(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => SectionData::F64(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => SectionData::I32(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            SectionData::F32(v) => v.iter().all(|x| x.is_finite()),
            SectionData::F64(v) => v.iter().all(|x| x.is_finite()),
            SectionData::I32(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: SectionData,
}

impl Section {
    pub fn new(name: &str, shape: Vec<usize>, data: SectionData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Bundle(format!(
                "section {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            shape,
            data,
        })
    }

    pub fn f64_tensor(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: SectionData::F64(t.data().to_vec()),
        }
    }

    fn corrupt(&self, what: &str) -> Error {
        Error::Bundle(format!("corrupt section {}: {what}", self.name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    meta: Value,
    sections: Vec<SectionEntry>,
}

/// Generic container: a JSON `meta` object plus named typed sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub sections: Vec<Section>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corrupt_manifest(what: impl std::fmt::Display) -> Error {
    Error::Bundle(format!("corrupt section MANIFEST: {what}"))
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.sections.len());
        let mut payload = Vec::new();
        for s in &self.sections {
            if entries.iter().any(|e: &SectionEntry| e.name == s.name) {
                return Err(Error::Bundle(format!("duplicate section {}", s.name)));
            }
            if !s.data.all_finite() {
                return Err(Error::Bundle(format!("section {} holds non-finite values", s.name)));
            }
            let bytes = s.data.to_bytes();
            entries.push(SectionEntry {
                name: s.name.clone(),
                dtype: s.data.dtype(),
                shape: s.shape.clone(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
                sha256: sha_hex(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        // serde_json::Value maps are ordered by key, so this is canonical
        let manifest = serde_json::to_value(Manifest {
            meta: self.meta.clone(),
            sections: entries,
        })?;
        let manifest = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&manifest));
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Bundle("not a bundle".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(corrupt_manifest("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Bundle(format!("unsupported bundle version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mend = (HEADER_LEN as u64)
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt_manifest("truncated"))? as usize;
        let mbytes = &bytes[HEADER_LEN..mend];
        if Sha256::digest(mbytes).as_slice() != &bytes[16..48] {
            return Err(corrupt_manifest("checksum mismatch"));
        }
        let manifest: Manifest = serde_json::from_slice(mbytes).map_err(corrupt_manifest)?;
        let payload = &bytes[mend..];
        let mut sections = Vec::with_capacity(manifest.sections.len());
        let mut cursor = 0u64;
        for e in manifest.sections {
            let stub = Section {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: SectionData::I32(Vec::new()),
            };
            if e.offset != cursor {
                return Err(stub.corrupt("offset does not follow the previous section"));
            }
            let count = e.shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
            let expected = count.and_then(|c| c.checked_mul(e.dtype.size()));
            if expected != Some(e.length as usize) {
                return Err(stub.corrupt("declared length does not match shape"));
            }
            let end = e.offset.checked_add(e.length).filter(|&x| x <= payload.len() as u64);
            let Some(end) = end else {
                return Err(stub.corrupt("truncated"));
            };
            let raw = &payload[e.offset as usize..end as usize];
            if sha_hex(raw) != e.sha256 {
                return Err(stub.corrupt("checksum mismatch"));
            }
            let data = SectionData::from_bytes(e.dtype, raw);
            if !data.all_finite() {
                return Err(stub.corrupt("non-finite value"));
            }
            cursor = end;
            sections.push(Section {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Bundle(format!(
                "{} trailing bytes after the last section",
                payload.len() as u64 - cursor
            )));
        }
        Ok(Self {
            meta: manifest.meta,
            sections,
        })
    }

    /// Writes through a temporary sibling file so a failed save leaves no
    /// partial bundle behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("bvlb.partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Dataset description carried in a dataset bundle's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleInfo {
    pub kind: String,
    pub dataset: String,
    pub dataset_id: String,
    pub d: usize,
    pub num_classes: usize,
    pub prompts_per_class: usize,
    pub class_names: Vec<String>,
    pub class_ids: Vec<usize>,
    /// Class-major, `num_classes * prompts_per_class` entries (may be empty).
    pub attribute_texts: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    /// Free-form record of how the bundle was produced.
    #[serde(default)]
    pub provenance: Value,
}

pub const DATASET_KIND: &str = "dataset";
pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Image views, attribute embeddings and labels for one dataset.
/// Samples are stored train split first, then test split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub info: BundleInfo,
    pub img_orig: Vec<f32>,
    pub img_weak: Vec<f32>,
    pub img_strong: Vec<f32>,
    /// `K x N x d`, class-major.
    pub attr: Vec<f32>,
    /// Bank-local class index per sample.
    pub labels: Vec<i32>,
    /// Optional checkpoint parameters.
    pub bank: Option<Section>,
    /// Additional sections, e.g. encoder weights for audit.
    pub extra: Vec<Section>,
}

pub const IMAGE_SECTIONS: [&str; 3] = ["IMG_ORIG", "IMG_WEAK", "IMG_STRONG"];

fn check_rows(name: &str, data: &[f32], d: usize) -> Result<()> {
    for (i, row) in data.chunks(d).enumerate() {
        let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Bundle(format!("invalid embedding row {i} in {name} (norm {n:.7})")));
        }
    }
    Ok(())
}

impl EmbeddingBundle {
    pub fn sample_count(&self) -> usize {
        self.info.train_count + self.info.test_count
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.info;
        if i.kind != DATASET_KIND {
            return Err(Error::Bundle(format!("expected a dataset bundle, found kind {:?}", i.kind)));
        }
        if i.d == 0 || i.num_classes == 0 || i.prompts_per_class == 0 {
            return Err(Error::Bundle("manifest declares an empty dimension".into()));
        }
        if i.class_names.len() != i.num_classes || i.class_ids.len() != i.num_classes {
            return Err(Error::Bundle("class name/id lists disagree with num_classes".into()));
        }
        let kn = i.num_classes * i.prompts_per_class;
        if !i.attribute_texts.is_empty() && i.attribute_texts.len() != kn {
            return Err(Error::Bundle(format!("{} attribute texts for {kn} attributes", i.attribute_texts.len())));
        }
        let n = self.sample_count();
        for (name, v) in IMAGE_SECTIONS.iter().zip([&self.img_orig, &self.img_weak, &self.img_strong]) {
            if v.len() != n * i.d {
                return Err(Error::Bundle(format!("corrupt section {name}: expected {n} x {} values", i.d)));
            }
        }
        if self.attr.len() != kn * i.d {
            return Err(Error::Bundle(format!("corrupt section ATTR: expected {kn} x {} values", i.d)));
        }
        if self.labels.len() != n {
            return Err(Error::Bundle(format!("corrupt section LABELS: expected {n} labels")));
        }
        if let Some(bad) = self.labels.iter().position(|&y| y < 0 || y as usize >= i.num_classes) {
            return Err(Error::Bundle(format!("label {} of sample {bad} out of range", self.labels[bad])));
        }
        for (name, v) in IMAGE_SECTIONS.iter().zip([&self.img_orig, &self.img_weak, &self.img_strong]) {
            check_rows(name, v, i.d)?;
        }
        check_rows("ATTR", &self.attr, i.d)?;
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let (n, d, k, p) = (self.sample_count(), self.info.d, self.info.num_classes, self.info.prompts_per_class);
        let mut sections = vec![
            Section::new("IMG_ORIG", vec![n, d], SectionData::F32(self.img_orig.clone()))?,
            Section::new("IMG_WEAK", vec![n, d], SectionData::F32(self.img_weak.clone()))?,
            Section::new("IMG_STRONG", vec![n, d], SectionData::F32(self.img_strong.clone()))?,
            Section::new("ATTR", vec![k, p, d], SectionData::F32(self.attr.clone()))?,
            Section::new("LABELS", vec![n, 1], SectionData::I32(self.labels.clone()))?,
        ];
        if let Some(b) = &self.bank {
            sections.push(Section { name: "BANK".into(), ..b.clone() });
        }
        sections.extend(self.extra.iter().cloned());
        Ok(Container {
            meta: serde_json::to_value(&self.info)?,
            sections,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let info: BundleInfo = serde_json::from_value(c.meta.clone()).map_err(corrupt_manifest)?;
        let take_f32 = |name: &str| -> Result<Vec<f32>> {
            match c.sections.iter().find(|s| s.name == name) {
                Some(Section {
                    data: SectionData::F32(v), ..
                }) => Ok(v.clone()),
                Some(_) => Err(Error::Bundle(format!("corrupt section {name}: expected f32"))),
                None => Err(Error::Bundle(format!("missing section {name}"))),
            }
        };
        let labels = match c.section("LABELS") {
            Some(Section {
                data: SectionData::I32(v), ..
            }) => v.clone(),
            Some(_) => return Err(Error::Bundle("corrupt section LABELS: expected i32".into())),
            None => return Err(Error::Bundle("missing section LABELS".into())),
        };
        let known = ["IMG_ORIG", "IMG_WEAK", "IMG_STRONG", "ATTR", "LABELS", "BANK"];
        let out = Self {
            img_orig: take_f32("IMG_ORIG")?,
            img_weak: take_f32("IMG_WEAK")?,
            img_strong: take_f32("IMG_STRONG")?,
            attr: take_f32("ATTR")?,
            labels,
            bank: c.section("BANK").filter(|s| !s.data.is_empty()).cloned(),
            extra: c.sections.iter().filter(|s| !known.contains(&s.name.as_str())).cloned().collect(),
            info,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Trained bank plus enough state to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bank: BankMeta,
    /// `[K, N, ...block]` learnable parameters.
    pub params: Tensor,
    /// Prompt-aligned attribute embeddings, class-major `[K * N x d]`.
    pub attributes: Tensor,
    pub attribute_texts: Vec<String>,
    pub state: TrainState,
    /// Resolved run configuration.
    pub config: Value,
    pub dataset_id: String,
    /// Global class ids of the training samples.
    pub seen_classes: Vec<usize>,
    /// Content hashes of the training samples.
    pub fingerprints: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    bank: BankMeta,
    attribute_texts: Vec<String>,
    epochs_done: usize,
    step: usize,
    config: Value,
    dataset_id: String,
    seen_classes: Vec<usize>,
    fingerprints: Vec<String>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            bank: self.bank.clone(),
            attribute_texts: self.attribute_texts.clone(),
            epochs_done: self.state.epochs_done,
            step: self.state.step,
            config: self.config.clone(),
            dataset_id: self.dataset_id.clone(),
            seen_classes: self.seen_classes.clone(),
            fingerprints: self.fingerprints.clone(),
        };
        let mut sections = vec![
            Section::f64_tensor("BANK", &self.params),
            Section::f64_tensor("BANK_ATTR", &self.attributes),
        ];
        if !self.state.velocity.is_empty() {
            sections.push(Section::new(
                "VELOCITY",
                vec![self.state.velocity.len()],
                SectionData::F64(self.state.velocity.clone()),
            )?);
        }
        Ok(Container {
            meta: serde_json::to_value(meta)?,
            sections,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(corrupt_manifest)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Bundle(format!("expected a checkpoint, found kind {:?}", meta.kind)));
        }
        let tensor = |name: &str| -> Result<Tensor> {
            match c.section(name) {
                Some(Section {
                    shape,
                    data: SectionData::F64(v),
                    ..
                }) => Tensor::new(shape.clone(), v.clone()).map_err(|e| Error::Bundle(format!("corrupt section {name}: {e}"))),
                Some(_) => Err(Error::Bundle(format!("corrupt section {name}: expected f64"))),
                None => Err(Error::Bundle(format!("missing section {name}"))),
            }
        };
        let velocity = match c.section("VELOCITY") {
            Some(Section {
                data: SectionData::F64(v), ..
            }) => v.clone(),
            Some(_) => return Err(Error::Bundle("corrupt section VELOCITY: expected f64".into())),
            None => Vec::new(),
        };
        Ok(Self {
            bank: meta.bank,
            params: tensor("BANK")?,
            attributes: tensor("BANK_ATTR")?,
            attribute_texts: meta.attribute_texts,
            state: TrainState {
                epochs_done: meta.epochs_done,
                step: meta.step,
                velocity,
            },
            config: meta.config,
            dataset_id: meta.dataset_id,
            seen_classes: meta.seen_classes,
            fingerprints: meta.fingerprints,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(seed: u64, rows: usize, d: usize) -> Vec<f32> {
        let mut out = Vec::new();
        for r in 0..rows {
            let v: Vec<f64> = (0..d)
                .map(|c| crate::rng::counter_symmetric(seed, r as u64, c as u64, 1.0))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| (x / n) as f32));
        }
        out
    }

    pub(crate) fn sample_bundle() -> EmbeddingBundle {
        let (k, p, d, train, test) = (2, 3, 8, 4, 2);
        let n = train + test;
        EmbeddingBundle {
            info: BundleInfo {
                kind: DATASET_KIND.into(),
                dataset: "toy".into(),
                dataset_id: "toy-0".into(),
                d,
                num_classes: k,
                prompts_per_class: p,
                class_names: vec!["a".into(), "b".into()],
                class_ids: vec![0, 1],
                attribute_texts: (0..k * p).map(|i| format!("attr {i}")).collect(),
                train_count: train,
                test_count: test,
                provenance: serde_json::json!({"source": "test"}),
            },
            img_orig: unit_rows(1, n, d),
            img_weak: unit_rows(2, n, d),
            img_strong: unit_rows(3, n, d),
            attr: unit_rows(4, k * p, d),
            labels: vec![0, 1, 0, 1, 0, 1],
            bank: None,
            extra: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = sample_bundle();
        let bytes = b.to_bytes().unwrap();
        let back = EmbeddingBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = sample_bundle().to_bytes().unwrap();
        for i in 0..bytes.len() {
            let mut c = bytes.clone();
            c[i] ^= 0x01;
            assert!(EmbeddingBundle::from_bytes(&c).is_err(), "flip at byte {i} went unnoticed");
        }
    }

    #[test]
    fn payload_corruption_names_the_section() {
        let b = sample_bundle();
        let bytes = b.to_bytes().unwrap();
        let payload_len: usize = 3 * 6 * 8 * 4 + 2 * 3 * 8 * 4 + 6 * 4;
        let start = bytes.len() - payload_len;
        let mut c = bytes.clone();
        c[start + 6 * 8 * 4 + 5] ^= 0x80;
        let err = EmbeddingBundle::from_bytes(&c).unwrap_err().to_string();
        assert!(err.contains("corrupt section IMG_WEAK"), "{err}");
        let mut t = bytes.clone();
        t.truncate(bytes.len() - 3);
        let err = EmbeddingBundle::from_bytes(&t).unwrap_err().to_string();
        assert!(err.contains("corrupt section LABELS"), "{err}");
    }

    #[test]
    fn bad_magic_is_not_a_bundle() {
        let mut bytes = sample_bundle().to_bytes().unwrap();
        bytes[0] = b'X';
        assert_eq!(EmbeddingBundle::from_bytes(&bytes).unwrap_err().to_string(), "bundle error: not a bundle");
        assert!(EmbeddingBundle::from_bytes(b"").is_err());
    }

    #[test]
    fn norm_violation_is_reported_by_row() {
        let mut b = sample_bundle();
        for v in &mut b.img_strong[16..24] {
            *v *= 1.5;
        }
        let err = b.to_bytes().unwrap_err().to_string();
        assert!(err.contains("invalid embedding row 2"), "{err}");
    }

    #[test]
    fn empty_bank_loads_as_absent() {
        let mut b = sample_bundle();
        b.bank = Some(Section::new("BANK", vec![0], SectionData::F64(Vec::new())).unwrap());
        let back = EmbeddingBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert!(back.bank.is_none());
        b.bank = Some(Section::new("BANK", vec![2, 3], SectionData::F64(vec![0.5; 6])).unwrap());
        let back = EmbeddingBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.bank, b.bank);
    }

    #[test]
    fn manifest_keys_are_sorted() {
        let bytes = sample_bundle().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[48..48 + len]).unwrap();
        assert!(text.find("\"meta\"").unwrap() < text.find("\"sections\"").unwrap());
        assert!(text.find("\"class_ids\"").unwrap() < text.find("\"d\"").unwrap());
    }

    #[test]
    fn files_round_trip_and_leave_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bvlb");
        let b = sample_bundle();
        b.save(&path).unwrap();
        assert_eq!(EmbeddingBundle::load(&path).unwrap(), b);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(EmbeddingBundle::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
