//! Datasets, augmentation and the bundle container.
//!
//! A [`Dataset`] holds image-view embeddings and class attributes for one
//! task. Synthetic datasets keep their raw samples so training views can be
//! re-augmented every epoch; bundle-backed datasets reuse the stored views.

pub mod augment;
pub mod bundle;
pub mod synth;

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::encoders::FrozenImageEncoder;
use crate::error::{Error, Result};
use crate::selection::normalize_rows;
use crate::trainer::{EpochViews, ViewSource};

pub use augment::{augment, AugmentationPolicy, ViewKind};
pub use bundle::{BundleInfo, Checkpoint, Container, EmbeddingBundle, Section, SectionData};
pub use synth::{generate_task, soft_mutual_information, SyntheticData, SyntheticTask};

/// One split's views; rows are unit-norm image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub original: Tensor,
    pub weak: Tensor,
    pub strong: Tensor,
    /// Dataset-local class index per sample.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Split {
        Split {
            original: gather(&self.original, idx),
            weak: gather(&self.weak, idx),
            strong: gather(&self.strong, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(vec![idx.len(), d], data)
}

/// Raw training samples and the policy that re-augments them each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub raw: Tensor,
    pub policy: AugmentationPolicy,
    pub seed: u64,
    pub encoder: FrozenImageEncoder,
    /// Sample index each raw row was generated under.
    pub keys: Vec<usize>,
}

impl Resampler {
    fn views(&self, idx: &[usize], epoch: usize) -> Result<EpochViews> {
        let d_img = self.raw.cols();
        let mut weak = Vec::with_capacity(idx.len() * d_img);
        let mut strong = Vec::with_capacity(idx.len() * d_img);
        let mut orig = Vec::with_capacity(idx.len() * d_img);
        for &i in idx {
            let x = self.raw.row(i);
            orig.extend_from_slice(x);
            weak.extend(augment(x, &self.policy, ViewKind::Weak, self.seed, self.keys[i], epoch));
            strong.extend(augment(x, &self.policy, ViewKind::Strong, self.seed, self.keys[i], epoch));
        }
        let enc = |v: Vec<f64>| self.encoder.encode_batch(&Tensor::from_parts(vec![idx.len(), d_img], v));
        Ok(EpochViews {
            original: enc(orig)?,
            weak: enc(weak)?,
            strong: enc(strong)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dataset_id: String,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub prompts_per_class: usize,
    /// Class-major, unit norm.
    pub attributes: Vec<Tensor>,
    pub attribute_texts: Vec<String>,
    pub train: Split,
    pub test: Split,
    /// Present for synthetic data: per-epoch view resampling of `train`.
    pub resampler: Option<Resampler>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.train.original.cols()
    }

    /// Encodes a generated task. Stored views are the epoch-0 augmentations
    /// under `aug_seed`; training views are redrawn every epoch.
    pub fn from_synthetic(data: &SyntheticData, image: &FrozenImageEncoder, aug_seed: u64) -> Result<Self> {
        let split = |raw: &Tensor, labels: &[usize], offset: usize| -> Result<Split> {
            let n = raw.rows();
            if n == 0 {
                let z = Tensor::zeros(vec![0, image.embed_dim()]);
                return Ok(Split {
                    original: z.clone(),
                    weak: z.clone(),
                    strong: z,
                    labels: Vec::new(),
                });
            }
            let d_img = raw.cols();
            let mut w = Vec::with_capacity(n * d_img);
            let mut s = Vec::with_capacity(n * d_img);
            for r in 0..n {
                w.extend(augment(raw.row(r), &data.policy, ViewKind::Weak, aug_seed, offset + r, 0));
                s.extend(augment(raw.row(r), &data.policy, ViewKind::Strong, aug_seed, offset + r, 0));
            }
            Ok(Split {
                original: image.encode_batch(raw)?,
                weak: image.encode_batch(&Tensor::from_parts(vec![n, d_img], w))?,
                strong: image.encode_batch(&Tensor::from_parts(vec![n, d_img], s))?,
                labels: labels.to_vec(),
            })
        };
        let n_train = data.train_raw.rows();
        Ok(Self {
            name: data.task.name.clone(),
            dataset_id: data.task.dataset_id.clone(),
            class_ids: data.class_ids.clone(),
            class_names: data.class_ids.iter().map(|c| format!("class-{c}")).collect(),
            prompts_per_class: data.task.attributes_per_class(),
            attributes: data.attributes.clone(),
            attribute_texts: data.attribute_texts.clone(),
            train: split(&data.train_raw, &data.train_labels, 0)?,
            test: split(&data.test_raw, &data.test_labels, n_train)?,
            resampler: Some(Resampler {
                raw: data.train_raw.clone(),
                policy: data.policy,
                seed: aug_seed,
                encoder: image.clone(),
                keys: (0..n_train).collect(),
            }),
        })
    }

    pub fn from_bundle(b: &EmbeddingBundle) -> Result<Self> {
        b.validate()?;
        let i = &b.info;
        let d = i.d;
        let rows = |v: &[f32], from: usize, count: usize| -> Result<Tensor> {
            let data: Vec<f64> = v[from * d..(from + count) * d].iter().map(|&x| x as f64).collect();
            if count == 0 {
                return Ok(Tensor::zeros(vec![0, d]));
            }
            normalize_rows(&Tensor::new(vec![count, d], data)?)
        };
        let split = |from: usize, count: usize| -> Result<Split> {
            Ok(Split {
                original: rows(&b.img_orig, from, count)?,
                weak: rows(&b.img_weak, from, count)?,
                strong: rows(&b.img_strong, from, count)?,
                labels: b.labels[from..from + count].iter().map(|&y| y as usize).collect(),
            })
        };
        let kn = i.num_classes * i.prompts_per_class;
        let attr = rows(&b.attr, 0, kn)?;
        Ok(Self {
            name: i.dataset.clone(),
            dataset_id: i.dataset_id.clone(),
            class_ids: i.class_ids.clone(),
            class_names: i.class_names.clone(),
            prompts_per_class: i.prompts_per_class,
            attributes: (0..kn).map(|r| Tensor::from_parts(vec![d], attr.row(r).to_vec())).collect(),
            attribute_texts: i.attribute_texts.clone(),
            train: split(0, i.train_count)?,
            test: split(i.train_count, i.test_count)?,
            resampler: resampler_from_bundle(b)?,
        })
    }

    /// Synthetic datasets also store their raw training samples and the
    /// resampling settings, so a loaded bundle trains identically.
    pub fn to_bundle(&self, provenance: serde_json::Value) -> Result<EmbeddingBundle> {
        let unit_f32 = |t: &Tensor| -> Vec<f32> {
            let mut out = Vec::with_capacity(t.len());
            for r in 0..t.rows() {
                let row: Vec<f32> = t.row(r).iter().map(|&v| v as f32).collect();
                let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                out.extend(row.iter().map(|&v| ((v as f64) / n) as f32));
            }
            out
        };
        let cat = |a: &Tensor, b: &Tensor| {
            let mut v = unit_f32(a);
            v.extend(unit_f32(b));
            v
        };
        let attr = Tensor::stack_rows(&self.attributes)?;
        let bundle = EmbeddingBundle {
            info: BundleInfo {
                kind: bundle::DATASET_KIND.into(),
                dataset: self.name.clone(),
                dataset_id: self.dataset_id.clone(),
                d: self.embed_dim(),
                num_classes: self.num_classes(),
                prompts_per_class: self.prompts_per_class,
                class_names: self.class_names.clone(),
                class_ids: self.class_ids.clone(),
                attribute_texts: self.attribute_texts.clone(),
                train_count: self.train.len(),
                test_count: self.test.len(),
                provenance,
            },
            img_orig: cat(&self.train.original, &self.test.original),
            img_weak: cat(&self.train.weak, &self.test.weak),
            img_strong: cat(&self.train.strong, &self.test.strong),
            attr: unit_f32(&attr),
            labels: self.train.labels.iter().chain(&self.test.labels).map(|&y| y as i32).collect(),
            bank: None,
            extra: Vec::new(),
        };
        let mut bundle = bundle;
        if let Some(r) = &self.resampler {
            let mut prov = bundle.info.provenance.as_object().cloned().unwrap_or_default();
            prov.insert(
                "resample".into(),
                serde_json::to_value(ResampleInfo {
                    policy: r.policy,
                    seed: r.seed,
                    encoder_seed: r.encoder.seed(),
                    input_dim: r.encoder.input_dim(),
                    keys: r.keys.clone(),
                })?,
            );
            bundle.info.provenance = serde_json::Value::Object(prov);
            bundle.extra.push(Section::f64_tensor(RAW_SECTION, &r.raw));
        }
        bundle.validate()?;
        Ok(bundle)
    }

    /// Keeps only the given local classes, in the given order, relabelled
    /// `0..classes.len()`.
    pub fn restrict(&self, classes: &[usize]) -> Result<Dataset> {
        let k = self.num_classes();
        let mut map = vec![None; k];
        for (new, &old) in classes.iter().enumerate() {
            if old >= k || map[old].is_some() {
                return Err(Error::Config(format!("bad class subset {classes:?} of {k} classes")));
            }
            map[old] = Some(new);
        }
        let pick = |s: &Split| -> (Split, Vec<usize>) {
            let idx: Vec<usize> = (0..s.len()).filter(|&i| map[s.labels[i]].is_some()).collect();
            let mut out = s.select(&idx);
            for y in &mut out.labels {
                *y = map[*y].unwrap();
            }
            (out, idx)
        };
        let (train, train_idx) = pick(&self.train);
        let (test, _) = pick(&self.test);
        let n = self.prompts_per_class;
        Ok(Dataset {
            name: self.name.clone(),
            dataset_id: self.dataset_id.clone(),
            class_ids: classes.iter().map(|&c| self.class_ids[c]).collect(),
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            prompts_per_class: n,
            attributes: classes.iter().flat_map(|&c| self.attributes[c * n..(c + 1) * n].iter().cloned()).collect(),
            attribute_texts: if self.attribute_texts.is_empty() {
                Vec::new()
            } else {
                classes
                    .iter()
                    .flat_map(|&c| self.attribute_texts[c * n..(c + 1) * n].iter().cloned())
                    .collect()
            },
            train,
            test,
            resampler: self.resampler.as_ref().map(|r| Resampler {
                raw: gather(&r.raw, &train_idx),
                keys: train_idx.iter().map(|&i| r.keys[i]).collect(),
                ..r.clone()
            }),
        })
    }

    /// Same data with `n` attributes per class, taken cyclically from the
    /// existing ones.
    pub fn with_attribute_count(&self, n: usize) -> Dataset {
        let old = self.prompts_per_class;
        let pick = |c: usize, j: usize| c * old + j % old;
        let k = self.num_classes();
        Dataset {
            prompts_per_class: n,
            attributes: (0..k).flat_map(|c| (0..n).map(move |j| pick(c, j))).map(|i| self.attributes[i].clone()).collect(),
            attribute_texts: if self.attribute_texts.is_empty() {
                Vec::new()
            } else {
                (0..k)
                    .flat_map(|c| (0..n).map(move |j| pick(c, j)))
                    .map(|i| self.attribute_texts[i].clone())
                    .collect()
            },
            ..self.clone()
        }
    }

    /// The first `shots` training samples of every class.
    pub fn shots(&self, shots: usize) -> Result<ShotSet<'_>> {
        let mut idx = Vec::new();
        for c in 0..self.num_classes() {
            let of_class: Vec<usize> = (0..self.train.len()).filter(|&i| self.train.labels[i] == c).take(shots).collect();
            if of_class.len() < shots {
                return Err(Error::Data(format!(
                    "class {} ({}) has {} training samples in {}, {shots} shots required",
                    self.class_ids[c],
                    self.class_names[c],
                    of_class.len(),
                    self.dataset_id
                )));
            }
            idx.extend(of_class);
        }
        idx.sort_unstable();
        let labels = idx.iter().map(|&i| self.train.labels[i]).collect();
        Ok(ShotSet {
            dataset: self,
            indices: idx,
            labels,
        })
    }
}

/// Section holding raw training samples of a synthetic dataset.
pub const RAW_SECTION: &str = "RAW_TRAIN";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ResampleInfo {
    policy: AugmentationPolicy,
    seed: u64,
    encoder_seed: u64,
    input_dim: usize,
    keys: Vec<usize>,
}

fn resampler_from_bundle(b: &EmbeddingBundle) -> Result<Option<Resampler>> {
    let (Some(info), Some(raw)) = (
        b.info.provenance.get("resample"),
        b.extra.iter().find(|s| s.name == RAW_SECTION),
    ) else {
        return Ok(None);
    };
    let info: ResampleInfo = serde_json::from_value(info.clone())
        .map_err(|e| Error::Bundle(format!("corrupt section MANIFEST: resample settings: {e}")))?;
    let SectionData::F64(data) = &raw.data else {
        return Err(Error::Bundle(format!("corrupt section {RAW_SECTION}: expected f64 data")));
    };
    if raw.shape != [b.info.train_count, info.input_dim] || info.keys.len() != b.info.train_count {
        return Err(Error::Bundle(format!(
            "corrupt section {RAW_SECTION}: shape {:?} for {} training samples",
            raw.shape, b.info.train_count
        )));
    }
    Ok(Some(Resampler {
        raw: Tensor::new(raw.shape.clone(), data.clone())?,
        policy: info.policy,
        seed: info.seed,
        encoder: FrozenImageEncoder::new(info.encoder_seed, info.input_dim, b.info.d)?,
        keys: info.keys,
    }))
}

/// Few-shot training subset of a [`Dataset`].
pub struct ShotSet<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
    labels: Vec<usize>,
}

impl ShotSet<'_> {
    /// Global class ids present among the training samples.
    pub fn class_ids_seen(&self) -> BTreeSet<usize> {
        self.labels.iter().map(|&y| self.dataset.class_ids[y]).collect()
    }

    /// Content hashes of the training samples' original views.
    pub fn fingerprints(&self) -> BTreeSet<String> {
        fingerprints(&gather(&self.dataset.train.original, &self.indices))
    }
}

/// SHA-256 of each row's little-endian bytes.
pub fn fingerprints(rows: &Tensor) -> BTreeSet<String> {
    (0..rows.rows())
        .map(|r| {
            let bytes: Vec<u8> = rows.row(r).iter().flat_map(|v| v.to_le_bytes()).collect();
            hex::encode(Sha256::digest(&bytes))
        })
        .collect()
}

impl ViewSource for ShotSet<'_> {
    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn views(&self, epoch: usize) -> Result<EpochViews> {
        match &self.dataset.resampler {
            Some(r) => r.views(&self.indices, epoch),
            None => {
                let s = self.dataset.train.select(&self.indices);
                Ok(EpochViews {
                    original: s.original,
                    weak: s.weak,
                    strong: s.strong,
                })
            }
        }
    }
}
