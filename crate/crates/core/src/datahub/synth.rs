//! Seeded synthetic few-shot tasks.
//!
//! Every class is a mixture of `modes_per_class` isotropic Gaussians in raw
//! image space. Mode `(c, s)` has a concept token `z = a * class_token(c) +
//! b * u_(c,s)`; its raw-space mean is found by inverting the frozen image
//! encoder toward the text embedding of `z`, so image and text towers share
//! geometry. Informative attribute `j` of class `c` is a jittered copy of the
//! concept of mode `j`; noise attributes are one generic token per slot,
//! shared by every class up to a small jitter, and carry no label
//! information.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::augment::{feature_scale, AugmentationPolicy};
use crate::diffcore::{Tape, Tensor};
use crate::encoders::{FrozenImageEncoder, FrozenTextEncoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::selection::{normalize_rows, per_prompt_distribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub name: String,
    pub dataset_id: String,
    pub num_classes: usize,
    /// Global id of the first class; distinct datasets use disjoint ranges.
    pub class_offset: usize,
    pub input_dim: usize,
    pub modes_per_class: usize,
    pub informative_attributes: usize,
    pub noise_attribute_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Within-mode std in units of the RMS coordinate of the mode means.
    pub std: f64,
    /// Weight of the class token in each concept token.
    pub class_weight: f64,
    pub attribute_jitter: f64,
    pub noise_jitter: f64,
    /// Explicit single-mode class means in raw space; replaces the concept
    /// construction when present.
    pub class_means: Option<Vec<Vec<f64>>>,
    /// Falls back to the run's data seed when absent.
    pub seed: Option<u64>,
    pub augmentation: AugmentationPolicy,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dataset_id: "synth-a".into(),
            num_classes: 8,
            class_offset: 0,
            input_dim: 64,
            modes_per_class: 3,
            informative_attributes: 3,
            noise_attribute_count: 7,
            train_per_class: 16,
            test_per_class: 50,
            std: 0.15,
            class_weight: 0.6,
            attribute_jitter: 0.3,
            noise_jitter: 0.02,
            class_means: None,
            seed: None,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl SyntheticTask {
    pub fn attributes_per_class(&self) -> usize {
        self.informative_attributes + self.noise_attribute_count
    }

    /// Same task with `n` attributes per class: up to the current informative
    /// count stay informative, the rest are noise.
    pub fn with_prompt_count(&self, n: usize) -> Self {
        let informative = self.informative_attributes.min(n);
        Self {
            informative_attributes: informative,
            noise_attribute_count: n - informative,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        if self.input_dim == 0 || self.modes_per_class == 0 {
            return Err(Error::Config("input_dim and modes_per_class must be >= 1".into()));
        }
        if self.attributes_per_class() == 0 {
            return Err(Error::Config("a task needs at least one attribute per class".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be >= 1".into()));
        }
        for (name, v) in [
            ("std", self.std),
            ("attribute_jitter", self.attribute_jitter),
            ("noise_jitter", self.noise_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.class_weight) {
            return Err(Error::Config("class_weight must lie in [0, 1]".into()));
        }
        self.augmentation.validate()?;
        if let Some(means) = &self.class_means {
            if means.len() != self.num_classes {
                return Err(Error::Config(format!("{} class means for {} classes", means.len(), self.num_classes)));
            }
            if means.iter().any(|m| m.len() != self.input_dim || m.iter().any(|v| !v.is_finite())) {
                return Err(Error::Config("class means must be finite vectors of input_dim".into()));
            }
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    if means[i] == means[j] {
                        return Err(Error::Config(format!("classes {i} and {j} have identical means")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Raw generated task, before image encoding.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub task: SyntheticTask,
    pub seed: u64,
    pub class_ids: Vec<usize>,
    /// `K * S` rows, mode-minor.
    pub mode_means: Tensor,
    pub train_raw: Tensor,
    pub train_labels: Vec<usize>,
    pub test_raw: Tensor,
    pub test_labels: Vec<usize>,
    /// Class-major attribute embeddings, unit norm.
    pub attributes: Vec<Tensor>,
    pub attribute_texts: Vec<String>,
    /// Augmentation policy with the feature scale filled in.
    pub policy: AugmentationPolicy,
}

fn normal(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_vec(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

/// Raw-space points whose image embeddings point along `targets` rows.
fn invert_image_encoder(enc: &FrozenImageEncoder, targets: &Tensor, seed: u64) -> Result<Tensor> {
    let (rows, d_img) = (targets.rows(), enc.input_dim());
    let mut r = rng::stream(seed, "invert-init", &[]);
    let mut x = Tensor::matrix(rows, d_img, normal_vec(&mut r, rows * d_img).iter().map(|v| 0.1 * v).collect())?;
    let lr = 2.0;
    for _ in 0..300 {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let v = enc.encode_var(&tape, xv)?;
        let align = v.mul(tape.constant(targets.clone()))?.sum()?;
        let reg = xv.mul(xv)?.sum()?.scale(1e-4)?;
        let loss = reg.sub(align)?;
        let g = tape.backward(loss)?.get_or_zeros(xv);
        let data: Vec<f64> = x.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect();
        x = Tensor::matrix(rows, d_img, data)?;
    }
    Ok(x)
}

fn tokens_of(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let r = rows.len();
    let c = rows[0].len();
    Tensor::matrix(r, c, rows.into_iter().flatten().collect())
}

/// Generates a task deterministically from `(task, seed, encoders)`.
pub fn generate_task(
    task: &SyntheticTask,
    default_seed: u64,
    text: &FrozenTextEncoder,
    image: &FrozenImageEncoder,
) -> Result<SyntheticData> {
    task.validate()?;
    if image.input_dim() != task.input_dim {
        return Err(Error::Config(format!(
            "task input_dim {} but image encoder expects {}",
            task.input_dim,
            image.input_dim()
        )));
    }
    let seed = task.seed.unwrap_or(default_seed);
    let (k, d_tok, len) = (task.num_classes, text.token_dim(), text.tokens_per_prompt());
    let class_ids: Vec<usize> = (0..k).map(|i| task.class_offset + i).collect();
    let modes = if task.class_means.is_some() { 1 } else { task.modes_per_class };
    let a = task.class_weight;
    let b = (1.0 - a * a).sqrt();

    // concept tokens per (class, mode), keyed by global class id
    let concepts: Vec<Vec<f64>> = class_ids
        .iter()
        .flat_map(|&cid| (0..modes).map(move |s| (cid, s)))
        .map(|(cid, s)| {
            let ct = text.class_token(cid);
            let u = normal_vec(&mut rng::stream(seed, "mode-offset", &[cid as u64, s as u64]), d_tok);
            ct.data().iter().zip(&u).map(|(c, o)| a * c + b * o).collect()
        })
        .collect();

    let mode_means = match &task.class_means {
        Some(means) => Tensor::matrix(k, task.input_dim, means.iter().flatten().cloned().collect())?,
        None => {
            let mut targets = Vec::with_capacity(concepts.len());
            for z in &concepts {
                targets.push(text.encode_values(&tokens_of(vec![z.clone(); len])?)?);
            }
            let rows: Vec<Tensor> = targets.iter().map(|t| t.reshaped(vec![t.len()])).collect::<Result<_>>()?;
            invert_image_encoder(image, &Tensor::stack_rows(&rows)?, seed)?
        }
    };
    let spread = task.std * feature_scale(mode_means.data());

    let draw = |split: &str, per_class: usize| -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(k * per_class * task.input_dim);
        let mut labels = Vec::with_capacity(k * per_class);
        for (i, &cid) in class_ids.iter().enumerate() {
            for n in 0..per_class {
                let s = n % modes;
                let mut r = rng::stream(seed, split, &[cid as u64, n as u64]);
                let mu = mode_means.row(i * modes + s);
                data.extend(mu.iter().map(|m| m + spread * normal(&mut r)));
                labels.push(i);
            }
        }
        Ok((Tensor::new(vec![k * per_class, task.input_dim], data)?, labels))
    };
    let (train_raw, train_labels) = draw("train-sample", task.train_per_class)?;
    let (test_raw, test_labels) = if task.test_per_class > 0 {
        draw("test-sample", task.test_per_class)?
    } else {
        (Tensor::zeros(vec![0, task.input_dim]), Vec::new())
    };

    let n_attr = task.attributes_per_class();
    let mut attributes = Vec::with_capacity(k * n_attr);
    let mut texts = Vec::with_capacity(k * n_attr);
    for (i, &cid) in class_ids.iter().enumerate() {
        for j in 0..n_attr {
            let mut r = rng::stream(seed, "attribute-jitter", &[cid as u64, j as u64]);
            let rows: Vec<Vec<f64>> = if j < task.informative_attributes {
                let z = &concepts[i * modes + j % modes];
                (0..len)
                    .map(|_| z.iter().map(|v| v + task.attribute_jitter * normal(&mut r)).collect())
                    .collect()
            } else {
                let g = normal_vec(&mut rng::stream(seed, "noise-attribute", &[j as u64]), d_tok);
                (0..len)
                    .map(|_| g.iter().map(|v| v + task.noise_jitter * normal(&mut r)).collect())
                    .collect()
            };
            let e = text.encode_values(&tokens_of(rows)?)?;
            attributes.push(e.reshaped(vec![e.len()])?);
            texts.push(if j < task.informative_attributes {
                format!("class-{cid} trait {j}")
            } else {
                format!("generic trait {j}")
            });
        }
    }

    let policy = AugmentationPolicy {
        feature_scale: feature_scale(train_raw.data()),
        ..task.augmentation
    };
    Ok(SyntheticData {
        task: task.clone(),
        seed,
        class_ids,
        mode_means,
        train_raw,
        train_labels,
        test_raw,
        test_labels,
        attributes,
        attribute_texts: texts,
        policy,
    })
}

/// Plug-in mutual information (nats) between labels and a soft prediction,
/// with each sample contributing its probability vector as fractional
/// counts to the joint table.
pub fn soft_mutual_information(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Data("mutual information needs one distribution per label".into()));
    }
    let kp = probs[0].len();
    let n = probs.len() as f64;
    let mut joint = vec![0.0; num_classes * kp];
    for (p, &y) in probs.iter().zip(labels) {
        if y >= num_classes || p.len() != kp {
            return Err(Error::Data("label or distribution size out of range".into()));
        }
        for (c, v) in p.iter().enumerate() {
            joint[y * kp + c] += v / n;
        }
    }
    let py: Vec<f64> = (0..num_classes).map(|y| joint[y * kp..(y + 1) * kp].iter().sum()).collect();
    let pc: Vec<f64> = (0..kp).map(|c| (0..num_classes).map(|y| joint[y * kp + c]).sum()).collect();
    let mut mi = 0.0;
    for y in 0..num_classes {
        for c in 0..kp {
            let j = joint[y * kp + c];
            if j > 0.0 {
                mi += j * (j / (py[y] * pc[c])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Label information carried by each attribute slot: soft MI between the
/// test labels and the slot's attribute-matching distribution at `beta`.
pub fn attribute_information(data: &SyntheticData, image: &FrozenImageEncoder, beta: f64) -> Result<Vec<f64>> {
    let k = data.class_ids.len();
    let n = data.task.attributes_per_class();
    let grid = crate::promptbank::prompt_major(&data.attributes, k, n);
    let v = normalize_rows(&image.encode_batch(&data.test_raw)?)?;
    (0..n)
        .map(|j| {
            let probs: Vec<Vec<f64>> = (0..v.rows())
                .map(|s| per_prompt_distribution(v.row(s), &grid, k, j, beta).map(|p| p.probs))
                .collect::<Result<_>>()?;
            soft_mutual_information(&probs, &data.test_labels, k)
        })
        .collect()
}
