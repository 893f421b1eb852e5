//! The diverse pool of learnable prompts, `N` per class, each paired by
//! position with one frozen attribute embedding.
//!
//! Grids are stored class-major (`i * N + j`). Text features produced by
//! [`PromptBank::encode_all`] are laid out prompt-major (`j * K + i`) so that
//! each prompt slot `j` forms a contiguous block of `K` class features, which
//! is the layout the per-prompt softmax consumes.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::rng;

pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Prompts are token sequences encoded live by the frozen text tower.
    Synthetic,
    /// Prompts are learned directly in embedding space.
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Tokens { context: Tensor, class_token: Tensor },
    Embedding(Tensor),
}

impl Prompt {
    fn learnable(&self) -> &Tensor {
        match self {
            Prompt::Tokens { context, .. } => context,
            Prompt::Embedding(e) => e,
        }
    }

    fn learnable_mut(&mut self) -> &mut Tensor {
        match self {
            Prompt::Tokens { context, .. } => context,
            Prompt::Embedding(e) => e,
        }
    }
}

/// How prompts for classes never seen in training are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferRule {
    /// Mean learned context per slot across the trained classes, prepended
    /// to each new class token (token-space banks only).
    #[default]
    MeanContext,
    /// The new classes' attribute embeddings used directly as prompts.
    Attributes,
}

/// Everything needed to build a bank besides the encoder.
#[derive(Debug, Clone)]
pub struct BankInit {
    pub regime: Regime,
    /// Global class ids, one per bank row.
    pub class_ids: Vec<usize>,
    pub prompts_per_class: usize,
    /// `K * N` unit-norm embeddings, class-major.
    pub attributes: Vec<Tensor>,
    pub attribute_texts: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    regime: Regime,
    num_classes: usize,
    prompts_per_class: usize,
    class_ids: Vec<usize>,
    prompts: Vec<Prompt>,
    attributes: Vec<Tensor>,
    attribute_texts: Vec<String>,
}

/// Metadata stored next to a bank checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub regime: Regime,
    pub num_classes: usize,
    pub prompts_per_class: usize,
    pub class_ids: Vec<usize>,
    /// Shape of one learnable block: `[M, d_tok]` or `[d]`.
    pub param_shape: Vec<usize>,
}

/// Text features for every prompt, tape-attached.
pub struct TextFeatureGrid<'t> {
    /// `[N * K x d]`, prompt-major.
    pub features: Var<'t>,
    /// One leaf per prompt, class-major.
    pub params: Vec<Var<'t>>,
    pub num_classes: usize,
    pub prompts_per_class: usize,
}

impl<'t> TextFeatureGrid<'t> {
    pub fn row_index(&self, class: usize, prompt: usize) -> usize {
        prompt * self.num_classes + class
    }

    pub fn feature(&self, class: usize, prompt: usize) -> Tensor {
        let f = self.features.value_ref();
        Tensor::from_parts(vec![f.cols()], f.row(self.row_index(class, prompt)).to_vec())
    }

    /// Gradients for each prompt's learnable block, class-major.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|p| grads.get_or_zeros(*p)).collect()
    }
}

fn check_unit(t: &Tensor, what: &str) -> Result<()> {
    let n = t.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("{what} is not unit-norm (norm {n})")));
    }
    Ok(())
}

impl PromptBank {
    pub fn init(init: BankInit, encoder: Option<&FrozenTextEncoder>) -> Result<Self> {
        let k = init.class_ids.len();
        let n = init.prompts_per_class;
        if n == 0 {
            return Err(Error::Config("a bank needs at least one prompt per class".into()));
        }
        if k < 2 {
            return Err(Error::Config(format!("a bank needs at least two classes, got {k}")));
        }
        if init.attributes.len() != k * n {
            return Err(Error::Config(format!(
                "attribute grid has {} entries, expected {k} x {n}",
                init.attributes.len()
            )));
        }
        for (idx, a) in init.attributes.iter().enumerate() {
            check_unit(a, &format!("attribute ({}, {})", idx / n, idx % n))?;
        }
        let texts = if init.attribute_texts.len() == k * n {
            init.attribute_texts
        } else {
            (0..k * n).map(|idx| format!("attribute {}", idx % n)).collect()
        };
        let prompts = match init.regime {
            Regime::Synthetic => {
                let enc = encoder.ok_or_else(|| {
                    Error::Config("token-space prompts need a text encoder".into())
                })?;
                let (m, d_tok) = (enc.context_len(), enc.token_dim());
                let mut prompts = Vec::with_capacity(k * n);
                for (i, &cid) in init.class_ids.iter().enumerate() {
                    let class_token = enc.class_token(cid);
                    for j in 0..n {
                        let mut r = rng::stream(init.seed, "context-init", &[i as u64, j as u64]);
                        let data: Vec<f64> = (0..m * d_tok)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut r);
                                z * CONTEXT_INIT_STD
                            })
                            .collect();
                        prompts.push(Prompt::Tokens {
                            context: Tensor::from_parts(vec![m, d_tok], data),
                            class_token: class_token.clone(),
                        });
                    }
                }
                prompts
            }
            Regime::Imported => init.attributes.iter().cloned().map(Prompt::Embedding).collect(),
        };
        Ok(Self {
            regime: init.regime,
            num_classes: k,
            prompts_per_class: n,
            class_ids: init.class_ids,
            prompts,
            attributes: init.attributes,
            attribute_texts: texts,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prompts_per_class(&self) -> usize {
        self.prompts_per_class
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn prompt(&self, class: usize, slot: usize) -> &Prompt {
        &self.prompts[class * self.prompts_per_class + slot]
    }

    pub fn attribute(&self, class: usize, slot: usize) -> &Tensor {
        &self.attributes[class * self.prompts_per_class + slot]
    }

    pub fn attributes(&self) -> &[Tensor] {
        &self.attributes
    }

    pub fn attribute_texts(&self) -> &[String] {
        &self.attribute_texts
    }

    /// Attribute grid as `[N * K x d]`, prompt-major like the feature grid.
    pub fn attribute_matrix(&self) -> Tensor {
        prompt_major(&self.attributes, self.num_classes, self.prompts_per_class)
    }

    /// Runs every prompt through the text tower (or normalizes the direct
    /// embeddings) on `tape`, registering one parameter leaf per prompt.
    pub fn encode_all<'t>(
        &self,
        tape: &'t Tape,
        encoder: Option<&FrozenTextEncoder>,
    ) -> Result<TextFeatureGrid<'t>> {
        let (k, n) = (self.num_classes, self.prompts_per_class);
        let params: Vec<Var<'t>> = self.prompts.iter().map(|p| tape.param(p.learnable().clone())).collect();
        let features = match self.regime {
            Regime::Synthetic => {
                let enc = encoder.ok_or_else(|| {
                    Error::Config("token-space prompts need a text encoder".into())
                })?;
                let mut parts = Vec::with_capacity(2 * k * n);
                for j in 0..n {
                    for i in 0..k {
                        let idx = i * n + j;
                        let Prompt::Tokens { class_token, .. } = &self.prompts[idx] else {
                            unreachable!("token-space bank holds token prompts")
                        };
                        parts.push(params[idx]);
                        parts.push(tape.constant(class_token.clone()));
                    }
                }
                let tokens = tape.concat_rows(&parts)?;
                enc.encode(tape, tokens)?
            }
            Regime::Imported => {
                let order: Vec<Var<'t>> = (0..n)
                    .flat_map(|j| (0..k).map(move |i| i * n + j))
                    .map(|idx| params[idx])
                    .collect();
                tape.concat_rows(&order)?.l2_normalize()?
            }
        };
        Ok(TextFeatureGrid {
            features,
            params,
            num_classes: k,
            prompts_per_class: n,
        })
    }

    /// Detached `[N * K x d]` features, prompt-major.
    pub fn feature_matrix(&self, encoder: Option<&FrozenTextEncoder>) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.encode_all(&tape, encoder)?.features.value())
    }

    /// Flat copy of every learnable scalar, class-major.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        self.prompts.iter().flat_map(|p| p.learnable().data().to_vec()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.prompts.iter().map(|p| p.learnable().len()).sum()
    }

    /// Overwrites the learnable scalars from a flat class-major vector.
    pub fn set_trainable_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.trainable_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.prompts {
            let block = p.learnable_mut();
            let len = block.len();
            block.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Adds `step[idx]` to the learnable block of prompt `idx` (class-major).
    pub fn apply_step(&mut self, step: &[Tensor]) -> Result<()> {
        if step.len() != self.prompts.len() {
            return Err(Error::Dimension("one update block per prompt required".into()));
        }
        for (p, s) in self.prompts.iter_mut().zip(step) {
            let block = p.learnable_mut();
            if block.shape() != s.shape() {
                return Err(Error::Dimension("update block shape mismatch".into()));
            }
            for (v, d) in block.data_mut().iter_mut().zip(s.data()) {
                *v += d;
            }
            if block.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter update".into()));
            }
        }
        Ok(())
    }

    /// Prompts for classes outside the bank, keeping this bank untouched.
    pub fn transfer(
        &self,
        encoder: Option<&FrozenTextEncoder>,
        class_ids: Vec<usize>,
        attributes: Vec<Tensor>,
        attribute_texts: Vec<String>,
        rule: TransferRule,
    ) -> Result<PromptBank> {
        let n = self.prompts_per_class;
        let k = class_ids.len();
        if attributes.len() != k * n {
            return Err(Error::Data(format!(
                "transfer needs {k} x {n} attributes, got {}",
                attributes.len()
            )));
        }
        let regime = match (self.regime, rule) {
            (Regime::Synthetic, TransferRule::MeanContext) => Regime::Synthetic,
            _ => Regime::Imported,
        };
        let mut bank = PromptBank::init(
            BankInit {
                regime,
                class_ids: class_ids.clone(),
                prompts_per_class: n,
                attributes,
                attribute_texts,
                seed: 0,
            },
            encoder,
        )?;
        if regime == Regime::Synthetic {
            let enc = encoder.expect("checked by init");
            for j in 0..n {
                let mut mean = Tensor::zeros(self.prompt(0, j).learnable().shape().to_vec());
                for i in 0..self.num_classes {
                    for (m, v) in mean.data_mut().iter_mut().zip(self.prompt(i, j).learnable().data()) {
                        *m += v;
                    }
                }
                let inv = 1.0 / self.num_classes as f64;
                mean.data_mut().iter_mut().for_each(|v| *v *= inv);
                for (i, &cid) in class_ids.iter().enumerate() {
                    bank.prompts[i * n + j] = Prompt::Tokens {
                        context: mean.clone(),
                        class_token: enc.class_token(cid),
                    };
                }
            }
        }
        Ok(bank)
    }

    pub fn meta(&self) -> BankMeta {
        BankMeta {
            regime: self.regime,
            num_classes: self.num_classes,
            prompts_per_class: self.prompts_per_class,
            class_ids: self.class_ids.clone(),
            param_shape: self.prompts[0].learnable().shape().to_vec(),
        }
    }

    /// All learnable blocks stacked as `[K * N * block]` (class-major).
    pub fn checkpoint_tensor(&self) -> Tensor {
        let mut shape = vec![self.num_classes, self.prompts_per_class];
        shape.extend(self.meta().param_shape);
        Tensor::from_parts(shape, self.trainable_parameters())
    }

    /// Rebuilds a bank from checkpoint parameters and its paired attributes.
    pub fn restore(
        meta: &BankMeta,
        params: &Tensor,
        attributes: Vec<Tensor>,
        attribute_texts: Vec<String>,
        encoder: Option<&FrozenTextEncoder>,
    ) -> Result<Self> {
        let mut bank = PromptBank::init(
            BankInit {
                regime: meta.regime,
                class_ids: meta.class_ids.clone(),
                prompts_per_class: meta.prompts_per_class,
                attributes,
                attribute_texts,
                seed: 0,
            },
            encoder,
        )?;
        if bank.meta().param_shape != meta.param_shape {
            return Err(Error::Data(format!(
                "checkpoint block shape {:?} does not match encoder-derived {:?}",
                meta.param_shape,
                bank.meta().param_shape
            )));
        }
        bank.set_trainable_parameters(params.data())?;
        Ok(bank)
    }
}

/// Reorders a class-major `K * N` list into a prompt-major `[N * K x d]` matrix.
pub fn prompt_major(grid: &[Tensor], num_classes: usize, prompts_per_class: usize) -> Tensor {
    let d = grid[0].len();
    let mut data = Vec::with_capacity(grid.len() * d);
    for j in 0..prompts_per_class {
        for i in 0..num_classes {
            data.extend_from_slice(grid[i * prompts_per_class + j].data());
        }
    }
    Tensor::from_parts(vec![num_classes * prompts_per_class, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(k: usize, n: usize, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k * n)
            .map(|_| {
                Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
                    .normalized()
                    .unwrap()
            })
            .collect()
    }

    fn init(regime: Regime, k: usize, n: usize, d: usize, seed: u64) -> BankInit {
        BankInit {
            regime,
            class_ids: (0..k).collect(),
            prompts_per_class: n,
            attributes: unit_grid(k, n, d, seed),
            attribute_texts: vec![],
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let enc = FrozenTextEncoder::new(1, 16, 64, 4).unwrap();
        let a = PromptBank::init(init(Regime::Synthetic, 3, 2, 64, 7), Some(&enc)).unwrap();
        let b = PromptBank::init(init(Regime::Synthetic, 3, 2, 64, 7), Some(&enc)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn imported_init_reproduces_attributes() {
        let bank = PromptBank::init(init(Regime::Imported, 3, 4, 8, 2), None).unwrap();
        let features = bank.feature_matrix(None).unwrap();
        let attrs = bank.attribute_matrix();
        for (a, b) in features.data().iter().zip(attrs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let asa: f64 = -(0..features.rows())
            .map(|r| crate::diffcore::Tensor::vector(features.row(r).to_vec()).unwrap().dot(
                &Tensor::vector(attrs.row(r).to_vec()).unwrap(),
            ))
            .sum::<f64>();
        assert!((asa + 12.0).abs() < 1e-12);
    }

    #[test]
    fn grid_shapes_and_norms() {
        let enc = FrozenTextEncoder::new(1, 16, 64, 4).unwrap();
        let bank = PromptBank::init(init(Regime::Synthetic, 3, 2, 64, 1), Some(&enc)).unwrap();
        let tape = Tape::new();
        let grid = bank.encode_all(&tape, Some(&enc)).unwrap();
        assert_eq!(grid.features.shape(), vec![6, 64]);
        for i in 0..3 {
            for j in 0..2 {
                assert!((grid.feature(i, j).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(
            PromptBank::init(init(Regime::Imported, 3, 0, 8, 0), None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PromptBank::init(init(Regime::Imported, 1, 2, 8, 0), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trainable_counts() {
        let enc = FrozenTextEncoder::new(1, 16, 64, 4).unwrap();
        let bank = PromptBank::init(init(Regime::Synthetic, 9, 10, 64, 1), Some(&enc)).unwrap();
        assert_eq!(bank.trainable_count(), 9 * 10 * 4 * 16);
        let imported = PromptBank::init(init(Regime::Imported, 2, 1, 64, 1), None).unwrap();
        assert_eq!(imported.trainable_count(), 128);
    }

    #[test]
    fn perturbing_one_prompt_changes_one_cell() {
        let enc = FrozenTextEncoder::new(1, 8, 16, 2).unwrap();
        let bank = PromptBank::init(init(Regime::Synthetic, 3, 3, 16, 5), Some(&enc)).unwrap();
        let before = bank.feature_matrix(Some(&enc)).unwrap();
        let mut moved = bank.clone();
        let mut flat = moved.trainable_parameters();
        // prompt (class 1, slot 2) is block 1 * 3 + 2
        let block = 2 * 8;
        flat[5 * block + 3] += 0.3;
        moved.set_trainable_parameters(&flat).unwrap();
        let after = moved.feature_matrix(Some(&enc)).unwrap();
        for r in 0..9 {
            let changed = before.row(r) != after.row(r);
            assert_eq!(changed, r == 2 * 3 + 1, "row {r}");
        }
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let enc = FrozenTextEncoder::new(4, 6, 10, 2).unwrap();
        let bank = PromptBank::init(init(Regime::Synthetic, 2, 2, 10, 3), Some(&enc)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::matrix(4, 10, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |flat: &[f64]| {
            let mut b = bank.clone();
            b.set_trainable_parameters(flat).unwrap();
            let tape = Tape::new();
            let g = b.encode_all(&tape, Some(&enc)).unwrap();
            g.features.mul(tape.constant(w.clone())).unwrap().sum().unwrap().item()
        };
        let tape = Tape::new();
        let grid = bank.encode_all(&tape, Some(&enc)).unwrap();
        let loss = grid.features.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let flat_grad: Vec<f64> = grid.param_grads(&grads).iter().flat_map(|t| t.data().to_vec()).collect();
        let x0 = bank.trainable_parameters();
        for i in 0..x0.len() {
            let fd = central_difference(f, &x0, i, 1e-5);
            assert!(relative_error(flat_grad[i], fd) < 1e-4, "param {i}");
        }
    }

    #[test]
    fn imported_pairing_follows_attribute_order() {
        let base = init(Regime::Imported, 2, 3, 6, 9);
        let mut shuffled = base.clone();
        let perm = [2usize, 0, 1];
        for i in 0..2 {
            for (j, &p) in perm.iter().enumerate() {
                shuffled.attributes[i * 3 + j] = base.attributes[i * 3 + p].clone();
            }
        }
        let a = PromptBank::init(base, None).unwrap();
        let b = PromptBank::init(shuffled, None).unwrap();
        for i in 0..2 {
            for (j, &p) in perm.iter().enumerate() {
                assert_eq!(b.prompt(i, j), a.prompt(i, p));
                assert_eq!(b.attribute(i, j), a.attribute(i, p));
            }
        }
    }

    #[test]
    fn mean_context_transfer_uses_new_class_tokens() {
        let enc = FrozenTextEncoder::new(1, 8, 16, 2).unwrap();
        let bank = PromptBank::init(init(Regime::Synthetic, 2, 2, 16, 5), Some(&enc)).unwrap();
        let attrs = unit_grid(3, 2, 16, 77);
        let moved = bank
            .transfer(Some(&enc), vec![5, 6, 7], attrs, vec![], TransferRule::MeanContext)
            .unwrap();
        let Prompt::Tokens { context, class_token } = moved.prompt(2, 1) else { panic!() };
        assert_eq!(class_token, &enc.class_token(7));
        let Prompt::Tokens { context: c0, .. } = bank.prompt(0, 1) else { panic!() };
        let Prompt::Tokens { context: c1, .. } = bank.prompt(1, 1) else { panic!() };
        for ((m, a), b) in context.data().iter().zip(c0.data()).zip(c1.data()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-15);
        }
    }
}
