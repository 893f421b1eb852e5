//! Finite-difference check of the objective's tape gradients.
//!
//! Each seed builds a random bank, attribute grid and batch, then compares
//! the tape gradient of every objective term, and of the total under each
//! ablation weighting, with central differences at sampled parameters. The
//! augmentation teacher inside the distillation term is held at its
//! base-point value, matching its detached role.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::diffcore::gradcheck::{central_difference, relative_error};
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::losses::{loss_terms, teacher_aug, BatchViews, LossTerms, LossWeights, ObjectiveContext, TeacherRule};
use crate::promptbank::{prompt_major, BankInit, PromptBank, Regime, TextFeatureGrid};
use crate::rng;
use crate::selection::{SelectionConfig, Strategy};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct FidelitySpec {
    pub regime: Regime,
    pub num_classes: usize,
    pub prompts_per_class: usize,
    pub context_len: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub beta: f64,
    pub rho: f64,
    pub teacher: TeacherRule,
    pub weights: LossWeights,
    pub seeds: Vec<u64>,
    /// Distinct parameters sampled per seed.
    pub samples: usize,
    pub step: f64,
}

impl Default for FidelitySpec {
    fn default() -> Self {
        Self {
            regime: Regime::Synthetic,
            num_classes: 4,
            prompts_per_class: 5,
            context_len: 2,
            token_dim: 8,
            embed_dim: 16,
            batch: 4,
            beta: 0.05,
            rho: 50.0,
            teacher: TeacherRule::MeanCosine,
            weights: LossWeights::default(),
            seeds: (0..10).collect(),
            samples: 100,
            step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    /// `ce`, `asa`, `ler`, `cmd`, or `total[<row>]`.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Case {
    enc: FrozenTextEncoder,
    bank: PromptBank,
    attributes: Tensor,
    views: [Tensor; 3],
    labels: Vec<usize>,
}

fn unit_rows(r: &mut impl Rng, rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::from_parts(vec![rows, d], data)
}

fn build_case(spec: &FidelitySpec, seed: u64) -> Result<Case> {
    let (k, n, d) = (spec.num_classes, spec.prompts_per_class, spec.embed_dim);
    let enc = FrozenTextEncoder::new(seed, spec.token_dim, d, spec.context_len)?;
    let mut r = rng::stream(seed, "fidelity-case", &[]);
    let attr_rows = unit_rows(&mut r, k * n, d);
    let attributes: Vec<Tensor> = (0..k * n).map(|i| Tensor::from_parts(vec![d], attr_rows.row(i).to_vec())).collect();
    let mut bank = PromptBank::init(
        BankInit {
            regime: spec.regime,
            class_ids: (0..k).collect(),
            prompts_per_class: n,
            attributes: attributes.clone(),
            attribute_texts: Vec::new(),
            seed,
        },
        Some(&enc),
    )?;
    // move the parameters off their initial point so every term is active
    let spread: Vec<f64> = bank.trainable_parameters().iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
    bank.set_trainable_parameters(&spread)?;
    let views = [
        unit_rows(&mut r, spec.batch, d),
        unit_rows(&mut r, spec.batch, d),
        unit_rows(&mut r, spec.batch, d),
    ];
    Ok(Case {
        enc,
        bank,
        attributes: prompt_major(&attributes, k, n),
        views,
        labels: (0..spec.batch).map(|s| s % k).collect(),
    })
}

fn selection(spec: &FidelitySpec) -> SelectionConfig {
    SelectionConfig {
        beta: spec.beta,
        rho: spec.rho,
        strategy: Strategy::Entropy,
        ..SelectionConfig::default()
    }
}

fn with_terms<T>(
    spec: &FidelitySpec,
    case: &Case,
    bank: &PromptBank,
    weights: LossWeights,
    frozen: Option<&Tensor>,
    f: impl FnOnce(&Tape, &LossTerms<'_>, &TextFeatureGrid<'_>) -> Result<T>,
) -> Result<T> {
    let tape = Tape::new();
    let grid = bank.encode_all(&tape, Some(&case.enc))?;
    let batch = BatchViews {
        original: &case.views[0],
        weak: &case.views[1],
        strong: &case.views[2],
        labels: &case.labels,
    };
    let ctx = ObjectiveContext {
        attributes: &case.attributes,
        selection: selection(spec),
        weights,
        teacher: spec.teacher,
        frozen_aug: frozen,
    };
    let terms = loss_terms(&tape, &grid, &batch, &ctx)?;
    f(&tape, &terms, &grid)
}

fn aug_teacher(spec: &FidelitySpec, case: &Case) -> Result<Tensor> {
    let feats = case.bank.feature_matrix(Some(&case.enc))?;
    let k = spec.num_classes;
    let mut v = Vec::with_capacity(case.labels.len() * k);
    for s in 0..case.labels.len() {
        v.extend(teacher_aug(case.views[1].row(s), case.views[2].row(s), &feats, k, &selection(spec))?.probs);
    }
    Tensor::matrix(case.labels.len(), k, v)
}

#[derive(Clone, Copy)]
enum Probe {
    Ce,
    Asa,
    Ler,
    Cmd,
    Total(LossWeights),
}

fn target<'t>(probe: Probe, t: &LossTerms<'t>) -> Var<'t> {
    match probe {
        Probe::Ce => t.ce,
        Probe::Asa => t.asa,
        Probe::Ler => t.ler,
        Probe::Cmd => t.cmd,
        Probe::Total(_) => t.total,
    }
}

/// Runs the whole suite; one result per term and per ablation row.
pub fn run(spec: &FidelitySpec) -> Result<Vec<ProbeResult>> {
    let mut probes: Vec<(String, Probe)> = vec![
        ("ce".into(), Probe::Ce),
        ("asa".into(), Probe::Asa),
        ("ler".into(), Probe::Ler),
        ("cmd".into(), Probe::Cmd),
    ];
    for (name, w) in spec.weights.ablation_grid() {
        probes.push((format!("total[{name}]"), Probe::Total(w)));
    }
    let mut results: Vec<ProbeResult> = probes
        .iter()
        .map(|(name, _)| ProbeResult {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
        })
        .collect();
    for &seed in &spec.seeds {
        let case = build_case(spec, seed)?;
        let theta = case.bank.trainable_parameters();
        if spec.samples > theta.len() {
            return Err(Error::Config(format!(
                "{} samples requested from {} parameters",
                spec.samples,
                theta.len()
            )));
        }
        let frozen = aug_teacher(spec, &case)?;
        let idx = sample(&mut rng::stream(seed, "fidelity-sample", &[]), theta.len(), spec.samples).into_vec();
        for ((_, probe), out) in probes.iter().zip(results.iter_mut()) {
            let weights = match probe {
                Probe::Total(w) => *w,
                _ => spec.weights,
            };
            let grads = with_terms(spec, &case, &case.bank, weights, Some(&frozen), |tape, terms, grid| {
                let g = tape.backward(target(*probe, terms))?;
                Ok(grid.param_grads(&g).into_iter().flat_map(|t| t.into_data()).collect::<Vec<f64>>())
            })?;
            for &i in &idx {
                let f = |x: &[f64]| {
                    let mut b = case.bank.clone();
                    b.set_trainable_parameters(x).expect("same length");
                    with_terms(spec, &case, &b, weights, Some(&frozen), |_, t, _| Ok(target(*probe, t).item()))
                        .expect("objective evaluates at the base point")
                };
                let fd = central_difference(f, &theta, i, spec.step);
                out.max_rel_error = out.max_rel_error.max(relative_error(grads[i], fd));
                out.checked += 1;
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_for_both_regimes() {
        for regime in [Regime::Synthetic, Regime::Imported] {
            let spec = FidelitySpec {
                regime,
                seeds: vec![0, 1],
                samples: 10,
                ..FidelitySpec::default()
            };
            let res = run(&spec).unwrap();
            assert_eq!(res.len(), 12);
            for r in &res {
                assert_eq!(r.checked, 20);
                assert!(r.passed(), "{regime:?} {}: {}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn too_many_samples_is_a_config_error() {
        let spec = FidelitySpec {
            samples: 1_000_000,
            seeds: vec![0],
            ..FidelitySpec::default()
        };
        assert!(matches!(run(&spec), Err(Error::Config(_))));
    }
}
