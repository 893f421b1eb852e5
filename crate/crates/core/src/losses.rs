//! The four objective terms, the two teacher distributions and their
//! weighted combination.
//!
//! Probabilities are floored at `1e-12` before every logarithm. Teachers:
//! `p_llm` never depends on the prompts; `p_aug` is differentiable inside the
//! entropy term and detached inside the distillation term.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_row, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::promptbank::TextFeatureGrid;
use crate::selection::{self, entropy_of, percentile_threshold, ClassDistribution, SelectionConfig};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Keeps the magnitudes of `self` but switches terms on or off.
    pub fn masked(&self, asa: bool, ler: bool, cmd: bool) -> Self {
        Self {
            lambda1: if asa { self.lambda1 } else { 0.0 },
            lambda2: if ler { self.lambda2 } else { 0.0 },
            lambda3: if cmd { self.lambda3 } else { 0.0 },
        }
    }

    /// The eight on/off rows of the loss ablation, CE always on. Row order:
    /// CE, +LER, +CMD, +ASA, +LER+CMD, +CMD+ASA, +LER+ASA, all.
    pub fn ablation_grid(&self) -> Vec<(String, LossWeights)> {
        // (ler, cmd, asa)
        const ROWS: [(bool, bool, bool); 8] = [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (false, true, true),
            (true, false, true),
            (true, true, true),
        ];
        ROWS.iter()
            .map(|&(ler, cmd, asa)| {
                let mut name = String::from("CE");
                for (on, tag) in [(ler, "LER"), (cmd, "CMD"), (asa, "ASA")] {
                    if on {
                        name.push('+');
                        name.push_str(tag);
                    }
                }
                (name, self.masked(asa, ler, cmd))
            })
            .collect()
    }
}

/// How the `N` attribute embeddings of a class combine into the LLM teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherRule {
    /// Mean of cosines per class, then one softmax.
    #[default]
    MeanCosine,
    /// Per-attribute distributions, entropy-selected and averaged.
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub asa: f64,
    pub ler: f64,
    pub cmd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.ce + w.lambda1 * self.asa + w.lambda2 * self.ler + w.lambda3 * self.cmd
    }
}

fn floor_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `-ln p[label]` with flooring.
pub fn loss_ce(p: &ClassDistribution, label: usize) -> Result<f64> {
    let v = p
        .probs
        .get(label)
        .ok_or_else(|| Error::Index(format!("label {label} out of range for {} classes", p.len())))?;
    Ok(-floor_ln(*v))
}

/// `KL(a || b) = sum a ln(a / b)` with flooring on both sides.
pub fn kl_divergence(a: &ClassDistribution, b: &ClassDistribution) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("KL between sizes {} and {}", a.len(), b.len())));
    }
    Ok(a.probs
        .iter()
        .zip(&b.probs)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (floor_ln(x) - floor_ln(y)))
        .sum())
}

fn same_len(ps: &[&ClassDistribution]) -> Result<()> {
    if ps.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::Dimension("distributions differ in class count".into()));
    }
    Ok(())
}

pub fn loss_ler(p: &ClassDistribution, p_llm: &ClassDistribution, p_aug: &ClassDistribution) -> Result<f64> {
    same_len(&[p, p_llm, p_aug])?;
    Ok(entropy_of(&p.probs) + entropy_of(&p_llm.probs) + entropy_of(&p_aug.probs))
}

pub fn loss_cmd(p: &ClassDistribution, p_llm: &ClassDistribution, p_aug: &ClassDistribution) -> Result<f64> {
    Ok(kl_divergence(p_llm, p)? + kl_divergence(p_aug, p)?)
}

/// `-sum_i sum_j cos(T_i^j, A_i^j)` for two `[N * K x d]` grids in the same layout.
pub fn loss_asa(features: &Tensor, attributes: &Tensor) -> Result<f64> {
    if features.shape() != attributes.shape() {
        return Err(Error::Dimension(format!(
            "feature grid {:?} vs attribute grid {:?}",
            features.shape(),
            attributes.shape()
        )));
    }
    let mut s = 0.0;
    for r in 0..features.rows() {
        let (t, a) = (features.row(r), attributes.row(r));
        let dot: f64 = t.iter().zip(a).map(|(x, y)| x * y).sum();
        let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        s += dot / (nt * na);
    }
    Ok(-s)
}

/// LLM teacher for one image embedding against prompt-major attributes.
pub fn teacher_llm(
    image: &[f64],
    attributes: &Tensor,
    num_classes: usize,
    beta: f64,
    rule: TeacherRule,
    rho: f64,
) -> Result<ClassDistribution> {
    let n = attributes.rows() / num_classes;
    match rule {
        TeacherRule::MeanCosine => {
            let mut logits = vec![0.0; num_classes];
            for j in 0..n {
                for (i, l) in logits.iter_mut().enumerate() {
                    *l += cosine(image, attributes.row(j * num_classes + i)) / n as f64;
                }
            }
            let scaled: Vec<f64> = logits.iter().map(|l| l / beta).collect();
            Ok(ClassDistribution {
                probs: softmax_row(&scaled),
            })
        }
        TeacherRule::Entropy => {
            let per: Vec<ClassDistribution> = (0..n)
                .map(|j| selection::per_prompt_distribution(image, attributes, num_classes, j, beta))
                .collect::<Result<_>>()?;
            let h: Vec<f64> = per.iter().map(selection::self_entropy).collect();
            let tau = percentile_threshold(&h, rho)?;
            let chosen: Vec<&ClassDistribution> = per.iter().zip(&h).filter(|(_, &e)| e <= tau).map(|(p, _)| p).collect();
            let mut agg = vec![0.0; num_classes];
            for p in &chosen {
                for (a, v) in agg.iter_mut().zip(&p.probs) {
                    *a += v / chosen.len() as f64;
                }
            }
            Ok(ClassDistribution { probs: agg })
        }
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    uv / (nu * nv)
}

/// `1/2 (p(x^w) + p(x^s))` from the full selection pipeline on each view.
pub fn teacher_aug(
    weak: &[f64],
    strong: &[f64],
    features: &Tensor,
    num_classes: usize,
    cfg: &SelectionConfig,
) -> Result<ClassDistribution> {
    let (_, tw) = selection::predict(weak, features, num_classes, cfg)?;
    let (_, ts) = selection::predict(strong, features, num_classes, cfg)?;
    Ok(ClassDistribution {
        probs: tw
            .aggregate
            .probs
            .iter()
            .zip(&ts.aggregate.probs)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    })
}

/// Image embeddings of one mini-batch, one row per sample in every view.
pub struct BatchViews<'a> {
    pub original: &'a Tensor,
    pub weak: &'a Tensor,
    pub strong: &'a Tensor,
    pub labels: &'a [usize],
}

/// Everything the composite objective needs besides the batch.
pub struct ObjectiveContext<'a> {
    /// Prompt-major `[N * K x d]` attribute embeddings.
    pub attributes: &'a Tensor,
    pub selection: SelectionConfig,
    pub weights: LossWeights,
    pub teacher: TeacherRule,
    /// Replaces the detached `[B x K]` augmentation teacher of the
    /// distillation term; finite-difference checks hold it fixed this way.
    pub frozen_aug: Option<&'a Tensor>,
}

/// `-sum p ln floor(p)` per row of `[B x K]`, shape `[B]`.
fn entropy_rows<'t>(p: Var<'t>) -> Result<Var<'t>> {
    p.mul(p.floor_at(PROB_FLOOR)?.log()?)?.sum_last()?.neg()
}

/// Per-row `KL(a || p)` for a constant teacher `a` and student `p`, shape `[B]`.
fn kl_rows<'t>(tape: &'t Tape, a: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    let self_term: Vec<f64> = a
        .data()
        .chunks(a.cols())
        .map(|row| row.iter().filter(|&&x| x > 0.0).map(|&x| x * floor_ln(x)).sum())
        .collect();
    let self_term = tape.constant(Tensor::from_parts(vec![self_term.len()], self_term));
    let cross = tape.constant(a.clone()).mul(p.floor_at(PROB_FLOOR)?.log()?)?.sum_last()?;
    self_term.sub(cross)
}

/// The four objective terms and their weighted total, as tape values.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub ce: Var<'t>,
    pub asa: Var<'t>,
    pub ler: Var<'t>,
    pub cmd: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce.item(),
            asa: self.asa.item(),
            ler: self.ler.item(),
            cmd: self.cmd.item(),
            total: self.total.item(),
        }
    }
}

/// Composite objective for one mini-batch, on the tape that produced `grid`.
pub fn total_loss<'t>(
    tape: &'t Tape,
    grid: &TextFeatureGrid<'t>,
    batch: &BatchViews<'_>,
    ctx: &ObjectiveContext<'_>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let terms = loss_terms(tape, grid, batch, ctx)?;
    Ok((terms.total, terms.breakdown()))
}

/// Every objective term for one mini-batch.
pub fn loss_terms<'t>(
    tape: &'t Tape,
    grid: &TextFeatureGrid<'t>,
    batch: &BatchViews<'_>,
    ctx: &ObjectiveContext<'_>,
) -> Result<LossTerms<'t>> {
    ctx.weights.validate()?;
    let k = grid.num_classes;
    let b = batch.labels.len();
    if b == 0 {
        return Err(Error::Data("empty mini-batch".into()));
    }
    for view in [batch.original, batch.weak, batch.strong] {
        if view.rows() != b {
            return Err(Error::Dimension(format!("view has {} rows for {b} labels", view.rows())));
        }
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
    }
    let feats = grid.features;
    if feats.shape() != ctx.attributes.shape() {
        return Err(Error::Dimension(format!(
            "feature grid {:?} vs attribute grid {:?}",
            feats.shape(),
            ctx.attributes.shape()
        )));
    }
    let sel = ctx.selection.for_training();
    let (p, _) = selection::forward_batch(tape, batch.original, feats, k, &sel)?;
    let (pw, _) = selection::forward_batch(tape, batch.weak, feats, k, &sel)?;
    let (ps, _) = selection::forward_batch(tape, batch.strong, feats, k, &sel)?;
    let p_aug = pw.add(ps)?.scale(0.5)?;

    // cross-entropy on the aggregate
    let onehot = {
        let mut m = vec![0.0; b * k];
        for (s, &y) in batch.labels.iter().enumerate() {
            m[s * k + y] = 1.0;
        }
        tape.constant(Tensor::from_parts(vec![b, k], m))
    };
    let ce = onehot.mul(p.floor_at(PROB_FLOOR)?.log()?)?.sum()?.scale(-1.0 / b as f64)?;

    // attribute alignment; both grids have unit rows
    let attr_unit = unit_rows(ctx.attributes)?;
    let asa = feats.mul(tape.constant(attr_unit))?.sum()?.neg()?;

    // LLM teacher, constant w.r.t. the prompts
    let mut llm = Vec::with_capacity(b * k);
    for s in 0..b {
        let t = teacher_llm(
            batch.original.row(s),
            ctx.attributes,
            k,
            ctx.selection.beta,
            ctx.teacher,
            ctx.selection.rho,
        )?;
        llm.extend(t.probs);
    }
    let p_llm = Tensor::from_parts(vec![b, k], llm);
    let h_llm: f64 = p_llm.data().chunks(k).map(entropy_of).sum::<f64>() / b as f64;

    let ler = entropy_rows(p)?
        .mean()?
        .add(entropy_rows(p_aug)?.mean()?)?
        .add_scalar(h_llm)?;

    let aug_detached = match ctx.frozen_aug {
        Some(t) if t.shape() == [b, k] => t.clone(),
        Some(t) => return Err(Error::Dimension(format!("frozen teacher {:?} for batch {b} x {k}", t.shape()))),
        None => p_aug.value(),
    };
    let cmd = kl_rows(tape, &p_llm, p)?.mean()?.add(kl_rows(tape, &aug_detached, p)?.mean()?)?;

    let w = ctx.weights;
    let total = ce
        .add(asa.scale(w.lambda1)?)?
        .add(ler.scale(w.lambda2)?)?
        .add(cmd.scale(w.lambda3)?)?;
    Ok(LossTerms { ce, asa, ler, cmd, total })
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    selection::normalize_rows(t)
}
