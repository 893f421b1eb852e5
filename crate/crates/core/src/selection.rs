//! Per-prompt class distributions, self-entropy, percentile thresholding and
//! the aggregation strategies that turn `N` distributions into one.
//!
//! Aggregation weights are always computed from forward values and enter the
//! tape as constants: no gradient flows through the selection indicator or
//! through any confidence-derived weighting, only through the selected
//! distributions themselves.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{softmax_row, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Entropy,
    Softmax,
    Mean,
    AvgLogits,
    Argmax,
    TopK(usize),
}

impl Strategy {
    /// The comparison set reported by the strategy ablation, in table order.
    pub fn ablation_set() -> Vec<Strategy> {
        vec![
            Strategy::Softmax,
            Strategy::Mean,
            Strategy::AvgLogits,
            Strategy::Argmax,
            Strategy::TopK(2),
            Strategy::TopK(5),
            Strategy::Entropy,
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Entropy => f.write_str("entropy"),
            Strategy::Softmax => f.write_str("softmax"),
            Strategy::Mean => f.write_str("mean"),
            Strategy::AvgLogits => f.write_str("avg_logits"),
            Strategy::Argmax => f.write_str("argmax"),
            Strategy::TopK(k) => write!(f, "top{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "entropy" => Strategy::Entropy,
            "softmax" => Strategy::Softmax,
            "mean" => Strategy::Mean,
            "avg_logits" | "avglogits" => Strategy::AvgLogits,
            "argmax" => Strategy::Argmax,
            other => match other.strip_prefix("top") {
                Some(k) => Strategy::TopK(
                    k.trim_start_matches(['_', '-'])
                        .parse()
                        .map_err(|_| Error::Config(format!("bad top-k strategy {s:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown strategy {s:?}"))),
            },
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which aggregation the training objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainSelection {
    /// Same strategy as inference.
    #[default]
    Same,
    /// Plain mean over prompts during training.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub beta: f64,
    pub rho: f64,
    pub strategy: Strategy,
    pub train_selection: TrainSelection,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            rho: 50.0,
            strategy: Strategy::Entropy,
            train_selection: TrainSelection::Same,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.rho > 0.0 && self.rho <= 100.0) {
            return Err(Error::Config(format!("rho must lie in (0, 100], got {}", self.rho)));
        }
        if let Strategy::TopK(0) = self.strategy {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        Ok(())
    }

    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }

    /// The configuration the training objective aggregates with.
    pub fn for_training(&self) -> Self {
        match self.train_selection {
            TrainSelection::Same => *self,
            TrainSelection::Mean => self.with_strategy(Strategy::Mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub per_prompt_probs: Vec<ClassDistribution>,
    pub entropies: Vec<f64>,
    /// Percentile threshold; present for the entropy strategy only.
    pub threshold: Option<f64>,
    pub selected_mask: Vec<bool>,
    pub weights: Vec<f64>,
    pub aggregate: ClassDistribution,
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn self_entropy(p: &ClassDistribution) -> f64 {
    entropy_of(&p.probs)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Nearest-rank percentile: the `ceil(rho / 100 * N)`-th smallest value.
pub fn percentile_threshold(entropies: &[f64], rho: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::Data("percentile of an empty entropy list".into()));
    }
    if !(rho > 0.0 && rho <= 100.0) {
        return Err(Error::Config(format!("rho must lie in (0, 100], got {rho}")));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((rho / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    uv / (nu * nv)
}

/// `p^j(y | x)`: softmax over classes of `cos(V, T_i^j) / beta` for prompt
/// slot `j`, with `features` laid out prompt-major `[N * K x d]`.
pub fn per_prompt_distribution(
    image: &[f64],
    features: &Tensor,
    num_classes: usize,
    slot: usize,
    beta: f64,
) -> Result<ClassDistribution> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let logits: Vec<f64> = (0..num_classes)
        .map(|i| cosine(image, features.row(slot * num_classes + i)) / beta)
        .collect();
    Ok(ClassDistribution {
        probs: softmax_row(&logits),
    })
}

/// Aggregation weights over prompts plus the bookkeeping for the trace.
#[derive(Debug, Clone)]
pub struct PromptWeights {
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: Option<f64>,
    /// True when the weights apply to logits before one final softmax.
    pub on_logits: bool,
}

/// Strategy weights from the per-prompt distributions of one sample.
pub fn strategy_weights(per_prompt: &[ClassDistribution], entropies: &[f64], cfg: &SelectionConfig) -> Result<PromptWeights> {
    let n = per_prompt.len();
    if n == 0 {
        return Err(Error::Data("no prompts to aggregate".into()));
    }
    let uniform = |mask: Vec<bool>| {
        let count = mask.iter().filter(|&&m| m).count() as f64;
        let weights = mask.iter().map(|&m| if m { 1.0 / count } else { 0.0 }).collect();
        (weights, mask)
    };
    let by_confidence = |k: usize| {
        let mut order: Vec<usize> = (0..n).collect();
        // stable: equal confidence keeps the lower prompt index first
        order.sort_by(|&a, &b| per_prompt[b].max_prob().total_cmp(&per_prompt[a].max_prob()));
        let mut mask = vec![false; n];
        for &j in order.iter().take(k) {
            mask[j] = true;
        }
        mask
    };
    Ok(match cfg.strategy {
        Strategy::Entropy => {
            let tau = percentile_threshold(entropies, cfg.rho)?;
            let (weights, mask) = uniform(entropies.iter().map(|&h| h <= tau).collect());
            PromptWeights {
                weights,
                mask,
                threshold: Some(tau),
                on_logits: false,
            }
        }
        Strategy::Mean => {
            let (weights, mask) = uniform(vec![true; n]);
            PromptWeights {
                weights,
                mask,
                threshold: None,
                on_logits: false,
            }
        }
        Strategy::AvgLogits => {
            let (weights, mask) = uniform(vec![true; n]);
            PromptWeights {
                weights,
                mask,
                threshold: None,
                on_logits: true,
            }
        }
        Strategy::Softmax => {
            let neg: Vec<f64> = entropies.iter().map(|h| -h).collect();
            PromptWeights {
                weights: softmax_row(&neg),
                mask: vec![true; n],
                threshold: None,
                on_logits: false,
            }
        }
        Strategy::Argmax => {
            let (weights, mask) = uniform(by_confidence(1));
            PromptWeights {
                weights,
                mask,
                threshold: None,
                on_logits: false,
            }
        }
        Strategy::TopK(k) => {
            if k > n {
                log::warn!("top-{k} requested with only {n} prompts; using all {n}");
            }
            let (weights, mask) = uniform(by_confidence(k.min(n)));
            PromptWeights {
                weights,
                mask,
                threshold: None,
                on_logits: false,
            }
        }
    })
}

/// Aggregates per-prompt distributions of one sample. `logits` are the
/// per-prompt class logits (already divided by beta), needed only by the
/// logit-averaging strategy.
pub fn aggregate(
    per_prompt: Vec<ClassDistribution>,
    logits: &[Vec<f64>],
    cfg: &SelectionConfig,
) -> Result<SelectionTrace> {
    let entropies: Vec<f64> = per_prompt.iter().map(self_entropy).collect();
    let w = strategy_weights(&per_prompt, &entropies, cfg)?;
    let k = per_prompt[0].len();
    let aggregate = if w.on_logits {
        let mut mean = vec![0.0; k];
        for (row, &wj) in logits.iter().zip(&w.weights) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += wj * v;
            }
        }
        softmax_row(&mean)
    } else {
        let mut agg = vec![0.0; k];
        for (p, &wj) in per_prompt.iter().zip(&w.weights) {
            if wj == 0.0 {
                continue;
            }
            for (a, v) in agg.iter_mut().zip(&p.probs) {
                *a += wj * v;
            }
        }
        agg
    };
    Ok(SelectionTrace {
        per_prompt_probs: per_prompt,
        entropies,
        threshold: w.threshold,
        selected_mask: w.mask,
        weights: w.weights,
        aggregate: ClassDistribution { probs: aggregate },
    })
}

/// Label and trace for one image embedding against a prompt-major feature grid.
pub fn predict(
    image: &[f64],
    features: &Tensor,
    num_classes: usize,
    cfg: &SelectionConfig,
) -> Result<(usize, SelectionTrace)> {
    let n = features.rows() / num_classes;
    let mut per_prompt = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for j in 0..n {
        let l: Vec<f64> = (0..num_classes)
            .map(|i| cosine(image, features.row(j * num_classes + i)) / cfg.beta)
            .collect();
        per_prompt.push(ClassDistribution { probs: softmax_row(&l) });
        logits.push(l);
    }
    let trace = aggregate(per_prompt, &logits, cfg)?;
    Ok((trace.aggregate.argmax(), trace))
}

/// Row-normalized copy of a `[B x d]` image batch.
pub fn normalize_rows(images: &Tensor) -> Result<Tensor> {
    let d = images.cols();
    let mut out = Vec::with_capacity(images.len());
    for r in 0..images.rows() {
        let row = images.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!("image embedding row {r} is zero")));
        }
        out.extend(row.iter().map(|v| v / n));
    }
    Ok(Tensor::from_parts(vec![images.rows(), d], out))
}

/// On-tape batched pipeline: `[B x d]` images against `[N * K x d]`
/// prompt-major features, returning the `[B x K]` aggregate and a trace per
/// sample. Aggregation weights enter as constants.
pub fn forward_batch<'t>(
    tape: &'t Tape,
    images: &Tensor,
    features: Var<'t>,
    num_classes: usize,
    cfg: &SelectionConfig,
) -> Result<(Var<'t>, Vec<SelectionTrace>)> {
    cfg.validate()?;
    let b = images.rows();
    let nk = features.shape()[0];
    if nk % num_classes != 0 {
        return Err(Error::Dimension(format!("{nk} feature rows for {num_classes} classes")));
    }
    let n = nk / num_classes;
    let v = tape.constant(normalize_rows(images)?);
    let logits = v
        .matmul(features.transpose()?)?
        .scale(1.0 / cfg.beta)?
        .reshape(vec![b * n, num_classes])?;
    let probs = logits.softmax()?;

    let (pv, lv) = (probs.value(), logits.value());
    let mut weights = Vec::with_capacity(b * n);
    let mut traces = Vec::with_capacity(b);
    let mut on_logits = false;
    for s in 0..b {
        let per_prompt: Vec<ClassDistribution> = (0..n)
            .map(|j| ClassDistribution {
                probs: pv.row(s * n + j).to_vec(),
            })
            .collect();
        let sample_logits: Vec<Vec<f64>> = (0..n).map(|j| lv.row(s * n + j).to_vec()).collect();
        let trace = aggregate(per_prompt, &sample_logits, cfg)?;
        on_logits = matches!(cfg.strategy, Strategy::AvgLogits);
        weights.extend_from_slice(&trace.weights);
        traces.push(trace);
    }
    let agg = if on_logits {
        logits.group_weighted_sum(n, weights)?.softmax()?
    } else {
        probs.group_weighted_sum(n, weights)?
    };
    Ok((agg, traces))
}

/// Detached batched scoring; returns one trace per image.
pub fn score_batch(
    images: &Tensor,
    features: &Tensor,
    num_classes: usize,
    cfg: &SelectionConfig,
) -> Result<Vec<SelectionTrace>> {
    if images.rows() == 0 {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let f = tape.constant(features.clone());
    let (agg, mut traces) = forward_batch(&tape, images, f, num_classes, cfg)?;
    let a = agg.value();
    for (s, t) in traces.iter_mut().enumerate() {
        t.aggregate = ClassDistribution {
            probs: a.row(s).to_vec(),
        };
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as Gen;

    fn dist(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn per_prompt_distribution_cases() {
        // K = 2, one slot, cosines (1, 0)
        let f = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = per_prompt_distribution(&[1.0, 0.0], &f, 2, 0, 1.0).unwrap();
        assert!((p.probs[0] - 0.7310586).abs() < 1e-7);
        assert!((p.probs[1] - 0.2689414).abs() < 1e-7);
        let sharp = per_prompt_distribution(&[1.0, 0.0], &f, 2, 0, 0.01).unwrap();
        assert!(sharp.probs[1] < 1e-40 && sharp.probs[0] == 1.0);
        let equal = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = per_prompt_distribution(&[1.0, 1.0], &equal, 3, 0, 0.5).unwrap();
        for v in u.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            per_prompt_distribution(&[1.0, 0.0], &f, 2, 0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn entropy_cases() {
        assert!((self_entropy(&ClassDistribution::uniform(4)) - 1.3862944).abs() < 1e-7);
        assert_eq!(self_entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        assert!((self_entropy(&dist(&[0.7, 0.2, 0.1])) - 0.8018186).abs() < 1e-7);
    }

    #[test]
    fn percentile_cases() {
        assert_eq!(percentile_threshold(&[0.9, 0.1, 1.3, 0.5], 50.0).unwrap(), 0.5);
        assert_eq!(percentile_threshold(&[0.9, 0.1, 1.3, 0.5], 100.0).unwrap(), 1.3);
        assert_eq!(percentile_threshold(&[0.4; 5], 30.0).unwrap(), 0.4);
        assert!(percentile_threshold(&[], 50.0).is_err());
    }

    #[test]
    fn tied_entropies_select_everything() {
        let p = vec![dist(&[0.6, 0.4]); 3];
        let t = aggregate(p, &vec![vec![0.0; 2]; 3], &SelectionConfig::default()).unwrap();
        assert!(t.selected_mask.iter().all(|&m| m));
    }

    #[test]
    fn singleton_and_degenerate_pools() {
        for strategy in Strategy::ablation_set() {
            let cfg = SelectionConfig::default().with_strategy(strategy);
            let single = vec![dist(&[0.2, 0.5, 0.3])];
            let logits = vec![vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]];
            let t = aggregate(single, &logits, &cfg).unwrap();
            for (a, b) in t.aggregate.probs.iter().zip([0.2, 0.5, 0.3]) {
                assert!((a - b).abs() < 1e-12, "{strategy}");
            }
            let same = vec![dist(&[0.2, 0.5, 0.3]); 4];
            let t = aggregate(same, &vec![logits[0].clone(); 4], &cfg).unwrap();
            for (a, b) in t.aggregate.probs.iter().zip([0.2, 0.5, 0.3]) {
                assert!((a - b).abs() < 1e-12, "{strategy}");
            }
        }
    }

    #[test]
    fn top_k_clamps_to_pool_size() {
        let p = vec![dist(&[0.9, 0.1]), dist(&[0.3, 0.7])];
        let cfg = SelectionConfig::default().with_strategy(Strategy::TopK(5));
        let t = aggregate(p, &[vec![0.0; 2], vec![0.0; 2]], &cfg).unwrap();
        assert_eq!(t.selected_mask, vec![true, true]);
        assert!((t.aggregate.probs[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn argmax_picks_most_confident_prompt() {
        let p = vec![dist(&[0.6, 0.4]), dist(&[0.1, 0.9]), dist(&[0.5, 0.5])];
        let cfg = SelectionConfig::default().with_strategy(Strategy::Argmax);
        let t = aggregate(p, &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]], &cfg).unwrap();
        assert_eq!(t.aggregate.probs, vec![0.1, 0.9]);
    }

    #[test]
    fn predict_tie_break_and_argmax() {
        assert_eq!(dist(&[0.1, 0.6, 0.3]).argmax(), 1);
        assert_eq!(dist(&[0.5, 0.5]).argmax(), 0);
    }

    #[test]
    fn strategy_round_trips_through_strings() {
        for s in Strategy::ablation_set() {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    fn instance() -> impl Gen<Value = (Vec<ClassDistribution>, Vec<Vec<f64>>)> {
        (2usize..=5, 1usize..=8).prop_flat_map(|(k, n)| {
            proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, k), n).prop_map(|logits| {
                let probs = logits.iter().map(|l| ClassDistribution { probs: softmax_row(l) }).collect();
                (probs, logits)
            })
        })
    }

    proptest! {
        #[test]
        fn aggregate_is_a_distribution((p, l) in instance(), idx in 0usize..7, rho in 1.0f64..=100.0) {
            let strategy = Strategy::ablation_set()[idx];
            let cfg = SelectionConfig { rho, ..SelectionConfig::default() }.with_strategy(strategy);
            let t = aggregate(p, &l, &cfg).unwrap();
            prop_assert!(t.aggregate.probs.iter().all(|&v| v >= 0.0));
            prop_assert!((t.aggregate.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(t.selected_mask.iter().any(|&m| m));
            if let Some(tau) = t.threshold {
                for (h, &m) in t.entropies.iter().zip(&t.selected_mask) {
                    if m { prop_assert!(*h <= tau); }
                }
            }
        }

        #[test]
        fn entropy_aggregate_is_permutation_invariant((p, l) in instance(), seed in 0u64..1000) {
            let cfg = SelectionConfig::default();
            let base = aggregate(p.clone(), &l, &cfg).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            let n = order.len();
            for i in (1..n).rev() {
                order.swap(i, (seed as usize * 31 + i * 17) % (i + 1));
            }
            let pp: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
            let ll: Vec<_> = order.iter().map(|&i| l[i].clone()).collect();
            let shuffled = aggregate(pp, &ll, &cfg).unwrap();
            for (a, b) in base.aggregate.probs.iter().zip(&shuffled.aggregate.probs) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_rho_only_adds_prompts((p, l) in instance(), lo in 1.0f64..=100.0, hi in 1.0f64..=100.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let a = aggregate(p.clone(), &l, &SelectionConfig { rho: lo, ..Default::default() }).unwrap();
            let b = aggregate(p, &l, &SelectionConfig { rho: hi, ..Default::default() }).unwrap();
            for (x, y) in a.selected_mask.iter().zip(&b.selected_mask) {
                prop_assert!(!*x || *y);
            }
        }

        #[test]
        fn full_percentile_equals_mean((p, l) in instance()) {
            let e = aggregate(p.clone(), &l, &SelectionConfig { rho: 100.0, ..Default::default() }).unwrap();
            let m = aggregate(p, &l, &SelectionConfig::default().with_strategy(Strategy::Mean)).unwrap();
            prop_assert_eq!(e.aggregate.probs, m.aggregate.probs);
        }

        #[test]
        fn label_survives_monotone_transform(probs in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let label = argmax(&probs);
            let transformed: Vec<f64> = probs.iter().map(|p| (3.0 * p + 1.0).ln()).collect();
            prop_assert_eq!(argmax(&transformed), label);
        }
    }
}
