//! Few-shot, base-to-new and out-of-distribution protocols, calibration and
//! report emission.
//!
//! Evaluation only reads the bank. Protocols that need a trained bank take a
//! [`Recipe`] and train through [`fit`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datahub::{fingerprints, Dataset};
use crate::diffcore::Tensor;
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::promptbank::{BankInit, PromptBank, Regime, TransferRule};
use crate::selection::{score_batch, SelectionConfig};
use crate::trainer::{train, Objective, TrainConfig, TrainLog, TrainState};

/// Prompt counts of the prompt-count sweep.
pub const PROMPT_SWEEP: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];

/// Shot counts of the few-shot columns of the loss ablation.
pub const ABLATION_SHOTS: [usize; 4] = [1, 4, 8, 16];

pub const ECE_BINS: usize = 10;

const SCORE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ProtocolKind {
    #[default]
    #[serde(rename = "fewshot")]
    FewShot,
    #[serde(rename = "b2n")]
    BaseToNew,
    #[serde(rename = "ood")]
    Ood,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::FewShot => "fewshot",
            ProtocolKind::BaseToNew => "b2n",
            ProtocolKind::Ood => "ood",
        })
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(ProtocolKind::FewShot),
            "b2n" => Ok(ProtocolKind::BaseToNew),
            "ood" => Ok(ProtocolKind::Ood),
            other => Err(Error::Config(format!("unknown protocol {other:?} (fewshot, b2n, ood)"))),
        }
    }
}

/// Everything needed to train a bank on a dataset.
#[derive(Debug, Clone)]
pub struct Recipe<'a> {
    pub regime: Regime,
    /// Required for token-space banks.
    pub text: Option<&'a FrozenTextEncoder>,
    pub train: TrainConfig,
    pub objective: Objective,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// Prompt construction for classes unseen in training.
    pub transfer: TransferRule,
}

/// A trained bank plus what it saw during training.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub bank: PromptBank,
    pub log: TrainLog,
    pub state: TrainState,
    pub dataset_id: String,
    /// Global class ids of the training samples.
    pub seen_classes: BTreeSet<usize>,
    /// Content hashes of the training samples.
    pub fingerprints: BTreeSet<String>,
}

pub fn init_bank(dataset: &Dataset, recipe: &Recipe<'_>) -> Result<PromptBank> {
    PromptBank::init(
        BankInit {
            regime: recipe.regime,
            class_ids: dataset.class_ids.clone(),
            prompts_per_class: dataset.prompts_per_class,
            attributes: dataset.attributes.clone(),
            attribute_texts: dataset.attribute_texts.clone(),
            seed: recipe.init_seed,
        },
        recipe.text,
    )
}

/// Trains a fresh bank on the first `recipe.train.shots` samples per class.
pub fn fit(recipe: &Recipe<'_>, dataset: &Dataset) -> Result<Fitted> {
    fit_from(recipe, dataset, None, None)
}

/// Trains from `start` (a bank and its optimizer state) or from a fresh
/// bank, stopping after `stop_after` epochs when given.
pub fn fit_from(
    recipe: &Recipe<'_>,
    dataset: &Dataset,
    start: Option<(PromptBank, TrainState)>,
    stop_after: Option<usize>,
) -> Result<Fitted> {
    let (mut bank, mut state) = match start {
        Some(s) => s,
        None => (init_bank(dataset, recipe)?, TrainState::default()),
    };
    if bank.class_ids() != dataset.class_ids {
        return Err(Error::Data(format!(
            "bank classes {:?} do not match dataset classes {:?}",
            bank.class_ids(),
            dataset.class_ids
        )));
    }
    let shots = dataset.shots(recipe.train.shots)?;
    let mut log = TrainLog::default();
    train(
        &mut bank,
        recipe.text,
        &shots,
        &recipe.train,
        &recipe.objective,
        recipe.shuffle_seed,
        &mut state,
        &mut log,
        stop_after,
    )?;
    Ok(Fitted {
        bank,
        log,
        state,
        dataset_id: dataset.dataset_id.clone(),
        seen_classes: shots.class_ids_seen(),
        fingerprints: shots.fingerprints(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    pub ece: f64,
    pub count: usize,
    pub predictions: Vec<usize>,
    /// Max aggregate probability per sample.
    pub confidences: Vec<f64>,
}

/// Scores `images` against the bank and compares with `labels`, which index
/// the bank's classes.
pub fn evaluate(
    bank: &PromptBank,
    text: Option<&FrozenTextEncoder>,
    images: &Tensor,
    labels: &[usize],
    selection: &SelectionConfig,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    if images.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} images for {} labels", images.rows(), labels.len())));
    }
    let k = bank.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {y} outside the bank's {k} classes")));
    }
    selection.validate()?;
    let features = bank.feature_matrix(text)?;
    if features.cols() != images.cols() {
        return Err(Error::Dimension(format!(
            "image embeddings have dim {}, prompts {}",
            images.cols(),
            features.cols()
        )));
    }
    let d = images.cols();
    let mut predictions = Vec::with_capacity(labels.len());
    let mut confidences = Vec::with_capacity(labels.len());
    for start in (0..labels.len()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(labels.len());
        let chunk = Tensor::from_parts(vec![end - start, d], images.data()[start * d..end * d].to_vec());
        for trace in score_batch(&chunk, &features, k, selection)? {
            predictions.push(trace.aggregate.argmax());
            confidences.push(trace.aggregate.max_prob());
        }
    }
    let correct: Vec<bool> = predictions.iter().zip(labels).map(|(p, y)| p == y).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(Evaluation {
        accuracy: 100.0 * hits as f64 / labels.len() as f64,
        ece: expected_calibration_error(&confidences, &correct, ECE_BINS)?,
        count: labels.len(),
        predictions,
        confidences,
    })
}

/// `2ab / (a + b)`, zero when either side is zero.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base <= 0.0 || new <= 0.0 {
        0.0
    } else {
        2.0 * base * new / (base + new)
    }
}

/// Bin-weighted gap between confidence and accuracy over equal-width bins.
pub fn expected_calibration_error(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Data("ECE of an empty stream".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Dimension(format!(
            "{} confidences for {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let m = count[b] as f64;
            ece += (m / n) * (hits[b] as f64 / m - conf[b] / m).abs();
        }
    }
    Ok(ece)
}

/// Errors when the two sets share an element.
pub fn assert_disjoint<T: Ord + fmt::Debug>(what: &str, trained: &BTreeSet<T>, held_out: &BTreeSet<T>) -> Result<()> {
    match trained.intersection(held_out).next() {
        Some(x) => Err(Error::Data(format!("protocol isolation violated: {what} {x:?} was used in training"))),
        None => Ok(()),
    }
}

pub fn few_shot(recipe: &Recipe<'_>, dataset: &Dataset) -> Result<(Fitted, Evaluation)> {
    let fitted = fit(recipe, dataset)?;
    let eval = score_few_shot(&fitted, recipe.text, dataset, &recipe.objective.selection)?;
    Ok((fitted, eval))
}

/// Scores a bank trained on `dataset`'s classes on its test split.
pub fn score_few_shot(
    fitted: &Fitted,
    text: Option<&FrozenTextEncoder>,
    dataset: &Dataset,
    selection: &SelectionConfig,
) -> Result<Evaluation> {
    if fitted.bank.class_ids() != dataset.class_ids {
        return Err(Error::Config(format!(
            "bank classes {:?} differ from dataset classes {:?}; use the ood protocol",
            fitted.bank.class_ids(),
            dataset.class_ids
        )));
    }
    assert_disjoint("test sample", &fitted.fingerprints, &fingerprints(&dataset.test.original))?;
    evaluate(&fitted.bank, text, &dataset.test.original, &dataset.test.labels, selection)
}

#[derive(Debug, Clone)]
pub struct BaseToNew {
    pub base: Evaluation,
    pub new: Evaluation,
    pub hm: f64,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
}

/// Local class indices of the base half: the first `ceil(K / 2)`.
pub fn base_split(num_classes: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_classes < 4 {
        return Err(Error::Config(format!(
            "base-to-new needs at least two classes in each half, got {num_classes} classes"
        )));
    }
    let nb = num_classes.div_ceil(2);
    Ok(((0..nb).collect(), (nb..num_classes).collect()))
}

/// The base half of `dataset`, the part base-to-new training may see.
pub fn base_half(dataset: &Dataset) -> Result<Dataset> {
    dataset.restrict(&base_split(dataset.num_classes())?.0)
}

/// Trains on the base half only, then scores the base and new test splits.
pub fn base_to_new(recipe: &Recipe<'_>, dataset: &Dataset) -> Result<(Fitted, BaseToNew)> {
    let fitted = fit(recipe, &base_half(dataset)?)?;
    let r = score_base_to_new(&fitted, recipe.text, dataset, recipe.transfer, &recipe.objective.selection)?;
    Ok((fitted, r))
}

/// Scores a bank trained on the base half of `dataset`.
pub fn score_base_to_new(
    fitted: &Fitted,
    text: Option<&FrozenTextEncoder>,
    dataset: &Dataset,
    transfer: TransferRule,
    selection: &SelectionConfig,
) -> Result<BaseToNew> {
    let (base_idx, new_idx) = base_split(dataset.num_classes())?;
    let base = dataset.restrict(&base_idx)?;
    let new = dataset.restrict(&new_idx)?;
    if fitted.bank.class_ids() != base.class_ids {
        return Err(Error::Config(format!(
            "bank classes {:?} are not the base half {:?}; train with eval.protocol = \"b2n\"",
            fitted.bank.class_ids(),
            base.class_ids
        )));
    }
    assert_disjoint("class", &fitted.seen_classes, &new.class_ids.iter().copied().collect())?;
    assert_disjoint("new-class sample", &fitted.fingerprints, &fingerprints(&new.train.original))?;
    assert_disjoint("test sample", &fitted.fingerprints, &fingerprints(&dataset.test.original))?;
    let base_eval = evaluate(&fitted.bank, text, &base.test.original, &base.test.labels, selection)?;
    let new_bank = fitted.bank.transfer(
        text,
        new.class_ids.clone(),
        new.attributes.clone(),
        new.attribute_texts.clone(),
        transfer,
    )?;
    let new_eval = evaluate(&new_bank, text, &new.test.original, &new.test.labels, selection)?;
    let hm = harmonic_mean(base_eval.accuracy, new_eval.accuracy);
    Ok(BaseToNew {
        base_classes: base.class_ids,
        new_classes: new.class_ids,
        base: base_eval,
        new: new_eval,
        hm,
    })
}

#[derive(Debug, Clone)]
pub struct TargetResult {
    pub dataset_id: String,
    pub evaluation: Evaluation,
    /// The target shares the bank's class ids, so the trained prompts were used.
    pub same_classes: bool,
}

#[derive(Debug, Clone)]
pub struct OodResult {
    pub targets: Vec<TargetResult>,
    /// Unweighted mean over targets.
    pub average: f64,
}

/// Zero-update evaluation of a trained bank on other datasets. Targets with
/// the bank's class ids use the trained prompts; others get their attribute
/// embeddings as prompts.
pub fn ood_transfer(
    fitted: &Fitted,
    text: Option<&FrozenTextEncoder>,
    targets: &[&Dataset],
    selection: &SelectionConfig,
) -> Result<OodResult> {
    if targets.is_empty() {
        return Err(Error::Config("OOD transfer needs at least one target dataset".into()));
    }
    let bank = &fitted.bank;
    let n = bank.prompts_per_class();
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        if t.attributes.len() != t.num_classes() * n || t.prompts_per_class != n {
            return Err(Error::Data(format!(
                "target {} lacks attributes: needs {} per class, has {} in total",
                t.dataset_id,
                n,
                t.attributes.len()
            )));
        }
        let mut target_samples = fingerprints(&t.test.original);
        target_samples.extend(fingerprints(&t.train.original));
        assert_disjoint(
            &format!("sample of target {}", t.dataset_id),
            &fitted.fingerprints,
            &target_samples,
        )?;
        if t.dataset_id == fitted.dataset_id {
            log::warn!("OOD target {} is the source dataset", t.dataset_id);
        }
        let same_classes = t.class_ids == bank.class_ids();
        let eval = if same_classes {
            evaluate(bank, text, &t.test.original, &t.test.labels, selection)?
        } else {
            let transferred = bank.transfer(
                text,
                t.class_ids.clone(),
                t.attributes.clone(),
                t.attribute_texts.clone(),
                TransferRule::Attributes,
            )?;
            evaluate(&transferred, text, &t.test.original, &t.test.labels, selection)?
        };
        rows.push(TargetResult {
            dataset_id: t.dataset_id.clone(),
            evaluation: eval,
            same_classes,
        });
    }
    let average = rows.iter().map(|r| r.evaluation.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(OodResult { targets: rows, average })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub dataset_id: String,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub strategy: String,
    /// Accuracy (%) per evaluated dataset id.
    pub accuracy: BTreeMap<String, f64>,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub hm: Option<f64>,
    pub ece: Option<f64>,
    pub targets: Vec<TargetRow>,
    pub average: Option<f64>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

/// Column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 5] = ["protocol", "dataset", "split", "accuracy", "ece"];

impl EvalReport {
    pub fn few_shot(dataset_id: &str, eval: &Evaluation, strategy: &str) -> Self {
        Self {
            protocol: ProtocolKind::FewShot,
            strategy: strategy.into(),
            accuracy: BTreeMap::from([(dataset_id.to_string(), eval.accuracy)]),
            ece: Some(eval.ece),
            ..Self::default()
        }
    }

    pub fn base_to_new(dataset_id: &str, r: &BaseToNew, strategy: &str) -> Self {
        Self {
            protocol: ProtocolKind::BaseToNew,
            strategy: strategy.into(),
            accuracy: BTreeMap::from([(dataset_id.to_string(), r.base.accuracy)]),
            base_acc: Some(r.base.accuracy),
            new_acc: Some(r.new.accuracy),
            hm: Some(r.hm),
            ece: Some(r.base.ece),
            ..Self::default()
        }
    }

    pub fn ood(source_id: &str, r: &OodResult, strategy: &str) -> Self {
        let mut accuracy = BTreeMap::new();
        let targets = r
            .targets
            .iter()
            .map(|t| {
                accuracy.insert(t.dataset_id.clone(), t.evaluation.accuracy);
                TargetRow {
                    dataset_id: t.dataset_id.clone(),
                    accuracy: t.evaluation.accuracy,
                    ece: t.evaluation.ece,
                }
            })
            .collect();
        log::debug!("OOD report for source {source_id}");
        Self {
            protocol: ProtocolKind::Ood,
            strategy: strategy.into(),
            accuracy,
            targets,
            average: Some(r.average),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        let accs = self
            .accuracy
            .values()
            .chain(self.targets.iter().map(|t| &t.accuracy))
            .chain(self.base_acc.iter())
            .chain(self.new_acc.iter())
            .chain(self.average.iter());
        for &a in accs {
            if !in_range(a) {
                return Err(Error::Data(format!("accuracy {a} outside [0, 100]")));
            }
        }
        if let (Some(b), Some(n), Some(h)) = (self.base_acc, self.new_acc, self.hm) {
            if b > 0.0 && n > 0.0 && (h - harmonic_mean(b, n)).abs() > 1e-9 {
                return Err(Error::Data(format!("hm {h} inconsistent with base {b} and new {n}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&REPORT_COLUMNS);
        let p = self.protocol.to_string();
        let ece = |e: Option<f64>| e.map(fmt_num).unwrap_or_default();
        match self.protocol {
            ProtocolKind::FewShot => {
                for (id, a) in &self.accuracy {
                    t.push(vec![p.clone(), id.clone(), "test".into(), fmt_num(*a), ece(self.ece)]);
                }
            }
            ProtocolKind::BaseToNew => {
                let id = self.accuracy.keys().next().cloned().unwrap_or_default();
                let rows = [("base", self.base_acc, self.ece), ("new", self.new_acc, None), ("hm", self.hm, None)];
                for (split, v, e) in rows {
                    if let Some(v) = v {
                        t.push(vec![p.clone(), id.clone(), split.into(), fmt_num(v), ece(e)]);
                    }
                }
            }
            ProtocolKind::Ood => {
                for r in &self.targets {
                    t.push(vec![p.clone(), r.dataset_id.clone(), "test".into(), fmt_num(r.accuracy), fmt_num(r.ece)]);
                }
                if let Some(a) = self.average {
                    t.push(vec![p.clone(), "average".into(), "test".into(), fmt_num(a), String::new()]);
                }
            }
        }
        t
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        write_file(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        self.table().write(&dir.join("report.csv"))
    }
}

pub fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv()?.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
