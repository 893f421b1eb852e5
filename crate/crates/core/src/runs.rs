//! End-to-end runs behind each command: data generation, training,
//! evaluation, ablations, the prompt-count sweep and the gradient check.
//!
//! Outputs go under a directory with fixed file names. Every run is a pure
//! function of its config, seed and input files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::datahub::{generate_task, Checkpoint, Dataset, EmbeddingBundle, SyntheticTask};
use crate::diffcore::Tensor;
use crate::encoders::{EncoderConfig, FrozenImageEncoder, FrozenTextEncoder};
use crate::error::{Error, Result};
use crate::evalharness::{
    base_half, base_to_new, evaluate, fit, fit_from, fmt_num, ood_transfer, score_base_to_new, score_few_shot,
    write_file, EvalReport, Fitted, ProtocolKind, Recipe, Table, ABLATION_SHOTS,
};
use crate::fidelity::{self, FidelitySpec, ProbeResult};
use crate::promptbank::PromptBank;
use crate::selection::Strategy;
use crate::trainer::TrainLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.bvlb";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// The frozen towers a config describes.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub text: FrozenTextEncoder,
    pub image: FrozenImageEncoder,
}

impl Encoders {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::from_parts(&cfg.encoder, cfg.bank.m)
    }

    fn from_parts(enc: &EncoderConfig, context_len: usize) -> Result<Self> {
        Ok(Self {
            text: FrozenTextEncoder::from_config(enc, context_len)?,
            image: FrozenImageEncoder::from_config(enc)?,
        })
    }
}

pub fn recipe<'a>(cfg: &RunConfig, enc: &'a Encoders) -> Recipe<'a> {
    let seeds = cfg.seeds();
    Recipe {
        regime: cfg.data.regime,
        text: Some(&enc.text),
        train: cfg.train,
        objective: cfg.objective(),
        init_seed: seeds.init,
        shuffle_seed: seeds.shuffle,
        transfer: cfg.eval.transfer,
    }
}

/// Generator provenance stored in synthetic bundles.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct SyntheticProvenance {
    generator: String,
    task: SyntheticTask,
    data_seed: u64,
    encoder: EncoderConfig,
    context_len: usize,
}

/// The config's synthetic task, encoded, in memory.
pub fn synthetic_dataset(cfg: &RunConfig, enc: &Encoders) -> Result<Dataset> {
    let seeds = cfg.seeds();
    let data = generate_task(&cfg.data.spec, seeds.data, &enc.text, &enc.image)?;
    Dataset::from_synthetic(&data, &enc.image, seeds.augment)
}

fn synthetic_bundle(cfg: &RunConfig, ds: &Dataset) -> Result<EmbeddingBundle> {
    let prov = SyntheticProvenance {
        generator: "synthetic".into(),
        task: cfg.data.spec.clone(),
        data_seed: cfg.data.spec.seed.unwrap_or(cfg.seeds().data),
        encoder: cfg.encoder.clone(),
        context_len: cfg.bank.m,
    };
    ds.to_bundle(serde_json::to_value(prov)?)
}

/// `gen-data`: writes the config's synthetic task as a dataset bundle.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<EmbeddingBundle> {
    let enc = Encoders::new(cfg)?;
    let ds = synthetic_dataset(cfg, &enc)?;
    let bundle = synthetic_bundle(cfg, &ds)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    bundle.save(out)?;
    log::info!(
        "wrote {} ({} classes, {} train, {} test)",
        out.display(),
        ds.num_classes(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(bundle)
}

/// Loads a dataset bundle and checks it against the config.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let bundle = EmbeddingBundle::load(path)?;
    let ds = Dataset::from_bundle(&bundle)?;
    if ds.embed_dim() != cfg.encoder.d {
        return Err(Error::Config(format!(
            "{} holds {}-dim embeddings but encoder.d is {}",
            path.display(),
            ds.embed_dim(),
            cfg.encoder.d
        )));
    }
    if ds.prompts_per_class != cfg.bank.n {
        return Err(Error::Config(format!(
            "{} has {} attributes per class but bank.N is {}",
            path.display(),
            ds.prompts_per_class,
            cfg.bank.n
        )));
    }
    if let Ok(p) = serde_json::from_value::<SyntheticProvenance>(bundle.info.provenance.clone()) {
        if p.encoder != cfg.encoder || p.context_len != cfg.bank.m {
            log::warn!("{} was generated with different encoder settings", path.display());
        }
    }
    Ok(ds)
}

/// The part of `ds` the configured protocol trains on.
pub fn training_set(cfg: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    match cfg.eval.protocol {
        ProtocolKind::BaseToNew => base_half(ds),
        _ => Ok(ds.clone()),
    }
}

pub fn to_checkpoint(cfg: &RunConfig, fitted: &Fitted) -> Result<Checkpoint> {
    let bank = &fitted.bank;
    Ok(Checkpoint {
        bank: bank.meta(),
        params: bank.checkpoint_tensor(),
        attributes: Tensor::stack_rows(bank.attributes())?,
        attribute_texts: bank.attribute_texts().to_vec(),
        state: fitted.state.clone(),
        config: serde_json::to_value(cfg)?,
        dataset_id: fitted.dataset_id.clone(),
        seen_classes: fitted.seen_classes.iter().copied().collect(),
        fingerprints: fitted.fingerprints.iter().cloned().collect(),
    })
}

/// A checkpoint's config, rebuilt bank and training record.
pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Encoders, Fitted)> {
    let cfg: RunConfig =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    cfg.validate()?;
    let enc = Encoders::new(&cfg)?;
    let rows = ckpt.attributes.rows();
    let attributes = (0..rows).map(|r| Tensor::vector(ckpt.attributes.row(r).to_vec())).collect::<Result<_>>()?;
    let bank = PromptBank::restore(
        &ckpt.bank,
        &ckpt.params,
        attributes,
        ckpt.attribute_texts.clone(),
        Some(&enc.text),
    )?;
    let fitted = Fitted {
        bank,
        log: TrainLog::default(),
        state: ckpt.state.clone(),
        dataset_id: ckpt.dataset_id.clone(),
        seen_classes: ckpt.seen_classes.iter().copied().collect(),
        fingerprints: ckpt.fingerprints.iter().cloned().collect(),
    };
    Ok((cfg, enc, fitted))
}

/// Trains per the config on `ds`, optionally resuming from a checkpoint
/// and stopping early.
pub fn train_dataset(
    cfg: &RunConfig,
    enc: &Encoders,
    ds: &Dataset,
    resume: Option<&Checkpoint>,
    stop_after: Option<usize>,
) -> Result<Fitted> {
    let train_ds = training_set(cfg, ds)?;
    let start = match resume {
        Some(c) => {
            let (_, _, f) = from_checkpoint(c)?;
            Some((f.bank, f.state))
        }
        None => None,
    };
    fit_from(&recipe(cfg, enc), &train_ds, start, stop_after)
}

fn prepare_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_resolved(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let mut c = cfg.clone();
    if let Some(d) = data {
        c.data.bundle = Some(d.to_path_buf());
    }
    c.output.dir = out.to_path_buf();
    write_file(&out.join(RESOLVED_CONFIG_FILE), c.to_json()?.as_bytes())
}

/// `train`: fits a bank to the bundle and writes the checkpoint, the
/// training log and the resolved config.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Fitted> {
    let enc = Encoders::new(cfg)?;
    let ds = load_dataset(cfg, data)?;
    let fitted = train_dataset(cfg, &enc, &ds, None, None)?;
    prepare_dir(out)?;
    let mut resolved = cfg.clone();
    resolved.data.bundle = Some(data.to_path_buf());
    resolved.output.dir = out.to_path_buf();
    to_checkpoint(&resolved, &fitted)?.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(TRAIN_LOG_FILE), fitted.log.to_csv().as_bytes())?;
    write_resolved(cfg, Some(data), out)?;
    Ok(fitted)
}

fn load_targets(cfg: &RunConfig, first: &Path) -> Result<Vec<Dataset>> {
    std::iter::once(first.to_path_buf())
        .chain(cfg.eval.targets.iter().cloned())
        .map(|p: PathBuf| load_dataset(cfg, &p))
        .collect()
}

/// `eval`: scores a checkpoint under one protocol and writes the report.
pub fn eval_cmd(checkpoint: &Path, data: &Path, protocol: ProtocolKind, out: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, enc, fitted) = from_checkpoint(&ckpt)?;
    let text = Some(&enc.text);
    let sel = &cfg.selection;
    let strategy = sel.strategy.to_string();
    let mut report = match protocol {
        ProtocolKind::FewShot => {
            let ds = load_dataset(&cfg, data)?;
            let e = score_few_shot(&fitted, text, &ds, sel)?;
            EvalReport::few_shot(&ds.dataset_id, &e, &strategy)
        }
        ProtocolKind::BaseToNew => {
            let ds = load_dataset(&cfg, data)?;
            let r = score_base_to_new(&fitted, text, &ds, cfg.eval.transfer, sel)?;
            EvalReport::base_to_new(&ds.dataset_id, &r, &strategy)
        }
        ProtocolKind::Ood => {
            let targets = load_targets(&cfg, data)?;
            let refs: Vec<&Dataset> = targets.iter().collect();
            let r = ood_transfer(&fitted, text, &refs, sel)?;
            EvalReport::ood(&fitted.dataset_id, &r, &strategy)
        }
    };
    report.config = ckpt.config.clone();
    report.seeds = vec![cfg.seed];
    prepare_dir(out)?;
    report.emit(out)?;
    write_resolved(&cfg, Some(data), out)?;
    log::info!("{protocol} report written to {}", out.display());
    Ok(report)
}

/// Table output plus its JSON form.
#[derive(Debug, Clone, Serialize)]
pub struct TableReport {
    pub command: String,
    pub columns: Vec<String>,
    pub rows: Vec<serde_json::Map<String, Value>>,
    pub config: Value,
    pub seeds: Vec<u64>,
}

fn emit_table(command: &str, table: &Table, cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let rows = table
        .rows
        .iter()
        .map(|r| {
            table
                .columns
                .iter()
                .zip(r)
                .map(|(c, v)| {
                    let value = v.parse::<f64>().map(|x| json!(x)).unwrap_or_else(|_| json!(v));
                    (c.clone(), value)
                })
                .collect()
        })
        .collect();
    let report = TableReport {
        command: command.into(),
        columns: table.columns.clone(),
        rows,
        config: serde_json::to_value(cfg)?,
        seeds: vec![cfg.seed],
    };
    prepare_dir(out)?;
    write_file(&out.join(REPORT_JSON_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    table.write(&out.join(REPORT_CSV_FILE))?;
    write_resolved(cfg, Some(data), out)
}

pub const SELECT_COLUMNS: [&str; 3] = ["method", "b2n", "fsl"];

/// Display name of a strategy in the selection-ablation table.
pub fn strategy_label(s: Strategy) -> String {
    match s {
        Strategy::Softmax => "Softmax".into(),
        Strategy::Mean => "Mean".into(),
        Strategy::AvgLogits => "Avg. Logits".into(),
        Strategy::Argmax => "Argmax".into(),
        Strategy::TopK(k) => format!("Top-{k}"),
        Strategy::Entropy => "Entropy".into(),
    }
}

/// `ablate-select`: scores every aggregation strategy with fixed banks. The
/// checkpoint serves whichever protocol it was trained for; the other bank
/// is trained from the checkpoint's config.
pub fn ablate_select(checkpoint: &Path, data: &Path, out: &Path) -> Result<Table> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, enc, restored) = from_checkpoint(&ckpt)?;
    let ds = load_dataset(&cfg, data)?;
    let base = base_half(&ds)?;
    let r = recipe(&cfg, &enc);
    let full_bank = if restored.bank.class_ids() == ds.class_ids {
        restored.clone()
    } else {
        fit(&r, &ds)?
    };
    let base_bank = if restored.bank.class_ids() == base.class_ids {
        restored
    } else {
        fit(&r, &base)?
    };
    let mut table = Table::new(&SELECT_COLUMNS);
    for s in Strategy::ablation_set() {
        let sel = cfg.selection.with_strategy(s);
        let fsl = score_few_shot(&full_bank, Some(&enc.text), &ds, &sel)?;
        let b2n = score_base_to_new(&base_bank, Some(&enc.text), &ds, cfg.eval.transfer, &sel)?;
        table.push(vec![strategy_label(s), fmt_num(b2n.hm), fmt_num(fsl.accuracy)]);
    }
    emit_table("ablate-select", &table, &cfg, data, out)?;
    Ok(table)
}

pub const LOSS_COLUMNS: [&str; 12] = [
    "config", "ce", "ler", "cmd", "asa", "base", "novel", "hm", "k1", "k4", "k8", "k16",
];

/// `ablate-loss`: the eight on/off weightings of the auxiliary terms, each
/// with a base-to-new run and few-shot runs at 1, 4, 8 and 16 shots.
pub fn ablate_loss(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Table> {
    let enc = Encoders::new(cfg)?;
    let ds = load_dataset(cfg, data)?;
    let mut table = Table::new(&LOSS_COLUMNS);
    for (name, w) in cfg.loss.weights().ablation_grid() {
        let mut c = cfg.clone();
        c.loss.lambda1 = w.lambda1;
        c.loss.lambda2 = w.lambda2;
        c.loss.lambda3 = w.lambda3;
        let r = recipe(&c, &enc);
        let (_, b2n) = base_to_new(&r, &ds)?;
        let flag = |v: f64| if v != 0.0 { "1" } else { "0" }.to_string();
        let mut row = vec![
            name.clone(),
            "1".into(),
            flag(w.lambda2),
            flag(w.lambda3),
            flag(w.lambda1),
            fmt_num(b2n.base.accuracy),
            fmt_num(b2n.new.accuracy),
            fmt_num(b2n.hm),
        ];
        for k in ABLATION_SHOTS {
            let mut rk = r.clone();
            rk.train.shots = k;
            let fitted = fit(&rk, &ds)?;
            let e = score_few_shot(&fitted, Some(&enc.text), &ds, &c.selection)?;
            row.push(fmt_num(e.accuracy));
        }
        log::info!("loss ablation row {name} done");
        table.push(row);
    }
    emit_table("ablate-loss", &table, cfg, data, out)?;
    Ok(table)
}

/// The dataset with `n` attributes per class. Synthetic bundles regenerate
/// their attributes from the stored generator settings; other bundles reuse
/// their attributes cyclically.
pub fn with_prompt_count(ds: &Dataset, bundle: &EmbeddingBundle, n: usize) -> Result<Dataset> {
    if n == ds.prompts_per_class {
        return Ok(ds.clone());
    }
    if let Ok(p) = serde_json::from_value::<SyntheticProvenance>(bundle.info.provenance.clone()) {
        let enc = Encoders::from_parts(&p.encoder, p.context_len)?;
        let task = p.task.with_prompt_count(n);
        let data = generate_task(&task, p.data_seed, &enc.text, &enc.image)?;
        let aug_seed = ds
            .resampler
            .as_ref()
            .map(|r| r.seed)
            .ok_or_else(|| Error::Bundle("synthetic bundle lacks its resampling settings".into()))?;
        let out = Dataset::from_synthetic(&data, &enc.image, aug_seed)?;
        return Ok(Dataset {
            name: ds.name.clone(),
            dataset_id: ds.dataset_id.clone(),
            ..out
        });
    }
    log::warn!(
        "{} has {} attributes per class; reusing them cyclically for N = {n}",
        ds.dataset_id,
        ds.prompts_per_class
    );
    Ok(ds.with_attribute_count(n))
}

pub const SWEEP_COLUMNS: [&str; 3] = ["N", "accuracy", "ece"];

/// `sweep-prompts`: one few-shot train and evaluation per prompt count.
pub fn sweep_prompts(cfg: &RunConfig, data: &Path, counts: &[usize], out: &Path) -> Result<Table> {
    if counts.is_empty() {
        return Err(Error::Config("the prompt-count list is empty".into()));
    }
    let bundle = EmbeddingBundle::load(data)?;
    let ds = load_dataset(cfg, data)?;
    let mut table = Table::new(&SWEEP_COLUMNS);
    for &n in counts {
        if n == 0 {
            return Err(Error::Config("prompt counts must be >= 1".into()));
        }
        let c = cfg.with_prompt_count(n);
        let enc = Encoders::new(&c)?;
        let ds_n = with_prompt_count(&ds, &bundle, n)?;
        let fitted = fit(&recipe(&c, &enc), &ds_n)?;
        let e = score_few_shot(&fitted, Some(&enc.text), &ds_n, &c.selection)?;
        log::info!("N = {n}: accuracy {:.2}", e.accuracy);
        table.push(vec![n.to_string(), fmt_num(e.accuracy), fmt_num(e.ece)]);
    }
    emit_table("sweep-prompts", &table, cfg, data, out)?;
    Ok(table)
}

/// Suite settings for the config's bank, encoder and objective.
pub fn fidelity_spec(cfg: &RunConfig) -> FidelitySpec {
    FidelitySpec {
        regime: cfg.data.regime,
        num_classes: cfg.data.spec.num_classes,
        prompts_per_class: cfg.bank.n,
        context_len: cfg.bank.m,
        token_dim: cfg.encoder.d_tok,
        embed_dim: cfg.encoder.d,
        beta: cfg.selection.beta,
        rho: cfg.selection.rho,
        teacher: cfg.loss.teacher,
        weights: cfg.loss.weights(),
        seeds: (0..10).map(|i| cfg.seed.wrapping_add(i)).collect(),
        ..FidelitySpec::default()
    }
}

/// `gradcheck`: the finite-difference suite for the config.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<ProbeResult>> {
    fidelity::run(&fidelity_spec(cfg))
}

/// Errors naming every probe at or above the tolerance.
pub fn require_passed(results: &[ProbeResult]) -> Result<()> {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheck(format!(
            "{} >= {:e}",
            failed.join(", "),
            fidelity::TOLERANCE
        )))
    }
}

/// Scores a bank on a dataset's test split with the config's selection.
pub fn test_accuracy(cfg: &RunConfig, enc: &Encoders, fitted: &Fitted, ds: &Dataset) -> Result<f64> {
    Ok(evaluate(&fitted.bank, Some(&enc.text), &ds.test.original, &ds.test.labels, &cfg.selection)?.accuracy)
}
