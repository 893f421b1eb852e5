//! Acceptance suite: one PASS/FAIL line per criterion, with pinned
//! tolerances and runtime budgets. Exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use biovlm_core::config::RunConfig;
use biovlm_core::datahub::{Checkpoint, Container, Dataset, EmbeddingBundle};
use biovlm_core::diffcore::Tensor;
use biovlm_core::evalharness::{
    assert_disjoint, base_split, base_to_new, expected_calibration_error, fit, harmonic_mean, ood_transfer,
    score_base_to_new, score_few_shot, ECE_BINS,
};
use biovlm_core::fidelity;
use biovlm_core::runs::{self, Encoders};
use biovlm_core::selection::{normalize_rows, predict, score_batch, SelectionConfig, Strategy};
use biovlm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HM_TOLERANCE: f64 = 0.01;
const SELECTION_TOLERANCE: f64 = 1e-12;
const SELECTION_INSTANCES: usize = 1000;
const CALIBRATED_ECE: f64 = 1e-9;
const HAND_ECE_TOLERANCE: f64 = 1e-12;
const SANITY_ACCURACY: f64 = 90.0;
const BENCHMARK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];

type Check = fn(&Path) -> Result<(bool, String), Error>;

fn main() {
    let criteria: [(u8, &str, u64, Check); 10] = [
        (1, "harmonic mean reproduction", 1, harmonic_reproduction),
        (2, "gradient fidelity", 60, gradient_fidelity),
        (3, "selection oracle equivalence", 30, selection_oracle),
        (4, "entropy selection advantage", 180, entropy_advantage),
        (5, "loss ablation direction", 600, loss_ablation),
        (6, "training sanity", 120, training_sanity),
        (7, "ECE correctness", 1, ece_correctness),
        (8, "prompt count sweep", 600, prompt_sweep),
        (9, "bundle format", 60, bundle_format),
        (10, "protocol isolation", 60, protocol_isolation),
    ];
    let only: BTreeSet<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let dir = scratch.path().join(format!("c{id}"));
        std::fs::create_dir_all(&dir).expect("criterion directory");
        let start = Instant::now();
        let outcome = check(&dir);
        let elapsed = start.elapsed();
        let in_budget = elapsed < Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1}s of {budget}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn benchmark(seed: u64) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&shipped_config("benchmark.json"))?;
    cfg.seed = seed;
    Ok(cfg)
}

/// The benchmark task as `gen-data` would write it, loaded back.
fn benchmark_data(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, Dataset), Error> {
    let path = dir.join(format!("data-{}.bvlb", cfg.seed));
    runs::gen_data(cfg, &path)?;
    let ds = runs::load_dataset(cfg, &path)?;
    Ok((path, ds))
}

fn few_shot_accuracy(cfg: &RunConfig, ds: &Dataset) -> Result<f64, Error> {
    let enc = Encoders::new(cfg)?;
    let fitted = fit(&runs::recipe(cfg, &enc), ds)?;
    Ok(score_few_shot(&fitted, Some(&enc.text), ds, &cfg.selection)?.accuracy)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn harmonic_reproduction(_: &Path) -> Result<(bool, String), Error> {
    let cases = [((92.73, 63.39), 75.30), ((52.83, 83.87), 64.83)];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((b, n), want) in cases {
        let got = harmonic_mean(b, n);
        ok &= (got - want).abs() <= HM_TOLERANCE;
        parts.push(format!("hm({b}, {n}) = {got:.4} (want {want})"));
    }
    Ok((ok, parts.join(", ")))
}

fn gradient_fidelity(_: &Path) -> Result<(bool, String), Error> {
    let cfg = RunConfig::default();
    let spec = runs::fidelity_spec(&cfg);
    let results = fidelity::run(&spec)?;
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let probes = results.len();
    let checked = results.iter().map(|r| r.checked).min().unwrap_or(0);
    let ok = probes == 12
        && checked >= 100 * 10
        && spec.seeds.len() == 10
        && spec.samples >= 100
        && results.iter().all(|r| r.passed());
    Ok((
        ok,
        format!(
            "{probes} probes x {} seeds x {} parameters, worst {} at {:.2e} (< {:e})",
            spec.seeds.len(),
            spec.samples,
            worst.name,
            worst.max_rel_error,
            fidelity::TOLERANCE
        ),
    ))
}

/// Entropy-selected aggregate written out directly from the definitions.
fn brute_force(image: &[f64], features: &[Vec<f64>], k: usize, beta: f64, rho: f64) -> Vec<f64> {
    let n = features.len() / k;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut dists = Vec::new();
    let mut entropies = Vec::new();
    for j in 0..n {
        let e: Vec<f64> = (0..k)
            .map(|i| {
                let t = &features[j * k + i];
                let dot: f64 = image.iter().zip(t).map(|(a, b)| a * b).sum();
                (dot / (norm(image) * norm(t)) / beta).exp()
            })
            .collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        entropies.push(-p.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>());
        dists.push(p);
    }
    let rank = ((rho / 100.0) * n as f64).ceil().max(1.0) as usize;
    // smallest entropy with at least `rank` entropies at or below it
    let tau = entropies
        .iter()
        .copied()
        .filter(|&h| entropies.iter().filter(|&&g| g <= h).count() >= rank)
        .fold(f64::INFINITY, f64::min);
    let chosen: Vec<usize> = (0..n).filter(|&j| entropies[j] <= tau).collect();
    (0..k)
        .map(|i| chosen.iter().map(|&j| dists[j][i]).sum::<f64>() / chosen.len() as f64)
        .collect()
}

fn selection_oracle(_: &Path) -> Result<(bool, String), Error> {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut mean_equal = true;
    for _ in 0..SELECTION_INSTANCES {
        let k = r.random_range(2..=5);
        let n = r.random_range(1..=8);
        let d = r.random_range(2..=8);
        let beta = r.random_range(0.01..=1.0);
        let rho = (r.random_range(1..=10) * 10) as f64;
        let image: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let features: Vec<Vec<f64>> = (0..n * k).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let grid = Tensor::new(vec![n * k, d], features.concat())?;
        // the batched path takes encoder output, which is unit norm
        let unit = normalize_rows(&grid)?;
        let cfg = SelectionConfig {
            beta,
            rho,
            strategy: Strategy::Entropy,
            ..SelectionConfig::default()
        };
        let want = brute_force(&image, &features, k, beta, rho);
        let (_, single) = predict(&image, &grid, k, &cfg)?;
        let batched = score_batch(&Tensor::new(vec![1, d], image.clone())?, &unit, k, &cfg)?;
        for got in [&single.aggregate.probs, &batched[0].aggregate.probs] {
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        let all = SelectionConfig { rho: 100.0, ..cfg };
        let mean = all.with_strategy(Strategy::Mean);
        mean_equal &= predict(&image, &grid, k, &all)?.1.aggregate == predict(&image, &grid, k, &mean)?.1.aggregate;
    }
    Ok((
        worst <= SELECTION_TOLERANCE && mean_equal,
        format!(
            "{SELECTION_INSTANCES} instances, max deviation {worst:.2e} (<= {SELECTION_TOLERANCE:e}), rho=100 entropy == mean: {mean_equal}"
        ),
    ))
}

/// One bank per seed, trained with the configured entropy selection, scored
/// under each aggregation rule as the strategy ablation does.
fn entropy_advantage(dir: &Path) -> Result<(bool, String), Error> {
    let strategies = [Strategy::Entropy, Strategy::Mean, Strategy::Softmax];
    let mut acc = vec![Vec::new(); strategies.len()];
    for seed in BENCHMARK_SEEDS {
        let cfg = benchmark(seed)?;
        let (_, ds) = benchmark_data(&cfg, dir)?;
        let enc = Encoders::new(&cfg)?;
        let fitted = fit(&runs::recipe(&cfg, &enc), &ds)?;
        for (s, out) in strategies.iter().zip(acc.iter_mut()) {
            let sel = cfg.selection.with_strategy(*s);
            out.push(score_few_shot(&fitted, Some(&enc.text), &ds, &sel)?.accuracy);
        }
    }
    let m: Vec<f64> = acc.iter().map(|a| mean(a)).collect();
    Ok((
        m[0] >= m[1] && m[0] >= m[2],
        format!("5-seed mean accuracy entropy {:.2}, mean {:.2}, softmax {:.2}", m[0], m[1], m[2]),
    ))
}

fn loss_ablation(dir: &Path) -> Result<(bool, String), Error> {
    let mut full = Vec::new();
    let mut ce = Vec::new();
    for seed in BENCHMARK_SEEDS {
        let cfg = benchmark(seed)?;
        let (_, ds) = benchmark_data(&cfg, dir)?;
        full.push(few_shot_accuracy(&cfg, &ds)?);
        let mut only_ce = cfg.clone();
        only_ce.loss.lambda1 = 0.0;
        only_ce.loss.lambda2 = 0.0;
        only_ce.loss.lambda3 = 0.0;
        ce.push(few_shot_accuracy(&only_ce, &ds)?);
    }
    let cfg = benchmark(BENCHMARK_SEEDS[0])?;
    let (path, _) = benchmark_data(&cfg, dir)?;
    let table = runs::ablate_loss(&cfg, &path, &dir.join("ablate-loss"))?;
    let rows = table.rows.len();
    let complete = table.rows.iter().all(|r| r.len() == runs::LOSS_COLUMNS.len() && r[5..].iter().all(|v| v.parse::<f64>().is_ok()));
    let (mf, mc) = (mean(&full), mean(&ce));
    Ok((
        mf - mc > 0.0 && rows == 8 && complete,
        format!("5-seed mean accuracy full {mf:.2} vs CE-only {mc:.2} (margin {:+.2}), grid rows {rows}", mf - mc),
    ))
}

fn training_sanity(dir: &Path) -> Result<(bool, String), Error> {
    let mut acc = Vec::new();
    for seed in BENCHMARK_SEEDS {
        let cfg = benchmark(seed)?;
        let (_, ds) = benchmark_data(&cfg, dir)?;
        acc.push(few_shot_accuracy(&cfg, &ds)?);
    }
    let cfg = benchmark(BENCHMARK_SEEDS[0])?;
    let (path, _) = benchmark_data(&cfg, dir)?;
    let bytes = || -> Result<Vec<Vec<u8>>, Error> {
        let out = dir.join("run");
        if out.exists() {
            std::fs::remove_dir_all(&out).map_err(|e| Error::Data(e.to_string()))?;
        }
        runs::train_cmd(&cfg, &path, &out)?;
        runs::eval_cmd(&out.join(runs::CHECKPOINT_FILE), &path, cfg.eval.protocol, &out.join("eval"))?;
        [
            out.join(runs::CHECKPOINT_FILE),
            out.join(runs::TRAIN_LOG_FILE),
            out.join("eval").join(runs::REPORT_JSON_FILE),
        ]
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display()))))
        .collect()
    };
    let identical = bytes()? == bytes()?;
    let m = mean(&acc);
    Ok((
        m >= SANITY_ACCURACY && identical,
        format!("5-seed mean accuracy {m:.2} (>= {SANITY_ACCURACY}), reruns bit-identical: {identical}"),
    ))
}

fn ece_correctness(_: &Path) -> Result<(bool, String), Error> {
    // calibrated: every bin's accuracy equals its confidence
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for (c, n, hits) in [(0.25, 4, 1), (0.55, 20, 11), (0.7, 10, 7), (0.95, 20, 19)] {
        conf.extend(vec![c; n]);
        correct.extend((0..n).map(|i| i < hits));
    }
    let calibrated = expected_calibration_error(&conf, &correct, ECE_BINS)?;
    let wrong = expected_calibration_error(&[1.0; 50], &[false; 50], ECE_BINS)?;
    // two bins in 4:6 proportion: conf 0.9 at accuracy 0.5, conf 0.6 at 0.6
    let mut conf = vec![0.9; 40];
    conf.extend(vec![0.6; 60]);
    let mut correct: Vec<bool> = (0..40).map(|i| i < 20).collect();
    correct.extend((0..60).map(|i| i < 36));
    let hand = expected_calibration_error(&conf, &correct, ECE_BINS)?;
    Ok((
        calibrated < CALIBRATED_ECE && wrong == 1.0 && (hand - 0.16).abs() < HAND_ECE_TOLERANCE,
        format!("calibrated {calibrated:.1e}, always wrong {wrong}, two-bin {hand:.15}"),
    ))
}

fn prompt_sweep(dir: &Path) -> Result<(bool, String), Error> {
    let mut at10 = Vec::new();
    let mut at1 = Vec::new();
    for seed in BENCHMARK_SEEDS {
        let cfg = benchmark(seed)?;
        let (path, ds) = benchmark_data(&cfg, dir)?;
        let bundle = EmbeddingBundle::load(&path)?;
        for (n, out) in [(10, &mut at10), (1, &mut at1)] {
            let c = cfg.with_prompt_count(n);
            out.push(few_shot_accuracy(&c, &runs::with_prompt_count(&ds, &bundle, n)?)?);
        }
    }
    let cfg = benchmark(BENCHMARK_SEEDS[0])?;
    let (path, _) = benchmark_data(&cfg, dir)?;
    let table = runs::sweep_prompts(&cfg, &path, &SWEEP, &dir.join("sweep"))?;
    let counts: Vec<usize> = table.rows.iter().filter_map(|r| r[0].parse().ok()).collect();
    let (m10, m1) = (mean(&at10), mean(&at1));
    Ok((
        m10 >= m1 && counts == SWEEP,
        format!("5-seed mean accuracy N=10 {m10:.2} vs N=1 {m1:.2}, sweep rows {counts:?}"),
    ))
}

fn flip_each_section(bytes: &[u8], c: &Container) -> Result<usize, String> {
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut offset = 48 + mlen;
    let mut detected = 0;
    for s in &c.sections {
        let len = s.data.len() * s.data.dtype().size();
        if len > 0 {
            let mut bad = bytes.to_vec();
            bad[offset + len / 2] ^= 0x01;
            match Container::from_bytes(&bad) {
                Err(e) if e.to_string().contains(&format!("section {}", s.name)) => detected += 1,
                Err(e) => return Err(format!("section {} flip gave {e}", s.name)),
                Ok(_) => return Err(format!("section {} flip went unnoticed", s.name)),
            }
        }
        offset += len;
    }
    let mut bad = bytes.to_vec();
    bad[48 + mlen / 2] ^= 0x01;
    match Container::from_bytes(&bad) {
        Err(e) if e.to_string().to_lowercase().contains("manifest") => Ok(detected),
        other => Err(format!("manifest flip gave {other:?}")),
    }
}

fn bundle_format(dir: &Path) -> Result<(bool, String), Error> {
    let mut cfg = benchmark(BENCHMARK_SEEDS[0])?;
    let (path, ds) = benchmark_data(&cfg, dir)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::Data(e.to_string()))?;
    let loaded = EmbeddingBundle::from_bytes(&bytes)?;
    let round_trip = loaded.to_bytes()? == bytes && Dataset::from_bundle(&loaded)? == ds;
    let container = Container::from_bytes(&bytes)?;
    let flips = flip_each_section(&bytes, &container);

    let mut resume_ok = true;
    for momentum in [0.0, 0.9] {
        cfg.train.momentum = momentum;
        let enc = Encoders::new(&cfg)?;
        let straight = runs::train_dataset(&cfg, &enc, &ds, None, None)?;
        let partial = runs::train_dataset(&cfg, &enc, &ds, None, Some(cfg.train.epochs / 2))?;
        let stored = runs::to_checkpoint(&cfg, &partial)?.to_container()?.to_bytes()?;
        let ckpt = Checkpoint::from_container(Container::from_bytes(&stored)?)?;
        let resumed = runs::train_dataset(&cfg, &enc, &ds, Some(&ckpt), None)?;
        let a = runs::to_checkpoint(&cfg, &straight)?.to_container()?.to_bytes()?;
        let b = runs::to_checkpoint(&cfg, &resumed)?.to_container()?.to_bytes()?;
        let mut log = partial.log.rows.clone();
        log.extend(resumed.log.rows.iter().cloned());
        resume_ok &= a == b && log == straight.log.rows;
    }
    let detail = match &flips {
        Ok(n) => format!("{n} of {} sections plus manifest flagged by name", container.sections.len()),
        Err(e) => e.clone(),
    };
    Ok((
        round_trip && flips.is_ok() && resume_ok,
        format!("round trip bit-exact: {round_trip}, {detail}, resume bit-exact (with and without momentum): {resume_ok}"),
    ))
}

fn is_isolation_error(r: Result<impl Sized, Error>) -> bool {
    matches!(r, Err(Error::Data(m)) if m.contains("protocol isolation violated"))
}

fn protocol_isolation(dir: &Path) -> Result<(bool, String), Error> {
    let mut cfg = benchmark(BENCHMARK_SEEDS[0])?;
    cfg.train.epochs = 5;
    let enc = Encoders::new(&cfg)?;
    let (_, ds) = benchmark_data(&cfg, dir)?;
    let recipe = runs::recipe(&cfg, &enc);

    // base-to-new: training sees base classes only
    let (fitted, _) = base_to_new(&recipe, &ds)?;
    let (base_idx, new_idx) = base_split(ds.num_classes())?;
    let base_ids: BTreeSet<usize> = base_idx.iter().map(|&i| ds.class_ids[i]).collect();
    let new = ds.restrict(&new_idx)?;
    let mut new_samples = biovlm_core::datahub::fingerprints(&new.train.original);
    new_samples.extend(biovlm_core::datahub::fingerprints(&new.test.original));
    let b2n_clean = fitted.seen_classes.is_subset(&base_ids)
        && assert_disjoint("new-class sample", &fitted.fingerprints, &new_samples).is_ok();
    let mut leaked = fitted.clone();
    leaked.fingerprints.extend(biovlm_core::datahub::fingerprints(&new.train.original));
    let b2n_guard = is_isolation_error(score_base_to_new(&leaked, Some(&enc.text), &ds, cfg.eval.transfer, &cfg.selection));

    // OOD: a separate task with its own classes, then the source itself
    let source = fit(&recipe, &ds)?;
    let mut other = cfg.clone();
    other.seed = 99;
    other.data.spec.dataset_id = "synth-b".into();
    other.data.spec.class_offset = 100;
    let (_, target) = benchmark_data(&other, dir)?;
    let ood = ood_transfer(&source, Some(&enc.text), &[&target], &cfg.selection)?;
    let ood_guard = is_isolation_error(ood_transfer(&source, Some(&enc.text), &[&ds], &cfg.selection));
    let ok = b2n_clean && b2n_guard && ood_guard && ood.targets.len() == 1;
    Ok((
        ok,
        format!(
            "b2n trains on base only: {b2n_clean}, leaked new-class sample rejected: {b2n_guard}, \
             OOD on source samples rejected: {ood_guard}, OOD target accuracy {:.2}",
            ood.average
        ),
    ))
}
