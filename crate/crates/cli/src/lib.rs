//! Experiment pipeline behind the `dldseg` binary: dataset synthesis,
//! cross-validated training of several loss variants, and report merging.
//!
//! Every run is reproducible from its JSON configuration alone. A master
//! seed fans out into per-purpose seeds (fold planning, validation holdout,
//! parameter init, epoch shuffling) through a hash, so adding or removing a
//! method never perturbs the others. Long runs resume cheaply: each
//! (fold, method) cell writes a completion marker and is skipped on rerun.

use dldseg_core::dataset::{
    context_volume, load_dataset, make_partial_annotation, save_dataset, synth_dataset, Case,
    GeneratorConfig,
};
use dldseg_core::eval::{
    aggregate_report, decode_argmax, format_float, method_label, slice_metrics, ConfusionMatrix,
    MethodResults, MetricsReport, SliceMetrics,
};
use dldseg_core::folds::{stratified_group_kfold, validation_split, FoldPlan};
use dldseg_core::train::{train, AdamHyper, TrainOutcome};
use dldseg_core::{Error, LossMode, Model, ModelConfig, Result, NUM_CLASSES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Complete description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where the synthesized dataset lives or should be written.
    pub dataset_dir: PathBuf,
    /// Where run artifacts and reports are written.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Cross-validation fold count.
    pub k: usize,
    /// Master seed behind fold planning, holdouts, init, and shuffling.
    #[serde(default)]
    pub seed: u64,
    /// Training methods to compare.
    pub methods: Vec<LossMode>,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamHyper,
    /// Fraction of each fold's training slices held out for early stopping.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.15
}

impl ExperimentConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        let mut labels = BTreeSet::new();
        for mode in &self.methods {
            if let LossMode::Proposed { lambda } = mode {
                if !lambda.is_finite() || *lambda < 0.0 {
                    return Err(Error::Config(format!(
                        "proposed-loss weight must be finite and non-negative, got {lambda}"
                    )));
                }
            }
            if !labels.insert(method_label(mode)) {
                return Err(Error::Config(format!(
                    "method {} is listed twice",
                    method_label(mode)
                )));
            }
        }
        if self.model.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "model must output {NUM_CLASSES} classes, got {}",
                self.model.num_classes
            )));
        }
        if self.model.image_size != self.generator.image_size {
            return Err(Error::Config(format!(
                "model image_size {} does not match generator image_size {}",
                self.model.image_size, self.generator.image_size
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, after any overrides.
    pub fn hash(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(body.as_bytes());
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Deterministic per-purpose seed derived from the master seed and a tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest holds 8 bytes"))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    write_text(path, &format!("{body}\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Serialize)]
struct SynthMeta {
    config_hash: String,
    generator_seed: u64,
    num_cases: usize,
}

/// Synthesizes the dataset a config describes. Returns the dataset dir.
pub fn cmd_synth(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.generator.seed = seed;
    }
    let dir = out.unwrap_or(&config.dataset_dir).to_path_buf();
    let cases = synth_dataset(&config.generator)?;
    save_dataset(&config.generator, &cases, &dir)?;
    let meta = SynthMeta {
        config_hash: config.hash(),
        generator_seed: config.generator.seed,
        num_cases: cases.len(),
    };
    write_json(&dir.join("synth_meta.json"), &meta)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct RunMeta {
    config_hash: String,
    seed: u64,
    generator_seed: u64,
    fold_seed: u64,
    k: usize,
    methods: Vec<String>,
    train_seeds: BTreeMap<String, u64>,
}

/// One (fold, method) cell that did not finish.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FailureRow {
    pub fold: usize,
    pub method: String,
    pub error: String,
}

/// Outcome of `cmd_run`.
#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    /// Cells that failed; the aggregate report is skipped when non-empty.
    pub failures: Vec<FailureRow>,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldMetrics {
    slices: Vec<SliceMetrics>,
    confusion: ConfusionMatrix,
}

#[derive(Debug, Serialize)]
struct TrainMeta {
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
}

/// Trains and evaluates every method across all folds, then aggregates.
///
/// Work is idempotent per (fold, method): finished cells carry a marker and
/// are skipped on rerun. `jobs` folds run concurrently; outputs are
/// byte-identical for any job count because every cell derives its own seeds
/// and writes only its own files.
pub fn cmd_run(
    config_path: &Path,
    out: Option<&Path>,
    jobs: usize,
    seed: Option<u64>,
) -> Result<RunOutput> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let out_dir = out.unwrap_or(&config.output_dir).to_path_buf();
    if !config.dataset_dir.join("manifest.json").is_file() {
        return Err(Error::Config(format!(
            "dataset not found at {}; run synth first",
            config.dataset_dir.display()
        )));
    }
    let (generator, cases) = load_dataset(&config.dataset_dir)?;
    if generator.image_size != config.model.image_size {
        return Err(Error::Config(format!(
            "dataset image_size {} does not match model image_size {}",
            generator.image_size, config.model.image_size
        )));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let fold_seed = derive_seed(config.seed, "folds");
    let plan = stratified_group_kfold(&cases, config.k, fold_seed)?;
    plan.save(&out_dir.join("folds.json"))?;

    let mut ordered_methods = config.methods.clone();
    ordered_methods.sort_by(dldseg_core::eval::compare_methods);
    let mut train_seeds = BTreeMap::new();
    for fold in 0..config.k {
        for mode in &ordered_methods {
            let label = method_label(mode);
            train_seeds.insert(
                format!("fold{fold}/{label}"),
                derive_seed(config.seed, &format!("train/fold{fold}/{label}")),
            );
        }
    }
    let meta = RunMeta {
        config_hash: config.hash(),
        seed: config.seed,
        generator_seed: generator.seed,
        fold_seed,
        k: config.k,
        methods: ordered_methods.iter().map(method_label).collect(),
        train_seeds,
    };
    write_json(&out_dir.join("run_meta.json"), &meta)?;

    let failures = Mutex::new(Vec::new());
    let next_fold = AtomicUsize::new(0);
    let workers = jobs.max(1).min(config.k);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let fold = next_fold.fetch_add(1, Ordering::SeqCst);
                if fold >= config.k {
                    break;
                }
                for mode in &ordered_methods {
                    if let Err(e) = run_fold_method(&config, &cases, &plan, fold, mode, &out_dir)
                    {
                        failures.lock().expect("failure list intact").push(FailureRow {
                            fold,
                            method: method_label(mode),
                            error: e.to_string(),
                        });
                    }
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure list intact");
    failures.sort();
    if !failures.is_empty() {
        let mut body = String::from("fold,method,error\n");
        for f in &failures {
            let clean = f.error.replace(['\n', ','], ";");
            let _ = writeln!(body, "{},{},{}", f.fold, f.method, clean);
        }
        write_text(&out_dir.join("failures.csv"), &body)?;
        return Ok(RunOutput { out_dir, failures, report: None });
    }

    let mut results = Vec::new();
    for mode in &ordered_methods {
        let label = method_label(mode);
        let mut metrics = Vec::new();
        let mut confusion = ConfusionMatrix::new();
        for fold in 0..config.k {
            let path = out_dir.join(format!("fold{fold}")).join(&label).join("metrics.json");
            let fm: FoldMetrics = read_json(&path)?;
            metrics.extend(fm.slices);
            confusion.merge(&fm.confusion);
        }
        results.push(MethodResults { mode: *mode, metrics, confusion });
    }
    let report = aggregate_report(&results, &out_dir)?;
    Ok(RunOutput { out_dir, failures: Vec::new(), report: Some(report) })
}

fn run_fold_method(
    config: &ExperimentConfig,
    cases: &[Case],
    plan: &FoldPlan,
    fold: usize,
    mode: &LossMode,
    out_dir: &Path,
) -> Result<()> {
    let label = method_label(mode);
    let dir = out_dir.join(format!("fold{fold}")).join(&label);
    let marker = dir.join("done.marker");
    if marker.is_file() {
        return Ok(());
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let pool = plan.train_slices(fold);
    let (train_refs, val_refs) = validation_split(
        &pool,
        config.validation_fraction,
        derive_seed(config.seed, &format!("val/fold{fold}")),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        derive_seed(config.seed, &format!("init/fold{fold}/{label}")),
    );
    let model = Model::build(config.model, &mut rng)?;
    let outcome: TrainOutcome = train(
        model,
        cases,
        &train_refs,
        &val_refs,
        *mode,
        &config.optimizer,
        derive_seed(config.seed, &format!("train/fold{fold}/{label}")),
    )?;

    outcome.model.save(&dir.join("model"))?;
    let mut history = String::from("epoch,train_loss,val_loss\n");
    for epoch in &outcome.history {
        let _ = writeln!(
            history,
            "{},{},{}",
            epoch.epoch,
            format_float(epoch.train_loss),
            format_float(epoch.val_loss),
        );
    }
    write_text(&dir.join("history.csv"), &history)?;
    write_json(
        &dir.join("train_meta.json"),
        &TrainMeta {
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            epochs_run: outcome.history.len(),
        },
    )?;

    let by_id: BTreeMap<&str, &Case> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut slices = Vec::new();
    let mut confusion = ConfusionMatrix::new();
    for slice_ref in plan.test_slices(fold) {
        let case = by_id.get(slice_ref.case_id.as_str()).ok_or_else(|| {
            Error::Contract(format!("fold plan refers to unknown case {}", slice_ref.case_id))
        })?;
        let input = context_volume(case, slice_ref.slice_index, config.model.context_slices)?;
        let pass = outcome.model.forward(&input)?;
        let pred = decode_argmax(pass.graph.value(pass.logits))?;
        let annotation = make_partial_annotation(case, slice_ref.slice_index, slice_ref.chosen)?;
        let m = slice_metrics(&pred, &annotation, &slice_ref.case_id)?;
        confusion.record(&pred, &annotation)?;
        slices.push(m);
    }
    write_json(&dir.join("metrics.json"), &FoldMetrics { slices, confusion })?;
    write_text(&marker, "ok\n")?;
    Ok(())
}

/// Merges finished runs into one summary table. Returns the merged rows.
///
/// Methods appearing in several inputs must agree exactly on their per-slice
/// results, and all methods must cover the same slice set.
pub fn cmd_compare(inputs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    if inputs.is_empty() {
        return Err(Error::Config("compare needs at least one results directory".into()));
    }
    const SUMMARY_HEADER: &str =
        "method,recall_mean,recall_sd,precision_mean,precision_sd,dice_mean,dice_sd";
    const PER_SLICE_HEADER: &str = "method,case_id,slice_index,class,recall,precision,dice";

    struct MethodBlock {
        summary_line: String,
        slice_lines: Vec<String>,
        slice_keys: Vec<(String, usize)>,
    }
    let mut methods: Vec<(String, MethodBlock)> = Vec::new();

    for dir in inputs {
        let summary_path = dir.join("summary.csv");
        let summary = std::fs::read_to_string(&summary_path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", summary_path.display()))
        })?;
        let per_slice_path = dir.join("per_slice.csv");
        let per_slice = std::fs::read_to_string(&per_slice_path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", per_slice_path.display()))
        })?;
        let mut summary_lines = summary.lines();
        if summary_lines.next() != Some(SUMMARY_HEADER) {
            return Err(Error::Config(format!(
                "{} does not start with the expected header",
                summary_path.display()
            )));
        }
        let mut slice_lines = per_slice.lines();
        if slice_lines.next() != Some(PER_SLICE_HEADER) {
            return Err(Error::Config(format!(
                "{} does not start with the expected header",
                per_slice_path.display()
            )));
        }
        let mut blocks: BTreeMap<String, (Vec<String>, Vec<(String, usize)>)> = BTreeMap::new();
        for line in slice_lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Config(format!(
                    "{}: malformed row {line:?}",
                    per_slice_path.display()
                )));
            }
            let slice_index: usize = fields[2].parse().map_err(|_| {
                Error::Config(format!(
                    "{}: bad slice index in {line:?}",
                    per_slice_path.display()
                ))
            })?;
            let entry = blocks.entry(fields[0].to_string()).or_default();
            entry.0.push(line.to_string());
            entry.1.push((fields[1].to_string(), slice_index));
        }
        for line in summary_lines {
            let label = line.split(',').next().unwrap_or_default().to_string();
            let (slice_lines, slice_keys) = blocks.remove(&label).ok_or_else(|| {
                Error::Config(format!(
                    "{}: method {label} has no per-slice rows",
                    dir.display()
                ))
            })?;
            let block =
                MethodBlock { summary_line: line.to_string(), slice_lines, slice_keys };
            if let Some((_, existing)) = methods.iter().find(|(l, _)| *l == label) {
                if existing.summary_line != block.summary_line
                    || existing.slice_lines != block.slice_lines
                {
                    return Err(Error::Config(format!(
                        "method {label} differs between input runs"
                    )));
                }
            } else {
                methods.push((label, block));
            }
        }
        if let Some(label) = blocks.keys().next() {
            return Err(Error::Config(format!(
                "{}: method {label} has per-slice rows but no summary row",
                dir.display()
            )));
        }
    }

    let reference = methods[0].1.slice_keys.clone();
    for (label, block) in &methods {
        if block.slice_keys != reference {
            return Err(Error::Config(format!(
                "method {label} covers a different slice set than {}",
                methods[0].0
            )));
        }
    }

    methods.sort_by(|a, b| label_rank(&a.0).cmp(&label_rank(&b.0)));
    let mut body = format!("{SUMMARY_HEADER}\n");
    let mut rows = Vec::new();
    for (_, block) in &methods {
        let _ = writeln!(body, "{}", block.summary_line);
        rows.push(block.summary_line.clone());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_text(&out.join("summary.csv"), &body)?;
    Ok(rows)
}

/// Sort key reproducing the comparison-table order from a method label.
///
/// The weight is encoded via its bit pattern, which orders non-negative
/// floats correctly.
fn label_rank(label: &str) -> (u8, u64, String) {
    if label == "supervised_only" {
        (0, 0, label.to_string())
    } else if let Some(rest) = label.strip_prefix("proposed_lambda_") {
        let lambda: f64 = rest.parse().unwrap_or(f64::MAX);
        (1, lambda.abs().to_bits(), label.to_string())
    } else if label == "semi_supervised" {
        (2, 0, label.to_string())
    } else {
        (3, 0, label.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_separate_purposes() {
        let a = derive_seed(7, "folds");
        let b = derive_seed(7, "train/fold0/supervised_only");
        let c = derive_seed(8, "folds");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "folds"));
    }

    #[test]
    fn label_ranks_follow_the_comparison_table() {
        let mut labels = vec![
            "semi_supervised".to_string(),
            "proposed_lambda_1".to_string(),
            "supervised_only".to_string(),
            "proposed_lambda_0.1".to_string(),
        ];
        labels.sort_by(|a, b| label_rank(a).cmp(&label_rank(b)));
        assert_eq!(
            labels,
            ["supervised_only", "proposed_lambda_0.1", "proposed_lambda_1", "semi_supervised"]
        );
    }

    #[test]
    fn config_hash_tracks_content() {
        let config = ExperimentConfig {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            generator: GeneratorConfig::default(),
            k: 3,
            seed: 0,
            methods: vec![LossMode::SupervisedOnly],
            model: ModelConfig {
                context_slices: 3,
                image_size: 32,
                base_channels: 4,
                depth: 2,
                num_classes: NUM_CLASSES,
            },
            optimizer: AdamHyper::default(),
            validation_fraction: 0.15,
        };
        let base = config.hash();
        assert_eq!(base.len(), 64);
        let mut changed = config.clone();
        changed.seed = 1;
        assert_ne!(base, changed.hash());
        assert_eq!(base, config.clone().hash());
    }
}
