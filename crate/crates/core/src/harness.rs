//! Configured experiment runner: pretrain → few-shot adapt → evaluate, the
//! five-row ablation grid, result persistence, and backbone caching.
//!
//! Every number in an emitted table is recomputable from (config hash, seed):
//! all randomness flows through named seed streams, and the only
//! run-dependent field in a persisted record is the single `timing` string.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{apply_domain_shift, generate_task, DomainShift, Split, TaskBundle, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, flatness_probe, Metrics};
use crate::models::{
    load_backbone, pretrain_backbone, save_backbone, AdaptedModel, AlignNetSettings, DualEncoder,
    EncoderDims, LoraSettings, PretrainSettings,
};
use crate::objective::{Batch, KlDirection, LossConfig, TrainingObjective};
use crate::optim::{GradRegConfig, ProjectionScope, UpdateKind};
use crate::params::ParamSet;
use crate::rng::content_hash;
use crate::train::{adapt, TrainMode, TrainSettings};

pub const RECORD_VERSION: u32 = 1;

/// Component toggles for the five ablation rows:
/// (a) none, (b) `use_sam_only`, (c) `use_gradreg`, (d) `use_alignnet`,
/// (e) `use_gradreg + use_alignnet`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_sam_only: bool,
    pub use_gradreg: bool,
    pub use_alignnet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Apply the text-adjustment head at evaluation time (both splits).
    pub alignnet_at_eval: bool,
    /// Measure the flatness probe at the adapted parameters.
    pub probe_flatness: bool,
    pub flatness_rho: f64,
    pub flatness_trials: usize,
    /// Optional out-of-distribution evaluations of the base test split.
    pub domain_shifts: Vec<DomainShift>,
    /// Seeds of transfer tasks sharing this run's pretraining pool; the
    /// adapted model is evaluated zero-shot on each target's base split.
    pub transfer_targets: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            alignnet_at_eval: true,
            probe_flatness: false,
            flatness_rho: 0.1,
            flatness_trials: 20,
            domain_shifts: Vec::new(),
            transfer_targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub d_embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 64,
            d_embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub dims: ModelDims,
    pub lora: LoraSettings,
    pub alignnet: AlignNetSettings,
    pub gradreg: GradRegConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
    pub pretrain: PretrainSettings,
    pub ablation: AblationFlags,
    pub eval: EvalSettings,
    /// Interpret the SAM-only row as the α = 1 regularized pipeline instead
    /// of raw perturbed-gradient updates.
    pub sam_as_fusion: bool,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            dims: ModelDims::default(),
            lora: LoraSettings::default(),
            alignnet: AlignNetSettings::default(),
            gradreg: GradRegConfig::default(),
            loss: LossConfig::default(),
            train: TrainSettings::default(),
            pretrain: PretrainSettings::default(),
            ablation: AblationFlags::default(),
            eval: EvalSettings::default(),
            sam_as_fusion: false,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    /// The reference desk-scale configuration used by the acceptance suite
    /// and shipped as `configs/reference.conf`. Differs from the plain
    /// defaults where the defaults (which follow the published settings) are
    /// scaled for the synthetic task: a larger step size and perturbation
    /// radius match the toy loss surface, the KL weight is zero so the
    /// baseline row is an unregularized LoRA run, and the text-adjustment
    /// head is trained but not applied at evaluation.
    pub fn reference() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.train.base_lr = 0.02;
        cfg.gradreg.rho = 0.2;
        cfg.loss.kl_weight = 0.0;
        cfg.eval.alignnet_at_eval = false;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.gradreg.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.ablation.use_sam_only && self.ablation.use_gradreg {
            return Err(Error::Config(
                "ablation.use_sam_only and ablation.use_gradreg are mutually exclusive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.dims.hidden < 2 || self.dims.d_embed < 2 {
            return Err(Error::Config(
                "dims.hidden and dims.d_embed must be >= 2".into(),
            ));
        }
        if self.eval.flatness_trials == 0 {
            return Err(Error::Config("eval.flatness_trials must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            d_in: self.task.d_in,
            hidden: self.dims.hidden,
            d_embed: self.dims.d_embed,
        }
    }

    /// Stable content hash of the full configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(content_hash(&serde_json::to_vec(self)?))
    }

    fn mode(&self) -> TrainMode {
        if self.ablation.use_gradreg {
            TrainMode::GradReg
        } else if self.ablation.use_sam_only {
            if self.sam_as_fusion {
                TrainMode::GradReg
            } else {
                TrainMode::SamOnly
            }
        } else {
            TrainMode::Plain
        }
    }

    fn effective_gradreg(&self) -> GradRegConfig {
        if self.ablation.use_sam_only && self.sam_as_fusion {
            GradRegConfig {
                alpha: 1.0,
                ..self.gradreg
            }
        } else {
            self.gradreg
        }
    }
}

// ---------------------------------------------------------------------------
// Flat key = value configuration files
// ---------------------------------------------------------------------------

/// Apply one `key = value` assignment addressed by dotted field path.
/// Unknown keys and unparseable values are configuration errors naming the
/// path. `seeds` takes a comma list; `eval.domain_shifts` takes
/// `kind:magnitude` entries separated by commas.
pub fn apply_kv(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .trim()
            .parse::<T>()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
    }
    let v = value.trim();
    match key.trim() {
        "task.seed" => cfg.task.seed = parse(key, v)?,
        "task.d_in" => cfg.task.d_in = parse(key, v)?,
        "task.n_pretrain_classes" => cfg.task.n_pretrain_classes = parse(key, v)?,
        "task.n_heldout" => cfg.task.n_heldout = parse(key, v)?,
        "task.pretrain_per_class" => cfg.task.pretrain_per_class = parse(key, v)?,
        "task.n_base" => cfg.task.n_base = parse(key, v)?,
        "task.n_novel" => cfg.task.n_novel = parse(key, v)?,
        "task.shots" => cfg.task.shots = parse(key, v)?,
        "task.sigma_img" => cfg.task.sigma_img = parse(key, v)?,
        "task.sigma_txt" => cfg.task.sigma_txt = parse(key, v)?,
        "task.test_per_class" => cfg.task.test_per_class = parse(key, v)?,
        "dims.hidden" => cfg.dims.hidden = parse(key, v)?,
        "dims.d_embed" => cfg.dims.d_embed = parse(key, v)?,
        "lora.rank" => cfg.lora.rank = parse(key, v)?,
        "lora.gamma" => cfg.lora.gamma = parse(key, v)?,
        "alignnet.hidden1" => cfg.alignnet.hidden1 = parse(key, v)?,
        "alignnet.hidden2" => cfg.alignnet.hidden2 = parse(key, v)?,
        "alignnet.renormalize" => cfg.alignnet.renormalize = parse(key, v)?,
        "gradreg.rho" => cfg.gradreg.rho = parse(key, v)?,
        "gradreg.alpha" => cfg.gradreg.alpha = parse(key, v)?,
        "gradreg.delta" => cfg.gradreg.delta = parse(key, v)?,
        "gradreg.scope" => {
            cfg.gradreg.scope = match v {
                "global" => ProjectionScope::Global,
                "per-tensor" => ProjectionScope::PerTensor,
                _ => {
                    return Err(Error::Config(format!(
                        "gradreg.scope: expected global|per-tensor, got {v:?}"
                    )))
                }
            }
        }
        "loss.kl_weight" => cfg.loss.kl_weight = parse(key, v)?,
        "loss.kl_direction" => {
            cfg.loss.kl_direction = match v {
                "frozen-to-tuned" => KlDirection::FrozenToTuned,
                "tuned-to-frozen" => KlDirection::TunedToFrozen,
                _ => {
                    return Err(Error::Config(format!(
                        "loss.kl_direction: expected frozen-to-tuned|tuned-to-frozen, got {v:?}"
                    )))
                }
            }
        }
        "loss.temperature" => cfg.loss.temperature = parse(key, v)?,
        "train.kind" => {
            cfg.train.kind = match v {
                "sgd" => UpdateKind::Sgd,
                "sgd-momentum" => UpdateKind::SgdMomentum,
                _ => {
                    return Err(Error::Config(format!(
                        "train.kind: expected sgd|sgd-momentum, got {v:?}"
                    )))
                }
            }
        }
        "train.base_lr" => cfg.train.base_lr = parse(key, v)?,
        "train.momentum" => cfg.train.momentum = parse(key, v)?,
        "train.epochs" => cfg.train.epochs = parse(key, v)?,
        "train.batch_size" => cfg.train.batch_size = parse(key, v)?,
        "pretrain.epochs" => cfg.pretrain.epochs = parse(key, v)?,
        "pretrain.base_lr" => cfg.pretrain.base_lr = parse(key, v)?,
        "pretrain.momentum" => cfg.pretrain.momentum = parse(key, v)?,
        "pretrain.batch_classes" => cfg.pretrain.batch_classes = parse(key, v)?,
        "ablation.use_sam_only" => cfg.ablation.use_sam_only = parse(key, v)?,
        "ablation.use_gradreg" => cfg.ablation.use_gradreg = parse(key, v)?,
        "ablation.use_alignnet" => cfg.ablation.use_alignnet = parse(key, v)?,
        "eval.alignnet_at_eval" => cfg.eval.alignnet_at_eval = parse(key, v)?,
        "eval.probe_flatness" => cfg.eval.probe_flatness = parse(key, v)?,
        "eval.flatness_rho" => cfg.eval.flatness_rho = parse(key, v)?,
        "eval.flatness_trials" => cfg.eval.flatness_trials = parse(key, v)?,
        "eval.domain_shifts" => {
            let mut shifts = Vec::new();
            for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                let (kind, mag) = item.trim().split_once(':').ok_or_else(|| {
                    Error::Config(format!(
                        "eval.domain_shifts: expected kind:magnitude, got {item:?}"
                    ))
                })?;
                shifts.push(DomainShift {
                    kind: kind.trim().parse()?,
                    magnitude: parse("eval.domain_shifts", mag)?,
                });
            }
            cfg.eval.domain_shifts = shifts;
        }
        "eval.transfer_targets" => {
            let mut targets = Vec::new();
            for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                targets.push(parse::<u64>("eval.transfer_targets", item)?);
            }
            cfg.eval.transfer_targets = targets;
        }
        "sam_as_fusion" => cfg.sam_as_fusion = parse(key, v)?,
        "seeds" => {
            let mut seeds = Vec::new();
            for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                seeds.push(parse::<u64>("seeds", item)?);
            }
            cfg.seeds = seeds;
        }
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parse a flat `key = value` config file ('#' starts a comment) on top of
/// the defaults.
pub fn parse_config_text(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        apply_kv(&mut cfg, key, value)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_text(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub step_log: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub version: String,
    /// Ablation row label (a–e) when part of a grid.
    pub label: Option<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    pub median: Option<Metrics>,
    pub failed: bool,
    /// The only field that differs between byte-identical reruns.
    pub timing: String,
}

impl RunRecord {
    /// Serialized record with the timing field blanked, for byte-level
    /// determinism comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.timing = String::new();
        Ok(serde_json::to_string_pretty(&clone)?)
    }
}

fn median_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Element-wise medians over the successful seeds (the HM column is the
/// median of per-seed HMs, not the HM of medians).
fn median_metrics(results: &[SeedResult]) -> Option<Metrics> {
    let ok: Vec<&Metrics> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let base = median_of(ok.iter().map(|m| m.base_acc).collect())?;
    let novel = median_of(ok.iter().map(|m| m.novel_acc).collect())?;
    let hm = median_of(ok.iter().map(|m| m.hm).collect())?;
    let flatness = median_of(ok.iter().filter_map(|m| m.flatness).collect());
    let map_median = |get: &dyn Fn(&Metrics) -> Option<&BTreeMap<String, f64>>| {
        ok.first().and_then(|m| get(m)).map(|first| {
            first
                .keys()
                .filter_map(|k| {
                    median_of(
                        ok.iter()
                            .filter_map(|m| get(m).and_then(|d| d.get(k)).copied())
                            .collect(),
                    )
                    .map(|v| (k.clone(), v))
                })
                .collect::<BTreeMap<String, f64>>()
        })
    };
    let per_domain = map_median(&|m: &Metrics| m.per_domain.as_ref());
    let transfer = map_median(&|m: &Metrics| m.transfer.as_ref());
    Some(Metrics {
        base_acc: base,
        novel_acc: novel,
        hm,
        per_domain,
        transfer,
        flatness,
    })
}

// ---------------------------------------------------------------------------
// Backbone cache
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PretrainKey<'a> {
    dims: EncoderDims,
    temperature: f64,
    pretrain: &'a PretrainSettings,
    seed: u64,
    d_in: usize,
    n_pretrain_classes: usize,
    n_heldout: usize,
    pretrain_per_class: usize,
    sigma_img: f64,
    sigma_txt: f64,
}

/// Cache directory: `GLAD_CACHE_DIR` when set, else `<out_dir>/backbone-cache`.
pub fn cache_dir(out_dir: &Path) -> PathBuf {
    match std::env::var_os("GLAD_CACHE_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out_dir.join("backbone-cache"),
    }
}

fn cached_backbone(
    cfg: &ExperimentConfig,
    bundle: &TaskBundle,
    seed: u64,
    cache: &Path,
) -> Result<DualEncoder> {
    let key = PretrainKey {
        dims: cfg.encoder_dims(),
        temperature: cfg.loss.temperature,
        pretrain: &cfg.pretrain,
        seed,
        d_in: cfg.task.d_in,
        n_pretrain_classes: cfg.task.n_pretrain_classes,
        n_heldout: cfg.task.n_heldout,
        pretrain_per_class: cfg.task.pretrain_per_class,
        sigma_img: cfg.task.sigma_img,
        sigma_txt: cfg.task.sigma_txt,
    };
    let hash = content_hash(&serde_json::to_vec(&key)?);
    let path = cache.join(format!("backbone-{hash}.json"));
    if path.is_file() {
        if let Ok((model, _)) = load_backbone(&path) {
            return Ok(model);
        }
    }
    let model = pretrain_backbone(
        cfg.encoder_dims(),
        cfg.loss.temperature,
        &bundle.pretrain_data(),
        &cfg.pretrain,
        seed,
    )?;
    std::fs::create_dir_all(cache)?;
    save_backbone(&path, &model, seed)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    config_hash: &str,
    label: Option<&str>,
) -> Result<(Metrics, String)> {
    let task = TaskSpec { seed, ..cfg.task };
    let bundle = generate_task(&task)?;
    let backbone = cached_backbone(cfg, &bundle, seed, &cache_dir(out_dir))?;

    let mut params = ParamSet::new();
    let alignnet = cfg.ablation.use_alignnet.then_some(&cfg.alignnet);
    let model = AdaptedModel::build(backbone, &cfg.lora, alignnet, &mut params, seed)?;

    let outcome = adapt(
        &model,
        &mut params,
        &bundle,
        cfg.loss,
        &cfg.effective_gradreg(),
        &cfg.train,
        cfg.mode(),
        seed,
    )?;

    let suffix = label.map(|l| format!("-{l}")).unwrap_or_default();
    let log_name = format!("steps-{config_hash}{suffix}-seed{seed}.jsonl");
    let log_path = out_dir.join(&log_name);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for report in &outcome.reports {
        serde_json::to_writer(&mut log, report)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    let use_align = cfg.ablation.use_alignnet && cfg.eval.alignnet_at_eval;
    let base_acc = accuracy(&model, &params, &bundle, Split::TestBase, use_align)?;
    let novel_acc = accuracy(&model, &params, &bundle, Split::TestNovel, use_align)?;
    let mut metrics = Metrics::from_base_novel(base_acc, novel_acc)?;

    if !cfg.eval.domain_shifts.is_empty() {
        let mut per_domain = BTreeMap::new();
        for shift in &cfg.eval.domain_shifts {
            let shifted = apply_domain_shift(&bundle.test_base.images, shift, seed)?;
            let preds = model.predict(&params, &shifted, &bundle.base_texts, use_align)?;
            let acc = crate::metrics::accuracy_of_predictions(&preds, &bundle.test_base.labels)?;
            per_domain.insert(
                format!("{:?}:{}", shift.kind, shift.magnitude).to_lowercase(),
                acc,
            );
        }
        metrics.per_domain = Some(per_domain);
    }

    if !cfg.eval.transfer_targets.is_empty() {
        let family = crate::bench::cross_task_pool(&task, &cfg.eval.transfer_targets)?;
        let mut transfer = BTreeMap::new();
        for target in &family[1..] {
            let preds = model.predict(
                &params,
                &target.test_base.images,
                &target.base_texts,
                use_align,
            )?;
            let acc = crate::metrics::accuracy_of_predictions(&preds, &target.test_base.labels)?;
            transfer.insert(format!("target-{}", target.spec.seed), acc);
        }
        metrics.transfer = Some(transfer);
    }

    if cfg.eval.probe_flatness {
        let batch = Batch {
            images: bundle.train.images.clone(),
            labels: bundle.train.labels.clone(),
        };
        let mut objective = TrainingObjective::new(&model, &bundle.base_texts, cfg.loss, batch)?;
        let mut loss_fn = |p: &ParamSet| objective.loss_value(p).map(|b| b.total);
        let report = flatness_probe(
            &mut loss_fn,
            &mut params,
            cfg.eval.flatness_rho,
            cfg.eval.flatness_trials,
            seed,
        )?;
        metrics.flatness = Some(report.mean_increase);
    }

    Ok((metrics, log_name))
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    run_labeled(cfg, out_dir, None)
}

fn run_labeled(cfg: &ExperimentConfig, out_dir: &Path, label: Option<&str>) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let config_hash = cfg.hash()?;
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, out_dir, &config_hash, label) {
            Ok((metrics, log_name)) => per_seed.push(SeedResult {
                seed,
                metrics: Some(metrics),
                step_log: Some(log_name),
                failed: None,
            }),
            Err(e) => per_seed.push(SeedResult {
                seed,
                metrics: None,
                step_log: None,
                failed: Some(e.to_string()),
            }),
        }
    }

    let median = median_metrics(&per_seed);
    let failed = per_seed.iter().any(|r| r.failed.is_some());
    let record = RunRecord {
        format_version: RECORD_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        label: label.map(String::from),
        config_hash: config_hash.clone(),
        config: cfg.clone(),
        per_seed,
        median,
        failed,
        timing: format!(
            "unix_start={started};wall_secs={:.3}",
            clock.elapsed().as_secs_f64()
        ),
    };

    let suffix = label.map(|l| format!("-{l}")).unwrap_or_default();
    let record_path = out_dir.join(format!("run-{config_hash}{suffix}.json"));
    std::fs::write(&record_path, serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

/// The five-row ablation grid. Rows share the base configuration (seeds and
/// task included) and differ only in the component flags; a failing row does
/// not stop the grid.
pub fn run_ablation_grid(base: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunRecord>> {
    base.validate()?;
    let rows: [(&str, AblationFlags); 5] = [
        (
            "a",
            AblationFlags {
                use_sam_only: false,
                use_gradreg: false,
                use_alignnet: false,
            },
        ),
        (
            "b",
            AblationFlags {
                use_sam_only: true,
                use_gradreg: false,
                use_alignnet: false,
            },
        ),
        (
            "c",
            AblationFlags {
                use_sam_only: false,
                use_gradreg: true,
                use_alignnet: false,
            },
        ),
        (
            "d",
            AblationFlags {
                use_sam_only: false,
                use_gradreg: false,
                use_alignnet: true,
            },
        ),
        (
            "e",
            AblationFlags {
                use_sam_only: false,
                use_gradreg: true,
                use_alignnet: true,
            },
        ),
    ];
    let mut records = Vec::with_capacity(5);
    for (label, flags) in rows {
        let mut cfg = base.clone();
        cfg.ablation = flags;
        match run_labeled(&cfg, out_dir, Some(label)) {
            Ok(r) => records.push(r),
            Err(e) => records.push(RunRecord {
                format_version: RECORD_VERSION,
                version: env!("CARGO_PKG_VERSION").to_string(),
                label: Some(label.to_string()),
                config_hash: cfg.hash().unwrap_or_default(),
                config: cfg,
                per_seed: Vec::new(),
                median: None,
                failed: true,
                timing: format!("failed={e}"),
            }),
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Result emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmitFormat {
    Json,
    Csv,
    MarkdownTable,
}

impl std::str::FromStr for EmitFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(EmitFormat::Json),
            "csv" => Ok(EmitFormat::Csv),
            "md" | "markdown" | "markdown-table" => Ok(EmitFormat::MarkdownTable),
            other => Err(Error::Config(format!(
                "unknown emit format {other:?} (expected json|csv|markdown-table)"
            ))),
        }
    }
}

/// Fixed CSV header; one row per seed plus a `median` row per record.
pub const CSV_HEADER: &str = "label,config_hash,seed,base_acc,novel_acc,hm";

pub fn render_records(records: &[RunRecord], format: EmitFormat) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("emit: no records".into()));
    }
    match format {
        EmitFormat::Json => Ok(serde_json::to_string_pretty(records)?),
        EmitFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in records {
                let label = r.label.as_deref().unwrap_or("-");
                for s in &r.per_seed {
                    if let Some(m) = &s.metrics {
                        out.push_str(&format!(
                            "{label},{},{},{:.2},{:.2},{:.2}\n",
                            r.config_hash, s.seed, m.base_acc, m.novel_acc, m.hm
                        ));
                    } else {
                        out.push_str(&format!(
                            "{label},{},{},failed,failed,failed\n",
                            r.config_hash, s.seed
                        ));
                    }
                }
                if let Some(m) = &r.median {
                    out.push_str(&format!(
                        "{label},{},median,{:.2},{:.2},{:.2}\n",
                        r.config_hash, m.base_acc, m.novel_acc, m.hm
                    ));
                }
            }
            Ok(out)
        }
        EmitFormat::MarkdownTable => {
            let mut out = String::from("| Row | Base | Novel | HM |\n|---|---|---|---|\n");
            for r in records {
                let label = r
                    .label
                    .clone()
                    .unwrap_or_else(|| r.config_hash[..8].to_string());
                match &r.median {
                    Some(m) => {
                        let m = m.rounded();
                        out.push_str(&format!(
                            "| ({label}) | {:.2} | {:.2} | {:.2} |\n",
                            m.base_acc, m.novel_acc, m.hm
                        ));
                    }
                    None => out.push_str(&format!("| ({label}) | failed | failed | failed |\n")),
                }
            }
            Ok(out)
        }
    }
}

pub fn emit_results(records: &[RunRecord], format: EmitFormat, path: &Path) -> Result<()> {
    let text = render_records(records, format)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let bytes = std::fs::read(path)?;
    // Accept either a single record or a list.
    match serde_json::from_slice::<Vec<RunRecord>>(&bytes) {
        Ok(v) => Ok(v),
        Err(_) => Ok(vec![serde_json::from_slice::<RunRecord>(&bytes)?]),
    }
}

// ---------------------------------------------------------------------------
// Flatness comparison used by the probe-flatness subcommand
// ---------------------------------------------------------------------------

/// Median flatness of the configured run; convenience over per-seed records.
pub fn median_flatness(record: &RunRecord) -> Option<f64> {
    record.median.as_ref().and_then(|m| m.flatness)
}
