//! Experiment orchestration: config-driven training runs, model and
//! table-only evaluation, the four-variant ablation, and hyperparameter
//! sweeps. Every artifact embeds the config hash and seed; apart from the
//! timestamped header lines, identical inputs produce byte-identical
//! outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{config_hash, MmptConfig, Variant};
use crate::dataset::{export_dataset, make_dataset, Dataset, SplitDatasets};
use crate::error::{MmptError, Result};
use crate::metrics::{
    bias_sweep, predict_open_world, summarize, table_samples, MetricsCurve, MetricsSummary,
    ScoredSample,
};
use crate::model::{ForwardMode, MmptModel, ScoreTable};
use crate::render::{default_render_spec, RenderSpec};
use crate::space::{CompositionSpace, EvalSplit};
use crate::train::{train_loop, AdamHyper, EvalRecord, PartitionPreset, TrainState};

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load this space file instead of generating one.
    pub space_file: Option<PathBuf>,
    pub n_attrs: usize,
    pub n_objs: usize,
    pub n_unseen_val: usize,
    pub n_unseen_test: usize,
    pub n_train_per_pair: usize,
    pub n_eval_per_pair: usize,
    /// Split assignment and pixel seeds derive from this.
    pub seed: u64,
    /// Explicit renderer; omitted means the default derived from the space
    /// and the model's image size.
    pub render: Option<RenderSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            space_file: None,
            n_attrs: 8,
            n_objs: 10,
            n_unseen_val: 12,
            n_unseen_test: 12,
            n_train_per_pair: 8,
            n_eval_per_pair: 2,
            seed: 1,
            render: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub partition: PartitionPreset,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { lr: 1e-3, batch: 16, steps: 2500, partition: PartitionPreset::ToyFull }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub eval_every: usize,
    /// Forward-pass chunk size during evaluation.
    pub chunk: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { eval_every: 100, chunk: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: MmptConfig,
    pub data: DataConfig,
    pub training: TrainSettings,
    pub eval: EvalSettings,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: MmptConfig::toy(),
            data: DataConfig::default(),
            training: TrainSettings::default(),
            eval: EvalSettings::default(),
            variant: Variant::MmptFull,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MmptError::config(format!("reading {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| MmptError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The variant is authoritative for the two prompt-enable flags.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        self.variant.apply(&mut out.model);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved().model.validate()?;
        let d = &self.data;
        if d.space_file.is_none() && (d.n_attrs == 0 || d.n_objs == 0) {
            return Err(MmptError::config("generated space needs n_attrs and n_objs >= 1"));
        }
        if d.n_train_per_pair == 0 || d.n_eval_per_pair == 0 {
            return Err(MmptError::config("per-pair sample counts must be positive"));
        }
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(MmptError::config(format!("lr {} must be positive", t.lr)));
        }
        if t.batch == 0 {
            return Err(MmptError::config("batch must be at least 1"));
        }
        if self.eval.eval_every == 0 || self.eval.chunk == 0 {
            return Err(MmptError::config("eval_every and chunk must be at least 1"));
        }
        Ok(())
    }
}

// ── Data assembly ────────────────────────────────────────────────────────────

pub struct ExperimentData {
    pub space: CompositionSpace,
    pub splits: SplitDatasets,
    pub render: RenderSpec,
}

impl ExperimentData {
    /// One hash witnessing every pixel and label of all three splits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [&self.splits.train, &self.splits.val, &self.splits.test] {
            h.update(d.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &cfg.data;
    let space = match &d.space_file {
        Some(path) => {
            let space = CompositionSpace::from_file(path)?;
            if !space.splits_assigned() {
                return Err(MmptError::config(format!(
                    "space file {} carries no splits",
                    path.display()
                )));
            }
            space
        }
        None => {
            let mut space = crate::space::numbered_space(d.n_attrs, d.n_objs)?;
            space.assign_random_splits(d.n_unseen_val, d.n_unseen_test, d.seed)?;
            space
        }
    };
    let image = cfg.model.image_size;
    let render = match &d.render {
        Some(spec) => spec.clone(),
        None => default_render_spec(
            space.n_attributes(),
            space.n_objects(),
            image,
            image,
        ),
    };
    if render.height != image || render.width != image {
        return Err(MmptError::config(format!(
            "renderer draws {}x{} but the model expects {image}x{image}",
            render.height, render.width
        )));
    }
    let splits = make_dataset(&space, &render, d.n_train_per_pair, d.n_eval_per_pair, d.seed)?;
    Ok(ExperimentData { space, splits, render })
}

// ── Evaluation ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawAccuracy {
    /// Unbiased open-world top-1 over seen-labeled samples.
    pub seen_top1: f64,
    /// Unbiased open-world top-1 over unseen-labeled samples.
    pub unseen_top1: f64,
}

pub struct Evaluation {
    pub table: ScoreTable,
    pub curve: MetricsCurve,
    pub summary: MetricsSummary,
    pub raw: RawAccuracy,
}

fn raw_accuracy(
    samples: &[ScoredSample],
    space: &CompositionSpace,
) -> Result<RawAccuracy> {
    let (mut sh, mut st, mut uh, mut ut) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let correct = predict_open_world(&s.scores, space)? == s.label;
        if space.is_seen(s.label) {
            st += 1;
            sh += correct as usize;
        } else {
            ut += 1;
            uh += correct as usize;
        }
    }
    let frac = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    Ok(RawAccuracy { seen_top1: frac(sh, st), unseen_top1: frac(uh, ut) })
}

/// Chunked deterministic forward over a dataset, then the full protocol.
pub fn evaluate_model<S: crate::scalar::Scalar>(
    model: &MmptModel<S>,
    data: &Dataset,
    space: &CompositionSpace,
    split: EvalSplit,
    chunk: usize,
) -> Result<Evaluation> {
    if data.samples.is_empty() {
        return Err(MmptError::invalid("evaluation dataset is empty"));
    }
    let mut table: Option<ScoreTable> = None;
    for batch in data.samples.chunks(chunk.max(1)) {
        let images: Vec<_> = batch
            .iter()
            .map(|s| model.image_from_pixels(&s.pixels))
            .collect::<Result<_>>()?;
        let fwd = model.forward_batch(&images, ForwardMode::Eval)?;
        let ids: Vec<String> = batch.iter().map(|s| s.sample_id.clone()).collect();
        let labels: Vec<_> = batch.iter().map(|s| s.label).collect();
        let part = ScoreTable::from_forward(
            space,
            &ids,
            &labels,
            fwd.graph.value(fwd.rho_a),
            fwd.graph.value(fwd.rho_o),
        )?;
        match &mut table {
            None => table = Some(part),
            Some(t) => t.extend(part)?,
        }
    }
    let table = table.expect("non-empty dataset produced a table");
    let samples = table_samples(&table, space)?;
    let curve = bias_sweep(&samples, space, split)?;
    let summary = summarize(&curve)?;
    let raw = raw_accuracy(&samples, space)?;
    Ok(Evaluation { table, curve, summary, raw })
}

// ── Artifacts ────────────────────────────────────────────────────────────────

/// The deterministic run report: no timestamps, byte-identical across
/// identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    #[serde(flatten)]
    pub metrics: MetricsSummary,
    pub raw: RawAccuracy,
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config_hash: &'a str,
    seed: u64,
    dataset_hash: &'a str,
    started_unix: u64,
}

// ── Training runs ────────────────────────────────────────────────────────────

pub struct RunOutcome {
    pub summary: RunSummary,
    pub out_dir: PathBuf,
}

/// Trains per the config into `out_dir`, leaving: config.json, space.json,
/// train_log.jsonl (timestamp isolated to its header line), checkpoint/,
/// score_table.json, curve.csv, and summary.json for the test split.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let resolved = cfg.resolved();
    let hash = config_hash(&resolved);
    std::fs::create_dir_all(out_dir)?;
    write_json_file(&out_dir.join("config.json"), &resolved)?;

    let data = build_data(&resolved)?;
    let dataset_hash = data.content_hash();
    data.space.to_file(&out_dir.join("space.json"))?;

    let mut model = MmptModel::<f64>::for_space(resolved.model.clone(), &data.space)?;
    resolved.training.partition.apply(model.params_mut());
    let hyper = AdamHyper::toy(resolved.training.lr);
    let mut state = TrainState::new();

    let chunk = resolved.eval.chunk;
    let space = &data.space;
    let val = &data.splits.val;
    let can_eval_val = !space.unseen_val().is_empty() && !val.samples.is_empty();
    let history = train_loop(
        &mut model,
        &mut state,
        &data.splits.train,
        space,
        resolved.training.steps,
        resolved.training.batch,
        resolved.eval.eval_every,
        &hyper,
        |m, step| {
            if !can_eval_val {
                return Ok(None);
            }
            let eval = evaluate_model(m, val, space, EvalSplit::Val, chunk)?;
            Ok(Some(EvalRecord {
                step,
                s: eval.summary.s,
                u: eval.summary.u,
                hm: eval.summary.hm,
                auc: eval.summary.auc,
            }))
        },
    )?;

    // JSON-lines log: one timestamped header, then step and eval records
    // merged in step order (evals after their step).
    let mut log = String::new();
    log.push_str(&serde_json::to_string(&LogHeader {
        config_hash: &hash,
        seed: resolved.model.seed,
        dataset_hash: &dataset_hash,
        started_unix: unix_now(),
    })?);
    log.push('\n');
    let mut evals = history.evals.iter().peekable();
    for step in &history.steps {
        log.push_str(&serde_json::to_string(step)?);
        log.push('\n');
        while evals.peek().is_some_and(|e| e.step <= step.step) {
            log.push_str(&serde_json::to_string(evals.next().unwrap())?);
            log.push('\n');
        }
    }
    for e in evals {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    std::fs::write(out_dir.join("train_log.jsonl"), log)?;

    save_checkpoint(&out_dir.join("checkpoint"), &model, &state)?;

    let eval = evaluate_model(&model, &data.splits.test, space, EvalSplit::Test, chunk)?;
    eval.table.to_json_file(&out_dir.join("score_table.json"))?;
    eval.curve.write_csv(&out_dir.join("curve.csv"))?;
    let summary = RunSummary {
        config_hash: hash,
        seed: resolved.model.seed,
        dataset_hash,
        metrics: eval.summary,
        raw: eval.raw,
    };
    write_json_file(&out_dir.join("summary.json"), &summary)?;
    Ok(RunOutcome { summary, out_dir: out_dir.to_path_buf() })
}

// ── Evaluation runs ──────────────────────────────────────────────────────────

pub enum EvalSource {
    /// Re-build the data from the config, load the checkpoint, forward.
    Checkpoint { config: ExperimentConfig, checkpoint: PathBuf, force: bool },
    /// Metrics-only mode over a stored score table (JSON, or CSV plus the
    /// space file that owns the seen mask).
    Table { table: PathBuf, space: PathBuf },
}

pub fn run_eval(source: EvalSource, out_dir: &Path, svg: bool) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let (curve, summary) = match source {
        EvalSource::Checkpoint { config, checkpoint, force } => {
            config.validate()?;
            let resolved = config.resolved();
            let hash = config_hash(&resolved);
            let data = build_data(&resolved)?;
            let mut model = MmptModel::<f64>::for_space(resolved.model.clone(), &data.space)?;
            load_checkpoint(&checkpoint, &mut model, force)?;
            let eval = evaluate_model(
                &model,
                &data.splits.test,
                &data.space,
                EvalSplit::Test,
                resolved.eval.chunk,
            )?;
            eval.table.to_json_file(&out_dir.join("score_table.json"))?;
            let summary = RunSummary {
                config_hash: hash,
                seed: resolved.model.seed,
                dataset_hash: data.content_hash(),
                metrics: eval.summary,
                raw: eval.raw,
            };
            (eval.curve, summary)
        }
        EvalSource::Table { table, space } => {
            let space = CompositionSpace::from_file(&space)?;
            let table = match table.extension().and_then(|e| e.to_str()) {
                Some("csv") => ScoreTable::from_csv_file(&table, &space)?,
                _ => ScoreTable::from_json_file(&table)?,
            };
            let samples = table_samples(&table, &space)?;
            let curve = bias_sweep(&samples, &space, EvalSplit::Test)?;
            let summary = RunSummary {
                config_hash: config_hash(&table),
                seed: 0,
                dataset_hash: String::new(),
                metrics: summarize(&curve)?,
                raw: raw_accuracy(&samples, &space)?,
            };
            (curve, summary)
        }
    };
    curve.write_csv(&out_dir.join("curve.csv"))?;
    write_json_file(&out_dir.join("summary.json"), &summary)?;
    if svg {
        std::fs::write(out_dir.join("curve.svg"), curve_svg(&curve))?;
    }
    Ok(RunOutcome { summary, out_dir: out_dir.to_path_buf() })
}

/// Hand-rolled unseen-vs-seen polyline plot; no external assets.
pub fn curve_svg(curve: &MetricsCurve) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let sx = |v: f64| m + v * (w - 2.0 * m);
    let sy = |v: f64| h - m - v * (h - 2.0 * m);
    let mut pts: Vec<(f64, f64)> =
        curve.points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let poly: Vec<String> =
        pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    svg.push_str(&format!(
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/><line x1="{0}" y1="{1}" x2="{0}" y2="{3}" stroke="black"/>"#,
        m,
        h - m,
        w - m,
        m
    ));
    for t in [0.0, 0.5, 1.0] {
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{t}</text>"#,
            sx(t),
            h - m + 16.0
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{t}</text>"#,
            m - 6.0,
            sy(t) + 4.0
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">seen accuracy</text>"#,
        w / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">unseen accuracy</text>"#,
        h / 2.0,
        h / 2.0
    ));
    svg.push_str(&format!(
        r##"<polyline points="{}" fill="none" stroke="#1f6feb" stroke-width="1.5"/>"##,
        poly.join(" ")
    ));
    svg.push_str("</svg>\n");
    svg
}

// ── Ablation ─────────────────────────────────────────────────────────────────

fn fmt_pct(v: f64) -> String {
    format!("{v:.4}")
}

/// Trains all four variants with identical seeds and data; one CSV row per
/// variant. Within-table ordering is reported, never asserted.
pub fn run_ablation(base: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut dataset_hashes = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let outcome = run_train(&cfg, &out_dir.join(variant.name()))?;
        dataset_hashes.push(outcome.summary.dataset_hash.clone());
        rows.push((variant, outcome.summary));
    }
    debug_assert!(dataset_hashes.windows(2).all(|w| w[0] == w[1]));

    let mut csv = String::new();
    csv.push_str(&format!(
        "# config_hash={} seed={} dataset_hash={}\n",
        config_hash(&base.resolved()),
        base.model.seed,
        dataset_hashes[0]
    ));
    csv.push_str(&format!("# generated_unix={}\n", unix_now()));
    csv.push_str("variant,S,U,HM,AUC\n");
    for (variant, s) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            variant.name(),
            fmt_pct(s.metrics.s),
            fmt_pct(s.metrics.u),
            fmt_pct(s.metrics.hm),
            fmt_pct(s.metrics.auc)
        ));
    }
    let path = out_dir.join("ablation.csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}

// ── Sweeps ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Context tokens per text branch.
    CtxTokens,
    /// Front layers receiving fresh shared prompts.
    PromptDepth,
    /// Shared prompt embedding dimension.
    PromptDim,
    /// Shared prompt length (tokens per layer slab).
    PromptLen,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] =
        [SweepAxis::CtxTokens, SweepAxis::PromptDepth, SweepAxis::PromptDim, SweepAxis::PromptLen];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CtxTokens => "ctx",
            SweepAxis::PromptDepth => "depth",
            SweepAxis::PromptDim => "dim",
            SweepAxis::PromptLen => "len",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                MmptError::config(format!(
                    "unknown sweep axis {name}; expected ctx, depth, dim, or len"
                ))
            })
    }

    /// The swept value lists, mirroring the reference table layouts.
    pub fn values(self) -> &'static [usize] {
        match self {
            SweepAxis::CtxTokens => &[1, 2, 4, 6, 8],
            SweepAxis::PromptDepth => &[2, 4, 6, 9, 12],
            SweepAxis::PromptDim => &[64, 128, 256, 512],
            SweepAxis::PromptLen => &[1, 2, 4, 6, 8],
        }
    }

    pub fn apply(self, cfg: &mut MmptConfig, value: usize) {
        match self {
            SweepAxis::CtxTokens => cfg.ctx_tokens = value,
            SweepAxis::PromptDepth => cfg.prompt_depth = value,
            SweepAxis::PromptDim => cfg.d_s = value,
            SweepAxis::PromptLen => cfg.prompt_len = value,
        }
    }
}

/// One row per axis value; a value whose config cannot run (for example a
/// prompt depth past the layer count) records its error and the sweep
/// continues.
pub fn run_sweep(axis: SweepAxis, base: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<(usize, std::result::Result<RunSummary, String>)> = Vec::new();
    for &value in axis.values() {
        let mut cfg = base.clone();
        axis.apply(&mut cfg.model, value);
        let row_dir = out_dir.join(format!("{}_{value}", axis.name()));
        match cfg.validate().and_then(|_| run_train(&cfg, &row_dir)) {
            Ok(outcome) => rows.push((value, Ok(outcome.summary))),
            Err(e) => {
                log::warn!("sweep {}={value} failed: {e}", axis.name());
                rows.push((value, Err(e.to_string())));
            }
        }
    }

    let mut csv = String::new();
    csv.push_str(&format!(
        "# axis={} config_hash={} seed={}\n",
        axis.name(),
        config_hash(&base.resolved()),
        base.model.seed
    ));
    csv.push_str(&format!("# generated_unix={}\n", unix_now()));
    csv.push_str("value,S,U,HM,AUC,error\n");
    for (value, row) in &rows {
        match row {
            Ok(s) => csv.push_str(&format!(
                "{value},{},{},{},{},\n",
                fmt_pct(s.metrics.s),
                fmt_pct(s.metrics.u),
                fmt_pct(s.metrics.hm),
                fmt_pct(s.metrics.auc)
            )),
            Err(msg) => {
                csv.push_str(&format!("{value},,,,,{}\n", msg.replace([',', '\n'], ";")))
            }
        }
    }
    let path = out_dir.join(format!("sweep_{}.csv", axis.name()));
    std::fs::write(&path, csv)?;
    Ok(path)
}

// ── Dataset generation ───────────────────────────────────────────────────────

/// Renders all three splits to disk (train/, val/, test/ plus space.json).
pub fn run_dataset_gen(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let data = build_data(&cfg.resolved())?;
    std::fs::create_dir_all(out_dir)?;
    data.space.to_file(&out_dir.join("space.json"))?;
    export_dataset(&data.splits.train, &data.space, &out_dir.join("train"))?;
    export_dataset(&data.splits.val, &data.space, &out_dir.join("val"))?;
    export_dataset(&data.splits.test, &data.space, &out_dir.join("test"))?;
    Ok(())
}

// ── Parallelism cap ──────────────────────────────────────────────────────────

/// Honors MMPT_THREADS for the global worker pool; later calls are no-ops.
pub fn init_threads() {
    if let Ok(v) = std::env::var("MMPT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
