use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{preset_grid, Preset, RunConfig};
use super::optim::AdamW;
use super::train::train_step;
use crate::beliefs::{sample_augmentations, write_augmented_jsonl, AugmentationSpec};
use crate::corpus::{batches, generate_corpus, Corpus, Split};
use crate::dynamics::{akg_check, error_slope, squeeze_trace, write_bands_csv, CandidateSource, Chi, DynamicsReport, SqueezeResult};
use crate::error::{Error, Result};
use crate::judge::{render_naturalness_prompt, render_similarity_prompt, Judge};
use crate::lm::{init_model, ArchConfig, ParamStore, TokenSequence};
use crate::metrics::{evaluate_model, evaluate_records, strip_eos, MetricsReport, CSV_COLUMNS};
use crate::objectives::{build_loss, loss_retain, LossConfig, LossInputs, LossKind};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const LOSS_COLUMNS: [&str; 7] = ["step", "epoch", "lr", "forget_term", "aug_term", "retain_term", "total"];

/// Record of one subcommand run. Paths are relative to the output
/// directory, so identical runs write identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub corpus_file: String,
    pub input_checkpoints: Vec<String>,
    pub checkpoints: Vec<String>,
    pub losses_csv: Option<String>,
    pub metrics: Vec<String>,
    pub files: Vec<String>,
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            corpus_file: crate::corpus::RECORDS_FILE.into(),
            input_checkpoints: inputs.iter().map(|p| p.display().to_string()).collect(),
            checkpoints: Vec::new(),
            losses_csv: None,
            metrics: Vec::new(),
            files: Vec::new(),
            wall_clock_secs: None,
        }
    }

    /// Writes `manifest.json` after checking every referenced file exists.
    fn write(mut self, out: &Path, started: Instant) -> Result<RunManifest> {
        if self.config.record_wall_clock {
            self.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        }
        let listed = std::iter::once(&self.corpus_file)
            .chain(&self.checkpoints)
            .chain(&self.losses_csv)
            .chain(&self.metrics)
            .chain(&self.files);
        for f in listed {
            if !out.join(f).is_file() {
                return Err(Error::Contract(format!("manifest references missing file {f}")));
            }
        }
        write_text(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    if !text.ends_with('\n') {
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

/// The configured corpus, also saved into the output directory.
pub fn load_corpus(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let corpus = match &cfg.corpus_path {
        Some(p) => Corpus::load(p)?,
        None => generate_corpus(&cfg.corpus, cfg.corpus_seed)?,
    };
    corpus.validate()?;
    corpus.save(out)?;
    Ok(corpus)
}

fn resolve_arch(cfg: &RunConfig, corpus: &Corpus) -> Result<ArchConfig> {
    let arch = cfg.arch.clone().unwrap_or_else(|| ArchConfig::desk(corpus.vocab.len()));
    check_vocab(&arch, corpus)?;
    Ok(arch)
}

fn check_vocab(arch: &ArchConfig, corpus: &Corpus) -> Result<()> {
    if arch.vocab_size != corpus.vocab.len() {
        return Err(Error::Data(format!(
            "model vocabulary of {} does not match the corpus vocabulary of {}",
            arch.vocab_size,
            corpus.vocab.len()
        )));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path, corpus: &Corpus) -> Result<ParamStore> {
    let p = ParamStore::load(path)?;
    check_vocab(&p.arch, corpus)?;
    Ok(p)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch:04}.json")
}

fn metrics_name(checkpoint: &str) -> String {
    format!("metrics_{}.json", checkpoint.trim_end_matches(".json"))
}

/// What one epoch iterates over.
#[derive(Clone, Copy, Debug)]
enum Plan<'a> {
    /// NLL on the records of `splits`.
    Nll(&'a [Split]),
    /// The configured unlearning loss over forget batches.
    Unlearn,
}

const RETAIN_STREAM: u64 = 0x7e7a_1b5e;

/// Runs `cfg.epochs` epochs, writing `losses.csv` (and `augmented.jsonl`
/// for bss). `on_epoch(e, params)` runs after every epoch and once with
/// `e = 0` before training.
fn train_loop(
    cfg: &RunConfig,
    corpus: &Corpus,
    params: &mut ParamStore,
    plan: Plan<'_>,
    reference: Option<&ParamStore>,
    out: &Path,
    mut on_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<String>> {
    let loss_cfg = &cfg.loss;
    if matches!(plan, Plan::Unlearn) {
        loss_cfg.validate(params.arch.vocab_size)?;
        if loss_cfg.needs_reference() && reference.is_none() {
            return Err(Error::Config(format!("{} needs a reference checkpoint", loss_cfg.kind.as_str())));
        }
    }
    let (splits, seed): (&[Split], u64) = match plan {
        Plan::Nll(s) => (s, cfg.seed),
        Plan::Unlearn => (&[Split::Forget], cfg.seed),
    };
    let per_epoch = batches(corpus, splits, cfg.batch_size, seed, 0)?.len();
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), params.param_count());
    let needs_retain = matches!(plan, Plan::Unlearn) && (loss_cfg.kind == LossKind::Graddiff || loss_cfg.lambda_retain > 0.0);
    let bss = matches!(plan, Plan::Unlearn) && loss_cfg.kind == LossKind::Bss;

    let losses_path = out.join(LOSSES_FILE);
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", losses_path.display()));
    let mut w = csv::Writer::from_path(&losses_path).map_err(csv_err)?;
    w.write_record(LOSS_COLUMNS).map_err(csv_err)?;
    let aug_path = out.join("augmented.jsonl");
    let mut files = vec![LOSSES_FILE.to_string()];
    if bss {
        File::create(&aug_path).map_err(|e| Error::io(&aug_path, e))?;
        files.push("augmented.jsonl".into());
    }

    on_epoch(0, params)?;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let e = (epoch - 1) as u64;
        let main = batches(corpus, splits, cfg.batch_size, seed, e)?;
        let retain = if needs_retain {
            batches(corpus, &[Split::Retain], cfg.batch_size, seed ^ RETAIN_STREAM, e)?
        } else {
            Vec::new()
        };
        for (i, b) in main.iter().enumerate() {
            step += 1;
            let lr = cfg.scheduler.lr_at(cfg.optimizer.lr, step, total);
            let ex = corpus.examples(b)?;
            let d = match plan {
                Plan::Nll(_) => train_step(params, &mut opt, lr, |g, m| loss_retain(g, m, &ex))?,
                Plan::Unlearn => {
                    let ids: Vec<&str> = b.iter().map(|r| r.id.as_str()).collect();
                    let rex = match retain.get(i % retain.len().max(1)) {
                        Some(rb) if needs_retain => corpus.examples(rb)?,
                        _ => Vec::new(),
                    };
                    let augmented = if bss {
                        let prompts: Vec<(&str, &[u32])> =
                            ids.iter().zip(&ex).map(|(id, x)| (*id, x.prompt.as_slice())).collect();
                        let spec = AugmentationSpec {
                            n: loss_cfg.n_aug,
                            tau: loss_cfg.tau,
                            seed: cfg.seed,
                            max_len: cfg.aug_max_len,
                            eos: corpus.vocab.specials.eos,
                        };
                        let sets = sample_augmentations(params, &prompts, spec, step as u64)?;
                        write_augmented_jsonl(&sets, &aug_path)?;
                        Some(sets)
                    } else {
                        None
                    };
                    let inputs = LossInputs {
                        forget: &ex,
                        forget_ids: &ids,
                        retain: &rex,
                        reference,
                        augmented: augmented.as_deref(),
                    };
                    train_step(params, &mut opt, lr, |g, m| build_loss(g, m, loss_cfg, inputs))?
                }
            };
            w.write_record([
                step.to_string(),
                epoch.to_string(),
                lr.to_string(),
                d.forget_term.to_string(),
                d.aug_term.to_string(),
                d.retain_term.to_string(),
                d.total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        on_epoch(epoch, params)?;
    }
    w.flush().map_err(|e| Error::io(&losses_path, e))?;
    Ok(files)
}

fn is_checkpoint_epoch(cfg: &RunConfig, epoch: usize, include_start: bool) -> bool {
    if epoch == 0 {
        return include_start;
    }
    epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every))
}

fn write_metrics(out: &Path, ckpt: &str, report: &MetricsReport) -> Result<String> {
    let name = metrics_name(ckpt);
    write_text(&out.join(&name), &serde_json::to_string_pretty(report)?)?;
    Ok(name)
}

fn nll_run(command: &str, cfg: &RunConfig, splits: &[Split], init: Option<&Path>) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    let mut params = match init {
        Some(p) => load_checkpoint(p, &corpus)?,
        None => init_model(&resolve_arch(cfg, &corpus)?, cfg.seed)?,
    };
    let inputs: Vec<PathBuf> = init.into_iter().map(Path::to_path_buf).collect();
    let mut manifest = RunManifest::new(command, cfg, &inputs);
    let (mut ckpts, mut metrics) = (Vec::new(), Vec::new());
    let files = train_loop(cfg, &corpus, &mut params, Plan::Nll(splits), None, &out, |e, p| {
        if is_checkpoint_epoch(cfg, e, false) {
            let name = checkpoint_name(e);
            p.save(out.join(&name))?;
            if cfg.eval_checkpoints {
                metrics.push(write_metrics(&out, &name, &evaluate_model(p, &corpus, None)?)?);
            }
            ckpts.push(name);
        }
        Ok(())
    })?;
    manifest.checkpoints = ckpts;
    manifest.metrics = metrics;
    manifest.losses_csv = Some(LOSSES_FILE.into());
    manifest.files = files.into_iter().filter(|f| f != LOSSES_FILE).collect();
    manifest.write(&out, started)
}

/// NLL training on every split. The final checkpoint is the unlearning
/// reference.
pub fn run_finetune(cfg: &RunConfig, init: Option<&Path>) -> Result<RunManifest> {
    nll_run("finetune", cfg, &Split::ALL, init)
}

/// The same training without the forget split: the gold-standard comparator.
pub fn run_retrain(cfg: &RunConfig) -> Result<RunManifest> {
    nll_run("retrain", cfg, &[Split::Retain, Split::Holdout], None)
}

/// Unlearns from `reference`, saving checkpoints (including the starting
/// point as `ckpt_0000.json`) and their metrics against the reference.
pub fn run_unlearn(cfg: &RunConfig, reference: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    let reference_params = load_checkpoint(reference, &corpus)?;
    let mut params = reference_params.clone();
    let mut manifest = RunManifest::new("unlearn", cfg, &[reference.to_path_buf()]);
    let (mut ckpts, mut metrics) = (Vec::new(), Vec::new());
    let files = train_loop(cfg, &corpus, &mut params, Plan::Unlearn, Some(&reference_params), &out, |e, p| {
        if is_checkpoint_epoch(cfg, e, true) {
            let name = checkpoint_name(e);
            p.save(out.join(&name))?;
            if cfg.eval_checkpoints {
                let report = evaluate_model(p, &corpus, Some(&reference_params))?;
                metrics.push(write_metrics(&out, &name, &report)?);
            }
            ckpts.push(name);
        }
        Ok(())
    })?;
    manifest.checkpoints = ckpts;
    manifest.metrics = metrics;
    manifest.losses_csv = Some(LOSSES_FILE.into());
    manifest.files = files.into_iter().filter(|f| f != LOSSES_FILE).collect();
    manifest.write(&out, started)
}

/// Judge verdicts for one forget record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub id: String,
    pub generation: String,
    pub similarity: Option<f64>,
    pub naturalness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub checkpoint: String,
    /// `mock` scores are lexical proxies, not model judgements.
    pub mode: String,
    pub mean_similarity: Option<f64>,
    pub mean_naturalness: Option<f64>,
    pub n_unavailable: usize,
    pub items: Vec<JudgeItem>,
}

fn judge_checkpoint(params: &ParamStore, corpus: &Corpus, judge: &Judge, name: &str) -> Result<JudgeSummary> {
    let records = corpus.split(Split::Forget);
    let (_, generations) = evaluate_records(params, corpus, &records)?;
    let eos = corpus.vocab.specials.eos;
    let mut items = Vec::with_capacity(records.len());
    let mut prompts = Vec::new();
    let mut slots = Vec::new();
    for (r, gen) in records.iter().zip(&generations) {
        let text = corpus.vocab.decode_text(strip_eos(gen, eos))?;
        let mut item = JudgeItem {
            id: r.id.clone(),
            generation: text.clone(),
            similarity: None,
            naturalness: None,
            note: None,
        };
        if text.is_empty() {
            item.note = Some("empty generation".into());
        } else {
            slots.push(items.len());
            prompts.push(render_similarity_prompt(&r.question, &r.answer, &text)?);
            prompts.push(render_naturalness_prompt(&text)?);
        }
        items.push(item);
    }
    let scores = judge.score_all(&prompts);
    let mut n_unavailable = 0;
    for (slot, pair) in slots.iter().zip(scores.chunks(2)) {
        let item = &mut items[*slot];
        let mut notes = Vec::new();
        for (k, s) in pair.iter().enumerate() {
            match s {
                Ok(s) if k == 0 => item.similarity = Some(s.value),
                Ok(s) => item.naturalness = Some(s.value),
                Err(e) => notes.push(e.to_string()),
            }
        }
        if !notes.is_empty() {
            n_unavailable += 1;
            item.note = Some(notes.join("; "));
        }
    }
    let mean = |f: &dyn Fn(&JudgeItem) -> Option<f64>| {
        let v: Vec<f64> = items.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(JudgeSummary {
        checkpoint: name.into(),
        mode: judge.name().into(),
        mean_similarity: mean(&|i| i.similarity),
        mean_naturalness: mean(&|i| i.naturalness),
        n_unavailable,
        items,
    })
}

fn checkpoint_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

/// Expands directories into their `ckpt_*.json` files, sorted by name.
pub fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    name.starts_with("ckpt_") && name.ends_with(".json")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    Ok(out)
}

fn write_metrics_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for (label, r) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(r.csv_values().iter().map(f64::to_string));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metrics for every checkpoint plus a `sweep.csv` summary; with a judge,
/// also `judge_*.json` per checkpoint. Unavailable judge requests are noted
/// per record; with `judge.required` the run then fails after writing.
pub fn run_eval(cfg: &RunConfig, checkpoints: &[PathBuf], judge: Option<&Judge>) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    let paths = expand_checkpoints(checkpoints)?;
    let reference = match &cfg.reference_checkpoint {
        Some(p) => Some(load_checkpoint(p, &corpus)?),
        None => None,
    };
    let mut manifest = RunManifest::new("eval", cfg, &paths);
    let mut rows = Vec::new();
    let mut unavailable = 0;
    for path in &paths {
        let params = load_checkpoint(path, &corpus)?;
        let label = checkpoint_label(path);
        let report = evaluate_model(&params, &corpus, reference.as_ref())?;
        manifest.metrics.push(write_metrics(&out, &label, &report)?);
        if let Some(j) = judge {
            let summary = judge_checkpoint(&params, &corpus, j, &label)?;
            unavailable += summary.n_unavailable;
            let name = format!("judge_{label}.json");
            write_text(&out.join(&name), &serde_json::to_string_pretty(&summary)?)?;
            manifest.files.push(name);
        }
        rows.push((label, report));
    }
    write_metrics_csv(&out.join("sweep.csv"), &rows)?;
    manifest.files.push("sweep.csv".into());
    let manifest = manifest.write(&out, started)?;
    if cfg.judge.required && unavailable > 0 {
        return Err(Error::JudgeUnavailable {
            attempts: cfg.judge.endpoint.max_retries + 1,
            last_raw: None,
            reason: format!("{unavailable} records without judge scores"),
        });
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOutput {
    pub arch: ArchConfig,
    pub param_count: usize,
    pub chi_u: Chi,
    pub chi_o: Chi,
    pub etas: Vec<f64>,
    /// Largest first-order error over positions, per step size.
    pub max_errors: Vec<f64>,
    /// Fitted exponent of error against step size.
    pub slope: f64,
    /// Per-position reports at the first step size.
    pub reports: Vec<DynamicsReport>,
}

/// One-step kernel checks at every configured step size, written to
/// `dynamics.json`. Without a checkpoint a small model is trained briefly.
pub fn run_dynamics(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    let dc = &cfg.dynamics;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p, &corpus)?,
        None => {
            let arch = dc.arch.clone().unwrap_or_else(|| ArchConfig {
                context_len: 32,
                ..ArchConfig::tiny(corpus.vocab.len())
            });
            check_vocab(&arch, &corpus)?;
            let mut p = init_model(&arch, cfg.seed)?;
            let mut opt = AdamW::new(
                super::optim::OptimizerConfig {
                    lr: dc.pretrain_lr,
                    ..cfg.optimizer.clone()
                },
                p.param_count(),
            );
            for e in 0..dc.pretrain_epochs {
                for b in batches(&corpus, &Split::ALL, cfg.batch_size, cfg.seed, e as u64)? {
                    let ex = corpus.examples(&b)?;
                    train_step(&mut p, &mut opt, dc.pretrain_lr, |g, m| loss_retain(g, m, &ex))?;
                }
            }
            p
        }
    };
    let forget = corpus.split(Split::Forget);
    let pick = |i: usize| -> Result<Chi> {
        let r = forget
            .get(i)
            .ok_or_else(|| Error::Config(format!("forget record {i} out of range ({} records)", forget.len())))?;
        let ex = corpus.example(r)?;
        Ok(Chi::new(ex.prompt, ex.response))
    };
    let (chi_u, chi_o) = (pick(dc.chi_u)?, pick(dc.chi_o)?);
    let mut max_errors = Vec::with_capacity(dc.etas.len());
    let mut first_reports = Vec::new();
    for (i, &eta) in dc.etas.iter().enumerate() {
        let reports = akg_check(&params, &chi_u, &chi_o, dc.loss, eta, dc.param_cap, dc.with_kernel && i == 0)?;
        max_errors.push(reports.iter().map(|r| r.first_order_error).fold(0.0, f64::max));
        if i == 0 {
            first_reports = reports;
        }
    }
    let slope = if dc.etas.len() >= 2 { error_slope(&dc.etas, &max_errors)? } else { f64::NAN };
    let output = DynamicsOutput {
        arch: params.arch.clone(),
        param_count: params.param_count(),
        chi_u,
        chi_o,
        etas: dc.etas.clone(),
        max_errors,
        slope,
        reports: first_reports,
    };
    write_text(&out.join("dynamics.json"), &serde_json::to_string(&output)?)?;
    let inputs: Vec<PathBuf> = checkpoint.into_iter().map(Path::to_path_buf).collect();
    let mut manifest = RunManifest::new("dynamics", cfg, &inputs);
    manifest.files.push("dynamics.json".into());
    manifest.write(&out, started)
}

fn read_candidates(path: &Path) -> Result<Vec<Vec<TokenSequence>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Unlearns from `reference` under the configured loss while tracing
/// likelihood bands of beam candidates fixed at the start. Writes
/// `bands.csv` and `squeeze.json` next to `losses.csv`.
pub fn run_squeeze(cfg: &RunConfig, reference: &Path) -> Result<(RunManifest, SqueezeResult)> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    let reference_params = load_checkpoint(reference, &corpus)?;
    let sc = &cfg.squeeze;
    let records: Vec<_> = corpus.split(Split::Forget).into_iter().take(sc.n_prompts).collect();
    let mut prompts = Vec::with_capacity(records.len());
    let mut exclude = Vec::with_capacity(records.len());
    for r in &records {
        let ex = corpus.example(r)?;
        prompts.push((r.id.clone(), ex.prompt));
        exclude.push(sc.exclude_ground_truth.then_some(ex.response));
    }
    let source = match &sc.candidates_path {
        Some(p) => CandidateSource::Given(read_candidates(p)?),
        None => CandidateSource::Beam {
            width: sc.beam_width,
            max_len: sc.max_len,
            eos: corpus.vocab.specials.eos,
        },
    };
    let mut snapshots = Vec::with_capacity(cfg.epochs + 1);
    let mut params = reference_params.clone();
    let files = train_loop(cfg, &corpus, &mut params, Plan::Unlearn, Some(&reference_params), &out, |_, p| {
        snapshots.push(p.clone());
        Ok(())
    })?;
    let result = squeeze_trace(&snapshots, &prompts, &source, &exclude)?;
    let epochs: Vec<usize> = (0..snapshots.len()).collect();
    write_bands_csv(&result, &epochs, out.join("bands.csv"))?;
    write_text(&out.join("squeeze.json"), &serde_json::to_string_pretty(&result)?)?;
    let mut manifest = RunManifest::new("squeeze", cfg, &[reference.to_path_buf()]);
    manifest.losses_csv = Some(LOSSES_FILE.into());
    manifest.files = files.into_iter().filter(|f| f != LOSSES_FILE).collect();
    manifest.files.extend(["bands.csv".to_string(), "squeeze.json".to_string()]);
    Ok((manifest.write(&out, started)?, result))
}

/// The loss settings a sweep visits, in order.
pub fn sweep_points(cfg: &RunConfig) -> Vec<LossConfig> {
    let mut points = if cfg.sweep.points.is_empty() {
        cfg.sweep.kinds.iter().flat_map(|&k| preset_grid(k, &cfg.loss)).collect()
    } else {
        cfg.sweep.points.clone()
    };
    if let Some(n) = cfg.sweep.limit {
        points.truncate(n);
    }
    points
}

pub const SWEEP_COLUMNS: [&str; 9] = ["run", "kind", "lambda_retain", "beta", "alpha", "lambda_bst", "k", "lambda_bss", "n_aug"];

/// One unlearning run per grid point under `runs/`, then `sweep.csv` with
/// every checkpoint of every run. Checkpoint selection is left to the reader.
pub fn run_sweep(cfg: &RunConfig, reference: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(cfg, &out)?;
    load_checkpoint(reference, &corpus)?;
    let points = sweep_points(cfg);
    if points.is_empty() {
        return Err(Error::Config("sweep has no points".into()));
    }
    let mut manifest = RunManifest::new("sweep", cfg, &[reference.to_path_buf()]);
    let path = out.join("sweep.csv");
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let header: Vec<&str> = SWEEP_COLUMNS.iter().chain(CSV_COLUMNS.iter()).copied().collect();
    w.write_record(&header).map_err(csv_err)?;
    for (i, point) in points.iter().enumerate() {
        let run = format!("{i:03}-{}", point.kind.as_str());
        let mut sub = cfg.clone();
        sub.loss = point.clone();
        sub.eval_checkpoints = true;
        sub.out_dir = out.join("runs").join(&run);
        let m = run_unlearn(&sub, reference)?;
        for (ckpt, metrics) in m.checkpoints.iter().zip(&m.metrics) {
            let text = std::fs::read_to_string(sub.out_dir.join(metrics)).map_err(|e| Error::io(metrics, e))?;
            let report: MetricsReport = serde_json::from_str(&text)?;
            let mut rec = vec![
                run.clone(),
                point.kind.as_str().to_string(),
                point.lambda_retain.to_string(),
                point.beta.to_string(),
                point.alpha.to_string(),
                point.lambda_bst.to_string(),
                point.k.to_string(),
                point.lambda_bss.to_string(),
                point.n_aug.to_string(),
                ckpt.trim_end_matches(".json").to_string(),
            ];
            rec.extend(report.csv_values().iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        manifest.files.push(format!("runs/{run}/{MANIFEST_FILE}"));
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    manifest.files.push("sweep.csv".into());
    manifest.write(&out, started)
}

/// Writes a corpus and its manifest.
pub fn run_gen_corpus(cfg: &RunConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    load_corpus(cfg, &out)?;
    let mut manifest = RunManifest::new("gen-corpus", cfg, &[]);
    manifest.files = vec![crate::corpus::VOCAB_FILE.into(), crate::corpus::META_FILE.into()];
    manifest.write(&out, started)
}

/// Preset for a subcommand name.
pub fn preset_for(command: &str) -> Preset {
    match command {
        "unlearn" | "sweep" => Preset::Unlearn,
        "squeeze" => Preset::Squeeze,
        _ => Preset::Finetune,
    }
}
