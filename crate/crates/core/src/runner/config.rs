use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::{OptimizerConfig, SchedulerConfig};
use crate::corpus::GenConfig;
use crate::dynamics::{AkgLoss, DEFAULT_PARAM_CAP};
use crate::error::{Error, Result};
use crate::judge::JudgeEndpoint;
use crate::lm::ArchConfig;
use crate::objectives::{LossConfig, LossKind};

/// Everything a subcommand needs. Unset fields take the preset of the
/// subcommand; see [`RunConfig::preset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory or `corpus.jsonl` of a saved corpus. When unset the corpus
    /// is generated from `corpus` and `corpus_seed`.
    pub corpus_path: Option<PathBuf>,
    pub corpus: GenConfig,
    pub corpus_seed: u64,
    /// Model shape; unset means the desk preset sized to the corpus vocabulary.
    pub arch: Option<ArchConfig>,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate each saved checkpoint into `metrics_*.json`.
    pub eval_checkpoints: bool,
    /// Longest sampled augmentation, in tokens.
    pub aug_max_len: usize,
    /// Record elapsed seconds in the manifest (breaks byte-identical reruns).
    pub record_wall_clock: bool,
    /// Reference for the retain probability ratio in `eval`.
    pub reference_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub judge: JudgeConfig,
    pub dynamics: DynamicsConfig,
    pub squeeze: SqueezeConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct JudgeConfig {
    pub endpoint: JudgeEndpoint,
    /// Fail the run (exit 4) when any judge request is unavailable.
    pub required: bool,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Model used when no checkpoint is given; unset means the tiny preset.
    pub arch: Option<ArchConfig>,
    /// Short NLL warm-up so the check does not start from uniform output.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub etas: Vec<f64>,
    pub loss: AkgLoss,
    /// Forget-split record indices for `χ_u` and `χ_o`.
    pub chi_u: usize,
    pub chi_o: usize,
    pub param_cap: usize,
    pub with_kernel: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            arch: None,
            pretrain_epochs: 3,
            pretrain_lr: 1e-2,
            etas: vec![1e-3, 5e-4, 2.5e-4],
            loss: AkgLoss::Ga,
            chi_u: 0,
            chi_o: 0,
            param_cap: DEFAULT_PARAM_CAP,
            with_kernel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqueezeConfig {
    pub n_prompts: usize,
    pub beam_width: usize,
    pub max_len: usize,
    /// Drop the ground-truth answer from the candidates.
    pub exclude_ground_truth: bool,
    /// Optional JSON file: one list of token-id candidates per prompt.
    pub candidates_path: Option<PathBuf>,
}

impl Default for SqueezeConfig {
    fn default() -> Self {
        SqueezeConfig {
            n_prompts: 8,
            beam_width: 10,
            max_len: 16,
            exclude_ground_truth: true,
            candidates_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Kinds whose preset grids are swept.
    pub kinds: Vec<LossKind>,
    /// Explicit loss settings; when non-empty they replace the preset grids.
    pub points: Vec<LossConfig>,
    /// Stop after this many runs.
    pub limit: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kinds: vec![
                LossKind::Ga,
                LossKind::Graddiff,
                LossKind::Npo,
                LossKind::Wga,
                LossKind::Bst,
                LossKind::Bss,
            ],
            points: Vec::new(),
            limit: None,
        }
    }
}

/// Which defaults a subcommand starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Finetune,
    Unlearn,
    Squeeze,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Finetune)
    }
}

impl RunConfig {
    /// Desk-scale defaults. Finetuning memorizes the default corpus in 200
    /// epochs at lr 1e-3; unlearning runs 100 epochs at lr 2e-3 with a
    /// retain term of weight 2. Squeeze traces run ten epochs of GA at a small
    /// constant rate, so the early redistribution is visible before collapse.
    pub fn preset(preset: Preset) -> Self {
        let base = RunConfig {
            seed: 0,
            corpus_path: None,
            corpus: GenConfig::default(),
            corpus_seed: 0,
            arch: None,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            epochs: 200,
            batch_size: 32,
            loss: LossConfig::default(),
            checkpoint_every: 50,
            eval_checkpoints: true,
            aug_max_len: 16,
            record_wall_clock: false,
            reference_checkpoint: None,
            out_dir: PathBuf::from("out"),
            judge: JudgeConfig::default(),
            dynamics: DynamicsConfig::default(),
            squeeze: SqueezeConfig::default(),
            sweep: SweepConfig::default(),
        };
        match preset {
            Preset::Finetune => base,
            Preset::Unlearn => RunConfig {
                optimizer: OptimizerConfig {
                    lr: 2e-3,
                    ..OptimizerConfig::default()
                },
                epochs: 100,
                checkpoint_every: 25,
                loss: LossConfig {
                    kind: LossKind::Bst,
                    lambda_retain: 2.0,
                    ..LossConfig::default()
                },
                ..base
            },
            Preset::Squeeze => RunConfig {
                optimizer: OptimizerConfig {
                    lr: 5e-5,
                    weight_decay: 0.0,
                    ..OptimizerConfig::default()
                },
                scheduler: SchedulerConfig {
                    kind: super::optim::SchedulerKind::Constant,
                    warmup_fraction: 0.0,
                },
                epochs: 10,
                checkpoint_every: 1,
                eval_checkpoints: false,
                loss: LossConfig::of(LossKind::Ga),
                ..base
            },
        }
    }

    /// The preset with `overrides` (a JSON object) merged on top.
    pub fn from_overrides(preset: Preset, overrides: &Value) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::preset(preset))?;
        if !overrides.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        merge(&mut v, overrides);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_overrides(preset, &v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.aug_max_len < 1 {
            return Err(Error::Config("aug_max_len must be ≥ 1".into()));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        self.corpus.validate()?;
        if let Some(a) = &self.arch {
            a.validate()?;
        }
        if self.dynamics.etas.is_empty() || self.dynamics.etas.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("dynamics.etas must be non-empty and positive".into()));
        }
        if self.squeeze.n_prompts < 1 || self.squeeze.beam_width < 5 {
            return Err(Error::Config("squeeze needs n_prompts ≥ 1 and beam_width ≥ 5".into()));
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Preset hyperparameter grids for sweep mode, layered on `base`.
pub fn preset_grid(kind: LossKind, base: &LossConfig) -> Vec<LossConfig> {
    let with = |f: &dyn Fn(&mut LossConfig)| {
        let mut c = base.clone();
        c.kind = kind;
        f(&mut c);
        c
    };
    let mut out = Vec::new();
    match kind {
        LossKind::Ga => out.push(with(&|c| c.lambda_retain = 0.0)),
        LossKind::Graddiff => {
            for l in [0.5, 0.8, 1.0, 2.0, 5.0, 7.0, 10.0] {
                out.push(with(&|c| c.lambda_retain = l));
            }
        }
        LossKind::Npo => {
            for b in [0.05, 0.1, 0.5, 1.0] {
                for l in [1.0, 2.0, 5.0] {
                    out.push(with(&|c| {
                        c.beta = b;
                        c.lambda_retain = l;
                    }));
                }
            }
        }
        LossKind::Wga => {
            for a in [0.05, 0.1, 0.5, 1.0, 5.0, 7.0] {
                for l in [1.0, 2.0, 5.0] {
                    out.push(with(&|c| {
                        c.alpha = a;
                        c.lambda_retain = l;
                    }));
                }
            }
        }
        LossKind::Bst => {
            for lb in [0.1, 0.2, 0.3, 0.5, 0.6] {
                for k in [5, 10, 20, 30, 50] {
                    out.push(with(&|c| {
                        c.lambda_bst = lb;
                        c.k = k;
                    }));
                }
            }
        }
        LossKind::Bss => {
            for lb in [0.2, 0.3, 0.4, 0.6, 0.8] {
                for n in [1, 2, 3, 4, 5] {
                    out.push(with(&|c| {
                        c.lambda_bss = lb;
                        c.n_aug = n;
                    }));
                }
            }
        }
    }
    out
}
