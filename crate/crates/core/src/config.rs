//! Run configuration: every hyperparameter and toggle for a training or
//! evaluation run, resolved in layers (built-in defaults, then a config
//! file, then command-line overrides).
//!
//! The file format is flat `key = value` text grouped under `[section]`
//! headers; a key may also be written fully qualified (`opt.lr`) in any
//! section. Unknown keys are hard errors and the message names the
//! closest valid key. The canonical echo from [`RunConfig::to_text`]
//! parses back to an equal config, and its SHA-256 prefix serves as the
//! config hash stamped into reports.

use crate::cfm::{Activation, FieldConfig};
use crate::error::{CoreError, Result};
use crate::kvformer::{KvFormerConfig, ProjectorMode, ProjectorSpec};
use crate::softcl::TAU_FLOOR;
use crate::synth::WorldConfig;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

/// Training stage selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    SelfDistill,
    Align,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::SelfDistill => "self_distill",
            Stage::Align => "align",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "self_distill" => Ok(Stage::SelfDistill),
            "align" => Ok(Stage::Align),
            other => Err(CoreError::Contract(format!(
                "unknown stage `{other}` (expected pretrain, self_distill or align)"
            ))),
        }
    }
}

/// Fully resolved run settings. Field groups mirror the config sections.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [run]
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub trace_every: usize,
    pub workers: usize,
    /// Checkpoint the stage starts from; required for self_distill and
    /// align, ignored by pretrain.
    pub init_from: Option<String>,

    // [opt]
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine decay after warmup instead of a constant rate.
    pub cosine: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,

    // [loss]
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub tau_init: f64,
    /// Probability of feeding the reference speech itself through the
    /// aggregator during alignment.
    pub anchor_p: f64,
    /// Use squared L2 instead of L1 for the flow-matching residual.
    pub squared_l2: bool,
    /// One temperature for both contrastive terms; when false each term
    /// gets its own learnable copy.
    pub shared_tau: bool,
    /// Average row-wise and column-wise InfoNCE; when false only the
    /// row-wise direction is used.
    pub symmetric_infonce: bool,

    // [ablate]
    pub mva_enabled: bool,
    pub softcl_enabled: bool,
    pub self_distill_enabled: bool,

    // [world]
    pub speakers: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
    pub face_dim: usize,
    pub text_dim: usize,
    pub token_dim: usize,
    pub token_rows: usize,
    pub data_dim: usize,
    pub sigma_face: f64,
    pub sigma_text: f64,
    pub sigma_speech: f64,
    pub sigma_data: f64,
    pub token_leak: f64,

    // [mva]
    pub heads: usize,
    pub depth: usize,
    pub bank: usize,
    pub per_head_scale: bool,
    pub out_proj: bool,
    pub ff: bool,
    pub residual: bool,
    pub norm: bool,
    pub face_proj: ProjectorMode,
    pub text_proj: ProjectorMode,
    pub proj_hidden: usize,

    // [field]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ode_steps: usize,

    // [align]
    /// Descriptions per modality always available to the align stage.
    pub desc_base: usize,
    /// Additional descriptions gated by `data_scale`.
    pub desc_extra: usize,
    /// Fraction of `desc_extra` actually used (the data-scale knob).
    pub data_scale: f64,

    // [eval]
    pub eval_speakers: usize,
    pub eval_per_speaker: usize,
    pub probe_per_speaker: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Pretrain,
            steps: 3000,
            batch: 64,
            seed: 0,
            trace_every: 50,
            workers: 1,
            init_from: None,
            lr: 1e-5,
            warmup: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            cosine: false,
            clip: 0.0,
            lambda_intra: 0.05,
            lambda_inter: 0.05,
            tau_init: 0.07,
            anchor_p: 0.5,
            squared_l2: false,
            shared_tau: true,
            symmetric_infonce: true,
            mva_enabled: true,
            softcl_enabled: true,
            self_distill_enabled: true,
            speakers: 64,
            latent_dim: 16,
            speaker_dim: 32,
            face_dim: 48,
            text_dim: 24,
            token_dim: 8,
            token_rows: 4,
            data_dim: 8,
            sigma_face: 0.05,
            sigma_text: 0.05,
            sigma_speech: 0.05,
            sigma_data: 0.05,
            token_leak: 0.25,
            heads: 2,
            depth: 2,
            bank: 64,
            per_head_scale: false,
            out_proj: true,
            ff: true,
            residual: true,
            norm: true,
            face_proj: ProjectorMode::Mlp,
            text_proj: ProjectorMode::Mlp,
            proj_hidden: 32,
            hidden: vec![96, 96],
            activation: Activation::Tanh,
            ode_steps: 20,
            desc_base: 64,
            desc_extra: 448,
            data_scale: 1.0,
            eval_speakers: 16,
            eval_per_speaker: 8,
            probe_per_speaker: 8,
        }
    }
}

/// Every accepted key, in canonical echo order.
pub const KEYS: &[&str] = &[
    "run.stage",
    "run.steps",
    "run.batch",
    "run.seed",
    "run.trace_every",
    "run.workers",
    "run.init_from",
    "opt.lr",
    "opt.warmup",
    "opt.beta1",
    "opt.beta2",
    "opt.eps",
    "opt.weight_decay",
    "opt.cosine",
    "opt.clip",
    "loss.lambda_intra",
    "loss.lambda_inter",
    "loss.tau_init",
    "loss.anchor_p",
    "loss.squared_l2",
    "loss.shared_tau",
    "loss.symmetric_infonce",
    "ablate.mva",
    "ablate.softcl",
    "ablate.self_distill",
    "world.speakers",
    "world.latent_dim",
    "world.speaker_dim",
    "world.face_dim",
    "world.text_dim",
    "world.token_dim",
    "world.token_rows",
    "world.data_dim",
    "world.sigma_face",
    "world.sigma_text",
    "world.sigma_speech",
    "world.sigma_data",
    "world.token_leak",
    "mva.heads",
    "mva.depth",
    "mva.bank",
    "mva.per_head_scale",
    "mva.out_proj",
    "mva.ff",
    "mva.residual",
    "mva.norm",
    "mva.face_proj",
    "mva.text_proj",
    "mva.proj_hidden",
    "field.hidden",
    "field.activation",
    "field.ode_steps",
    "align.desc_base",
    "align.desc_extra",
    "align.data_scale",
    "eval.speakers",
    "eval.per_speaker",
    "eval.probe_per_speaker",
];

fn bad_type(key: &str, expected: &str, got: &str) -> CoreError {
    CoreError::Config {
        key: key.to_string(),
        detail: format!("expected {expected}, got `{got}`"),
    }
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad_type(key, "an unsigned integer", v))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad_type(key, "an unsigned integer", v))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad_type(key, "a number", v))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_type(key, "true or false", v)),
    }
}

fn p_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| bad_type(key, "a comma-separated list of unsigned integers", v))
        })
        .collect()
}

fn p_mode(key: &str, v: &str) -> Result<ProjectorMode> {
    match v {
        "pool" => Ok(ProjectorMode::Pool),
        "mlp" => Ok(ProjectorMode::Mlp),
        _ => Err(bad_type(key, "pool or mlp", v)),
    }
}

/// Edit distance used only to suggest the closest key in error messages.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .min_by_key(|cand| edit_distance(key, cand))
        .copied()
        .unwrap()
}

impl RunConfig {
    /// Apply a single `key = value` assignment by fully qualified key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.stage" => self.stage = Stage::parse(value).map_err(|_| {
                bad_type(key, "pretrain, self_distill or align", value)
            })?,
            "run.steps" => self.steps = p_usize(key, value)?,
            "run.batch" => self.batch = p_usize(key, value)?,
            "run.seed" => self.seed = p_u64(key, value)?,
            "run.trace_every" => self.trace_every = p_usize(key, value)?,
            "run.workers" => self.workers = p_usize(key, value)?,
            "run.init_from" => {
                self.init_from = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "opt.lr" => self.lr = p_f64(key, value)?,
            "opt.warmup" => self.warmup = p_usize(key, value)?,
            "opt.beta1" => self.beta1 = p_f64(key, value)?,
            "opt.beta2" => self.beta2 = p_f64(key, value)?,
            "opt.eps" => self.eps = p_f64(key, value)?,
            "opt.weight_decay" => self.weight_decay = p_f64(key, value)?,
            "opt.cosine" => self.cosine = p_bool(key, value)?,
            "opt.clip" => self.clip = p_f64(key, value)?,
            "loss.lambda_intra" => self.lambda_intra = p_f64(key, value)?,
            "loss.lambda_inter" => self.lambda_inter = p_f64(key, value)?,
            "loss.tau_init" => self.tau_init = p_f64(key, value)?,
            "loss.anchor_p" => self.anchor_p = p_f64(key, value)?,
            "loss.squared_l2" => self.squared_l2 = p_bool(key, value)?,
            "loss.shared_tau" => self.shared_tau = p_bool(key, value)?,
            "loss.symmetric_infonce" => self.symmetric_infonce = p_bool(key, value)?,
            "ablate.mva" => self.mva_enabled = p_bool(key, value)?,
            "ablate.softcl" => self.softcl_enabled = p_bool(key, value)?,
            "ablate.self_distill" => self.self_distill_enabled = p_bool(key, value)?,
            "world.speakers" => self.speakers = p_usize(key, value)?,
            "world.latent_dim" => self.latent_dim = p_usize(key, value)?,
            "world.speaker_dim" => self.speaker_dim = p_usize(key, value)?,
            "world.face_dim" => self.face_dim = p_usize(key, value)?,
            "world.text_dim" => self.text_dim = p_usize(key, value)?,
            "world.token_dim" => self.token_dim = p_usize(key, value)?,
            "world.token_rows" => self.token_rows = p_usize(key, value)?,
            "world.data_dim" => self.data_dim = p_usize(key, value)?,
            "world.sigma_face" => self.sigma_face = p_f64(key, value)?,
            "world.sigma_text" => self.sigma_text = p_f64(key, value)?,
            "world.sigma_speech" => self.sigma_speech = p_f64(key, value)?,
            "world.sigma_data" => self.sigma_data = p_f64(key, value)?,
            "world.token_leak" => self.token_leak = p_f64(key, value)?,
            "mva.heads" => self.heads = p_usize(key, value)?,
            "mva.depth" => self.depth = p_usize(key, value)?,
            "mva.bank" => self.bank = p_usize(key, value)?,
            "mva.per_head_scale" => self.per_head_scale = p_bool(key, value)?,
            "mva.out_proj" => self.out_proj = p_bool(key, value)?,
            "mva.ff" => self.ff = p_bool(key, value)?,
            "mva.residual" => self.residual = p_bool(key, value)?,
            "mva.norm" => self.norm = p_bool(key, value)?,
            "mva.face_proj" => self.face_proj = p_mode(key, value)?,
            "mva.text_proj" => self.text_proj = p_mode(key, value)?,
            "mva.proj_hidden" => self.proj_hidden = p_usize(key, value)?,
            "field.hidden" => self.hidden = p_list(key, value)?,
            "field.activation" => {
                self.activation =
                    Activation::parse(value).map_err(|_| bad_type(key, "tanh or relu", value))?
            }
            "field.ode_steps" => self.ode_steps = p_usize(key, value)?,
            "align.desc_base" => self.desc_base = p_usize(key, value)?,
            "align.desc_extra" => self.desc_extra = p_usize(key, value)?,
            "align.data_scale" => self.data_scale = p_f64(key, value)?,
            "eval.speakers" => self.eval_speakers = p_usize(key, value)?,
            "eval.per_speaker" => self.eval_per_speaker = p_usize(key, value)?,
            "eval.probe_per_speaker" => self.probe_per_speaker = p_usize(key, value)?,
            _ => {
                return Err(CoreError::Config {
                    key: key.to_string(),
                    detail: format!("unknown key (closest valid key: `{}`)", nearest_key(key)),
                })
            }
        }
        Ok(())
    }

    /// Parse config text over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(CoreError::Config {
                        key: format!("line {}", lineno + 1),
                        detail: format!("malformed section header `{line}`"),
                    });
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::Config {
                    key: format!("line {}", lineno + 1),
                    detail: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value.trim())?;
        }
        Ok(())
    }

    /// Defaults overlaid with the given config text.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Defaults overlaid with a config file.
    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::from_text(&text)
    }

    /// Canonical echo; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &key in KEYS {
            let (sec, _) = key.split_once('.').unwrap();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let short = &key[sec.len() + 1..];
            let _ = writeln!(out, "{short} = {}", self.value_text(key));
        }
        out
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "run.stage" => self.stage.as_str().to_string(),
            "run.steps" => self.steps.to_string(),
            "run.batch" => self.batch.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.trace_every" => self.trace_every.to_string(),
            "run.workers" => self.workers.to_string(),
            "run.init_from" => self.init_from.clone().unwrap_or_default(),
            "opt.lr" => self.lr.to_string(),
            "opt.warmup" => self.warmup.to_string(),
            "opt.beta1" => self.beta1.to_string(),
            "opt.beta2" => self.beta2.to_string(),
            "opt.eps" => self.eps.to_string(),
            "opt.weight_decay" => self.weight_decay.to_string(),
            "opt.cosine" => self.cosine.to_string(),
            "opt.clip" => self.clip.to_string(),
            "loss.lambda_intra" => self.lambda_intra.to_string(),
            "loss.lambda_inter" => self.lambda_inter.to_string(),
            "loss.tau_init" => self.tau_init.to_string(),
            "loss.anchor_p" => self.anchor_p.to_string(),
            "loss.squared_l2" => self.squared_l2.to_string(),
            "loss.shared_tau" => self.shared_tau.to_string(),
            "loss.symmetric_infonce" => self.symmetric_infonce.to_string(),
            "ablate.mva" => self.mva_enabled.to_string(),
            "ablate.softcl" => self.softcl_enabled.to_string(),
            "ablate.self_distill" => self.self_distill_enabled.to_string(),
            "world.speakers" => self.speakers.to_string(),
            "world.latent_dim" => self.latent_dim.to_string(),
            "world.speaker_dim" => self.speaker_dim.to_string(),
            "world.face_dim" => self.face_dim.to_string(),
            "world.text_dim" => self.text_dim.to_string(),
            "world.token_dim" => self.token_dim.to_string(),
            "world.token_rows" => self.token_rows.to_string(),
            "world.data_dim" => self.data_dim.to_string(),
            "world.sigma_face" => self.sigma_face.to_string(),
            "world.sigma_text" => self.sigma_text.to_string(),
            "world.sigma_speech" => self.sigma_speech.to_string(),
            "world.sigma_data" => self.sigma_data.to_string(),
            "world.token_leak" => self.token_leak.to_string(),
            "mva.heads" => self.heads.to_string(),
            "mva.depth" => self.depth.to_string(),
            "mva.bank" => self.bank.to_string(),
            "mva.per_head_scale" => self.per_head_scale.to_string(),
            "mva.out_proj" => self.out_proj.to_string(),
            "mva.ff" => self.ff.to_string(),
            "mva.residual" => self.residual.to_string(),
            "mva.norm" => self.norm.to_string(),
            "mva.face_proj" => match self.face_proj {
                ProjectorMode::Pool => "pool".to_string(),
                ProjectorMode::Mlp => "mlp".to_string(),
            },
            "mva.text_proj" => match self.text_proj {
                ProjectorMode::Pool => "pool".to_string(),
                ProjectorMode::Mlp => "mlp".to_string(),
            },
            "mva.proj_hidden" => self.proj_hidden.to_string(),
            "field.hidden" => self
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "field.activation" => self.activation.as_str().to_string(),
            "field.ode_steps" => self.ode_steps.to_string(),
            "align.desc_base" => self.desc_base.to_string(),
            "align.desc_extra" => self.desc_extra.to_string(),
            "align.data_scale" => self.data_scale.to_string(),
            "eval.speakers" => self.eval_speakers.to_string(),
            "eval.per_speaker" => self.eval_per_speaker.to_string(),
            "eval.probe_per_speaker" => self.probe_per_speaker.to_string(),
            _ => unreachable!("value_text covers every listed key"),
        }
    }

    /// Short SHA-256 prefix of the canonical echo.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut out = String::new();
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            speakers: self.speakers,
            latent_dim: self.latent_dim,
            speaker_dim: self.speaker_dim,
            face_dim: self.face_dim,
            text_dim: self.text_dim,
            token_dim: self.token_dim,
            token_rows: self.token_rows,
            data_dim: self.data_dim,
            sigma_face: self.sigma_face,
            sigma_text: self.sigma_text,
            sigma_speech: self.sigma_speech,
            sigma_data: self.sigma_data,
            token_leak: self.token_leak,
        }
    }

    pub fn kv_config(&self) -> KvFormerConfig {
        KvFormerConfig {
            d: self.speaker_dim,
            heads: self.heads,
            depth: self.depth,
            bank: self.bank,
            per_head_scale: self.per_head_scale,
            use_out_proj: self.out_proj,
            use_ff: self.ff,
            use_residual: self.residual,
            use_norm: self.norm,
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            data_dim: self.data_dim,
            cond_dim: self.speaker_dim,
            token_dim: self.token_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }

    /// With the aggregator ablated, each modality keeps only a single
    /// linear map onto the shared width, regardless of projector mode.
    pub fn face_spec(&self) -> ProjectorSpec {
        if !self.mva_enabled {
            return ProjectorSpec::linear(self.face_dim, self.speaker_dim);
        }
        match self.face_proj {
            ProjectorMode::Pool => ProjectorSpec::pool(self.speaker_dim),
            ProjectorMode::Mlp => {
                ProjectorSpec::mlp(self.face_dim, self.proj_hidden, self.speaker_dim)
            }
        }
    }

    pub fn text_spec(&self) -> ProjectorSpec {
        if !self.mva_enabled {
            return ProjectorSpec::linear(self.text_dim, self.speaker_dim);
        }
        match self.text_proj {
            ProjectorMode::Pool => ProjectorSpec::pool(self.speaker_dim),
            ProjectorMode::Mlp => {
                ProjectorSpec::mlp(self.text_dim, self.proj_hidden, self.speaker_dim)
            }
        }
    }

    pub fn speech_spec(&self) -> ProjectorSpec {
        ProjectorSpec::linear(self.speaker_dim, self.speaker_dim)
    }

    /// Cross-field checks on top of each module's own validation.
    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.kv_config().validate()?;
        self.field_config().validate()?;
        self.face_spec().validate()?;
        self.text_spec().validate()?;
        self.speech_spec().validate()?;
        if self.batch == 0 {
            return Err(CoreError::Contract("batch size must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(CoreError::Contract("trace_every must be positive".into()));
        }
        if self.workers == 0 {
            return Err(CoreError::Contract("workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anchor_p) {
            return Err(CoreError::Contract(format!(
                "anchor probability {} outside [0, 1]",
                self.anchor_p
            )));
        }
        if self.tau_init < TAU_FLOOR {
            return Err(CoreError::Contract(format!(
                "tau_init {} below floor {TAU_FLOOR}",
                self.tau_init
            )));
        }
        if self.lambda_intra < 0.0 || self.lambda_inter < 0.0 {
            return Err(CoreError::Contract(
                "contrastive loss weights must be nonnegative".into(),
            ));
        }
        if self.stage == Stage::Align && self.softcl_enabled && self.batch < 2 {
            return Err(CoreError::Contract(
                "align stage with contrastive losses needs batch >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data_scale) {
            return Err(CoreError::Contract(format!(
                "data_scale {} outside [0, 1]",
                self.data_scale
            )));
        }
        if self.ode_steps == 0 {
            return Err(CoreError::Contract("ode_steps must be positive".into()));
        }
        if self.eval_speakers < 2 {
            return Err(CoreError::Contract(
                "evaluation needs at least two speakers".into(),
            ));
        }
        if self.eval_per_speaker < 2 {
            return Err(CoreError::Contract(
                "consistency metric needs at least two generations per speaker".into(),
            ));
        }
        if self.probe_per_speaker == 0 {
            return Err(CoreError::Contract(
                "probe fitting needs at least one sample per speaker".into(),
            ));
        }
        Ok(())
    }
}
