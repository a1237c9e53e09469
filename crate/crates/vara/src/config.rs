//! Model and training configuration.
//!
//! Configs are plain UTF-8 key-value documents with dotted section keys:
//!
//! ```text
//! # comment
//! preset=desk
//! model.n_stacks=3
//! train.max_lr=0.002
//! ```
//!
//! An optional `preset` key (`desk` or `paper-en`) selects the base config;
//! every other line overrides one field. The same `KEY=VALUE` syntax backs the
//! CLI `--set` flag, so every config key is overridable from the command line.
//! [`FullConfig::digest`] hashes the canonical serialization; checkpoints embed
//! the digest so a checkpoint trained under one config cannot be silently
//! loaded under another.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

/// Architecture hyperparameters.
///
/// The desk preset is a shrunken homomorph of the full-scale preset: same
/// topology, smaller widths and depth, so every code path is exercised at
/// desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Mel bins per frame.
    pub n_mels: usize,
    /// Number of bottom-up stacks; top-down groups mirror this count.
    pub n_stacks: usize,
    /// Residual blocks per bottom-up stack (top-down groups use the reverse).
    pub blocks_per_stack: Vec<usize>,
    /// Temporal pooling factor applied after each stack; the first stack is
    /// the "repeat" stack with factor 1.
    pub reductions: Vec<usize>,
    /// Residual trunk width C. Blocks squeeze to C/4 internally, so C % 4 == 0.
    pub channels: usize,
    /// Kernel of the mel pre-conv layer.
    pub pre_conv_kernel: usize,
    /// Attention dim D; also the text encoder output width.
    pub attention_dim: usize,
    /// Attention head count; D % heads == 0.
    pub n_heads: usize,
    /// Latent channels Z per layer.
    pub latent_dim: usize,
    /// Token embedding width (input to the text conv stack).
    pub text_embed_dim: usize,
    /// Output channels of the four text encoder convs; last must equal D.
    pub text_conv_channels: Vec<usize>,
    /// Kernel of the text encoder convs.
    pub text_conv_kernel: usize,
    /// Token inventory size the embedding table is built for (incl. unknown).
    pub vocab_size: usize,
    /// Speaker count; 1 disables FiLM and the speaker table.
    pub n_speakers: usize,
    /// Speaker embedding width (ignored when n_speakers == 1).
    pub speaker_dim: usize,
    /// Diagonal widths g for the rule-based initial alignment.
    pub g_list: Vec<f64>,
    /// Scalar gain on the refined previous alignment added to attention scores.
    pub a_prev_gain: f64,
    /// Hidden width of the speaking-speed predictor.
    pub speed_hidden: usize,
    /// Dropout rate inside the speed predictor (training mode only).
    pub speed_dropout: f64,
    /// Multiplier on the 1/sqrt(fan_in) initialization scale.
    pub init_gain: f64,
}

/// Optimization hyperparameters and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Weight on the speaking-speed loss.
    pub alpha: f64,
    /// Weight on the KL term.
    pub beta: f64,
    /// Weight on the detailed KL gain; 0 disables the term.
    pub lambda: f64,
    /// Reference fraction c inside the detailed KL gain.
    pub gain_c: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Ablation: feed the speed predictor pooled text (stop-gradient) instead
    /// of z0.
    pub separate_speed_predictor: bool,
    /// Ablation: use the sum |max(KL_i, ref) - ref| gain form instead of the
    /// default sum max(0, ref - KL_i).
    pub printed_gain_form: bool,
    pub eval_interval: usize,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// Product of all stack reductions: the coarsest temporal scale factor.
    pub fn max_reduction(&self) -> usize {
        self.reductions.iter().product()
    }

    /// Post-stack activation lengths for an input of `t` frames, index s =
    /// after stack s. Pooling zero-pads, so each step is a ceiling division.
    pub fn scale_chain(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_stacks);
        let mut cur = t;
        for &r in &self.reductions {
            cur = cur.div_ceil(r);
            out.push(cur);
        }
        out
    }

    /// Squeeze width inside residual blocks.
    pub fn bottleneck(&self) -> usize {
        self.channels / 4
    }

    pub fn multi_speaker(&self) -> bool {
        self.n_speakers > 1
    }
}

impl FullConfig {
    /// Small config: 3 stacks, narrow widths, sized for single-core runs on
    /// the synthetic corpus.
    pub fn desk() -> Self {
        FullConfig {
            model: ModelConfig {
                n_mels: 16,
                n_stacks: 3,
                blocks_per_stack: vec![2, 2, 2],
                reductions: vec![1, 2, 2],
                channels: 64,
                pre_conv_kernel: 11,
                attention_dim: 64,
                n_heads: 4,
                latent_dim: 8,
                text_embed_dim: 64,
                text_conv_channels: vec![64, 16, 16, 64],
                text_conv_kernel: 5,
                vocab_size: 13,
                n_speakers: 1,
                speaker_dim: 0,
                g_list: vec![0.01, 0.05, 0.1, 0.2],
                a_prev_gain: 1.0,
                speed_hidden: 256,
                speed_dropout: 0.1,
                init_gain: 1.0,
            },
            train: TrainConfig {
                batch_size: 4,
                max_lr: 2e-3,
                warmup_steps: 100,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                total_steps: 600,
                seed: 17,
                alpha: 1.0,
                beta: 1.8,
                lambda: 1.0,
                gain_c: 0.5,
                grad_clip: 5.0,
                separate_speed_predictor: false,
                printed_gain_form: false,
                eval_interval: 50,
                log_interval: 10,
                checkpoint_interval: 200,
            },
        }
    }

    /// Full-scale single-speaker English preset. Shipped for reference and
    /// manual runs; tests exercise only the desk preset.
    pub fn paper_en() -> Self {
        FullConfig {
            model: ModelConfig {
                n_mels: 80,
                n_stacks: 6,
                blocks_per_stack: vec![4, 6, 8, 12, 9, 5],
                reductions: vec![1, 2, 2, 2, 2, 1],
                channels: 384,
                pre_conv_kernel: 11,
                attention_dim: 384,
                n_heads: 8,
                latent_dim: 16,
                text_embed_dim: 384,
                text_conv_channels: vec![384, 96, 96, 384],
                text_conv_kernel: 5,
                vocab_size: 55,
                n_speakers: 1,
                speaker_dim: 0,
                g_list: vec![0.01, 0.05, 0.1, 0.2],
                a_prev_gain: 1.0,
                speed_hidden: 256,
                speed_dropout: 0.1,
                init_gain: 1.0,
            },
            train: TrainConfig {
                batch_size: 32,
                max_lr: 1.5e-4,
                warmup_steps: 10_000,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                total_steps: 90_000,
                seed: 17,
                alpha: 1.0,
                beta: 1.8,
                lambda: 1.0,
                gain_c: 0.5,
                grad_clip: 5.0,
                separate_speed_predictor: false,
                printed_gain_form: false,
                eval_interval: 1000,
                log_interval: 100,
                checkpoint_interval: 5000,
            },
        }
    }

    /// Canonical serialization: every key, fixed order, `Display` formatting.
    /// Parsing this string reproduces the config exactly; the digest hashes it.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("model.n_mels", m.n_mels.to_string());
        kv("model.n_stacks", m.n_stacks.to_string());
        kv("model.blocks_per_stack", join(&m.blocks_per_stack));
        kv("model.reductions", join(&m.reductions));
        kv("model.channels", m.channels.to_string());
        kv("model.pre_conv_kernel", m.pre_conv_kernel.to_string());
        kv("model.attention_dim", m.attention_dim.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.latent_dim", m.latent_dim.to_string());
        kv("model.text_embed_dim", m.text_embed_dim.to_string());
        kv("model.text_conv_channels", join(&m.text_conv_channels));
        kv("model.text_conv_kernel", m.text_conv_kernel.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.n_speakers", m.n_speakers.to_string());
        kv("model.speaker_dim", m.speaker_dim.to_string());
        kv("model.g_list", join(&m.g_list));
        kv("model.a_prev_gain", m.a_prev_gain.to_string());
        kv("model.speed_hidden", m.speed_hidden.to_string());
        kv("model.speed_dropout", m.speed_dropout.to_string());
        kv("model.init_gain", m.init_gain.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_lr", t.max_lr.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.adam_beta1", t.adam_beta1.to_string());
        kv("train.adam_beta2", t.adam_beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.total_steps", t.total_steps.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.alpha", t.alpha.to_string());
        kv("train.beta", t.beta.to_string());
        kv("train.lambda", t.lambda.to_string());
        kv("train.gain_c", t.gain_c.to_string());
        kv("train.grad_clip", t.grad_clip.to_string());
        kv(
            "train.separate_speed_predictor",
            t.separate_speed_predictor.to_string(),
        );
        kv("train.printed_gain_form", t.printed_gain_form.to_string());
        kv("train.eval_interval", t.eval_interval.to_string());
        kv("train.log_interval", t.log_interval.to_string());
        kv("train.checkpoint_interval", t.checkpoint_interval.to_string());
        s
    }

    /// Parse a key-value document. An optional `preset` key anywhere in the
    /// file selects the base (default `desk`); remaining keys apply in file
    /// order. Does not validate; call [`FullConfig::validate`] after all
    /// overrides are in.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_kv(line)
                .ok_or_else(|| Error::Config(format!("line {}: expected KEY=VALUE, got {line:?}", i + 1)))?;
            entries.push((i + 1, k, v));
        }
        let mut preset: Option<&str> = None;
        for &(line, k, v) in &entries {
            if k == "preset" {
                if preset.is_some() {
                    return Err(Error::Config(format!("line {line}: duplicate preset key")));
                }
                preset = Some(v);
            }
        }
        let mut cfg = match preset {
            None | Some("desk") => FullConfig::desk(),
            Some("paper-en") => FullConfig::paper_en(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected desk or paper-en)"
                )))
            }
        };
        for &(_, k, v) in &entries {
            if k != "preset" {
                cfg.apply_kv(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Apply one `KEY=VALUE` override string (the CLI `--set` payload).
    pub fn apply_set(&mut self, set: &str) -> Result<()> {
        let (k, v) = split_kv(set.trim())
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {set:?}")))?;
        self.apply_kv(k, v)
    }

    /// Set one field by dotted key name.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.n_mels" => m.n_mels = p_usize(key, value)?,
            "model.n_stacks" => m.n_stacks = p_usize(key, value)?,
            "model.blocks_per_stack" => m.blocks_per_stack = p_usize_list(key, value)?,
            "model.reductions" => m.reductions = p_usize_list(key, value)?,
            "model.channels" => m.channels = p_usize(key, value)?,
            "model.pre_conv_kernel" => m.pre_conv_kernel = p_usize(key, value)?,
            "model.attention_dim" => m.attention_dim = p_usize(key, value)?,
            "model.n_heads" => m.n_heads = p_usize(key, value)?,
            "model.latent_dim" => m.latent_dim = p_usize(key, value)?,
            "model.text_embed_dim" => m.text_embed_dim = p_usize(key, value)?,
            "model.text_conv_channels" => m.text_conv_channels = p_usize_list(key, value)?,
            "model.text_conv_kernel" => m.text_conv_kernel = p_usize(key, value)?,
            "model.vocab_size" => m.vocab_size = p_usize(key, value)?,
            "model.n_speakers" => m.n_speakers = p_usize(key, value)?,
            "model.speaker_dim" => m.speaker_dim = p_usize(key, value)?,
            "model.g_list" => m.g_list = p_f64_list(key, value)?,
            "model.a_prev_gain" => m.a_prev_gain = p_f64(key, value)?,
            "model.speed_hidden" => m.speed_hidden = p_usize(key, value)?,
            "model.speed_dropout" => m.speed_dropout = p_f64(key, value)?,
            "model.init_gain" => m.init_gain = p_f64(key, value)?,
            "train.batch_size" => t.batch_size = p_usize(key, value)?,
            "train.max_lr" => t.max_lr = p_f64(key, value)?,
            "train.warmup_steps" => t.warmup_steps = p_usize(key, value)?,
            "train.adam_beta1" => t.adam_beta1 = p_f64(key, value)?,
            "train.adam_beta2" => t.adam_beta2 = p_f64(key, value)?,
            "train.adam_eps" => t.adam_eps = p_f64(key, value)?,
            "train.total_steps" => t.total_steps = p_usize(key, value)?,
            "train.seed" => t.seed = p_u64(key, value)?,
            "train.alpha" => t.alpha = p_f64(key, value)?,
            "train.beta" => t.beta = p_f64(key, value)?,
            "train.lambda" => t.lambda = p_f64(key, value)?,
            "train.gain_c" => t.gain_c = p_f64(key, value)?,
            "train.grad_clip" => t.grad_clip = p_f64(key, value)?,
            "train.separate_speed_predictor" => {
                t.separate_speed_predictor = p_bool(key, value)?
            }
            "train.printed_gain_form" => t.printed_gain_form = p_bool(key, value)?,
            "train.eval_interval" => t.eval_interval = p_usize(key, value)?,
            "train.log_interval" => t.log_interval = p_usize(key, value)?,
            "train.checkpoint_interval" => t.checkpoint_interval = p_usize(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.n_stacks == 0 {
            return bad("model.n_stacks must be >= 1".into());
        }
        if m.blocks_per_stack.len() != m.n_stacks || m.reductions.len() != m.n_stacks {
            return bad(format!(
                "model.blocks_per_stack ({}) and model.reductions ({}) must both have model.n_stacks ({}) entries",
                m.blocks_per_stack.len(),
                m.reductions.len(),
                m.n_stacks
            ));
        }
        if m.blocks_per_stack.iter().any(|&b| b == 0) {
            return bad("model.blocks_per_stack entries must be >= 1".into());
        }
        if m.reductions.iter().any(|&r| r == 0) {
            return bad("model.reductions entries must be >= 1".into());
        }
        if m.channels == 0 || m.channels % 4 != 0 {
            return bad(format!(
                "model.channels must be a positive multiple of 4 (blocks squeeze to C/4), got {}",
                m.channels
            ));
        }
        for (key, k) in [
            ("model.pre_conv_kernel", m.pre_conv_kernel),
            ("model.text_conv_kernel", m.text_conv_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return bad(format!("{key} must be odd (same-padding convs), got {k}"));
            }
        }
        if m.n_heads == 0 || m.attention_dim % m.n_heads != 0 {
            return bad(format!(
                "model.attention_dim ({}) must be divisible by model.n_heads ({})",
                m.attention_dim, m.n_heads
            ));
        }
        if m.latent_dim == 0 || m.n_mels == 0 || m.text_embed_dim == 0 {
            return bad("model.latent_dim, model.n_mels, model.text_embed_dim must be >= 1".into());
        }
        if m.vocab_size < 2 {
            return bad(format!("model.vocab_size must be >= 2, got {}", m.vocab_size));
        }
        if m.text_conv_channels.len() != 4 {
            return bad(format!(
                "model.text_conv_channels must list exactly 4 layers, got {}",
                m.text_conv_channels.len()
            ));
        }
        if m.text_conv_channels.iter().any(|&c| c == 0) {
            return bad("model.text_conv_channels entries must be >= 1".into());
        }
        if *m.text_conv_channels.last().unwrap() != m.attention_dim {
            return bad(format!(
                "last text conv channel ({}) must equal model.attention_dim ({}) so positional encoding can be added",
                m.text_conv_channels.last().unwrap(),
                m.attention_dim
            ));
        }
        if m.n_speakers == 0 {
            return bad("model.n_speakers must be >= 1".into());
        }
        if m.multi_speaker() && m.speaker_dim == 0 {
            return bad("model.speaker_dim must be >= 1 when model.n_speakers > 1".into());
        }
        if m.g_list.is_empty() || m.g_list.iter().any(|&g| !g.is_finite() || g <= 0.0) {
            return bad("model.g_list must be non-empty with finite positive entries".into());
        }
        if !m.a_prev_gain.is_finite() {
            return bad("model.a_prev_gain must be finite".into());
        }
        if m.speed_hidden == 0 {
            return bad("model.speed_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&m.speed_dropout) {
            return bad(format!(
                "model.speed_dropout must be in [0, 1), got {}",
                m.speed_dropout
            ));
        }
        if !m.init_gain.is_finite() || m.init_gain <= 0.0 {
            return bad(format!("model.init_gain must be positive, got {}", m.init_gain));
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if t.warmup_steps == 0 {
            return bad("train.warmup_steps must be >= 1".into());
        }
        if t.total_steps == 0 {
            return bad("train.total_steps must be >= 1".into());
        }
        if !t.max_lr.is_finite() || t.max_lr <= 0.0 {
            return bad(format!("train.max_lr must be positive, got {}", t.max_lr));
        }
        for (key, b) in [("train.adam_beta1", t.adam_beta1), ("train.adam_beta2", t.adam_beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return bad(format!("{key} must be in [0, 1), got {b}"));
            }
        }
        if !t.adam_eps.is_finite() || t.adam_eps <= 0.0 {
            return bad(format!("train.adam_eps must be positive, got {}", t.adam_eps));
        }
        for (key, w) in [
            ("train.alpha", t.alpha),
            ("train.beta", t.beta),
            ("train.lambda", t.lambda),
        ] {
            if !w.is_finite() || w < 0.0 {
                return bad(format!("{key} must be >= 0, got {w}"));
            }
        }
        if !t.gain_c.is_finite() || t.gain_c <= 0.0 {
            return bad(format!("train.gain_c must be positive, got {}", t.gain_c));
        }
        if !t.grad_clip.is_finite() || t.grad_clip <= 0.0 {
            return bad(format!("train.grad_clip must be positive, got {}", t.grad_clip));
        }
        if t.eval_interval == 0 || t.log_interval == 0 || t.checkpoint_interval == 0 {
            return bad("train.eval_interval, train.log_interval, train.checkpoint_interval must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv_string().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn split_kv(line: &str) -> Option<(&str, &str)> {
    let idx = line.find('=')?;
    Some((line[..idx].trim(), line[idx + 1..].trim()))
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| p_usize(key, p.trim())).collect()
}

fn p_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|p| p_f64(key, p.trim())).collect()
}
