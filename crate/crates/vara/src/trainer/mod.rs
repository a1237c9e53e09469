//! Optimization loop: warmup schedule, batched steps, evaluation snapshots,
//! checkpoints, and the ablation harness.
//!
//! A batch is processed as one graph per utterance with gradients averaged
//! across members. Each member's gradient is therefore computed at its
//! natural length; no padding exists anywhere, so batch members cannot leak
//! into one another (the property a pad-and-mask scheme would need masking
//! to enforce).
//!
//! Determinism contract: the whole trajectory is a pure function of (corpus,
//! config, seed) in 64-bit arithmetic, and a checkpoint restores it
//! mid-flight bit-exactly, including the RNG stream position.

pub mod adam;
pub mod checkpoint;

use std::path::Path;
use std::time::Instant;

use crate::config::FullConfig;
use crate::data::{speaking_speed_target, Corpus, SpeedStats, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::build_params;
use crate::model::vdvae::forward_train;
use crate::numerics::{Gradients, Graph, ParamStore, Rng, Tensor};
pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Offset between the parameter-init seed and the sampling stream, so the
/// two never share a ChaCha key.
const TRAIN_STREAM_SALT: u64 = 0x7472_6169;

/// Transformer-style schedule: linear warmup to `max_lr`, then inverse-sqrt
/// decay. Steps are 1-based.
pub fn lr_schedule(step: u64, warmup: u64, max_lr: f64) -> Result<f64> {
    if step < 1 {
        return Err(Error::InvalidArgument(format!("lr_schedule: step {step} < 1")));
    }
    if warmup < 1 {
        return Err(Error::InvalidArgument(format!("lr_schedule: warmup {warmup} < 1")));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(max_lr * (s / w).min((w / s).sqrt()))
}

/// Validation snapshot at a training step.
#[derive(Clone, Debug)]
pub struct TelemetryRecord {
    pub step: u64,
    /// Averaged over the validation split.
    pub loss: LossBreakdown,
    /// Per-layer per-frame KL, z0 first then groups coarse to fine.
    pub kl_per_frame: Vec<f64>,
    /// Prefix sums of `kl_per_frame`; non-decreasing, flat exactly where a
    /// layer's KL is zero.
    pub cumulative_kl: Vec<f64>,
    /// Mean squared speed error on validation.
    pub speed_mse: f64,
    /// Seconds since the trainer was created.
    pub wall_secs: f64,
}

impl TelemetryRecord {
    pub fn csv_header(n_layers: usize) -> String {
        let mut s = String::from("step,speed_mse,recon,kl_total,gain,total");
        for i in 0..n_layers {
            s.push_str(&format!(",cum_kl_{i}"));
        }
        s.push_str(",wall_secs");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.step,
            self.speed_mse,
            self.loss.recon,
            self.loss.kl_total,
            self.loss.detailed_kl_gain,
            self.loss.total
        );
        for k in &self.cumulative_kl {
            s.push_str(&format!(",{k}"));
        }
        s.push_str(&format!(",{}", self.wall_secs));
        s
    }
}

fn average_breakdowns(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let layers = parts[0].kl_per_layer.len();
    let mut kl_per_layer = vec![0.0; layers];
    let mut acc = LossBreakdown {
        speaking_speed: 0.0,
        recon: 0.0,
        kl_total: 0.0,
        kl_per_layer: Vec::new(),
        detailed_kl_gain: 0.0,
        total: 0.0,
        alpha: parts[0].alpha,
        beta: parts[0].beta,
        lambda: parts[0].lambda,
        c: parts[0].c,
    };
    for p in parts {
        acc.speaking_speed += p.speaking_speed / n;
        acc.recon += p.recon / n;
        acc.kl_total += p.kl_total / n;
        acc.detailed_kl_gain += p.detailed_kl_gain / n;
        acc.total += p.total / n;
        for (s, k) in kl_per_layer.iter_mut().zip(&p.kl_per_layer) {
            *s += k / n;
        }
    }
    acc.kl_per_layer = kl_per_layer;
    acc
}

/// Owns parameters, optimizer state, and the sampling stream for one run.
pub struct Trainer {
    cfg: FullConfig,
    stats: SpeedStats,
    vocab_text: String,
    sample_rate: u32,
    hop: u32,
    store: ParamStore,
    opt: Adam,
    rng: Rng,
    step: u64,
    started: Instant,
}

impl Trainer {
    /// Fresh trainer. The corpus must have fitted speed stats and a
    /// vocabulary matching the config.
    pub fn new(cfg: FullConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        let stats = corpus.speed_stats.ok_or_else(|| {
            Error::Config("corpus has no fitted speed stats; call fit_speed_stats first".into())
        })?;
        if corpus.vocab.size() != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} ids, config expects {}",
                corpus.vocab.size(),
                cfg.model.vocab_size
            )));
        }
        let store = build_params(&cfg, cfg.train.seed)?;
        let rng = Rng::new(cfg.train.seed.wrapping_add(TRAIN_STREAM_SALT));
        let (sample_rate, hop) = corpus.framing();
        Ok(Self {
            cfg,
            stats,
            vocab_text: corpus.vocab.as_string(),
            sample_rate,
            hop,
            store,
            opt: Adam::new(),
            rng,
            step: 0,
            started: Instant::now(),
        })
    }

    /// Completed optimization steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &FullConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access, for ablations that re-initialize a subset
    /// (for example forcing a layer to start at q ≡ p).
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn speed_stats(&self) -> SpeedStats {
        self.stats
    }

    /// One optimization step over the next deterministic batch.
    ///
    /// Batches cycle through the training split in index order; the batch for
    /// step s (1-based) starts at ((s−1)·batch_size) mod train set size.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<LossBreakdown> {
        let train_ids = corpus.indices_of(Split::Train);
        if train_ids.is_empty() {
            return Err(Error::Config("corpus has no training utterances".into()));
        }
        let b = self.cfg.train.batch_size;
        let cur = self.step + 1;
        let lr = lr_schedule(cur, self.cfg.train.warmup_steps as u64, self.cfg.train.max_lr)?;
        let start = ((cur - 1) as usize * b) % train_ids.len();
        let batch_ids: Vec<usize> =
            (0..b).map(|j| train_ids[(start + j) % train_ids.len()]).collect();
        let mut grads: Option<Gradients> = None;
        let mut parts = Vec::with_capacity(b);
        for &id in &batch_ids {
            let utt = &corpus.utterances[id];
            let mut g = Graph::new();
            let x = g.input(utt.mel.frames.clone());
            let fwd = forward_train(&mut g, &self.store, &self.cfg, utt, Some(&mut self.rng))?;
            let d = speaking_speed_target(utt.t_mel(), utt.l_text(), &self.stats)?;
            let (terms, bd) = total_loss(&mut g, &self.cfg.train, &fwd, x, d)?;
            if !bd.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at step {cur} on utterance {id} (batch {batch_ids:?})",
                    bd.total
                )));
            }
            let gr = g.backward(terms.total)?;
            match &mut grads {
                None => grads = Some(gr),
                Some(a) => a.accumulate(&gr)?,
            }
            parts.push(bd);
        }
        let mut grads = grads.expect("batch_size ≥ 1");
        grads.scale_all(1.0 / b as f64);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {cur} (batch {batch_ids:?})"
            )));
        }
        if norm > self.cfg.train.grad_clip {
            grads.scale_all(self.cfg.train.grad_clip / norm);
        }
        self.opt.update(
            &mut self.store,
            &grads,
            lr,
            self.cfg.train.adam_beta1,
            self.cfg.train.adam_beta2,
            self.cfg.train.adam_eps,
        )?;
        self.step = cur;
        Ok(average_breakdowns(&parts))
    }

    /// Deterministic eval-mode pass over the validation split: posterior
    /// means, no dropout, no RNG consumption.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<TelemetryRecord> {
        let ids = corpus.indices_of(Split::Valid);
        if ids.is_empty() {
            return Err(Error::Config("corpus has no validation utterances".into()));
        }
        let layers = self.cfg.model.n_stacks + 1;
        let mut parts = Vec::with_capacity(ids.len());
        let mut pf = vec![0.0; layers];
        for &id in &ids {
            let utt = &corpus.utterances[id];
            let mut g = Graph::new();
            let x = g.input(utt.mel.frames.clone());
            let fwd = forward_train(&mut g, &self.store, &self.cfg, utt, None)?;
            let d = speaking_speed_target(utt.t_mel(), utt.l_text(), &self.stats)?;
            let (_, bd) = total_loss(&mut g, &self.cfg.train, &fwd, x, d)?;
            for (s, &k) in pf.iter_mut().zip(&fwd.kl_per_frame) {
                *s += g.value(k).data()[0] / ids.len() as f64;
            }
            parts.push(bd);
        }
        let loss = average_breakdowns(&parts);
        let mut cumulative_kl = Vec::with_capacity(layers);
        let mut run = 0.0;
        for &k in &pf {
            run += k;
            cumulative_kl.push(run);
        }
        Ok(TelemetryRecord {
            step: self.step,
            speed_mse: loss.speaking_speed,
            loss,
            kl_per_frame: pf,
            cumulative_kl,
            wall_secs: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Eval-mode alignments of the probe utterance (first validation entry):
    /// the initial alignment plus one per group, coarse to fine.
    pub fn probe_alignments(&self, corpus: &Corpus) -> Result<Vec<Tensor>> {
        let ids = corpus.indices_of(Split::Valid);
        let &id = ids.first().ok_or_else(|| {
            Error::Config("corpus has no validation utterances".into())
        })?;
        let utt = &corpus.utterances[id];
        let mut g = Graph::new();
        let fwd = forward_train(&mut g, &self.store, &self.cfg, utt, None)?;
        Ok(fwd.alignments)
    }

    /// Write a checkpoint restoring this exact training position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (t, m, v) = self.opt.state();
        let ck = Checkpoint {
            config_text: self.cfg.to_kv_string(),
            digest: self.cfg.digest(),
            vocab: self.vocab_text.clone(),
            min_ratio: self.stats.min_ratio(),
            max_ratio: self.stats.max_ratio(),
            sample_rate: self.sample_rate,
            hop: self.hop,
            step: self.step,
            rng_seed: self.rng.seed(),
            rng_word_pos: self.rng.word_pos(),
            adam_t: t,
            params: self.store.clone(),
            adam_m: m.clone(),
            adam_v: v.clone(),
        };
        save_checkpoint(path, &ck)
    }

    /// Resume from a checkpoint written under the same config digest.
    pub fn resume(cfg: FullConfig, corpus: &Corpus, path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.digest != cfg.digest() {
            return Err(Error::Config(format!(
                "checkpoint {} was written for config digest {}, current config digests to {}",
                path.display(),
                ck.digest,
                cfg.digest()
            )));
        }
        let mut t = Self::new(cfg, corpus)?;
        t.store = ck.params;
        t.opt = Adam::from_state(ck.adam_t, ck.adam_m, ck.adam_v);
        t.rng = Rng::restore(ck.rng_seed, ck.rng_word_pos);
        t.step = ck.step;
        Ok(t)
    }
}

/// One completed training run of an ablation grid.
pub struct AblationRun {
    pub name: String,
    pub cfg: FullConfig,
    /// Training breakdowns at step 1, every log interval, and the last step.
    pub history: Vec<(u64, LossBreakdown)>,
    /// Validation snapshots at every eval interval and the last step.
    pub evals: Vec<TelemetryRecord>,
    /// Probe-utterance alignments under the final parameters.
    pub alignments: Vec<Tensor>,
}

/// Train every variant to its configured step budget on the same corpus.
/// Seeds are whatever each config carries; passing configs differing only in
/// the quantity under study gives controlled comparisons.
pub fn run_ablation(corpus: &Corpus, variants: &[(String, FullConfig)]) -> Result<Vec<AblationRun>> {
    if variants.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ablation needs at least 2 configs, got {}",
            variants.len()
        )));
    }
    let mut runs = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let mut tr = Trainer::new(cfg.clone(), corpus)?;
        let total = cfg.train.total_steps;
        let mut history = Vec::new();
        let mut evals = Vec::new();
        for s in 1..=total {
            let bd = tr.train_step(corpus)?;
            if s == 1 || s % cfg.train.log_interval == 0 || s == total {
                history.push((s as u64, bd));
            }
            if s % cfg.train.eval_interval == 0 || s == total {
                evals.push(tr.evaluate(corpus)?);
            }
        }
        let alignments = tr.probe_alignments(corpus)?;
        runs.push(AblationRun { name: name.clone(), cfg: cfg.clone(), history, evals, alignments });
    }
    Ok(runs)
}
