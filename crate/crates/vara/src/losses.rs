//! Objective terms and their weighted combination.
//!
//! Everything is built as graph nodes so one backward pass covers the whole
//! objective. Per-utterance values are combined here; batch averaging is the
//! trainer's job.
//!
//! The detailed KL gain compares each layer's per-frame KL against a
//! gradient-detached reference `KL_ref = (c/(N+1))·Σᵢ KLᵢ` and penalizes
//! layers sitting below it: `gain = Σᵢ max(0, KL_ref − KLᵢ)`. Minimizing the
//! gain therefore pushes collapsed layers up without shrinking healthy ones
//! (the reference is a constant to the optimizer). An alternative reading
//! that instead penalizes layers above the reference,
//! `Σᵢ max(0, KLᵢ − KL_ref)`, is kept behind
//! [`TrainConfig::printed_gain_form`] for comparison runs.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::vdvae::TrainForward;
use crate::numerics::{Graph, TensorId};

/// Graph nodes of every objective term; feed `total` to backward.
pub struct LossTerms {
    pub speed: TensorId,
    pub recon: TensorId,
    pub kl_total: TensorId,
    pub kl_per_layer: Vec<TensorId>,
    pub gain: TensorId,
    pub total: TensorId,
}

/// Evaluated objective terms plus the weights that combined them.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub speaking_speed: f64,
    pub recon: f64,
    pub kl_total: f64,
    /// Raw per-layer KL sums, z0 first then groups coarse to fine.
    pub kl_per_layer: Vec<f64>,
    pub detailed_kl_gain: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub c: f64,
}

impl LossBreakdown {
    /// Recombination identity and KL non-negativity.
    pub fn verify(&self) -> Result<()> {
        let want = self.alpha * self.speaking_speed
            + self.recon
            + self.beta * self.kl_total
            + self.lambda * self.detailed_kl_gain;
        if (want - self.total).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(Error::Internal(format!(
                "loss breakdown mismatch: recombined {want}, stored {}",
                self.total
            )));
        }
        if let Some(bad) = self.kl_per_layer.iter().find(|&&k| !(k >= 0.0)) {
            return Err(Error::Internal(format!("negative per-layer KL {bad}")));
        }
        Ok(())
    }

    /// Telemetry CSV header for a model with `n_layers` latent layers.
    pub fn csv_header(n_layers: usize) -> String {
        let mut s = String::from("step,speed,recon,kl_total,gain,total");
        for i in 0..n_layers {
            s.push_str(&format!(",kl_{i}"));
        }
        s
    }

    /// One telemetry CSV row matching [`Self::csv_header`].
    pub fn csv_row(&self, step: u64) -> String {
        let mut s = format!(
            "{step},{},{},{},{},{}",
            self.speaking_speed, self.recon, self.kl_total, self.detailed_kl_gain, self.total
        );
        for k in &self.kl_per_layer {
            s.push_str(&format!(",{k}"));
        }
        s
    }
}

/// Relative Frobenius distance plus mean absolute log distance.
///
/// Both terms are invariant to scaling `x` and `x_hat` by one positive
/// constant, and the second is zero iff the two match exactly. Inputs must be
/// strictly positive (mel floor and decode head both guarantee it).
pub fn recon_loss(g: &mut Graph, x: TensorId, x_hat: TensorId) -> Result<TensorId> {
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(Error::InvalidArgument(format!(
            "recon_loss: shape {:?} vs {:?}",
            g.value(x).shape(),
            g.value(x_hat).shape()
        )));
    }
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff);
    let num = g.sum_all(sq);
    let num = g.sqrt(num)?;
    let xsq = g.square(x);
    let den = g.sum_all(xsq);
    let den = g.sqrt(den)?;
    let ratio = g.div(num, den)?;
    let lx = g.log(x)?;
    let lxh = g.log(x_hat)?;
    let ldiff = g.sub(lx, lxh)?;
    let labs = g.abs(ldiff);
    let lmean = g.mean_all(labs);
    g.add(ratio, lmean)
}

/// Sum of raw per-layer KL sums for one utterance.
pub fn kl_total(g: &mut Graph, kl_per_layer: &[TensorId]) -> Result<TensorId> {
    if kl_per_layer.is_empty() {
        return Err(Error::InvalidArgument("kl_total: no layers".into()));
    }
    for &k in kl_per_layer {
        let v = g.value(k).data()[0];
        if v < 0.0 {
            return Err(Error::Internal(format!("kl_total: negative layer KL {v}")));
        }
    }
    let mut acc = kl_per_layer[0];
    for &k in &kl_per_layer[1..] {
        acc = g.add(acc, k)?;
    }
    Ok(acc)
}

/// Detailed KL gain over per-frame per-layer KLs.
///
/// `printed_form` selects the above-reference penalty variant; see the
/// module docs. The reference is always gradient-detached.
pub fn detailed_kl_gain(
    g: &mut Graph,
    kl_per_frame: &[TensorId],
    c: f64,
    printed_form: bool,
) -> Result<TensorId> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("detailed_kl_gain: c = {c}, need > 0")));
    }
    if kl_per_frame.is_empty() {
        return Err(Error::InvalidArgument("detailed_kl_gain: no layers".into()));
    }
    let mut sum = kl_per_frame[0];
    for &k in &kl_per_frame[1..] {
        sum = g.add(sum, k)?;
    }
    let scaled = g.scale(sum, c / kl_per_frame.len() as f64);
    let kl_ref = g.stop_grad(scaled);
    detailed_kl_gain_with_ref(g, kl_per_frame, kl_ref, printed_form)
}

/// Gain against an externally supplied reference node.
///
/// Finite-difference checks of the full objective use this with the
/// reference frozen to its base value as a plain constant: the detached
/// reference means the objective's gradient is defined with `KL_ref` held
/// fixed, so the difference oracle must hold it fixed too.
pub fn detailed_kl_gain_with_ref(
    g: &mut Graph,
    kl_per_frame: &[TensorId],
    kl_ref: TensorId,
    printed_form: bool,
) -> Result<TensorId> {
    if kl_per_frame.is_empty() {
        return Err(Error::InvalidArgument("detailed_kl_gain: no layers".into()));
    }
    let mut acc: Option<TensorId> = None;
    for &k in kl_per_frame {
        let shortfall = if printed_form { g.sub(k, kl_ref)? } else { g.sub(kl_ref, k)? };
        let pos = g.relu(shortfall);
        acc = Some(match acc {
            None => pos,
            Some(a) => g.add(a, pos)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Combine a forward pass into the full objective for one utterance.
///
/// `x` is the ground-truth mel node and `d_true` the normalized speed
/// target. Weights come from the train config; `λ=0, α=0` reduces to the
/// plain β-VAE objective.
pub fn total_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    fwd: &TrainForward,
    x: TensorId,
    d_true: f64,
) -> Result<(LossTerms, LossBreakdown)> {
    if cfg.alpha < 0.0 || cfg.beta < 0.0 || cfg.lambda < 0.0 {
        return Err(Error::InvalidArgument("total_loss: negative weight".into()));
    }
    let target = g.scalar(d_true);
    let d_err = g.sub(fwd.d_hat, target)?;
    let speed = g.square(d_err);
    let recon = recon_loss(g, x, fwd.mel_hat)?;
    let kl = kl_total(g, &fwd.kl_raw)?;
    let gain = detailed_kl_gain(g, &fwd.kl_per_frame, cfg.gain_c, cfg.printed_gain_form)?;
    let s_speed = g.scale(speed, cfg.alpha);
    let s_kl = g.scale(kl, cfg.beta);
    let s_gain = g.scale(gain, cfg.lambda);
    let mut total = g.add(s_speed, recon)?;
    total = g.add(total, s_kl)?;
    total = g.add(total, s_gain)?;
    let breakdown = LossBreakdown {
        speaking_speed: g.value(speed).data()[0],
        recon: g.value(recon).data()[0],
        kl_total: g.value(kl).data()[0],
        kl_per_layer: fwd.kl_raw.iter().map(|&k| g.value(k).data()[0]).collect(),
        detailed_kl_gain: g.value(gain).data()[0],
        total: g.value(total).data()[0],
        alpha: cfg.alpha,
        beta: cfg.beta,
        lambda: cfg.lambda,
        c: cfg.gain_c,
    };
    breakdown.verify()?;
    let terms = LossTerms {
        speed,
        recon,
        kl_total: kl,
        kl_per_layer: fwd.kl_raw.clone(),
        gain,
        total,
    };
    Ok((terms, breakdown))
}
