//! Speaking-speed predictor: a two-layer MLP on the top latent that outputs
//! the normalized speed d̂ ∈ (0,1), and the arithmetic converting d̂ into an
//! inference frame budget.

use crate::config::{FullConfig, ModelConfig};
use crate::data::SpeedStats;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, TensorId};

/// Width of the predictor input under the current ablation setting: the top
/// latent z0 when jointly trained, the pooled text encoding when separate.
pub fn input_dim(cfg: &FullConfig) -> usize {
    if cfg.train.separate_speed_predictor {
        cfg.model.attention_dim
    } else {
        cfg.model.latent_dim
    }
}

/// Register predictor parameters under the `speed.` prefix. Layer sizes
/// depend on the separate-predictor ablation flag, which is part of the
/// config digest, so checkpoints cannot mix the two layouts.
pub fn add_params(store: &mut ParamStore, cfg: &FullConfig, rng: &mut Rng) -> Result<()> {
    let din = input_dim(cfg);
    let h = cfg.model.speed_hidden;
    let gain = cfg.model.init_gain;
    store.add_normal("speed.fc1.w", vec![din, h], gain / (din as f64).sqrt(), rng)?;
    store.add_zeros("speed.fc1.b", vec![1, h])?;
    store.insert("speed.ln.g", vec![1, h], vec![1.0; h])?;
    store.add_zeros("speed.ln.b", vec![1, h])?;
    store.add_normal("speed.fc2.w", vec![h, 1], gain / (h as f64).sqrt(), rng)?;
    store.add_zeros("speed.fc2.b", vec![1, 1])?;
    Ok(())
}

/// sigmoid(FC2(dropout(layer_norm(relu(FC1(x)))))) on a 1×K input. Dropout
/// is active only when `rng` is provided (training mode); without it the
/// call is deterministic and consumes no randomness.
pub fn predict_speed(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: TensorId,
    rng: Option<&mut Rng>,
) -> Result<TensorId> {
    let w1 = g.param(store, "speed.fc1.w")?;
    let b1 = g.param(store, "speed.fc1.b")?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h);
    let h = g.layer_norm_rows(h)?;
    let ln_g = g.param(store, "speed.ln.g")?;
    let ln_b = g.param(store, "speed.ln.b")?;
    let h = g.mul_row_vec(h, ln_g)?;
    let h = g.add_row_vec(h, ln_b)?;
    let h = match rng {
        Some(r) => g.dropout(h, cfg.speed_dropout, r, true)?,
        None => h,
    };
    let w2 = g.param(store, "speed.fc2.w")?;
    let b2 = g.param(store, "speed.fc2.b")?;
    let y = g.linear(h, w2, Some(b2))?;
    Ok(g.sigmoid(y))
}

/// Inference frame budget derived from a predicted speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameBudget {
    /// Output mel frame count.
    pub t_mel: usize,
    /// Frames at the coarsest scale: ceil(t_mel / max_reduction).
    pub t_max_red: usize,
    /// True when the raw frame count fell below `max_reduction` and was
    /// clamped up; callers surface this as a warning.
    pub floored: bool,
}

/// Convert d̂ to frames: denormalize through the stored corpus speed range,
/// multiply by the token count, round, and floor at one coarsest-scale
/// frame. Stats validity is enforced by [`SpeedStats`] construction.
pub fn frames_from_speed(
    d_hat: f64,
    l_text: usize,
    stats: &SpeedStats,
    max_reduction: usize,
) -> Result<FrameBudget> {
    if l_text == 0 {
        return Err(Error::InvalidArgument("frames_from_speed: L must be >= 1".into()));
    }
    if max_reduction == 0 {
        return Err(Error::InvalidArgument(
            "frames_from_speed: max reduction must be >= 1".into(),
        ));
    }
    if !d_hat.is_finite() {
        return Err(Error::Numeric(format!(
            "frames_from_speed: non-finite speed {d_hat}"
        )));
    }
    let ratio = stats.denormalize(d_hat.clamp(0.0, 1.0));
    let raw = (ratio * l_text as f64).round() as usize;
    let floored = raw < max_reduction;
    let t_mel = raw.max(max_reduction);
    Ok(FrameBudget { t_mel, t_max_red: t_mel.div_ceil(max_reduction), floored })
}

/// Squared error between target and predicted normalized speeds.
pub fn speed_loss(d: f64, d_hat: f64) -> f64 {
    (d - d_hat) * (d - d_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::speaking_speed_target;
    use crate::numerics::Tensor;

    fn cfg() -> FullConfig {
        let mut c = FullConfig::desk();
        c.model.latent_dim = 4;
        c.model.speed_hidden = 6;
        c
    }

    fn store_for(c: &FullConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(seed);
        add_params(&mut s, c, &mut rng).unwrap();
        s
    }

    #[test]
    fn output_is_strictly_inside_unit_interval() {
        let c = cfg();
        let s = store_for(&c, 3);
        for seed in 0..5u64 {
            let mut g = Graph::new();
            let mut r = Rng::new(100 + seed);
            let x = g.input(Tensor::matrix(1, 4, (0..4).map(|_| 10.0 * r.normal()).collect()).unwrap());
            let y = predict_speed(&mut g, &s, &c.model, x, None).unwrap();
            let v = g.value(y).data()[0];
            assert!(v > 0.0 && v < 1.0, "prediction {v} escaped (0,1)");
        }
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let c = cfg();
        let mut s = store_for(&c, 3);
        s.zero_matching("speed.");
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let y = predict_speed(&mut g, &s, &c.model, x, None).unwrap();
        assert_eq!(g.value(y).data()[0], 0.5);
    }

    #[test]
    fn eval_mode_is_deterministic_and_training_dropout_is_not_identity() {
        let c = cfg();
        let s = store_for(&c, 9);
        let xv = Tensor::matrix(1, 4, vec![0.4, 0.1, -0.6, 1.2]).unwrap();
        let mut g = Graph::new();
        let x = g.input(xv.clone());
        let a = predict_speed(&mut g, &s, &c.model, x, None).unwrap();
        let b = predict_speed(&mut g, &s, &c.model, x, None).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        // Training mode consumes randomness; across many seeds at rate 0.1
        // some mask must differ from identity.
        let eval_v = g.value(a).data()[0];
        let mut saw_change = false;
        for seed in 0..20 {
            let mut g = Graph::new();
            let x = g.input(xv.clone());
            let mut r = Rng::new(seed);
            let y = predict_speed(&mut g, &s, &c.model, x, Some(&mut r)).unwrap();
            if (g.value(y).data()[0] - eval_v).abs() > 1e-12 {
                saw_change = true;
            }
        }
        assert!(saw_change, "dropout never altered the prediction");
    }

    #[test]
    fn frame_budget_endpoints_and_worked_example() {
        let stats = SpeedStats::new(1.0, 6.0).unwrap();
        // d̂ = 0 lands on the minimum ratio.
        let b = frames_from_speed(0.0, 10, &stats, 4).unwrap();
        assert_eq!(b.t_mel, 10);
        // d̂ = 1, L = 10, max ratio 6, max reduction 16.
        let b = frames_from_speed(1.0, 10, &stats, 16).unwrap();
        assert_eq!(b.t_mel, 60);
        assert_eq!(b.t_max_red, 4);
        assert!(!b.floored);
    }

    #[test]
    fn tiny_predictions_floor_at_the_coarsest_frame() {
        let stats = SpeedStats::new(0.5, 1.0).unwrap();
        let b = frames_from_speed(0.0, 2, &stats, 8).unwrap();
        assert_eq!(b.t_mel, 8);
        assert_eq!(b.t_max_red, 1);
        assert!(b.floored);
    }

    #[test]
    fn frames_round_trip_back_to_speed_within_rounding_slack() {
        let stats = SpeedStats::new(2.0, 6.0).unwrap();
        let l = 10;
        let slack = 1.0 / (l as f64 * (stats.max_ratio() - stats.min_ratio()));
        for d in [0.0, 0.12, 0.37, 0.5, 0.81, 1.0] {
            let b = frames_from_speed(d, l, &stats, 4).unwrap();
            let back = speaking_speed_target(b.t_mel, l, &stats).unwrap();
            assert!(
                (back - d).abs() <= slack + 1e-12,
                "d={d} -> T={} -> {back}, slack {slack}",
                b.t_mel
            );
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let stats = SpeedStats::new(1.0, 2.0).unwrap();
        assert!(frames_from_speed(0.5, 0, &stats, 4).is_err());
        assert!(frames_from_speed(0.5, 5, &stats, 0).is_err());
        assert!(frames_from_speed(f64::NAN, 5, &stats, 4).is_err());
    }

    #[test]
    fn speed_loss_examples() {
        assert_eq!(speed_loss(0.4, 0.4), 0.0);
        assert_eq!(speed_loss(1.0, 0.0), 1.0);
        assert!((speed_loss(0.3, 0.5) - 0.04).abs() < 1e-15);
    }
}
