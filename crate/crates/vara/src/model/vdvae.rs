//! Bottom-up encoder stacks and top-down decoder groups with per-layer
//! Gaussian prior/posterior heads.
//!
//! Training runs both paths: the bottom-up stacks pool the mel to coarser
//! scales, and each top-down group samples its latent from a posterior that
//! sees the matching bottom-up activation. Inference runs the top-down path
//! alone, sampling from priors; bottom-up parameters are never touched.
//!
//! Randomness order is fixed and identical across paths: z0 first, then one
//! draw block per group coarse-to-fine, then (training only) the speed
//! predictor's dropout mask. Keeping dropout last makes the reconstruction
//! identical between posterior and prior paths whenever q ≡ p.

use crate::config::{FullConfig, ModelConfig};
use crate::data::{MelSpectrogram, SpeedStats, Utterance};
use crate::error::{Error, Result};
use crate::model::attention::{self, MhaParams};
use crate::model::speed;
use crate::model::text_encoder::{self};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, TensorId};

/// Log-std outputs are clamped to this band before sampling and KL.
const LOG_STD_CLAMP: f64 = 8.0;
/// Decoded log-magnitudes are clamped to this band before exp; the lower
/// bound keeps outputs above the mel floor.
const LOG_MEL_CLAMP: f64 = 11.0;

/// Mean and log-std graph nodes of a diagonal Gaussian.
pub struct GaussianIds {
    pub mean: TensorId,
    pub log_std: TensorId,
}

/// Everything the losses and diagnostics need from a posterior-path forward.
pub struct TrainForward {
    /// T×M node, strictly positive.
    pub mel_hat: TensorId,
    /// 1×1 node, the predicted normalized speed.
    pub d_hat: TensorId,
    /// Per-layer KL summed over time and channels; z0 first, then groups
    /// coarse to fine. Length n_stacks + 1.
    pub kl_raw: Vec<TensorId>,
    /// `kl_raw` divided by the utterance's mel frame count.
    pub kl_per_frame: Vec<TensorId>,
    /// Initial alignment plus one refined alignment per group.
    pub alignments: Vec<Tensor>,
    pub t_mel: usize,
}

/// Prior-path synthesis output.
pub struct InferForward {
    pub mel_hat: MelSpectrogram,
    pub d_hat: f64,
    pub t_mel: usize,
    /// Set when the predicted frame count was clamped up to one coarsest
    /// frame; surfaced to callers as a warning.
    pub floored: bool,
    pub alignments: Vec<Tensor>,
}

fn add_linear(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    gain: f64,
    rng: &mut Rng,
) -> Result<()> {
    store.add_normal(&format!("{name}.w"), vec![din, dout], gain / (din as f64).sqrt(), rng)?;
    store.add_zeros(&format!("{name}.b"), vec![1, dout])
}

fn add_conv(
    store: &mut ParamStore,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    gain: f64,
    rng: &mut Rng,
) -> Result<()> {
    let std = gain / ((k * cin) as f64).sqrt();
    store.add_normal(&format!("{name}.w"), vec![k, cin, cout], std, rng)?;
    store.add_zeros(&format!("{name}.b"), vec![1, cout])
}

/// Bottleneck residual block: kernels 1,3,3,1 over C→B→B→B→C channels.
fn add_resblock(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    b: usize,
    gain: f64,
    rng: &mut Rng,
) -> Result<()> {
    add_conv(store, &format!("{prefix}.c0"), 1, c, b, gain, rng)?;
    add_conv(store, &format!("{prefix}.c1"), 3, b, b, gain, rng)?;
    add_conv(store, &format!("{prefix}.c2"), 3, b, b, gain, rng)?;
    add_conv(store, &format!("{prefix}.c3"), 1, b, c, gain, rng)
}

/// Four k=3 convolutions with GELU between: cin→mid→mid→mid→cout.
fn add_head(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    mid: usize,
    gain: f64,
    rng: &mut Rng,
) -> Result<()> {
    add_conv(store, &format!("{prefix}.c0"), 3, cin, mid, gain, rng)?;
    add_conv(store, &format!("{prefix}.c1"), 3, mid, mid, gain, rng)?;
    add_conv(store, &format!("{prefix}.c2"), 3, mid, mid, gain, rng)?;
    add_conv(store, &format!("{prefix}.c3"), 3, mid, cout, gain, rng)
}

/// Register encoder (`bu.`), decoder (`td.`), and output head (`dec.`)
/// parameters.
pub fn add_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<()> {
    let c = cfg.channels;
    let b = cfg.bottleneck();
    let z = cfg.latent_dim;
    let d = cfg.attention_dim;
    let gain = cfg.init_gain;
    add_conv(store, "bu.pre", cfg.pre_conv_kernel, cfg.n_mels, c, gain, rng)?;
    for s in 0..cfg.n_stacks {
        for blk in 0..cfg.blocks_per_stack[s] {
            add_resblock(store, &format!("bu.s{s}.b{blk}"), c, b, gain, rng)?;
        }
    }
    add_linear(store, "td.z0.q", c + d, 2 * z, gain, rng)?;
    add_linear(store, "td.z0.p", d, 2 * z, gain, rng)?;
    add_linear(store, "td.z0.inject", z, c, gain, rng)?;
    add_linear(store, "td.init.proj", cfg.g_list.len() * d, d, gain, rng)?;
    add_linear(store, "td.init.inject", d, c, gain, rng)?;
    for gi in 0..cfg.n_stacks {
        let p = format!("td.g{gi}");
        store.add_normal(&format!("{p}.att.wq"), vec![z, d], gain / (z as f64).sqrt(), rng)?;
        store.add_normal(&format!("{p}.att.wk"), vec![d, d], gain / (d as f64).sqrt(), rng)?;
        store.add_normal(&format!("{p}.att.wv"), vec![d, d], gain / (d as f64).sqrt(), rng)?;
        store.add_normal(&format!("{p}.att.wo"), vec![d, d], gain / (d as f64).sqrt(), rng)?;
        // Identity-plus-noise taps so refinement starts near pass-through.
        let taps = vec![
            0.01 * rng.normal(),
            1.0 + 0.01 * rng.normal(),
            0.01 * rng.normal(),
        ];
        store.insert(&format!("{p}.att.refine"), vec![1, 3], taps)?;
        add_linear(store, &format!("{p}.ctx"), d, c, gain, rng)?;
        add_head(store, &format!("{p}.p"), c, 2 * z + c, c, gain, rng)?;
        add_head(store, &format!("{p}.q"), 2 * c, 2 * z, c, gain, rng)?;
        add_linear(store, &format!("{p}.zproj"), z, c, gain, rng)?;
        let stack_idx = cfg.n_stacks - 1 - gi;
        for blk in 0..cfg.blocks_per_stack[stack_idx] {
            add_resblock(store, &format!("{p}.b{blk}"), c, b, gain, rng)?;
        }
    }
    add_linear(store, "dec.out", c, cfg.n_mels, gain, rng)
}

/// Pre-activation bottleneck block: x + c3(G(c2(G(c1(G(c0(G(x)))))))).
fn resblock(g: &mut Graph, store: &ParamStore, prefix: &str, x: TensorId) -> Result<TensorId> {
    let kernels = [1usize, 3, 3, 1];
    let mut h = x;
    for (i, &k) in kernels.iter().enumerate() {
        h = g.gelu(h);
        let w = g.param(store, &format!("{prefix}.c{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.c{i}.b"))?;
        h = g.conv1d(h, w, Some(b), k, 1)?;
    }
    g.add(x, h)
}

/// Four k=3 convolutions with GELU between them (none before the first or
/// after the last).
fn head_convs(g: &mut Graph, store: &ParamStore, prefix: &str, x: TensorId) -> Result<TensorId> {
    let mut h = x;
    for i in 0..4 {
        if i > 0 {
            h = g.gelu(h);
        }
        let w = g.param(store, &format!("{prefix}.c{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.c{i}.b"))?;
        h = g.conv1d(h, w, Some(b), 3, 1)?;
    }
    Ok(h)
}

fn sample_gaussian(
    g: &mut Graph,
    mean: TensorId,
    log_std: TensorId,
    rng: Option<&mut Rng>,
) -> Result<TensorId> {
    match rng {
        None => Ok(mean),
        Some(r) => {
            let shape = g.value(mean).shape().to_vec();
            let n = g.value(mean).len();
            let noise: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let nid = g.input(Tensor::new(shape, noise)?);
            let sd = g.exp(log_std);
            let scaled = g.mul(sd, nid)?;
            g.add(mean, scaled)
        }
    }
}

fn split_gaussian(g: &mut Graph, packed: TensorId, z: usize) -> Result<GaussianIds> {
    let mean = g.slice_cols(packed, 0, z)?;
    let raw = g.slice_cols(packed, z, z)?;
    let log_std = g.clamp(raw, -LOG_STD_CLAMP, LOG_STD_CLAMP)?;
    Ok(GaussianIds { mean, log_std })
}

/// Encoder: mel pre-conv, then per stack residual blocks followed by average
/// pooling. Returns post-pool activations (one per stack) and the global
/// temporal mean x0 of the coarsest activation.
pub fn bottom_up(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    mel: TensorId,
) -> Result<(Vec<TensorId>, TensorId)> {
    let t = g.value(mel).rows();
    let need = cfg.max_reduction();
    if t < need {
        return Err(Error::InvalidInput(format!(
            "bottom_up: {t} mel frames, need at least {need} (product of reductions)"
        )));
    }
    let w = g.param(store, "bu.pre.w")?;
    let b = g.param(store, "bu.pre.b")?;
    let mut h = g.conv1d(mel, w, Some(b), cfg.pre_conv_kernel, 1)?;
    let mut acts = Vec::with_capacity(cfg.n_stacks);
    for s in 0..cfg.n_stacks {
        for blk in 0..cfg.blocks_per_stack[s] {
            h = resblock(g, store, &format!("bu.s{s}.b{blk}"), h)?;
        }
        h = g.avg_pool_time(h, cfg.reductions[s])?;
        acts.push(h);
    }
    let x0 = g.mean_rows(h)?;
    Ok((acts, x0))
}

/// Prior and posterior over the top latent z0: q conditions on
/// concat(x0, t0), p on t0 alone.
pub fn top_group_distributions(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x0: TensorId,
    t0: TensorId,
) -> Result<(GaussianIds, GaussianIds)> {
    let q_in = g.concat_cols(&[x0, t0])?;
    let qw = g.param(store, "td.z0.q.w")?;
    let qb = g.param(store, "td.z0.q.b")?;
    let q_packed = g.linear(q_in, qw, Some(qb))?;
    let q = split_gaussian(g, q_packed, cfg.latent_dim)?;
    let p = top_prior(g, store, cfg, t0)?;
    Ok((q, p))
}

fn top_prior(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    t0: TensorId,
) -> Result<GaussianIds> {
    let pw = g.param(store, "td.z0.p.w")?;
    let pb = g.param(store, "td.z0.p.b")?;
    let p_packed = g.linear(t0, pw, Some(pb))?;
    split_gaussian(g, p_packed, cfg.latent_dim)
}

/// Linear head to log-magnitudes, clamped, then exp: output strictly
/// positive and above the mel floor.
pub fn decode_head(
    g: &mut Graph,
    store: &ParamStore,
    state: TensorId,
) -> Result<TensorId> {
    let w = g.param(store, "dec.out.w")?;
    let b = g.param(store, "dec.out.b")?;
    let y = g.linear(state, w, Some(b))?;
    let y = g.clamp(y, -LOG_MEL_CLAMP, LOG_MEL_CLAMP)?;
    Ok(g.exp(y))
}

struct TopDownOut {
    state: TensorId,
    kl_raw: Vec<TensorId>,
    alignments: Vec<Tensor>,
}

/// Shared top-down walk. `acts` present selects the posterior path (training
/// and evaluation); absent selects the prior path. `rng` present draws
/// samples; absent uses distribution means.
fn run_top_down(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    kv: TensorId,
    z0: TensorId,
    acts: Option<&[TensorId]>,
    mut rng: Option<&mut Rng>,
    scales: &[usize],
) -> Result<TopDownOut> {
    let n = cfg.n_stacks;
    let t_top = scales[n - 1];
    let proj_w = g.param(store, "td.init.proj.w")?;
    let proj_b = g.param(store, "td.init.proj.b")?;
    let init = attention::initial_context(g, kv, t_top, &cfg.g_list, proj_w, proj_b)?;
    let inj_w = g.param(store, "td.init.inject.w")?;
    let inj_b = g.param(store, "td.init.inject.b")?;
    let ctx_inj = g.linear(init.context, inj_w, Some(inj_b))?;
    let z0w = g.param(store, "td.z0.inject.w")?;
    let z0b = g.param(store, "td.z0.inject.b")?;
    let z0_row = g.linear(z0, z0w, Some(z0b))?;
    let seed = g.repeat_rows(z0_row, t_top)?;
    let mut state = g.add(seed, ctx_inj)?;
    let mut alignments = vec![init.a_init.clone()];
    let mut a_prev = g.input(init.a_init);
    let mut prev_z = z0;
    let mut kl_raw = Vec::with_capacity(n);
    for gi in 0..n {
        let stack_idx = n - 1 - gi;
        let t_g = scales[stack_idx];
        let p = format!("td.g{gi}");
        let (s_in, q_src) = if gi == 0 {
            (state, g.repeat_rows(z0, t_top)?)
        } else {
            let factor = cfg.reductions[stack_idx + 1];
            (
                g.upsample_time(state, factor, t_g)?,
                g.upsample_time(prev_z, factor, t_g)?,
            )
        };
        let taps = g.param(store, &format!("{p}.att.refine"))?;
        let mut a_ref = attention::refine_prev_alignment(g, a_prev, t_g, taps)?;
        if cfg.a_prev_gain != 1.0 {
            a_ref = g.scale(a_ref, cfg.a_prev_gain);
        }
        let mha = MhaParams {
            wq: g.param(store, &format!("{p}.att.wq"))?,
            wk: g.param(store, &format!("{p}.att.wk"))?,
            wv: g.param(store, &format!("{p}.att.wv"))?,
            wo: g.param(store, &format!("{p}.att.wo"))?,
            n_heads: cfg.n_heads,
        };
        let (ctx, a_next) = attention::residual_multi_head(g, q_src, kv, a_ref, &mha)?;
        let cw = g.param(store, &format!("{p}.ctx.w"))?;
        let cb = g.param(store, &format!("{p}.ctx.b"))?;
        let ctx_c = g.linear(ctx, cw, Some(cb))?;
        let bias = g.add(s_in, ctx_c)?;
        let p_out = head_convs(g, store, &format!("{p}.p"), bias)?;
        let z_dim = cfg.latent_dim;
        let prior = split_gaussian(g, p_out, z_dim)?;
        let h = g.slice_cols(p_out, 2 * z_dim, cfg.channels)?;
        let z = match acts {
            Some(acts) => {
                let q_in = g.concat_cols(&[acts[stack_idx], bias])?;
                let q_out = head_convs(g, store, &format!("{p}.q"), q_in)?;
                let post = split_gaussian(g, q_out, z_dim)?;
                let klm =
                    g.gaussian_kl(post.mean, post.log_std, prior.mean, prior.log_std)?;
                kl_raw.push(g.sum_all(klm));
                sample_gaussian(g, post.mean, post.log_std, rng.as_deref_mut())?
            }
            None => sample_gaussian(g, prior.mean, prior.log_std, rng.as_deref_mut())?,
        };
        let zw = g.param(store, &format!("{p}.zproj.w"))?;
        let zb = g.param(store, &format!("{p}.zproj.b"))?;
        let z_c = g.linear(z, zw, Some(zb))?;
        let with_z = g.add(bias, z_c)?;
        let mut st = g.add(with_z, h)?;
        for blk in 0..cfg.blocks_per_stack[stack_idx] {
            st = resblock(g, store, &format!("{p}.b{blk}"), st)?;
        }
        state = st;
        alignments.push(g.value(a_next).clone());
        a_prev = a_next;
        prev_z = z;
    }
    Ok(TopDownOut { state, kl_raw, alignments })
}

/// Posterior-path forward for one utterance. `rng` Some: sample latents and
/// apply speed-predictor dropout (training). `rng` None: use posterior means
/// and no dropout (evaluation; consumes no randomness).
pub fn forward_train(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FullConfig,
    utt: &Utterance,
    mut rng: Option<&mut Rng>,
) -> Result<TrainForward> {
    let m = &cfg.model;
    if utt.mel.frames.cols() != m.n_mels {
        return Err(Error::InvalidInput(format!(
            "forward_train: utterance has {} mel bins, config expects {}",
            utt.mel.frames.cols(),
            m.n_mels
        )));
    }
    let t_mel = utt.t_mel();
    let mel = g.input(utt.mel.frames.clone());
    let text = text_encoder::encode_text(g, store, m, &utt.tokens, utt.speaker_id)?;
    let (acts, x0) = bottom_up(g, store, m, mel)?;
    let (q0, p0) = top_group_distributions(g, store, m, x0, text.pooled)?;
    let z0 = sample_gaussian(g, q0.mean, q0.log_std, rng.as_deref_mut())?;
    let kl0 = {
        let klm = g.gaussian_kl(q0.mean, q0.log_std, p0.mean, p0.log_std)?;
        g.sum_all(klm)
    };
    let scales = m.scale_chain(t_mel);
    let td = run_top_down(g, store, m, text.kv, z0, Some(&acts), rng.as_deref_mut(), &scales)?;
    let mel_hat = decode_head(g, store, td.state)?;
    let d_in = if cfg.train.separate_speed_predictor {
        g.stop_grad(text.pooled)
    } else {
        z0
    };
    let d_hat = speed::predict_speed(g, store, m, d_in, rng)?;
    let mut kl_raw = vec![kl0];
    kl_raw.extend(td.kl_raw);
    let kl_per_frame = kl_raw
        .iter()
        .map(|&k| g.scale(k, 1.0 / t_mel as f64))
        .collect();
    Ok(TrainForward {
        mel_hat,
        d_hat,
        kl_raw,
        kl_per_frame,
        alignments: td.alignments,
        t_mel,
    })
}

/// Prior-path synthesis from text alone. The frame budget comes from the
/// speed predictor unless `override_frames` pins it.
#[allow(clippy::too_many_arguments)]
pub fn forward_infer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FullConfig,
    tokens: &[usize],
    speaker_id: Option<u32>,
    stats: &SpeedStats,
    override_frames: Option<usize>,
    rng: &mut Rng,
    sample_rate: u32,
    hop: u32,
) -> Result<InferForward> {
    let m = &cfg.model;
    let text = text_encoder::encode_text(g, store, m, tokens, speaker_id)?;
    let p0 = top_prior(g, store, m, text.pooled)?;
    let z0 = sample_gaussian(g, p0.mean, p0.log_std, Some(rng))?;
    let d_in = if cfg.train.separate_speed_predictor { text.pooled } else { z0 };
    let d_hat_id = speed::predict_speed(g, store, m, d_in, None)?;
    let d_hat = g.value(d_hat_id).data()[0];
    let (t_mel, floored) = match override_frames {
        Some(0) => {
            return Err(Error::InvalidArgument("forward_infer: zero frame override".into()))
        }
        Some(f) => (f, false),
        None => {
            let budget = speed::frames_from_speed(d_hat, text.l_text, stats, m.max_reduction())?;
            (budget.t_mel, budget.floored)
        }
    };
    if floored {
        log::warn!("predicted frame count clamped up to {t_mel} (one coarsest-scale frame)");
    }
    let scales = m.scale_chain(t_mel);
    let td = run_top_down(g, store, m, text.kv, z0, None, Some(rng), &scales)?;
    let mel_hat_id = decode_head(g, store, td.state)?;
    let mel_hat = MelSpectrogram::new(g.value(mel_hat_id).clone(), sample_rate, hop)?;
    Ok(InferForward { mel_hat, d_hat, t_mel, floored, alignments: td.alignments })
}
