//! Token-sequence encoder: embedding lookup, optional speaker FiLM, four
//! same-padded convolutions, and additive sinusoidal positional encoding.
//!
//! The output `kv` (L×D) serves as attention keys and values everywhere; its
//! temporal mean `pooled` is the t0 vector conditioning the top latent layer.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, TensorId};

/// Encoded text: attention keys/values and their temporal mean.
pub struct TextEncoding {
    /// L×D graph node.
    pub kv: TensorId,
    /// 1×D graph node; arithmetic mean of `kv` rows.
    pub pooled: TensorId,
    pub l_text: usize,
}

/// Standard sinusoidal table: PE[pos, 2i] = sin(pos/10000^(2i/D)),
/// PE[pos, 2i+1] = cos(pos/10000^(2i/D)).
pub fn positional_encoding(l: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional_encoding: dimension {d} must be even and positive"
        )));
    }
    if l == 0 {
        return Err(Error::InvalidArgument(
            "positional_encoding: zero positions".into(),
        ));
    }
    let mut data = Vec::with_capacity(l * d);
    for pos in 0..l {
        for col in 0..d {
            let i = col / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(if col % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(l, d, data)
}

/// Feature-wise linear modulation: γ ⊙ u + ξ with γ, ξ computed from the
/// speaker embedding by one FC layer each, broadcast over rows.
pub fn film(
    g: &mut Graph,
    u: TensorId,
    spk: TensorId,
    w_scale: TensorId,
    b_scale: TensorId,
    w_shift: TensorId,
    b_shift: TensorId,
) -> Result<TensorId> {
    let gamma = g.linear(spk, w_scale, Some(b_scale))?;
    let xi = g.linear(spk, w_shift, Some(b_shift))?;
    let scaled = g.mul_row_vec(u, gamma)?;
    g.add_row_vec(scaled, xi)
}

/// Register all text encoder parameters under the `text.` prefix.
///
/// FiLM scale biases start at one so modulation is the identity at
/// initialization; everything else follows the 1/sqrt(fan_in) rule.
pub fn add_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<()> {
    let e = cfg.text_embed_dim;
    let gain = cfg.init_gain;
    store.add_normal("text.embed", vec![cfg.vocab_size, e], gain / (e as f64).sqrt(), rng)?;
    if cfg.multi_speaker() {
        let ds = cfg.speaker_dim;
        store.add_normal("text.spk", vec![cfg.n_speakers, ds], gain / (ds as f64).sqrt(), rng)?;
        let std = gain / (ds as f64).sqrt();
        store.add_normal("text.film.scale.w", vec![ds, e], std, rng)?;
        store.insert("text.film.scale.b", vec![1, e], vec![1.0; e])?;
        store.add_normal("text.film.shift.w", vec![ds, e], std, rng)?;
        store.add_zeros("text.film.shift.b", vec![1, e])?;
    }
    let k = cfg.text_conv_kernel;
    let mut cin = e;
    for (i, &cout) in cfg.text_conv_channels.iter().enumerate() {
        let std = gain / ((k * cin) as f64).sqrt();
        store.add_normal(&format!("text.conv{i}.w"), vec![k, cin, cout], std, rng)?;
        store.add_zeros(&format!("text.conv{i}.b"), vec![1, cout])?;
        cin = cout;
    }
    Ok(())
}

/// Build the encoding for one token sequence.
///
/// Single-speaker configs skip FiLM entirely, so `speaker_id` is ignored
/// there; multi-speaker configs require it.
pub fn encode_text(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: &[usize],
    speaker_id: Option<u32>,
) -> Result<TextEncoding> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("encode_text: empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "encode_text: token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let table = g.param(store, "text.embed")?;
    let mut h = g.embed_rows(table, tokens)?;
    if cfg.multi_speaker() {
        let sid = speaker_id.ok_or_else(|| {
            Error::InvalidArgument("encode_text: speaker id required in multi-speaker config".into())
        })? as usize;
        if sid >= cfg.n_speakers {
            return Err(Error::InvalidInput(format!(
                "encode_text: speaker id {sid} outside table of {}",
                cfg.n_speakers
            )));
        }
        let spk_table = g.param(store, "text.spk")?;
        let spk = g.embed_rows(spk_table, &[sid])?;
        let ws = g.param(store, "text.film.scale.w")?;
        let bs = g.param(store, "text.film.scale.b")?;
        let wh = g.param(store, "text.film.shift.w")?;
        let bh = g.param(store, "text.film.shift.b")?;
        h = film(g, h, spk, ws, bs, wh, bh)?;
    }
    let n_convs = cfg.text_conv_channels.len();
    for i in 0..n_convs {
        let w = g.param(store, &format!("text.conv{i}.w"))?;
        let b = g.param(store, &format!("text.conv{i}.b"))?;
        h = g.conv1d(h, w, Some(b), cfg.text_conv_kernel, 1)?;
        if i + 1 < n_convs {
            h = g.gelu(h);
        }
    }
    let pe = g.input(positional_encoding(tokens.len(), cfg.attention_dim)?);
    let kv = g.add(h, pe)?;
    let pooled = g.mean_rows(kv)?;
    Ok(TextEncoding { kv, pooled, l_text: tokens.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FullConfig;
    use crate::numerics::{grad_check_sampled, Tensor};

    fn tiny_cfg() -> ModelConfig {
        let mut m = FullConfig::desk().model;
        m.text_embed_dim = 6;
        m.attention_dim = 8;
        m.n_heads = 2;
        m.text_conv_channels = vec![6, 4, 4, 8];
        m.text_conv_kernel = 3;
        m.vocab_size = 7;
        m
    }

    fn multi_cfg() -> ModelConfig {
        let mut m = tiny_cfg();
        m.n_speakers = 3;
        m.speaker_dim = 4;
        m
    }

    #[test]
    fn positional_encoding_matches_reference_values() {
        let pe = positional_encoding(3, 4).unwrap();
        for col in 0..4 {
            let expect = if col % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get2(0, col), expect, "row 0 col {col}");
        }
        assert!((pe.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(positional_encoding(4, 5).is_err());
        assert!(positional_encoding(0, 4).is_err());
    }

    #[test]
    fn film_identity_and_constant_rows() {
        let mut g = Graph::new();
        let u = g.input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let spk = g.input(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let w0 = g.input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let ones = g.input(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let zeros = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        // Zero scale weights with bias one, zero shift: identity.
        let out = film(&mut g, u, spk, w0, ones, w0, zeros).unwrap();
        assert_eq!(g.value(out).data(), g.value(u).data());
        // Zero scale (weights and bias): every row equals the shift vector.
        let shift = g.input(Tensor::matrix(1, 2, vec![0.7, -1.1]).unwrap());
        let out = film(&mut g, u, spk, w0, zeros, w0, shift).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out).get2(r, 0), 0.7);
            assert_eq!(g.value(out).get2(r, 1), -1.1);
        }
    }

    #[test]
    fn distinct_speakers_give_distinct_encodings() {
        let cfg = multi_cfg();
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let tokens = [1usize, 2, 3];
        let mut g = Graph::new();
        let a = encode_text(&mut g, &store, &cfg, &tokens, Some(0)).unwrap();
        let b = encode_text(&mut g, &store, &cfg, &tokens, Some(2)).unwrap();
        assert_ne!(g.value(a.kv).data(), g.value(b.kv).data());
    }

    #[test]
    fn multi_speaker_requires_valid_speaker_id() {
        let cfg = multi_cfg();
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            encode_text(&mut g, &store, &cfg, &[1, 2], None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            encode_text(&mut g, &store, &cfg, &[1, 2], Some(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_speaker_ignores_speaker_argument() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = encode_text(&mut g, &store, &cfg, &[4, 0, 2], None).unwrap();
        let b = encode_text(&mut g, &store, &cfg, &[4, 0, 2], Some(1)).unwrap();
        assert_eq!(g.value(a.kv).data(), g.value(b.kv).data());
    }

    #[test]
    fn kv_shape_follows_token_count() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        for l in [1usize, 2, 5, 33, 512] {
            let tokens: Vec<usize> = (0..l).map(|i| i % cfg.vocab_size).collect();
            let mut g = Graph::new();
            let enc = encode_text(&mut g, &store, &cfg, &tokens, None).unwrap();
            assert_eq!(g.value(enc.kv).shape(), &[l, cfg.attention_dim]);
            assert_eq!(g.value(enc.pooled).shape(), &[1, cfg.attention_dim]);
        }
    }

    #[test]
    fn token_out_of_vocab_is_invalid_input() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            encode_text(&mut g, &store, &cfg, &[0, 7], None),
            Err(Error::InvalidInput(_))
        ));
        assert!(encode_text(&mut g, &store, &cfg, &[], None).is_err());
    }

    #[test]
    fn permuting_tokens_changes_kv() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = encode_text(&mut g, &store, &cfg, &[1, 2, 3, 4], None).unwrap();
        let b = encode_text(&mut g, &store, &cfg, &[4, 3, 2, 1], None).unwrap();
        assert_ne!(g.value(a.kv).data(), g.value(b.kv).data());
    }

    #[test]
    fn pooled_is_temporal_mean_of_kv() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let enc = encode_text(&mut g, &store, &cfg, &[5, 1, 0, 6, 2], None).unwrap();
        let kv = g.value(enc.kv);
        let (l, d) = (kv.rows(), kv.cols());
        for c in 0..d {
            let mean: f64 = (0..l).map(|r| kv.get2(r, c)).sum::<f64>() / l as f64;
            assert!((g.value(enc.pooled).get2(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_embedding_film_and_conv_weights() {
        let cfg = multi_cfg();
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        add_params(&mut store, &cfg, &mut rng).unwrap();
        let mask: Vec<f64> = {
            let mut r = Rng::new(77);
            (0..5 * cfg.attention_dim).map(|_| r.normal()).collect()
        };
        let mut coord_rng = Rng::new(13);
        let err = grad_check_sampled(&mut store, 1e-5, 3, &mut coord_rng, |g, s| {
            let enc = encode_text(g, s, &cfg, &[1, 2, 3, 0, 6], Some(1))?;
            let m = g.input(Tensor::matrix(5, cfg.attention_dim, mask.clone())?);
            let weighted = g.mul(enc.kv, m)?;
            Ok(g.sum_all(weighted))
        })
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
        // The weighted readout must touch every parameter family.
        let mut g = Graph::new();
        let enc = encode_text(&mut g, &store, &cfg, &[1, 2, 3, 0, 6], Some(1)).unwrap();
        let m = g
            .input(Tensor::matrix(5, cfg.attention_dim, mask.clone()).unwrap());
        let weighted = g.mul(enc.kv, m).unwrap();
        let loss = g.sum_all(weighted);
        let grads = g.backward(loss).unwrap();
        for name in ["text.embed", "text.film.scale.w", "text.conv0.w", "text.conv3.b"] {
            let gd = grads.get(name).unwrap();
            assert!(gd.data().iter().any(|&v| v != 0.0), "zero gradient on {name}");
        }
    }
}
