//! Synthetic corpus with known ground truth.
//!
//! Every token id maps to a fixed smooth spectral prototype (a low-order
//! cosine mixture, so pooling keeps tokens distinguishable) and to a base
//! duration. An utterance is a random token string; its mel is the
//! per-token prototypes repeated for a jittered duration plus clamped noise,
//! and the frame-to-token map is recorded as a one-hot alignment. Durations
//! depend on the tokens, so frames-per-token genuinely varies with content
//! rather than being pure noise.

use crate::data::corpus::{Corpus, Split, Utterance};
use crate::data::mel::{quantize, MelSpectrogram};
use crate::data::tokenizer::Vocab;
use crate::error::Result;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    pub n_mels: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_utts: 32,
            vocab_size: 12,
            n_mels: 16,
            min_tokens: 8,
            max_tokens: 32,
            noise_std: 0.01,
        }
    }
}

/// Duration bounds in frames per token, inclusive.
pub const MIN_DURATION: usize = 2;
pub const MAX_DURATION: usize = 8;

fn token_hash(token: usize) -> u64 {
    (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5AFE
}

/// The fixed M-dim spectral prototype of a token: 0.05 plus two raised
/// cosines with token-dependent frequencies, phases and amplitudes. Entries
/// stay in [0.05, 0.45]. A pure function of (token, n_mels), so tests can
/// re-derive it for any corpus.
pub fn token_prototype(token: usize, n_mels: usize) -> Vec<f64> {
    let mut r = Rng::new(token_hash(token));
    let k1 = (1 + r.int_range(0, 2)) as f64;
    let k2 = (2 + r.int_range(0, 3)) as f64;
    let (p1, p2) = (r.uniform(), r.uniform());
    let a1 = 0.15 + 0.10 * r.uniform();
    let a2 = 0.08 + 0.07 * r.uniform();
    (0..n_mels)
        .map(|m| {
            let u = m as f64 / n_mels as f64;
            let c1 = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (k1 * u + p1)).cos();
            let c2 = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (k2 * u + p2)).cos();
            0.05 + a1 * c1 + a2 * c2
        })
        .collect()
}

/// Token-conditioned base duration in {3, 4, 5, 6} frames.
pub fn token_base_duration(token: usize) -> usize {
    3 + (token_hash(token) >> 7) as usize % 4
}

/// Generate a corpus; splits cycle train/train/…/valid/test per block of
/// ten. Speed stats are fitted when the training split supports it and left
/// unset otherwise (consumers that need them report the gap).
pub fn make_synthetic_corpus(rng: &mut Rng, cfg: &SynthConfig) -> Result<Corpus> {
    let vocab = Vocab::synthetic(cfg.vocab_size)?;
    let mut utterances = Vec::with_capacity(cfg.n_utts);
    let mut splits = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let l = rng.int_range(cfg.min_tokens as u64, cfg.max_tokens as u64) as usize;
        let tokens: Vec<usize> =
            (0..l).map(|_| rng.int_range(1, cfg.vocab_size as u64 - 1) as usize).collect();
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                let jitter = rng.int_range(0, 2) as i64 - 1;
                (token_base_duration(t) as i64 + jitter).clamp(
                    MIN_DURATION as i64,
                    MAX_DURATION as i64,
                ) as usize
            })
            .collect();
        let t_mel: usize = durations.iter().sum();

        let bound = 4.0 * cfg.noise_std;
        let mut frames = Vec::with_capacity(t_mel * cfg.n_mels);
        let mut align = vec![0.0; t_mel * l];
        let mut row = 0;
        for (j, (&tok, &dur)) in tokens.iter().zip(&durations).enumerate() {
            let proto = token_prototype(tok, cfg.n_mels);
            for _ in 0..dur {
                for &p in &proto {
                    let noise = (rng.normal() * cfg.noise_std).clamp(-bound, bound);
                    frames.push(quantize(p + noise));
                }
                align[row * l + j] = 1.0;
                row += 1;
            }
        }
        let mel = MelSpectrogram::new(Tensor::matrix(t_mel, cfg.n_mels, frames)?, 22050, 256)?;
        utterances.push(Utterance {
            tokens,
            speaker_id: None,
            mel,
            true_alignment: Some(Tensor::matrix(t_mel, l, align)?),
        });
        splits.push(match i % 10 {
            8 => Split::Valid,
            9 => Split::Test,
            _ => Split::Train,
        });
    }
    let mut corpus = Corpus::new(utterances, vocab, splits)?;
    let _ = corpus.fit_speed_stats();
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{load_corpus, save_corpus};

    fn small_cfg() -> SynthConfig {
        SynthConfig { n_utts: 12, n_mels: 8, ..Default::default() }
    }

    #[test]
    fn frame_count_equals_duration_sum_and_durations_bounded() {
        let c = make_synthetic_corpus(&mut Rng::new(1), &small_cfg()).unwrap();
        for u in &c.utterances {
            let a = u.true_alignment.as_ref().unwrap();
            let mut per_token = vec![0usize; u.l_text()];
            for r in 0..a.rows() {
                let j = (0..a.cols()).find(|&c| a.get2(r, c) == 1.0).unwrap();
                per_token[j] += 1;
            }
            assert_eq!(per_token.iter().sum::<usize>(), u.t_mel());
            for &d in &per_token {
                assert!((MIN_DURATION..=MAX_DURATION).contains(&d), "duration {d}");
            }
        }
    }

    #[test]
    fn alignment_rows_one_hot_and_monotonic() {
        let c = make_synthetic_corpus(&mut Rng::new(2), &small_cfg()).unwrap();
        for u in &c.utterances {
            let a = u.true_alignment.as_ref().unwrap();
            let mut prev = 0usize;
            for r in 0..a.rows() {
                let row: Vec<f64> = (0..a.cols()).map(|c| a.get2(r, c)).collect();
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), a.cols() - 1);
                let j = row.iter().position(|&v| v == 1.0).unwrap();
                assert!(j >= prev, "alignment argmax went backwards");
                prev = j;
            }
        }
    }

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let cfg = small_cfg();
        let a = make_synthetic_corpus(&mut Rng::new(7), &cfg).unwrap();
        let b = make_synthetic_corpus(&mut Rng::new(7), &cfg).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_corpus(&a, da.path()).unwrap();
        save_corpus(&b, db.path()).unwrap();
        for name in ["manifest.json", "utt_00000.vara", "utt_00011.vara"] {
            assert_eq!(
                std::fs::read(da.path().join(name)).unwrap(),
                std::fs::read(db.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
        let c = make_synthetic_corpus(&mut Rng::new(8), &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prototypes_reconstruct_mel_within_noise_bound() {
        let cfg = small_cfg();
        let c = make_synthetic_corpus(&mut Rng::new(3), &cfg).unwrap();
        let bound = 5.0 * cfg.noise_std;
        for u in &c.utterances {
            let a = u.true_alignment.as_ref().unwrap();
            for r in 0..a.rows() {
                let j = (0..a.cols()).find(|&c| a.get2(r, c) == 1.0).unwrap();
                let proto = token_prototype(u.tokens[j], cfg.n_mels);
                for m in 0..cfg.n_mels {
                    let diff = (u.mel.frames.get2(r, m) - proto[m]).abs();
                    assert!(diff <= bound, "residual {diff} exceeds 5σ");
                }
            }
        }
    }

    #[test]
    fn speed_stats_fitted_and_ratio_tracks_content() {
        let cfg = SynthConfig { n_utts: 64, n_mels: 8, ..Default::default() };
        let c = make_synthetic_corpus(&mut Rng::new(4), &cfg).unwrap();
        assert!(c.speed_stats.is_some());
        // Frames-per-token should correlate with the content-predicted mean
        // base duration, not be independent of it.
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for u in &c.utterances {
            let pred: f64 = u.tokens.iter().map(|&t| token_base_duration(t) as f64).sum::<f64>()
                / u.l_text() as f64;
            xs.push(pred);
            ys.push(u.ratio());
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!(corr > 0.5, "content/ratio correlation too weak: {corr}");
    }

    #[test]
    fn splits_cycle_per_block_of_ten() {
        let cfg = SynthConfig { n_utts: 20, n_mels: 8, ..Default::default() };
        let c = make_synthetic_corpus(&mut Rng::new(5), &cfg).unwrap();
        assert_eq!(c.indices_of(Split::Train).len(), 16);
        assert_eq!(c.indices_of(Split::Valid), vec![8, 18]);
        assert_eq!(c.indices_of(Split::Test), vec![9, 19]);
    }

    #[test]
    fn round_trips_through_disk() {
        let c = make_synthetic_corpus(&mut Rng::new(6), &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }
}
