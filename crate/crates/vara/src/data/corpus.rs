//! Corpus container, speaking-speed statistics and the dataset directory
//! format.
//!
//! On disk a corpus is a `manifest.json` plus one binary record per
//! utterance. A record is: magic `VARA`, format version (u16 LE), a tensor
//! count (u32 LE), then per tensor a rank, its extents (u32 LE each) and the
//! row-major payload as f32 LE. The in-memory features are already
//! f32-quantized, so save → load is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::mel::MelSpectrogram;
use crate::data::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const RECORD_MAGIC: &[u8; 4] = b"VARA";
const FORMAT_VERSION: u16 = 1;
/// Upper bound on a single tensor extent, to fail fast on corrupt headers.
const MAX_EXTENT: u32 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Min/max of mel-frames-per-token over the training split; the anchors of
/// speaking-speed normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedStats {
    min_ratio: f64,
    max_ratio: f64,
}

impl SpeedStats {
    pub fn new(min_ratio: f64, max_ratio: f64) -> Result<Self> {
        if !(min_ratio > 0.0 && max_ratio > min_ratio) {
            return Err(Error::Config(format!(
                "speed stats need 0 < min < max, got [{min_ratio}, {max_ratio}]"
            )));
        }
        Ok(Self { min_ratio, max_ratio })
    }

    pub fn min_ratio(&self) -> f64 {
        self.min_ratio
    }

    pub fn max_ratio(&self) -> f64 {
        self.max_ratio
    }

    /// Map a normalized speed back to a frames-per-token ratio.
    pub fn denormalize(&self, d: f64) -> f64 {
        self.min_ratio + d * (self.max_ratio - self.min_ratio)
    }
}

/// `d = clamp((T/L − min)/(max − min), 0, 1)`.
pub fn speaking_speed_target(t_mel: usize, l_text: usize, stats: &SpeedStats) -> Result<f64> {
    if l_text == 0 {
        return Err(Error::InvalidArgument("speed target needs L ≥ 1".into()));
    }
    let ratio = t_mel as f64 / l_text as f64;
    Ok(((ratio - stats.min_ratio) / (stats.max_ratio - stats.min_ratio)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub speaker_id: Option<u32>,
    pub mel: MelSpectrogram,
    /// Row-stochastic T×L frame-to-token map; synthetic corpora only.
    pub true_alignment: Option<Tensor>,
}

impl Utterance {
    pub fn t_mel(&self) -> usize {
        self.mel.len()
    }

    pub fn l_text(&self) -> usize {
        self.tokens.len()
    }

    pub fn ratio(&self) -> f64 {
        self.t_mel() as f64 / self.l_text() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub vocab: Vocab,
    pub speed_stats: Option<SpeedStats>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>, vocab: Vocab, splits: Vec<Split>) -> Result<Self> {
        if utterances.len() != splits.len() {
            return Err(Error::InvalidInput(format!(
                "{} utterances but {} split tags",
                utterances.len(),
                splits.len()
            )));
        }
        for (i, u) in utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(Error::InvalidInput(format!("utterance {i} has no tokens")));
            }
            if let Some(&bad) = u.tokens.iter().find(|&&t| t >= vocab.size()) {
                return Err(Error::InvalidInput(format!(
                    "utterance {i}: token id {bad} ≥ vocab size {}",
                    vocab.size()
                )));
            }
            if let Some(a) = &u.true_alignment {
                if a.rows() != u.t_mel() || a.cols() != u.l_text() {
                    return Err(Error::InvalidInput(format!(
                        "utterance {i}: alignment {}×{} vs mel {} and tokens {}",
                        a.rows(),
                        a.cols(),
                        u.t_mel(),
                        u.l_text()
                    )));
                }
                for r in 0..a.rows() {
                    let s: f64 = (0..a.cols()).map(|c| a.get2(r, c)).sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidInput(format!(
                            "utterance {i}: alignment row {r} sums to {s}"
                        )));
                    }
                }
            }
        }
        Ok(Self { utterances, vocab, speed_stats: None, splits })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fit min/max frame-per-token ratios on the training split and store
    /// them on the corpus.
    pub fn fit_speed_stats(&mut self) -> Result<SpeedStats> {
        let train = self.indices_of(Split::Train);
        if train.len() < 2 {
            return Err(Error::Config(format!(
                "speed stats need ≥ 2 training utterances, got {}",
                train.len()
            )));
        }
        let ratios: Vec<f64> = train.iter().map(|&i| self.utterances[i].ratio()).collect();
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Err(Error::Config(
                "all training ratios are equal; speed normalization is degenerate".into(),
            ));
        }
        let stats = SpeedStats::new(min, max)?;
        self.speed_stats = Some(stats);
        Ok(stats)
    }

    /// Common framing metadata (sample rate, hop), taken from the first
    /// utterance.
    pub fn framing(&self) -> (u32, u32) {
        self.utterances
            .first()
            .map(|u| (u.mel.sample_rate, u.mel.hop))
            .unwrap_or((0, 0))
    }
}

#[derive(Serialize, Deserialize)]
struct SpeedStatsDto {
    min_ratio: f64,
    max_ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct UttEntry {
    file: String,
    tokens: Vec<usize>,
    speaker: Option<u32>,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    vocab: String,
    sample_rate: u32,
    hop: u32,
    speed_stats: Option<SpeedStatsDto>,
    utterances: Vec<UttEntry>,
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn record_bytes(u: &Utterance) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = 1 + u.true_alignment.is_some() as u32;
    buf.extend_from_slice(&count.to_le_bytes());
    write_tensor(&mut buf, &u.mel.frames);
    if let Some(a) = &u.true_alignment {
        write_tensor(&mut buf, a);
    }
    buf
}

struct RecordReader<'a> {
    path: &'a Path,
    inner: io::BufReader<fs::File>,
}

impl<'a> RecordReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path, inner: io::BufReader::new(f) })
    }

    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "truncated record")
            } else {
                Error::io(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank == 0 || rank > 4 {
            return Err(Error::format(self.path, format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = self.u32()?;
            if e == 0 || e > MAX_EXTENT {
                return Err(Error::format(self.path, format!("tensor extent {e} out of range")));
            }
            numel = numel.checked_mul(e as usize).ok_or_else(|| {
                Error::format(self.path, "tensor extent product overflows")
            })?;
            shape.push(e as usize);
        }
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape, data)
    }
}

/// Write the manifest plus one record per utterance into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, (u, &split)) in corpus.utterances.iter().zip(&corpus.splits).enumerate() {
        let file = format!("utt_{i:05}.vara");
        let path = dir.join(&file);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&record_bytes(u)).map_err(|e| Error::io(&path, e))?;
        entries.push(UttEntry {
            file,
            tokens: u.tokens.clone(),
            speaker: u.speaker_id,
            split: split.as_str().to_string(),
        });
    }
    let (sample_rate, hop) = corpus.framing();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        vocab: corpus.vocab.as_string(),
        sample_rate,
        hop,
        speed_stats: corpus.speed_stats.map(|s| SpeedStatsDto {
            min_ratio: s.min_ratio,
            max_ratio: s.max_ratio,
        }),
        utterances: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization failed: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Load a corpus saved by [`save_corpus`]; ordering follows the manifest.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&mpath, format!("manifest is not valid JSON: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "manifest format version {} unsupported (this build reads {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let vocab = Vocab::from_chars(manifest.vocab.chars().collect())?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    let mut splits = Vec::with_capacity(manifest.utterances.len());
    for entry in &manifest.utterances {
        let path: PathBuf = dir.join(&entry.file);
        let mut r = RecordReader::open(&path)?;
        let magic = r.take(4)?;
        if magic != RECORD_MAGIC {
            return Err(Error::format(&path, "bad magic (not a feature record)"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("record format version {version} unsupported (this build reads {FORMAT_VERSION})"),
            ));
        }
        let count = r.u32()?;
        if !(1..=2).contains(&count) {
            return Err(Error::format(&path, format!("tensor count {count} out of range")));
        }
        let frames = r.tensor()?;
        let mel = MelSpectrogram::new(frames, manifest.sample_rate, manifest.hop)
            .map_err(|e| Error::format(&path, format!("bad mel payload: {e}")))?;
        let true_alignment = if count == 2 { Some(r.tensor()?) } else { None };
        let split = Split::parse(&entry.split).ok_or_else(|| {
            Error::format(&mpath, format!("unknown split tag {:?}", entry.split))
        })?;
        utterances.push(Utterance {
            tokens: entry.tokens.clone(),
            speaker_id: entry.speaker,
            mel,
            true_alignment,
        });
        splits.push(split);
    }
    let mut corpus = Corpus::new(utterances, vocab, splits)?;
    corpus.speed_stats = match manifest.speed_stats {
        Some(dto) => Some(SpeedStats::new(dto.min_ratio, dto.max_ratio)?),
        None => None,
    };
    Ok(corpus)
}

/// Write one mel feature matrix as a standalone record, in the same layout
/// as corpus utterance files (count 1, no alignment).
pub fn save_mel_record(path: &Path, frames: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&1u32.to_le_bytes());
    write_tensor(&mut buf, frames);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read the mel feature matrix (first tensor) of a record written by
/// [`save_mel_record`] or of a corpus utterance file.
pub fn load_mel_record(path: &Path) -> Result<Tensor> {
    let mut r = RecordReader::open(path)?;
    let magic = r.take(4)?;
    if magic != RECORD_MAGIC {
        return Err(Error::format(path, "bad magic (not a feature record)"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("record format version {version} unsupported (this build reads {FORMAT_VERSION})"),
        ));
    }
    let count = r.u32()?;
    if !(1..=2).contains(&count) {
        return Err(Error::format(path, format!("tensor count {count} out of range")));
    }
    r.tensor()
}
