//! Operator entry point: corpus preparation, training, synthesis, KL
//! diagnostics, and ablation grids.
//!
//! Every subcommand is a batch job: it reads flags, writes files under
//! `--out`, prints a short summary, and exits. Exit codes: 0 success,
//! 2 usage or configuration error, 3 I/O or file-format error, 4 numeric
//! failure. Existing outputs are never overwritten unless `--force` is
//! given. `VARA_LOG_LEVEL` (error, info, or debug) controls diagnostics on
//! stderr.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vara::config::FullConfig;
use vara::data::{
    load_corpus, make_synthetic_corpus, save_corpus, save_mel_record, Corpus, SpeedStats, Split,
    SynthConfig, Vocab,
};
use vara::losses::LossBreakdown;
use vara::model::vdvae::forward_infer;
use vara::numerics::{Graph, Rng, Tensor};
use vara::report::{read_csv, write_alignment_csv, write_csv, write_pgm};
use vara::trainer::{load_checkpoint, lr_schedule, run_ablation, TelemetryRecord, Trainer};
use vara::{Error, Result};

#[derive(Parser)]
#[command(name = "vara", version, about = "Non-autoregressive acoustic model workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus and save it to a directory.
    MakeSynthetic {
        /// Corpus generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        /// Vocabulary size including the UNK id.
        #[arg(long, default_value_t = 13)]
        vocab: usize,
        /// Mel channels per frame.
        #[arg(long, default_value_t = 16)]
        n_mels: usize,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Train a model, writing telemetry, checkpoints, and probe heatmaps.
    Train {
        /// Config file in KEY=VALUE form.
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for telemetry, checkpoints, and heatmaps.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config override, repeatable (for example --set train.beta=1.0).
        #[arg(long = "set", value_name = "KEY=VAL")]
        set: Vec<String>,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Synthesize a mel spectrogram from text with a trained checkpoint.
    Synthesize {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input text, tokenized with the checkpoint's vocabulary.
        #[arg(long)]
        text: String,
        /// Speaker id, required for multi-speaker checkpoints.
        #[arg(long)]
        speaker: Option<u32>,
        /// Pin the output frame count instead of using the speed predictor.
        #[arg(long)]
        frames: Option<usize>,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Report per-layer and cumulative KL on the validation split.
    DiagnoseKl {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Per-frame KL below this counts as posterior collapse.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Train every variant in a grid file and write a comparison summary.
    Ablate {
        /// Grid file: shared KEY=VALUE lines, then one [name] section of
        /// overrides per variant.
        #[arg(long)]
        grid: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_logging().and_then(|()| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Internal(_) => 1,
    }
}

fn init_logging() -> Result<()> {
    let level = std::env::var("VARA_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(Error::InvalidArgument(format!(
            "VARA_LOG_LEVEL must be error, info, or debug, got {level:?}"
        )));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init()
        .map_err(|e| Error::Internal(format!("logger: {e}")))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::MakeSynthetic { seed, n, vocab, n_mels, out, force } => {
            cmd_make_synthetic(seed, n, vocab, n_mels, &out, force)
        }
        Cmd::Train { config, data, out, resume, set, force } => {
            cmd_train(&config, &data, &out, resume.as_deref(), &set, force)
        }
        Cmd::Synthesize { ckpt, text, speaker, frames, seed, out, force } => {
            cmd_synthesize(&ckpt, &text, speaker, frames, seed, &out, force)
        }
        Cmd::DiagnoseKl { ckpt, data, out, threshold, force } => {
            cmd_diagnose_kl(&ckpt, &data, &out, threshold, force)
        }
        Cmd::Ablate { grid, data, out, force } => cmd_ablate(&grid, &data, &out, force),
    }
}

/// Refuse to overwrite `path` unless `--force` was given.
fn guard(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::io(
            path,
            io::Error::new(io::ErrorKind::AlreadyExists, "output exists; pass --force to overwrite"),
        ));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Load a corpus and make sure speed stats are available, fitting them from
/// the training split when the manifest carries none.
fn load_corpus_with_stats(dir: &Path) -> Result<Corpus> {
    let mut corpus = load_corpus(dir)?;
    if corpus.speed_stats.is_none() {
        corpus.fit_speed_stats()?;
        log::info!("corpus manifest had no speed stats; fitted from the training split");
    }
    Ok(corpus)
}

fn cmd_make_synthetic(
    seed: u64,
    n: usize,
    vocab: usize,
    n_mels: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let cfg = SynthConfig { n_utts: n, vocab_size: vocab, n_mels, ..SynthConfig::default() };
    let mut rng = Rng::new(seed);
    let corpus = make_synthetic_corpus(&mut rng, &cfg)?;
    ensure_dir(out)?;
    guard(&out.join("manifest.json"), force)?;
    save_corpus(&corpus, out)?;
    let stats = corpus
        .speed_stats
        .ok_or_else(|| Error::Internal("synthetic corpus lacks speed stats".into()))?;
    let count = |s: Split| corpus.indices_of(s).len();
    println!(
        "wrote {} utterances to {} (train {}, valid {}, test {})",
        corpus.len(),
        out.display(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test)
    );
    println!(
        "speaking-speed ratio min={} max={}",
        stats.min_ratio(),
        stats.max_ratio()
    );
    Ok(())
}

/// Write one alignment set as PGM heatmaps: the rule-based initial diagonal
/// plus one refined map per hierarchy layer, coarse to fine.
fn write_probe_heatmaps(out: &Path, prefix: &str, alignments: &[Tensor]) -> Result<()> {
    for (k, a) in alignments.iter().enumerate() {
        let name = if k == 0 {
            format!("{prefix}_initial.pgm")
        } else {
            format!("{prefix}_layer{k}.pgm")
        };
        write_pgm(&out.join(name), a)?;
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    set: &[String],
    force: bool,
) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut cfg = FullConfig::parse_kv(&text)?;
    for kv in set {
        cfg.apply_set(kv)?;
    }
    cfg.validate()?;
    let corpus = load_corpus_with_stats(data)?;
    if corpus.indices_of(Split::Valid).is_empty() {
        return Err(Error::Config("corpus has no validation split".into()));
    }
    // Construct the trainer before touching the output directory, so
    // config/data incompatibilities leave no artifacts behind.
    let mut tr = match resume {
        Some(ck) => Trainer::resume(cfg.clone(), &corpus, ck)?,
        None => Trainer::new(cfg.clone(), &corpus)?,
    };
    ensure_dir(out)?;
    let telemetry_path = out.join("telemetry.csv");
    for marker in ["telemetry.csv", "config.kv", "ck_final.bin"] {
        guard(&out.join(marker), force)?;
    }
    let cfg_echo = out.join("config.kv");
    fs::write(&cfg_echo, cfg.to_kv_string()).map_err(|e| Error::io(&cfg_echo, e))?;
    let total = cfg.train.total_steps as u64;
    let log_every = cfg.train.log_interval as u64;
    let ck_every = cfg.train.checkpoint_interval as u64;
    let n_layers = cfg.model.n_stacks + 1;

    write_probe_heatmaps(out, &format!("probe_step{:06}", tr.step()), &tr.probe_alignments(&corpus)?)?;
    let mut telemetry: Vec<String> = Vec::new();
    let start_step = tr.step();
    if start_step >= total {
        log::info!("checkpoint already at step {start_step}; nothing to train");
    }
    while tr.step() < total {
        let bd = tr.train_step(&corpus)?;
        let s = tr.step();
        if s % log_every == 0 {
            let lr = lr_schedule(s, cfg.train.warmup_steps as u64, cfg.train.max_lr)?;
            println!(
                "step {s}/{total} lr {lr:.3e} total {:.4} recon {:.4} kl {:.4} speed {:.5}",
                bd.total, bd.recon, bd.kl_total, bd.speaking_speed
            );
            telemetry.push(tr.evaluate(&corpus)?.csv_row());
            write_csv(&telemetry_path, &TelemetryRecord::csv_header(n_layers), &telemetry)?;
        }
        if s % ck_every == 0 && s < total {
            tr.save(&out.join(format!("ck_step{s:06}.bin")))?;
            write_probe_heatmaps(out, &format!("probe_step{s:06}"), &tr.probe_alignments(&corpus)?)?;
        }
    }
    tr.save(&out.join("ck_final.bin"))?;
    write_probe_heatmaps(out, &format!("probe_step{:06}", tr.step()), &tr.probe_alignments(&corpus)?)?;
    if telemetry.is_empty() {
        write_csv(&telemetry_path, &TelemetryRecord::csv_header(n_layers), &telemetry)?;
    }
    let final_eval = tr.evaluate(&corpus)?;
    println!(
        "done: step {} of {total}, validation total {:.4}, speed MSE {:.5}, checkpoint {}",
        tr.step(),
        final_eval.loss.total,
        final_eval.speed_mse,
        out.join("ck_final.bin").display()
    );
    Ok(())
}

fn cmd_synthesize(
    ckpt: &Path,
    text: &str,
    speaker: Option<u32>,
    frames: Option<usize>,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = FullConfig::parse_kv(&ck.config_text)?;
    let vocab = Vocab::from_chars(ck.vocab.chars().collect())?;
    if vocab.size() != cfg.model.vocab_size {
        return Err(Error::format(
            ckpt,
            format!(
                "stored vocabulary has {} ids but the config expects {}",
                vocab.size(),
                cfg.model.vocab_size
            ),
        ));
    }
    let stats = SpeedStats::new(ck.min_ratio, ck.max_ratio)?;
    let tokens = vocab.tokenize(text);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("--text is empty".into()));
    }

    ensure_dir(out)?;
    let mut outputs = vec!["mel.vara".to_string(), "summary.txt".to_string()];
    for k in 0..=cfg.model.n_stacks {
        let stem = if k == 0 { "align_initial".to_string() } else { format!("align_layer{k}") };
        outputs.push(format!("{stem}.csv"));
        outputs.push(format!("{stem}.pgm"));
    }
    for name in &outputs {
        guard(&out.join(name), force)?;
    }

    let mut g = Graph::new();
    let mut rng = Rng::new(seed);
    let fwd = forward_infer(
        &mut g,
        &ck.params,
        &cfg,
        &tokens,
        speaker,
        &stats,
        frames,
        &mut rng,
        ck.sample_rate,
        ck.hop,
    )?;

    save_mel_record(&out.join("mel.vara"), &fwd.mel_hat.frames)?;
    for (k, a) in fwd.alignments.iter().enumerate() {
        let stem = if k == 0 { "align_initial".to_string() } else { format!("align_layer{k}") };
        write_alignment_csv(&out.join(format!("{stem}.csv")), a, k)?;
        write_pgm(&out.join(format!("{stem}.pgm")), a)?;
    }
    let summary = format!(
        "text={text}\ntokens={}\nframes={}\nspeed={}\nfloored={}\nseed={seed}\nsample_rate={}\nhop={}\n",
        tokens.len(),
        fwd.t_mel,
        fwd.d_hat,
        fwd.floored,
        ck.sample_rate,
        ck.hop
    );
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "synthesized {} frames from {} tokens (predicted speed {:.4}) into {}",
        fwd.t_mel,
        tokens.len(),
        fwd.d_hat,
        out.display()
    );
    Ok(())
}

fn cmd_diagnose_kl(ckpt: &Path, data: &Path, out: &Path, threshold: f64, force: bool) -> Result<()> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("--threshold must be positive, got {threshold}")));
    }
    let ck = load_checkpoint(ckpt)?;
    let cfg = FullConfig::parse_kv(&ck.config_text)?;
    let corpus = load_corpus_with_stats(data)?;
    let tr = Trainer::resume(cfg, &corpus, ckpt)?;
    let rec = tr.evaluate(&corpus)?;

    ensure_dir(out)?;
    guard(&out.join("kl_layers.csv"), force)?;
    guard(&out.join("kl_cumulative.csv"), force)?;
    let layer_rows: Vec<String> = rec
        .kl_per_frame
        .iter()
        .enumerate()
        .map(|(k, v)| format!("{k},{v},{}", u8::from(*v < threshold)))
        .collect();
    write_csv(&out.join("kl_layers.csv"), "layer,kl_per_frame,collapsed", &layer_rows)?;
    let cum_rows: Vec<String> = rec
        .cumulative_kl
        .iter()
        .enumerate()
        .map(|(k, v)| format!("{k},{v}"))
        .collect();
    write_csv(&out.join("kl_cumulative.csv"), "layer,cumulative_kl", &cum_rows)?;

    let collapsed: Vec<usize> = rec
        .kl_per_frame
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < threshold)
        .map(|(k, _)| k)
        .collect();
    for &k in &collapsed {
        println!(
            "layer {k} collapsed: per-frame KL {} < {threshold}",
            rec.kl_per_frame[k]
        );
    }
    if collapsed.is_empty() {
        println!(
            "no collapsed layers: all {} per-frame KLs >= {threshold}",
            rec.kl_per_frame.len()
        );
    }
    println!("wrote kl_layers.csv and kl_cumulative.csv to {}", out.display());
    Ok(())
}

/// Parse a grid file into shared override lines and named variant sections.
///
/// Lines before the first `[name]` header apply to every variant; blank
/// lines and `#` comments are skipped. Section names become file names, so
/// they are restricted to ASCII letters, digits, `-`, and `_`.
fn parse_grid(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<String>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut shared = Vec::new();
    let mut variants: Vec<(String, Vec<String>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if name.is_empty()
                || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::format(
                    path,
                    format!("line {}: bad variant name {name:?}", i + 1),
                ));
            }
            if variants.iter().any(|(n, _)| n == name) {
                return Err(Error::format(
                    path,
                    format!("line {}: duplicate variant {name:?}", i + 1),
                ));
            }
            variants.push((name.to_string(), Vec::new()));
        } else if !line.contains('=') {
            return Err(Error::format(
                path,
                format!("line {}: expected KEY=VALUE or [name], got {line:?}", i + 1),
            ));
        } else {
            match variants.last_mut() {
                Some((_, overrides)) => overrides.push(line.to_string()),
                None => shared.push(line.to_string()),
            }
        }
    }
    Ok((shared, variants))
}

fn cmd_ablate(grid: &Path, data: &Path, out: &Path, force: bool) -> Result<()> {
    let (shared, sections) = parse_grid(grid)?;
    if sections.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "grid file {} defines no variants",
            grid.display()
        )));
    }
    let mut variants = Vec::with_capacity(sections.len());
    for (name, overrides) in &sections {
        let mut cfg = FullConfig::desk();
        for kv in shared.iter().chain(overrides) {
            cfg.apply_set(kv)?;
        }
        cfg.validate()?;
        variants.push((name.clone(), cfg));
    }
    let seed = variants[0].1.train.seed;
    if let Some((name, _)) = variants.iter().find(|(_, c)| c.train.seed != seed) {
        return Err(Error::InvalidArgument(format!(
            "ablation variants must share train.seed; variant {name:?} differs"
        )));
    }

    let corpus = load_corpus_with_stats(data)?;
    ensure_dir(out)?;
    guard(&out.join("summary.txt"), force)?;
    for (name, _) in &variants {
        guard(&out.join(format!("telemetry_{name}.csv")), force)?;
        guard(&out.join(format!("train_{name}.csv")), force)?;
    }

    let runs = run_ablation(&corpus, &variants)?;
    let mut summary = format!(
        "# ablation of {}: {} variants, shared training seed {seed}, identical corpus and batch order\n",
        grid.display(),
        runs.len()
    );
    for run in &runs {
        let n_layers = run.cfg.model.n_stacks + 1;
        let train_rows: Vec<String> =
            run.history.iter().map(|(s, bd)| bd.csv_row(*s)).collect();
        write_csv(
            &out.join(format!("train_{}.csv", run.name)),
            &LossBreakdown::csv_header(n_layers),
            &train_rows,
        )?;
        let telemetry_rows: Vec<String> = run.evals.iter().map(|r| r.csv_row()).collect();
        let telemetry_path = out.join(format!("telemetry_{}.csv", run.name));
        write_csv(&telemetry_path, &TelemetryRecord::csv_header(n_layers), &telemetry_rows)?;
        write_probe_heatmaps(out, &format!("probe_{}", run.name), &run.alignments)?;

        // Read the telemetry back rather than using in-memory values: the
        // emitted CSV is the artifact of record, and this keeps the
        // round-trip property exercised on every run.
        let table = read_csv(&telemetry_path)?;
        let last = |col: &str| -> Result<f64> {
            let v = table.column(col)?;
            v.last().copied().ok_or_else(|| {
                Error::format(&telemetry_path, format!("no rows for column {col}"))
            })
        };
        summary.push_str(&format!(
            "name={} final_total={} final_recon={} final_kl={} final_speed_mse={}\n",
            run.name,
            last("total")?,
            last("recon")?,
            last("kl_total")?,
            last("speed_mse")?
        ));
        println!(
            "variant {}: final total {:.4}, speed MSE {:.5}",
            run.name,
            last("total")?,
            last("speed_mse")?
        );
    }
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;
    println!("wrote {} telemetry files and summary.txt to {}", runs.len(), out.display());
    Ok(())
}
