//! `dagan` — one command per pipeline stage: corpus generation, GAN
//! training, scoring, baselines, and evaluation. Every invocation is a
//! deterministic seeded process; a sidecar `.meta` file records the resolved
//! flags next to each artifact so any run can be reproduced bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use dagan_core::baselines::{
    beatgan_score, beatgan_train, can_stats, fixed_threshold_score, gmm_fit, gmm_score,
    pca_fit, pca_score, BeatGan, FixedThresholdConfig, GMM_COMPONENTS,
};
use dagan_core::data::{
    load_corpus, make_window_pairs, write_corpus, znormalize, Corpus, CorpusSpec, Session,
    SetLabel, Split, WindowPair,
};
use dagan_core::engine::{
    pairs_for_arch, read_scores_csv, score, train, train_staged, write_scores_csv, ScoreRecord,
    TrainConfig, TrainLog,
};
use dagan_core::error::DaganError;
use dagan_core::eval::{
    auc_of, det_curve, eer_of, histogram, median_gap, top_k_overlap, write_det_csv,
    write_hist_csv,
};
use dagan_core::features::extract_features;
use dagan_core::model_io::{load_model, save_model};
use dagan_core::models::{Arch, GanModel, Modality, TARGET_SECONDS};

/// Default window hop in seconds for training, scoring, and baselines.
const DEFAULT_HOP_S: usize = 3;
/// Epochs for the implicitly trained LSTM donor of the staged schedule.
const LSTM_DONOR_EPOCHS: usize = 10;

#[derive(Parser)]
#[command(name = "dagan", version, about = "Driving-anomaly GAN pipeline")]
struct Cli {
    /// Key=value file supplying defaults for any long flag; flags override.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic corpus.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_min: Option<usize>,
        #[arg(long)]
        dev_min: Option<usize>,
        #[arg(long)]
        test_min: Option<usize>,
        #[arg(long)]
        event_rate: Option<f64>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a conditional GAN on the train split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// fc | cnn | lstm | cnn-lstm
        #[arg(long)]
        model: Option<String>,
        /// physio | can | both
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Window hop in seconds.
        #[arg(long)]
        hop: Option<usize>,
        /// Pretrained CNN donor for the cnn-lstm staged schedule.
        #[arg(long)]
        from_cnn: Option<PathBuf>,
        /// Pretrained LSTM donor for the cnn-lstm staged schedule.
        #[arg(long)]
        from_lstm: Option<PathBuf>,
        /// Epochs per staged phase (frozen-conv, then joint) of cnn-lstm.
        #[arg(long)]
        stage_epochs: Option<usize>,
        /// Joint-phase epochs of cnn-lstm, when different from --stage-epochs.
        #[arg(long)]
        joint_epochs: Option<usize>,
        /// Epochs for the implicitly trained LSTM donor.
        #[arg(long)]
        donor_epochs: Option<usize>,
        /// Generator updates per discriminator update.
        #[arg(long)]
        g_steps: Option<usize>,
    },
    /// Score a split with a trained model.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// train | dev | test
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Noise draws averaged into s_fake.
        #[arg(long)]
        noise_draws: Option<usize>,
        #[arg(long)]
        hop: Option<usize>,
    },
    /// Fit and score a non-GAN baseline.
    Baseline {
        /// fixed | pca | gmm | beatgan
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// BeatGAN training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hop: Option<usize>,
    },
    /// Turn score CSVs into DET curves, histograms, and an overlap report.
    Eval {
        /// Comma-separated list of score CSVs.
        #[arg(long)]
        scores: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Seed of the random-selection overlap row.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Defaults loaded from `--config`: long flag names as keys, one `key=value`
/// per line, `#` comments.
struct Defaults(BTreeMap<String, String>);

impl Defaults {
    fn load(path: Option<&Path>) -> Result<Self, DaganError> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    DaganError::Parse(format!(
                        "{}: line {}: expected key=value",
                        path.display(),
                        i + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Defaults(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, DaganError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                DaganError::Usage(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }
}

/// Flag value, then config default, then error.
fn need<T: FromStr>(flag: Option<T>, cfg: &Defaults, key: &str) -> Result<T, DaganError> {
    match flag {
        Some(v) => Ok(v),
        None => cfg
            .get(key)?
            .ok_or_else(|| DaganError::Usage(format!("missing required --{key}"))),
    }
}

/// Flag value, then config default, then the built-in default.
fn or_default<T: FromStr>(
    flag: Option<T>,
    cfg: &Defaults,
    key: &str,
    default: T,
) -> Result<T, DaganError> {
    Ok(match flag {
        Some(v) => v,
        None => cfg.get(key)?.unwrap_or(default),
    })
}

/// Record the resolved invocation next to an artifact so it can be re-run.
fn write_meta(artifact: &Path, pairs: &[(&str, String)]) -> Result<(), DaganError> {
    let mut out = String::new();
    let argv: Vec<String> = std::env::args().collect();
    writeln!(out, "command={}", argv.join(" ")).unwrap();
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").unwrap();
    }
    let meta = PathBuf::from(format!("{}.meta", artifact.display()));
    std::fs::write(meta, out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match Defaults::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match run(cli.cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: DaganError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        DaganError::Usage(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cmd: Cmd, cfg: &Defaults) -> Result<(), DaganError> {
    match cmd {
        Cmd::Gen {
            out,
            seed,
            train_min,
            dev_min,
            test_min,
            event_rate,
            force,
        } => cmd_gen(cfg, out, seed, train_min, dev_min, test_min, event_rate, force),
        Cmd::Train {
            corpus,
            model,
            modality,
            seed,
            out,
            epochs,
            batch_size,
            lr,
            hop,
            from_cnn,
            from_lstm,
            stage_epochs,
            joint_epochs,
            donor_epochs,
            g_steps,
        } => cmd_train(
            cfg, corpus, model, modality, seed, out, epochs, batch_size, lr, hop, from_cnn,
            from_lstm, stage_epochs, joint_epochs, donor_epochs, g_steps,
        ),
        Cmd::Score {
            model,
            corpus,
            split,
            out,
            noise_seed,
            noise_draws,
            hop,
        } => cmd_score(cfg, model, corpus, split, out, noise_seed, noise_draws, hop),
        Cmd::Baseline {
            method,
            corpus,
            out,
            split,
            seed,
            epochs,
            hop,
        } => cmd_baseline(cfg, method, corpus, out, split, seed, epochs, hop),
        Cmd::Eval {
            scores,
            corpus,
            out,
            top_k,
            seed,
        } => cmd_eval(cfg, scores, corpus, out, top_k, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    cfg: &Defaults,
    out: Option<PathBuf>,
    seed: Option<u64>,
    train_min: Option<usize>,
    dev_min: Option<usize>,
    test_min: Option<usize>,
    event_rate: Option<f64>,
    force: bool,
) -> Result<(), DaganError> {
    let out: PathBuf = need(out, cfg, "out")?;
    let spec = CorpusSpec {
        seed: need(seed, cfg, "seed")?,
        train_min: or_default(train_min, cfg, "train-min", 60)?,
        dev_min: or_default(dev_min, cfg, "dev-min", 10)?,
        test_min: or_default(test_min, cfg, "test-min", 10)?,
        event_rate: or_default(event_rate, cfg, "event-rate", 0.5)?,
    };
    if out.exists() && out.read_dir()?.next().is_some() && !force {
        return Err(DaganError::Usage(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let corpus = dagan_core::data::generate_corpus(&spec)?;
    write_corpus(&out, &corpus)?;
    write_meta(
        &out.join("corpus"),
        &[
            ("seed", spec.seed.to_string()),
            ("train-min", spec.train_min.to_string()),
            ("dev-min", spec.dev_min.to_string()),
            ("test-min", spec.test_min.to_string()),
            ("event-rate", spec.event_rate.to_string()),
        ],
    )?;
    println!(
        "wrote {} sessions to {}",
        corpus.sessions.len(),
        out.display()
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", path.display()))
}

fn train_one(
    arch: Arch,
    modality: Modality,
    seed: u64,
    corpus: &Corpus,
    config: &TrainConfig,
    hop: usize,
    epochs: usize,
) -> Result<(GanModel, TrainLog), DaganError> {
    let pairs = pairs_for_arch(&corpus.sessions_for(Split::Train), arch, hop)?;
    let dev = pairs_for_arch(&corpus.sessions_for(Split::Dev), arch, hop)?;
    if pairs.is_empty() {
        return Err(DaganError::Usage(format!(
            "train split yields no {} windows",
            arch.as_str()
        )));
    }
    let mut model = GanModel::new(arch, modality, seed);
    let mut config = config.clone();
    config.epochs = epochs;
    let log = train(&mut model, &pairs, &dev, &config)?;
    Ok((model, log))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &Defaults,
    corpus: Option<PathBuf>,
    model: Option<String>,
    modality: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    hop: Option<usize>,
    from_cnn: Option<PathBuf>,
    from_lstm: Option<PathBuf>,
    stage_epochs: Option<usize>,
    joint_epochs: Option<usize>,
    donor_epochs: Option<usize>,
    g_steps: Option<usize>,
) -> Result<(), DaganError> {
    let corpus_dir: PathBuf = need(corpus, cfg, "corpus")?;
    let arch = Arch::parse(&need::<String>(model, cfg, "model")?)?;
    let modality = Modality::parse(&need::<String>(modality, cfg, "modality")?)?;
    let seed = need(seed, cfg, "seed")?;
    let out: PathBuf = need(out, cfg, "out")?;
    let epochs = or_default(epochs, cfg, "epochs", TrainConfig::default().epochs)?;
    let hop = or_default(hop, cfg, "hop", DEFAULT_HOP_S)?;
    let stage = or_default(
        stage_epochs,
        cfg,
        "stage-epochs",
        TrainConfig::default().stage_epochs.0,
    )?;
    let joint = or_default(joint_epochs, cfg, "joint-epochs", stage)?;
    let donor_epochs = or_default(donor_epochs, cfg, "donor-epochs", LSTM_DONOR_EPOCHS)?;
    let config = TrainConfig {
        epochs,
        batch_size: or_default(batch_size, cfg, "batch-size", TrainConfig::default().batch_size)?,
        lr: or_default(lr, cfg, "lr", TrainConfig::default().lr)?,
        seed,
        stage_epochs: (stage, joint),
        g_steps: or_default(g_steps, cfg, "g-steps", TrainConfig::default().g_steps)?,
    };
    config.validate()?;
    let corpus = load_corpus(&corpus_dir)?;

    let log = if arch == Arch::CnnLstm {
        let cnn_donor = match &from_cnn {
            Some(p) => load_model(p)?,
            None => {
                println!("phase 1/3: training cnn donor ({epochs} epochs)");
                let (donor, log) =
                    train_one(Arch::Cnn, modality, seed.wrapping_add(1), &corpus, &config, hop, epochs)?;
                let p = suffixed(&out, ".cnn-donor");
                save_model(&p, &donor)?;
                log.write(&suffixed(&p, ".train.csv"))?;
                donor
            }
        };
        let lstm_donor = match &from_lstm {
            Some(p) => load_model(p)?,
            None => {
                println!("phase 2/3: training lstm donor ({donor_epochs} epochs)");
                let (donor, log) = train_one(
                    Arch::Lstm,
                    modality,
                    seed.wrapping_add(2),
                    &corpus,
                    &config,
                    hop,
                    donor_epochs,
                )?;
                let p = suffixed(&out, ".lstm-donor");
                save_model(&p, &donor)?;
                log.write(&suffixed(&p, ".train.csv"))?;
                donor
            }
        };
        println!("phase 3/3: staged cnn-lstm training");
        let pairs = pairs_for_arch(&corpus.sessions_for(Split::Train), arch, hop)?;
        let dev = pairs_for_arch(&corpus.sessions_for(Split::Dev), arch, hop)?;
        let mut m = GanModel::new(arch, modality, seed);
        let log = train_staged(&mut m, &cnn_donor, &lstm_donor, &pairs, &dev, &config)?;
        save_model(&out, &m)?;
        log
    } else {
        let (m, log) = train_one(arch, modality, seed, &corpus, &config, hop, epochs)?;
        save_model(&out, &m)?;
        log
    };
    log.write(&suffixed(&out, ".train.csv"))?;
    write_meta(
        &out,
        &[
            ("corpus", corpus_dir.display().to_string()),
            ("model", arch.as_str().to_string()),
            ("modality", modality.as_str().to_string()),
            ("seed", seed.to_string()),
            ("epochs", config.epochs.to_string()),
            ("batch-size", config.batch_size.to_string()),
            ("lr", config.lr.to_string()),
            ("hop", hop.to_string()),
        ],
    )?;
    let last = log.records.last().expect("at least one epoch");
    println!(
        "trained {} / {}: final g_loss {:.4}, d_loss {:.4}, dev_d_acc {:.3}",
        arch.as_str(),
        modality.as_str(),
        last.g_loss,
        last.d_loss,
        last.dev_d_acc
    );
    Ok(())
}

fn threads_from_env() -> Result<usize, DaganError> {
    match std::env::var("DAGAN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| DaganError::Usage(format!("DAGAN_THREADS: cannot parse '{v}'"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_score(
    cfg: &Defaults,
    model: Option<PathBuf>,
    corpus: Option<PathBuf>,
    split: Option<String>,
    out: Option<PathBuf>,
    noise_seed: Option<u64>,
    noise_draws: Option<usize>,
    hop: Option<usize>,
) -> Result<(), DaganError> {
    let model_path: PathBuf = need(model, cfg, "model")?;
    let corpus_dir: PathBuf = need(corpus, cfg, "corpus")?;
    let split = Split::parse(&or_default(split, cfg, "split", "test".to_string())?)?;
    let out: PathBuf = need(out, cfg, "out")?;
    let noise_seed = or_default(noise_seed, cfg, "noise-seed", 0)?;
    let noise_draws = or_default(noise_draws, cfg, "noise-draws", 1)?;
    let hop = or_default(hop, cfg, "hop", DEFAULT_HOP_S)?;
    let threads = threads_from_env()?;

    let model = load_model(&model_path)?;
    let corpus = load_corpus(&corpus_dir)?;
    let pairs = pairs_for_arch(&corpus.sessions_for(split), model.arch, hop)?;
    if pairs.is_empty() {
        return Err(DaganError::Usage("split yields no windows to score".into()));
    }
    let records = score(&model, &pairs, noise_seed, noise_draws, threads)?;
    write_scores_csv(&out, &records)?;
    write_meta(
        &out,
        &[
            ("model", model_path.display().to_string()),
            ("corpus", corpus_dir.display().to_string()),
            ("split", format!("{split:?}").to_lowercase()),
            ("noise-seed", noise_seed.to_string()),
            ("noise-draws", noise_draws.to_string()),
            ("hop", hop.to_string()),
            ("model-seed", model.seed.to_string()),
        ],
    )?;
    println!("scored {} windows to {}", records.len(), out.display());
    Ok(())
}

/// Target windows of a split with bookkeeping for baseline scoring.
fn baseline_windows(
    corpus: &Corpus,
    split: Split,
    hop: usize,
    normalized: bool,
) -> Result<Vec<WindowPair>, DaganError> {
    let mut out = Vec::new();
    for s in corpus.sessions_for(split) {
        let sess: Session = if normalized { znormalize(s)? } else { (*s).clone() };
        out.extend(make_window_pairs(&sess, TARGET_SECONDS, TARGET_SECONDS, hop));
    }
    Ok(out)
}

fn feature_rows(pairs: &[WindowPair]) -> Result<Vec<Vec<f64>>, DaganError> {
    pairs
        .iter()
        .map(|p| extract_features(&p.target, Modality::Both.physio_positions()))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_baseline(
    cfg: &Defaults,
    method: Option<String>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    split: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    hop: Option<usize>,
) -> Result<(), DaganError> {
    let method = need::<String>(method, cfg, "method")?;
    let corpus_dir: PathBuf = need(corpus, cfg, "corpus")?;
    let out: PathBuf = need(out, cfg, "out")?;
    let split = Split::parse(&or_default(split, cfg, "split", "test".to_string())?)?;
    let seed = or_default(seed, cfg, "seed", 0)?;
    let epochs = or_default(epochs, cfg, "epochs", 5)?;
    let hop = or_default(hop, cfg, "hop", DEFAULT_HOP_S)?;
    let corpus = load_corpus(&corpus_dir)?;

    let records: Vec<ScoreRecord> = match method.as_str() {
        "fixed" => {
            let eval = baseline_windows(&corpus, split, hop, false)?;
            let rules = FixedThresholdConfig::default();
            eval.iter()
                .map(|p| {
                    let stats = can_stats(&p.target)?;
                    Ok(record(p, fixed_threshold_score(&stats, &rules)))
                })
                .collect::<Result<_, DaganError>>()?
        }
        "pca" => {
            let train = feature_rows(&baseline_windows(&corpus, Split::Train, hop, true)?)?;
            let eval = baseline_windows(&corpus, split, hop, true)?;
            let model = pca_fit(&train)?;
            eval.iter()
                .zip(feature_rows(&eval)?)
                .map(|(p, x)| Ok(record(p, pca_score(&model, &x)?)))
                .collect::<Result<_, DaganError>>()?
        }
        "gmm" => {
            let train = feature_rows(&baseline_windows(&corpus, Split::Train, hop, true)?)?;
            let eval = baseline_windows(&corpus, split, hop, true)?;
            let model = gmm_fit(&train, GMM_COMPONENTS, seed)?;
            eval.iter()
                .zip(feature_rows(&eval)?)
                .map(|(p, x)| record(p, gmm_score(&model, &x)))
                .collect()
        }
        "beatgan" => {
            let train: Vec<Vec<f64>> = baseline_windows(&corpus, Split::Train, hop, true)?
                .iter()
                .map(|p| p.target.data.clone())
                .collect();
            let eval = baseline_windows(&corpus, split, hop, true)?;
            let mut model = BeatGan::new(seed);
            let config = TrainConfig {
                epochs,
                seed,
                ..TrainConfig::default()
            };
            beatgan_train(&mut model, &train, &config)?;
            eval.iter()
                .map(|p| Ok(record(p, beatgan_score(&model, &p.target.data)?)))
                .collect::<Result<_, DaganError>>()?
        }
        other => {
            return Err(DaganError::Usage(format!(
                "unknown baseline method '{other}' (expected fixed|pca|gmm|beatgan)"
            )))
        }
    };
    write_scores_csv(&out, &records)?;
    write_meta(
        &out,
        &[
            ("method", method),
            ("corpus", corpus_dir.display().to_string()),
            ("split", format!("{split:?}").to_lowercase()),
            ("seed", seed.to_string()),
            ("epochs", epochs.to_string()),
            ("hop", hop.to_string()),
        ],
    )?;
    println!("scored {} windows to {}", records.len(), out.display());
    Ok(())
}

fn record(p: &WindowPair, m_anomaly: f64) -> ScoreRecord {
    ScoreRecord {
        session_id: p.session_id.clone(),
        target_start_s: p.target_start_s,
        s_real: None,
        s_fake: None,
        m_anomaly,
        set: p.label,
    }
}

/// Model tag of a scores file: the stem with any `scores_`/`scores-` prefix
/// dropped, so `scores_cnn-lstm.csv` evaluates as `cnn-lstm`.
fn model_tag(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scores".to_string());
    stem.strip_prefix("scores_")
        .or_else(|| stem.strip_prefix("scores-"))
        .unwrap_or(&stem)
        .to_string()
}

fn cmd_eval(
    cfg: &Defaults,
    scores: Option<String>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    top_k: Option<usize>,
    seed: Option<u64>,
) -> Result<(), DaganError> {
    let scores = need::<String>(scores, cfg, "scores")?;
    let out: PathBuf = need(out, cfg, "out")?;
    let top_k = or_default(top_k, cfg, "top-k", 100)?;
    let seed = or_default(seed, cfg, "seed", 0)?;
    if let Some(dir) = &corpus {
        if !dir.exists() {
            return Err(DaganError::Usage(format!(
                "corpus directory {} does not exist",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&out)?;

    let mut report = String::new();
    for file in scores.split(',') {
        let path = PathBuf::from(file.trim());
        let tag = model_tag(&path);
        let records = read_scores_csv(&path)?;

        let curve = det_curve(&records)?;
        let eer = eer_of(&curve.points);
        let auc = auc_of(&curve.points);
        write_det_csv(&out.join(format!("det_{tag}.csv")), &curve)?;

        let gap = median_gap(&records)?;
        for set in [SetLabel::Normal, SetLabel::Candidate, SetLabel::Maneuver] {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.set == set)
                .map(|r| r.m_anomaly)
                .collect();
            write_hist_csv(
                &out.join(format!("hist_{tag}_{set}.csv")),
                &histogram(&values),
            )?;
        }
        let overlap = top_k_overlap(&records, top_k, seed)?;

        writeln!(report, "{tag}.records={}", records.len()).unwrap();
        writeln!(report, "{tag}.eer={eer:.9}").unwrap();
        writeln!(report, "{tag}.auc={auc:.9}").unwrap();
        writeln!(report, "{tag}.median_candidate={:.9}", gap.median_candidate).unwrap();
        writeln!(report, "{tag}.median_normal={:.9}", gap.median_normal).unwrap();
        if let Some(m) = gap.median_maneuver {
            writeln!(report, "{tag}.median_maneuver={m:.9}").unwrap();
        }
        writeln!(report, "{tag}.median_delta={:.9}", gap.delta).unwrap();
        writeln!(report, "{tag}.top_k={}", overlap.k).unwrap();
        writeln!(
            report,
            "{tag}.top.normal={} {tag}.top.candidate={} {tag}.top.maneuver={}",
            overlap.top.normal, overlap.top.candidate, overlap.top.maneuver
        )
        .unwrap();
        writeln!(
            report,
            "{tag}.random.normal={} {tag}.random.candidate={} {tag}.random.maneuver={}",
            overlap.random.normal, overlap.random.candidate, overlap.random.maneuver
        )
        .unwrap();
    }
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, &report)?;
    write_meta(
        &report_path,
        &[
            ("scores", scores),
            ("top-k", top_k.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    print!("{report}");
    Ok(())
}
