//! Adversarial training, the staged CNN+LSTM schedule, and discriminator-gap
//! anomaly scoring.
//!
//! Per batch the discriminator takes one step (real targets labelled 1,
//! generated targets 0) and the generator takes one step with the
//! non-saturating loss (label 1 on fakes). All shuffles and noise come from a
//! single seeded stream, so identical (model seed, data, config) reruns
//! produce bit-identical parameters. Scoring is read-only and may fan out
//! across threads without changing the output.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SetLabel, WindowPair, SAMPLE_RATE};
use crate::error::DaganError;
use crate::features::extract_features;
use crate::models::{sample_standard_normal, Arch, GanModel};
use crate::nn::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS, GRAD_CLIP_NORM};
use crate::tensor::Tensor;

pub const SCORES_HEADER: &str = "session_id,target_start_s,s_real,s_fake,m_anomaly,set";

/// Relative discriminator learning rate; below 1 slows D when it would
/// otherwise run away from the generator.
pub const D_LR_FACTOR: f64 = 1.0;
pub const TRAIN_LOG_HEADER: &str = "epoch,g_loss,d_loss,dev_d_acc";

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// (lstm_only, joint) epochs of the staged CNN+LSTM schedule.
    pub stage_epochs: (usize, usize),
    /// Generator updates per discriminator update. Scoring uses the raw
    /// real/fake discriminator gap, so the generator must track the
    /// discriminator closely enough that the gap is near zero on normal
    /// windows; extra generator steps per batch keep it there.
    pub g_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.001,
            seed: 0,
            stage_epochs: (10, 10),
            g_steps: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DaganError> {
        if self.epochs == 0 || self.batch_size == 0 || self.g_steps == 0 {
            return Err(DaganError::Usage(
                "epochs, batch_size and g_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub dev_d_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write(&self, path: &Path) -> Result<(), DaganError> {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.6}\n",
                r.epoch, r.g_loss, r.d_loss, r.dev_d_acc
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub session_id: String,
    pub target_start_s: f64,
    pub s_real: Option<f64>,
    pub s_fake: Option<f64>,
    pub m_anomaly: f64,
    pub set: SetLabel,
}

/// One pair converted to the model's input spaces: feature vectors for the FC
/// variant, channel-subset signals for the rest.
struct PreparedPair {
    session_id: String,
    target_start_s: f64,
    set: SetLabel,
    cond: Tensor,
    target: Tensor,
}

fn select_channels(window: &Tensor, indices: &[usize]) -> Tensor {
    let frames = window.shape[1];
    let mut out = Tensor::zeros(&[indices.len(), frames]);
    for (r, &ci) in indices.iter().enumerate() {
        out.data[r * frames..(r + 1) * frames].copy_from_slice(window.row(ci));
    }
    out
}

fn prepare_pairs(model: &GanModel, pairs: &[WindowPair]) -> Result<Vec<PreparedPair>, DaganError> {
    let cond_frames = model.condition_frames();
    let indices = model.modality.channel_indices();
    let physio = model.modality.physio_positions();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.condition.shape != vec![9, cond_frames]
            || p.target.shape != vec![9, crate::models::TARGET_FRAMES]
        {
            return Err(DaganError::Shape(format!(
                "window pair shapes {:?}/{:?} do not fit a {} model (need [9,{cond_frames}]/[9,{}])",
                p.condition.shape,
                p.target.shape,
                model.arch.as_str(),
                crate::models::TARGET_FRAMES,
            )));
        }
        let cond_sub = select_channels(&p.condition, indices);
        let target_sub = select_channels(&p.target, indices);
        let (cond, target) = if model.arch == Arch::Fc {
            let fc = extract_features(&cond_sub, physio)?;
            let ft = extract_features(&target_sub, physio)?;
            (
                Tensor::from_vec(&[fc.len()], fc)?,
                Tensor::from_vec(&[ft.len()], ft)?,
            )
        } else {
            (cond_sub, target_sub)
        };
        out.push(PreparedPair {
            session_id: p.session_id.clone(),
            target_start_s: p.target_start_s,
            set: p.label,
            cond,
            target,
        });
    }
    Ok(out)
}

fn stack_batch(prep: &[PreparedPair], idxs: &[usize]) -> (Tensor, Tensor) {
    let cshape: Vec<usize> = std::iter::once(idxs.len())
        .chain(prep[idxs[0]].cond.shape.iter().copied())
        .collect();
    let tshape: Vec<usize> = std::iter::once(idxs.len())
        .chain(prep[idxs[0]].target.shape.iter().copied())
        .collect();
    let (cl, tl) = (prep[idxs[0]].cond.len(), prep[idxs[0]].target.len());
    let mut cond = Tensor::zeros(&cshape);
    let mut target = Tensor::zeros(&tshape);
    for (bi, &i) in idxs.iter().enumerate() {
        cond.data[bi * cl..(bi + 1) * cl].copy_from_slice(&prep[i].cond.data);
        target.data[bi * tl..(bi + 1) * tl].copy_from_slice(&prep[i].target.data);
    }
    (cond, target)
}

fn draw_noise(model: &GanModel, rng: &mut ChaCha8Rng, batch: usize) -> Tensor {
    let shape = model.noise_shape(batch);
    let n: usize = shape.iter().product();
    Tensor::from_vec(&shape, sample_standard_normal(rng, n)).expect("shape matches draw count")
}

/// One discriminator update on a batch; returns the batch D loss.
fn d_step(
    model: &mut GanModel,
    cond: &Tensor,
    target: &Tensor,
    noise: &Tensor,
    lr: f64,
    t: usize,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<f64, DaganError> {
    let mut g = crate::graph::Graph::new();
    let gp = model.generator.bind_frozen(&mut g);
    let dp = model.discriminator.bind(&mut g);
    let c = g.constant(cond.clone());
    let real = g.constant(target.clone());
    let z = g.constant(noise.clone());
    let fake = model.generator_forward(&mut g, &gp, c, z)?;
    let s_real = model.discriminator_logits(&mut g, &dp, c, real)?;
    let s_fake = model.discriminator_logits(&mut g, &dp, c, fake)?;
    let l_real = g.mean_bce_logits(s_real, 1.0);
    let l_fake = g.mean_bce_logits(s_fake, 0.0);
    let sum = g.add(l_real, l_fake)?;
    let loss = g.scale(sum, 0.5);
    let loss_v = g.value(loss).data[0];
    g.backward(loss)?;
    model.discriminator.zero_grads();
    model.discriminator.collect_grads(&g, &dp)?;
    model.discriminator.clip_grads(GRAD_CLIP_NORM);
    model
        .discriminator
        .adam_step(lr, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, t, frozen)?;
    Ok(loss_v)
}

/// One generator update (non-saturating loss); returns the batch G loss.
fn g_step(
    model: &mut GanModel,
    cond: &Tensor,
    noise: &Tensor,
    lr: f64,
    t: usize,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<f64, DaganError> {
    let mut g = crate::graph::Graph::new();
    let gp = model.generator.bind(&mut g);
    let dp = model.discriminator.bind_frozen(&mut g);
    let c = g.constant(cond.clone());
    let z = g.constant(noise.clone());
    let fake = model.generator_forward(&mut g, &gp, c, z)?;
    let s_fake = model.discriminator_logits(&mut g, &dp, c, fake)?;
    let loss = g.mean_bce_logits(s_fake, 1.0);
    let loss_v = g.value(loss).data[0];
    g.backward(loss)?;
    model.generator.zero_grads();
    model.generator.collect_grads(&g, &gp)?;
    model.generator.clip_grads(GRAD_CLIP_NORM);
    model
        .generator
        .adam_step(lr, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, t, frozen)?;
    Ok(loss_v)
}

/// Discriminator accuracy on real-vs-fake over a held-out set.
fn dev_accuracy(
    model: &GanModel,
    dev: &[PreparedPair],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DaganError> {
    if dev.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let idxs: Vec<usize> = (0..dev.len()).collect();
    for chunk in idxs.chunks(batch_size) {
        let (cond, target) = stack_batch(dev, chunk);
        let noise = draw_noise(model, rng, chunk.len());
        let mut g = crate::graph::Graph::new();
        let gp = model.generator.bind_frozen(&mut g);
        let dp = model.discriminator.bind_frozen(&mut g);
        let c = g.constant(cond);
        let real = g.constant(target);
        let z = g.constant(noise);
        let fake = model.generator_forward(&mut g, &gp, c, z)?;
        let s_real = model.discriminator_forward(&mut g, &dp, c, real)?;
        let s_fake = model.discriminator_forward(&mut g, &dp, c, fake)?;
        correct += g.value(s_real).data.iter().filter(|&&s| s > 0.5).count();
        correct += g.value(s_fake).data.iter().filter(|&&s| s <= 0.5).count();
        total += 2 * chunk.len();
    }
    Ok(correct as f64 / total as f64)
}

fn train_impl(
    model: &mut GanModel,
    pairs: &[WindowPair],
    dev: &[WindowPair],
    config: &TrainConfig,
    epochs: usize,
    frozen: &dyn Fn(&str) -> bool,
    enable_d: bool,
    step_offset: usize,
    epoch_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainLog, DaganError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(DaganError::Usage("no training pairs".into()));
    }
    let prep = prepare_pairs(model, pairs)?;
    let dev_prep = prepare_pairs(model, dev)?;
    let mut log = TrainLog::default();
    let mut step = step_offset;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..prep.len()).collect();
        order.shuffle(rng);
        let mut g_sum = 0.0;
        let mut d_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let (cond, target) = stack_batch(&prep, chunk);
            step += 1;
            let d_loss = if enable_d {
                let noise = draw_noise(model, rng, chunk.len());
                d_step(model, &cond, &target, &noise, config.lr * D_LR_FACTOR, step, frozen)?
            } else {
                0.0
            };
            let mut g_loss = 0.0;
            for _ in 0..config.g_steps {
                let noise = draw_noise(model, rng, chunk.len());
                g_loss = g_step(model, &cond, &noise, config.lr, step, frozen)?;
            }
            if !d_loss.is_finite() || !g_loss.is_finite() {
                return Err(DaganError::Diverged(format!(
                    "non-finite loss at epoch {} batch {} (g={g_loss}, d={d_loss})",
                    epoch + epoch_offset,
                    bi + 1
                )));
            }
            g_sum += g_loss;
            d_sum += d_loss;
            batches += 1;
        }
        let acc = dev_accuracy(model, &dev_prep, config.batch_size, rng)?;
        log.records.push(EpochRecord {
            epoch: epoch + epoch_offset,
            g_loss: g_sum / batches as f64,
            d_loss: d_sum / batches as f64,
            dev_d_acc: acc,
        });
    }
    Ok(log)
}

/// Standard adversarial training for `config.epochs` epochs.
pub fn train(
    model: &mut GanModel,
    pairs: &[WindowPair],
    dev: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainLog, DaganError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_impl(
        model,
        pairs,
        dev,
        config,
        config.epochs,
        &|_| false,
        true,
        0,
        0,
        &mut rng,
    )
}

/// Staged CNN+LSTM schedule: import donor parameters, train with the conv
/// block frozen, then train everything jointly.
pub fn train_staged(
    model: &mut GanModel,
    cnn_donor: &GanModel,
    lstm_donor: &GanModel,
    pairs: &[WindowPair],
    dev: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainLog, DaganError> {
    if model.arch != Arch::CnnLstm || cnn_donor.arch != Arch::Cnn || lstm_donor.arch != Arch::Lstm
    {
        return Err(DaganError::Usage(
            "staged training needs a cnn-lstm model with cnn and lstm donors".into(),
        ));
    }
    if cnn_donor.modality != model.modality || lstm_donor.modality != model.modality {
        return Err(DaganError::Usage("donor modality mismatch".into()));
    }
    model.import_donor_params(&[cnn_donor, lstm_donor]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lstm_only, joint) = config.stage_epochs;
    let mut log = train_impl(
        model,
        pairs,
        dev,
        config,
        lstm_only,
        &crate::models::is_conv_param,
        true,
        0,
        0,
        &mut rng,
    )?;
    let steps_done = lstm_only * pairs.len().div_ceil(config.batch_size);
    let stage3 = train_impl(
        model,
        pairs,
        dev,
        config,
        joint,
        &|_| false,
        true,
        steps_done,
        lstm_only,
        &mut rng,
    )?;
    log.records.extend(stage3.records);
    Ok(log)
}

/// Stage 2 of the schedule in isolation (donors already imported): trains
/// everything except the conv block.
pub fn train_lstm_only(
    model: &mut GanModel,
    pairs: &[WindowPair],
    dev: &[WindowPair],
    config: &TrainConfig,
    epochs: usize,
) -> Result<TrainLog, DaganError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_impl(
        model,
        pairs,
        dev,
        config,
        epochs,
        &crate::models::is_conv_param,
        true,
        0,
        0,
        &mut rng,
    )
}

#[cfg(test)]
fn train_without_d_step(
    model: &mut GanModel,
    pairs: &[WindowPair],
    dev: &[WindowPair],
    config: &TrainConfig,
) -> Result<TrainLog, DaganError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_impl(
        model,
        pairs,
        dev,
        config,
        config.epochs,
        &|_| false,
        false,
        0,
        0,
        &mut rng,
    )
}

fn score_one(
    model: &GanModel,
    p: &PreparedPair,
    noise_seed: u64,
    index: u64,
    noise_draws: usize,
) -> Result<ScoreRecord, DaganError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(index);
    let mut g = crate::graph::Graph::new();
    let gp = model.generator.bind_frozen(&mut g);
    let dp = model.discriminator.bind_frozen(&mut g);
    let cshape: Vec<usize> = std::iter::once(1).chain(p.cond.shape.iter().copied()).collect();
    let tshape: Vec<usize> = std::iter::once(1).chain(p.target.shape.iter().copied()).collect();
    let c = g.constant(p.cond.reshaped(&cshape)?);
    let real = g.constant(p.target.reshaped(&tshape)?);
    let s_real_id = model.discriminator_forward(&mut g, &dp, c, real)?;
    let s_real = g.value(s_real_id).data[0];
    let mut s_fake_sum = 0.0;
    for _ in 0..noise_draws.max(1) {
        let z = g.constant(draw_noise(model, &mut rng, 1));
        let fake = model.generator_forward(&mut g, &gp, c, z)?;
        let s_fake_id = model.discriminator_forward(&mut g, &dp, c, fake)?;
        s_fake_sum += g.value(s_fake_id).data[0];
    }
    let s_fake = s_fake_sum / noise_draws.max(1) as f64;
    Ok(ScoreRecord {
        session_id: p.session_id.clone(),
        target_start_s: p.target_start_s,
        s_real: Some(s_real),
        s_fake: Some(s_fake),
        m_anomaly: (s_real - s_fake).abs(),
        set: p.set,
    })
}

/// Score every pair with a fixed per-pair noise stream. `threads` caps the
/// worker count; the output order is always the input window order.
pub fn score(
    model: &GanModel,
    pairs: &[WindowPair],
    noise_seed: u64,
    noise_draws: usize,
    threads: usize,
) -> Result<Vec<ScoreRecord>, DaganError> {
    let prep = prepare_pairs(model, pairs)?;
    let threads = threads.max(1).min(prep.len().max(1));
    if threads <= 1 {
        return prep
            .iter()
            .enumerate()
            .map(|(i, p)| score_one(model, p, noise_seed, i as u64, noise_draws))
            .collect();
    }
    let mut results: Vec<Option<Result<ScoreRecord, DaganError>>> =
        (0..prep.len()).map(|_| None).collect();
    let chunk = prep.len().div_ceil(threads);
    std::thread::scope(|s| {
        for (ti, (ps, rs)) in prep.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate() {
            let base = ti * chunk;
            s.spawn(move || {
                for (off, (p, slot)) in ps.iter().zip(rs.iter_mut()).enumerate() {
                    *slot = Some(score_one(
                        model,
                        p,
                        noise_seed,
                        (base + off) as u64,
                        noise_draws,
                    ));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all slots filled"))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12}")).unwrap_or_default()
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<(), DaganError> {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.3},{},{},{:.12},{}\n",
            r.session_id,
            r.target_start_s,
            fmt_opt(r.s_real),
            fmt_opt(r.s_fake),
            r.m_anomaly,
            r.set
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>, DaganError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DaganError::Parse(format!("{}: empty file", path.display())))?;
    if header != SCORES_HEADER {
        return Err(DaganError::Parse(format!(
            "{}: bad header, expected '{SCORES_HEADER}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DaganError::Parse(format!(
                "{}: row {}: expected 6 columns",
                path.display(),
                row + 1
            )));
        }
        let parse_f = |field: &str, name: &str| -> Result<f64, DaganError> {
            field.parse().map_err(|_| {
                DaganError::Parse(format!(
                    "{}: row {}: bad {name} '{field}'",
                    path.display(),
                    row + 1
                ))
            })
        };
        let parse_opt = |field: &str, name: &str| -> Result<Option<f64>, DaganError> {
            if field.is_empty() {
                Ok(None)
            } else {
                parse_f(field, name).map(Some)
            }
        };
        out.push(ScoreRecord {
            session_id: fields[0].to_string(),
            target_start_s: parse_f(fields[1], "target_start_s")?,
            s_real: parse_opt(fields[2], "s_real")?,
            s_fake: parse_opt(fields[3], "s_fake")?,
            m_anomaly: parse_f(fields[4], "m_anomaly")?,
            set: SetLabel::parse(fields[5]).map_err(|e| {
                DaganError::Parse(format!("{}: row {}: {e}", path.display(), row + 1))
            })?,
        });
    }
    Ok(out)
}

/// Window pairs of a set of sessions after per-session normalization, sized
/// for the given architecture.
pub fn pairs_for_arch(
    sessions: &[&crate::data::Session],
    arch: Arch,
    hop_s: usize,
) -> Result<Vec<WindowPair>, DaganError> {
    let mut out = Vec::new();
    for s in sessions {
        let z = crate::data::znormalize(s)?;
        out.extend(crate::data::make_window_pairs(
            &z,
            arch.condition_seconds(),
            crate::models::TARGET_SECONDS,
            hop_s,
        ));
    }
    let _ = SAMPLE_RATE;
    Ok(out)
}
