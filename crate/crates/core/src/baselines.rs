//! The four comparison detectors: fixed-threshold rules on CAN statistics,
//! first-principal-component projection, an 8-component diagonal GMM, and the
//! BeatGAN dense encoder-decoder.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SAMPLE_RATE;
use crate::engine::{EpochRecord, TrainConfig, TrainLog};
use crate::error::DaganError;
use crate::graph::{Graph, NodeId};
use crate::models::sample_standard_normal;
use crate::nn::{glorot_uniform, ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, GRAD_CLIP_NORM};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// fixed-threshold rules
// ---------------------------------------------------------------------------

/// Base thresholds and sweep ranges of the rule detector. The acceleration
/// range has no physical-channel counterpart; 5 m/s² spans ordinary driving.
#[derive(Debug, Clone)]
pub struct FixedThresholdConfig {
    pub t_ac: f64,      // m/s²
    pub t_ss_low: f64,  // rad/s
    pub t_vs: f64,      // km/h
    pub t_ss_high: f64, // rad/s
    pub t_ya: f64,      // rad
    pub r_ac: f64,
    pub r_ss: f64,
    pub r_vs: f64,
    pub r_ya: f64,
}

impl Default for FixedThresholdConfig {
    fn default() -> Self {
        FixedThresholdConfig {
            t_ac: 0.8,
            t_ss_low: 0.1,
            t_vs: 30.0,
            t_ss_high: 0.4,
            t_ya: 0.7,
            r_ac: 5.0,
            r_ss: 2.0,
            r_vs: 120.0,
            r_ya: 1.0,
        }
    }
}

/// Per-window CAN statistics the rules consume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanStats {
    /// window mean of the speed derivative, m/s²
    pub ac: f64,
    /// max speed, km/h
    pub vs: f64,
    /// max |steering speed|, rad/s
    pub ss: f64,
    /// max |yaw|, rad
    pub ya: f64,
}

/// Rule statistics of one raw (physical-unit) [9 x N] window. Acceleration is
/// a centered difference of speed smoothed over 0.5 s.
pub fn can_stats(window: &Tensor) -> Result<CanStats, DaganError> {
    if window.ndim() != 2 || window.shape[0] != 9 || window.shape[1] < 2 {
        return Err(DaganError::Shape(format!(
            "can_stats needs a [9 x N>=2] window, got {:?}",
            window.shape
        )));
    }
    let n = window.shape[1];
    let speed = window.row(0);
    let steer_speed = window.row(1);
    let yaw = window.row(5);
    let half = SAMPLE_RATE / 4; // 0.25 s each side
    let mut acc_sum = 0.0;
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let dt = (hi - lo) as f64 / SAMPLE_RATE as f64;
        let dv = (speed[hi] - speed[lo]) / 3.6; // km/h → m/s
        acc_sum += if dt > 0.0 { dv / dt } else { 0.0 };
    }
    Ok(CanStats {
        ac: acc_sum / n as f64,
        vs: speed.iter().fold(0.0f64, |a, &v| a.max(v.abs())),
        ss: steer_speed.iter().fold(0.0f64, |a, &v| a.max(v.abs())),
        ya: yaw.iter().fold(0.0f64, |a, &v| a.max(v.abs())),
    })
}

/// Rule evaluation at sweep position α. Raising α tightens every threshold:
/// the SS_low bound moves down, the rest move up.
pub fn fixed_threshold_flag(stats: &CanStats, alpha: f64, cfg: &FixedThresholdConfig) -> bool {
    let t_ac = cfg.t_ac + alpha * cfg.r_ac;
    let t_ss_low = cfg.t_ss_low - alpha * cfg.r_ss;
    let t_vs = cfg.t_vs + alpha * cfg.r_vs;
    let t_ss_high = cfg.t_ss_high + alpha * cfg.r_ss;
    let t_ya = cfg.t_ya + alpha * cfg.r_ya;
    let speeding = stats.ac.abs() > t_ac && stats.ss < t_ss_low;
    let steering = stats.vs > t_vs && stats.ss > t_ss_high && stats.ya > t_ya;
    speeding || steering
}

/// Sweep granularity of the α grid in [−1, 1].
pub const ALPHA_STEP: f64 = 0.01;

/// Collapse the α sweep into one score in [0, 1]: the strictest sweep
/// position at which the window is still flagged, affinely mapped so that a
/// never-flagged window scores 0.
pub fn fixed_threshold_score(stats: &CanStats, cfg: &FixedThresholdConfig) -> f64 {
    let mut max_alpha = None;
    let steps = (2.0 / ALPHA_STEP).round() as i64;
    for i in 0..=steps {
        let alpha = -1.0 + i as f64 * ALPHA_STEP;
        if fixed_threshold_flag(stats, alpha, cfg) {
            max_alpha = Some(alpha);
        }
    }
    match max_alpha {
        Some(a) => (a + 1.0 + ALPHA_STEP) / (2.0 + ALPHA_STEP),
        None => 0.0,
    }
}

// ---------------------------------------------------------------------------
// PCA projection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// dimensions kept after dropping zero-variance columns
    pub kept: Vec<usize>,
    /// unit principal axis in the standardized kept-dimension space
    pub axis: Vec<f64>,
    pub top_eigenvalue: f64,
}

/// Unit eigenvector of the largest eigenvalue of a symmetric matrix (row-major
/// d×d) by power iteration from the normalized all-ones vector.
pub fn top_eigenvector(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mut w = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                w[r] += cov[r * d + c] * v[c];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        let diff: f64 = w.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        lambda = norm;
        if diff < 1e-13 {
            break;
        }
    }
    (v, lambda)
}

fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 < 1e-300 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Fit the first-principal-component projector: standardize per dimension on
/// train statistics (zero-variance dimensions are dropped), take the top
/// covariance eigenvector, and orient it so train projections have
/// non-negative skewness (tie: first nonzero component positive).
pub fn pca_fit(train: &[Vec<f64>]) -> Result<PcaModel, DaganError> {
    let d_all = train.first().map(|v| v.len()).unwrap_or(0);
    if train.len() < d_all + 1 {
        return Err(DaganError::Usage(format!(
            "pca needs more than {} training vectors, got {}",
            d_all,
            train.len()
        )));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; d_all];
    for x in train {
        for (m, &v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; d_all];
    for x in train {
        for (s, (&v, &m)) in std.iter_mut().zip(x.iter().zip(mean.iter())) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    let kept: Vec<usize> = (0..d_all).filter(|&j| std[j] > 1e-12).collect();
    let d = kept.len();
    if d == 0 {
        return Err(DaganError::Usage("all feature dimensions degenerate".into()));
    }

    let standardized: Vec<Vec<f64>> = train
        .iter()
        .map(|x| kept.iter().map(|&j| (x[j] - mean[j]) / std[j]).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for z in &standardized {
        for r in 0..d {
            for c in r..d {
                cov[r * d + c] += z[r] * z[c];
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            cov[r * d + c] /= n;
            cov[c * d + r] = cov[r * d + c];
        }
    }
    let (mut axis, lambda) = top_eigenvector(&cov, d);
    let proj: Vec<f64> = standardized
        .iter()
        .map(|z| z.iter().zip(axis.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let sk = skewness(&proj);
    let flip = if sk.abs() > 1e-9 {
        sk < 0.0
    } else {
        axis.iter().find(|&&v| v.abs() > 1e-12).map(|&v| v < 0.0).unwrap_or(false)
    };
    if flip {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(PcaModel {
        mean,
        std,
        kept,
        axis,
        top_eigenvalue: lambda,
    })
}

pub fn pca_score(model: &PcaModel, x: &[f64]) -> Result<f64, DaganError> {
    if x.len() != model.mean.len() {
        return Err(DaganError::Shape(format!(
            "pca feature length {} vs {}",
            x.len(),
            model.mean.len()
        )));
    }
    Ok(model
        .kept
        .iter()
        .zip(model.axis.iter())
        .map(|(&j, &a)| a * (x[j] - model.mean[j]) / model.std[j])
        .sum())
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

pub const GMM_COMPONENTS: usize = 8;
const GMM_VAR_FLOOR: f64 = 1e-6;
const GMM_TOL: f64 = 1e-6;
const GMM_MAX_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    /// per-sample average log-likelihood after each EM iteration
    pub lnl_history: Vec<f64>,
}

fn log_gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&xv, &m), &v) in x.iter().zip(mean.iter()).zip(var.iter()) {
        acc += (2.0 * std::f64::consts::PI * v).ln() + (xv - m) * (xv - m) / v;
    }
    -0.5 * acc
}

fn kmeans_pp_centers(train: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(train[rng.gen_range(0..train.len())].clone());
    let mut d2: Vec<f64> = train
        .iter()
        .map(|x| sq_dist(x, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..train.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = train.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centers.push(train[pick].clone());
        for (di, x) in d2.iter_mut().zip(train.iter()) {
            *di = di.min(sq_dist(x, centers.last().unwrap()));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// EM fit of a diagonal-covariance mixture with k-means++ seeding. Identical
/// seeds give bit-identical models.
pub fn gmm_fit(train: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmModel, DaganError> {
    if k == 0 || train.len() < k {
        return Err(DaganError::Usage(format!(
            "gmm needs at least k={k} training vectors, got {}",
            train.len()
        )));
    }
    let d = train[0].len();
    let n = train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means_init = kmeans_pp_centers(train, k, &mut rng);

    // global per-dimension variance seeds every component
    let mut gmean = vec![0.0; d];
    for x in train {
        for (m, &v) in gmean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    gmean.iter_mut().for_each(|m| *m /= n as f64);
    let mut gvar = vec![0.0; d];
    for x in train {
        for (s, (&v, &m)) in gvar.iter_mut().zip(x.iter().zip(gmean.iter())) {
            *s += (v - m) * (v - m);
        }
    }
    gvar.iter_mut().for_each(|s| *s = (*s / n as f64).max(GMM_VAR_FLOOR));

    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: means_init,
        vars: vec![gvar; k],
        lnl_history: Vec::new(),
    };

    let mut resp = vec![0.0; n * k];
    let mut prev_lnl = f64::NEG_INFINITY;
    for _ in 0..GMM_MAX_ITERS {
        // E-step
        let mut lnl = 0.0;
        for (i, x) in train.iter().enumerate() {
            let lp: Vec<f64> = (0..k)
                .map(|c| model.weights[c].ln() + log_gauss_diag(x, &model.means[c], &model.vars[c]))
                .collect();
            let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + lp.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            lnl += lse;
            for c in 0..k {
                resp[i * k + c] = (lp[c] - lse).exp();
            }
        }
        let lnl = lnl / n as f64;
        model.lnl_history.push(lnl);
        if (lnl - prev_lnl).abs() < GMM_TOL {
            break;
        }
        prev_lnl = lnl;
        // M-step
        for c in 0..k {
            let rc: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            model.weights[c] = rc / n as f64;
            let mut mean = vec![0.0; d];
            for (i, x) in train.iter().enumerate() {
                let r = resp[i * k + c];
                for (m, &v) in mean.iter_mut().zip(x.iter()) {
                    *m += r * v;
                }
            }
            if rc > 0.0 {
                mean.iter_mut().for_each(|m| *m /= rc);
            }
            let mut var = vec![0.0; d];
            for (i, x) in train.iter().enumerate() {
                let r = resp[i * k + c];
                for (s, (&v, &m)) in var.iter_mut().zip(x.iter().zip(mean.iter())) {
                    *s += r * (v - m) * (v - m);
                }
            }
            for s in var.iter_mut() {
                *s = if rc > 0.0 { (*s / rc).max(GMM_VAR_FLOOR) } else { GMM_VAR_FLOOR };
            }
            model.means[c] = mean;
            model.vars[c] = var;
        }
    }
    Ok(model)
}

pub fn gmm_log_likelihood(model: &GmmModel, x: &[f64]) -> f64 {
    let lp: Vec<f64> = (0..model.weights.len())
        .map(|c| model.weights[c].ln() + log_gauss_diag(x, &model.means[c], &model.vars[c]))
        .collect();
    let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + lp.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

/// Anomaly score: −log p(x); low for typical points, high for outliers.
pub fn gmm_score(model: &GmmModel, x: &[f64]) -> f64 {
    -gmm_log_likelihood(model, x)
}

/// Free-parameter count of a k-component diagonal GMM in d dimensions.
pub fn gmm_param_count(k: usize, d: usize) -> usize {
    k * (2 * d + 1) - 1
}

pub fn aic(ln_l: f64, p: usize) -> f64 {
    2.0 * p as f64 - 2.0 * ln_l
}

pub fn bic(ln_l: f64, p: usize, n: f64) -> f64 {
    p as f64 * n.ln() - 2.0 * ln_l
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmSelectRow {
    pub k: usize,
    pub ln_l: f64,
    pub aic: f64,
    pub bic: f64,
}

/// Fit every candidate k and report AIC/BIC; the returned index minimizes AIC.
pub fn gmm_model_select(
    train: &[Vec<f64>],
    ks: &[usize],
    seed: u64,
) -> Result<(Vec<GmmSelectRow>, usize), DaganError> {
    if ks.is_empty() {
        return Err(DaganError::Usage("no candidate component counts".into()));
    }
    let d = train[0].len();
    let n = train.len();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let model = gmm_fit(train, k, seed)?;
        let ln_l: f64 = train.iter().map(|x| gmm_log_likelihood(&model, x)).sum();
        let p = gmm_param_count(k, d);
        rows.push(GmmSelectRow {
            k,
            ln_l,
            aic: aic(ln_l, p),
            bic: bic(ln_l, p, n as f64),
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.aic.partial_cmp(&b.1.aic).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok((rows, best))
}

// ---------------------------------------------------------------------------
// BeatGAN
// ---------------------------------------------------------------------------

pub const BEATGAN_INPUT: usize = 1620; // 9 channels × 180 frames
pub const BEATGAN_G_WIDTHS: [usize; 10] = [1620, 256, 128, 32, 10, 10, 32, 128, 256, 1620];
pub const BEATGAN_D_WIDTHS: [usize; 5] = [1620, 256, 128, 32, 1];
const BEATGAN_ADV_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BeatGan {
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub seed: u64,
}

fn init_chain(ps: &mut ParamSet, rng: &mut ChaCha8Rng, widths: &[usize]) {
    for (l, w) in widths.windows(2).enumerate() {
        ps.insert(
            &format!("dense{}.w", l + 1),
            glorot_uniform(rng, w[0], w[1], &[w[0], w[1]]),
        );
        ps.insert(&format!("dense{}.b", l + 1), Tensor::zeros(&[w[1]]));
    }
}

impl BeatGan {
    pub fn new(seed: u64) -> Self {
        assert_eq!(BEATGAN_INPUT, 9 * crate::models::TARGET_FRAMES);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ParamSet::new();
        init_chain(&mut g, &mut rng, &BEATGAN_G_WIDTHS);
        let mut d = ParamSet::new();
        init_chain(&mut d, &mut rng, &BEATGAN_D_WIDTHS);
        BeatGan {
            generator: g,
            discriminator: d,
            seed,
        }
    }
}

fn chain_forward(
    g: &mut Graph,
    p: &BTreeMap<String, NodeId>,
    layers: usize,
    mut x: NodeId,
    sigmoid_out: bool,
) -> Result<NodeId, DaganError> {
    for l in 1..=layers {
        let w = p[&format!("dense{l}.w")];
        let b = p[&format!("dense{l}.b")];
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        if l < layers {
            x = g.relu(x);
        } else if sigmoid_out {
            x = g.sigmoid(x);
        }
    }
    Ok(x)
}

fn beatgan_check(window_len: usize) -> Result<(), DaganError> {
    if window_len != BEATGAN_INPUT {
        return Err(DaganError::Shape(format!(
            "beatgan window length {window_len}, expected {BEATGAN_INPUT}"
        )));
    }
    Ok(())
}

fn stack_windows(windows: &[Vec<f64>], idxs: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(&[idxs.len(), BEATGAN_INPUT]);
    for (bi, &i) in idxs.iter().enumerate() {
        t.data[bi * BEATGAN_INPUT..(bi + 1) * BEATGAN_INPUT].copy_from_slice(&windows[i]);
    }
    t
}

/// Adversarial autoencoder training: D sees real windows vs reconstructions,
/// G minimizes reconstruction MSE plus a small adversarial term.
pub fn beatgan_train(
    model: &mut BeatGan,
    windows: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<TrainLog, DaganError> {
    config.validate()?;
    if windows.is_empty() {
        return Err(DaganError::Usage("no training windows".into()));
    }
    for w in windows {
        beatgan_check(w.len())?;
    }
    let g_layers = BEATGAN_G_WIDTHS.len() - 1;
    let d_layers = BEATGAN_D_WIDTHS.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut g_sum = 0.0;
        let mut d_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = stack_windows(windows, chunk);
            step += 1;
            // D step
            let d_loss = {
                let mut g = Graph::new();
                let gp = model.generator.bind_frozen(&mut g);
                let dp = model.discriminator.bind(&mut g);
                let xin = g.constant(x.clone());
                let recon = chain_forward(&mut g, &gp, g_layers, xin, false)?;
                let s_real = chain_forward(&mut g, &dp, d_layers, xin, true)?;
                let s_fake = chain_forward(&mut g, &dp, d_layers, recon, true)?;
                let lr_ = g.mean_bce(s_real, 1.0);
                let lf = g.mean_bce(s_fake, 0.0);
                let sum = g.add(lr_, lf)?;
                let loss = g.scale(sum, 0.5);
                let v = g.value(loss).data[0];
                g.backward(loss)?;
                model.discriminator.zero_grads();
                model.discriminator.collect_grads(&g, &dp)?;
                model.discriminator.clip_grads(GRAD_CLIP_NORM);
                model.discriminator.adam_step(
                    config.lr,
                    (ADAM_BETA1, ADAM_BETA2),
                    ADAM_EPS,
                    step,
                    &|_| false,
                )?;
                v
            };
            // G step: reconstruction + adversarial
            let g_loss = {
                let mut g = Graph::new();
                let gp = model.generator.bind(&mut g);
                let dp = model.discriminator.bind_frozen(&mut g);
                let xin = g.constant(x.clone());
                let recon = chain_forward(&mut g, &gp, g_layers, xin, false)?;
                let neg = g.scale(xin, -1.0);
                let diff = g.add(recon, neg)?;
                let mse = g.mean_sq(diff);
                let s_fake = chain_forward(&mut g, &dp, d_layers, recon, true)?;
                let adv = g.mean_bce(s_fake, 1.0);
                let adv_scaled = g.scale(adv, BEATGAN_ADV_WEIGHT);
                let loss = g.add(mse, adv_scaled)?;
                let v = g.value(loss).data[0];
                g.backward(loss)?;
                model.generator.zero_grads();
                model.generator.collect_grads(&g, &gp)?;
                model.generator.clip_grads(GRAD_CLIP_NORM);
                model.generator.adam_step(
                    config.lr,
                    (ADAM_BETA1, ADAM_BETA2),
                    ADAM_EPS,
                    step,
                    &|_| false,
                )?;
                v
            };
            if !d_loss.is_finite() || !g_loss.is_finite() {
                return Err(DaganError::Diverged(format!(
                    "non-finite beatgan loss at epoch {epoch} batch {}",
                    bi + 1
                )));
            }
            g_sum += g_loss;
            d_sum += d_loss;
            batches += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            g_loss: g_sum / batches as f64,
            d_loss: d_sum / batches as f64,
            dev_d_acc: f64::NAN,
        });
    }
    let _ = sample_standard_normal; // noiseless autoencoder variant
    Ok(log)
}

/// Mean squared reconstruction error of one window.
pub fn beatgan_score(model: &BeatGan, window: &[f64]) -> Result<f64, DaganError> {
    beatgan_check(window.len())?;
    let g_layers = BEATGAN_G_WIDTHS.len() - 1;
    let mut g = Graph::new();
    let gp = model.generator.bind_frozen(&mut g);
    let xin = g.constant(Tensor::from_vec(&[1, BEATGAN_INPUT], window.to_vec())?);
    let recon = chain_forward(&mut g, &gp, g_layers, xin, false)?;
    let neg = g.scale(xin, -1.0);
    let diff = g.add(recon, neg)?;
    let mse = g.mean_sq(diff);
    Ok(g.value(mse).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(ac: f64, vs: f64, ss: f64, ya: f64) -> CanStats {
        CanStats { ac, vs, ss, ya }
    }

    #[test]
    fn rule_examples() {
        let cfg = FixedThresholdConfig::default();
        assert!(fixed_threshold_flag(&stats(1.0, 0.0, 0.05, 0.0), 0.0, &cfg));
        assert!(fixed_threshold_flag(&stats(0.0, 40.0, 0.5, 0.8), 0.0, &cfg));
        assert!(!fixed_threshold_flag(&stats(0.0, 0.0, 0.0, 0.0), 0.0, &cfg));
    }

    #[test]
    fn rules_tighten_monotonically() {
        let cfg = FixedThresholdConfig::default();
        let mut state = 3_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        for _ in 0..200 {
            let s = stats(next() * 4.0, next() * 120.0, next() * 2.0, next());
            let mut was_flagged = true;
            let mut alpha = -1.0;
            while alpha <= 1.0 {
                let f = fixed_threshold_flag(&s, alpha, &cfg);
                // once the flag turns off it must stay off as α rises
                assert!(!(f && !was_flagged), "flag re-appeared at α={alpha} for {s:?}");
                was_flagged = f;
                alpha += 0.01;
            }
        }
    }

    #[test]
    fn sweep_score_range_and_order() {
        let cfg = FixedThresholdConfig::default();
        let quiet = fixed_threshold_score(&stats(0.0, 0.0, 0.0, 0.0), &cfg);
        let wild = fixed_threshold_score(&stats(3.5, 0.0, 0.05, 0.0), &cfg);
        let mild = fixed_threshold_score(&stats(0.9, 0.0, 0.05, 0.0), &cfg);
        // even a quiet window is flagged once thresholds loosen far enough,
        // but the ranking must follow severity
        assert!(wild > mild && mild > quiet);
        assert!(quiet >= 0.0 && wild <= 1.0);
    }

    #[test]
    fn can_stats_of_ramp() {
        // speed ramp 0→30 km/h over 2 s: constant acceleration 30/3.6/2 m/s²
        let n = 60;
        let mut w = Tensor::zeros(&[9, n]);
        for t in 0..n {
            w.data[t] = 30.0 * t as f64 / (n - 1) as f64;
        }
        let s = can_stats(&w).unwrap();
        let expect = 30.0 / 3.6 / ((n - 1) as f64 / 30.0);
        assert!((s.ac - expect).abs() < 0.05 * expect, "{} vs {expect}", s.ac);
        assert!((s.vs - 30.0).abs() < 1e-12);
        assert_eq!(s.ss, 0.0);
        assert!(can_stats(&Tensor::zeros(&[3, 10])).is_err());
    }

    #[test]
    fn pca_line_recovers_analytic_axis() {
        // raw covariance of points on the line (t, 2t): eigenvector ∝ (1,2)/√5
        let pts: Vec<f64> = (-10..=10).map(|t| t as f64).collect();
        let d = 2;
        let mut cov = vec![0.0; 4];
        let n = pts.len() as f64;
        for &t in &pts {
            let x = [t, 2.0 * t];
            for r in 0..d {
                for c in 0..d {
                    cov[r * d + c] += x[r] * x[c] / n;
                }
            }
        }
        let (v, lambda) = top_eigenvector(&cov, d);
        let expect = [1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
        let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
        assert!((sign * v[0] - expect[0]).abs() < 1e-9);
        assert!((sign * v[1] - expect[1]).abs() < 1e-9);
        // trace = 5 * var(t); the line has rank 1 so λ = trace
        assert!((lambda - (cov[0] + cov[3])).abs() < 1e-9);
    }

    #[test]
    fn pca_projection_variance_is_top_eigenvalue() {
        let mut state = 12_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64 - 0.5
        };
        let train: Vec<Vec<f64>> = (0..80)
            .map(|_| {
                let a = next();
                let b = next();
                vec![a + 0.5 * b, b, 0.3 * a - b, next() * 0.1]
            })
            .collect();
        let m = pca_fit(&train).unwrap();
        let proj: Vec<f64> = train.iter().map(|x| pca_score(&m, x).unwrap()).collect();
        let n = proj.len() as f64;
        let mean = proj.iter().sum::<f64>() / n;
        let var = proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        assert!((var - m.top_eigenvalue).abs() < 1e-9, "{var} vs {}", m.top_eigenvalue);
        // orientation: non-negative skewness
        assert!(skewness(&proj) >= -1e-9);
    }

    #[test]
    fn pca_drops_constant_dimension_and_shift_invariance() {
        let train: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64, 7.0, (i as f64 * 0.3).sin()])
            .collect();
        let m = pca_fit(&train).unwrap();
        assert_eq!(m.kept, vec![0, 2]);
        // adding a constant to a dimension leaves scores unchanged
        let shifted: Vec<Vec<f64>> = train
            .iter()
            .map(|x| vec![x[0] + 100.0, x[1], x[2]])
            .collect();
        let m2 = pca_fit(&shifted).unwrap();
        for (a, b) in train.iter().zip(shifted.iter()) {
            let sa = pca_score(&m, a).unwrap();
            let sb = pca_score(&m2, b).unwrap();
            assert!((sa - sb).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_needs_enough_vectors() {
        let train: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; 5]).collect();
        assert!(pca_fit(&train).is_err());
    }

    #[test]
    fn gmm_single_component_recovers_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 400;
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                sample_standard_normal(&mut rng, 2)
                    .iter()
                    .enumerate()
                    .map(|(j, &z)| if j == 0 { 3.0 + z } else { -1.0 + 0.5 * z })
                    .collect()
            })
            .collect();
        let m = gmm_fit(&data, 1, 0).unwrap();
        assert!((m.means[0][0] - 3.0).abs() < 3.0 / (n as f64).sqrt() * 3.0);
        assert!((m.means[0][1] + 1.0).abs() < 0.2);
        // density decreases away from the mean
        let at_mean = gmm_score(&m, &m.means[0]);
        let far: Vec<f64> = vec![m.means[0][0] + 5.0, m.means[0][1]];
        assert!(gmm_score(&m, &far) > at_mean);
        // EM log-likelihood is non-decreasing
        for w in m.lnl_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn gmm_two_clusters_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..300 {
            let z = sample_standard_normal(&mut rng, 1)[0];
            data.push(vec![z * 0.1]);
        }
        for _ in 0..100 {
            let z = sample_standard_normal(&mut rng, 1)[0];
            data.push(vec![10.0 + z * 0.1]);
        }
        let m = gmm_fit(&data, 2, 1).unwrap();
        let mut ws = m.weights.clone();
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ws[0] - 0.25).abs() < 0.05, "{ws:?}");
        assert!((ws[1] - 0.75).abs() < 0.05, "{ws:?}");
    }

    #[test]
    fn gmm_determinism_and_bounds() {
        let data: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        let a = gmm_fit(&data, 3, 42).unwrap();
        let b = gmm_fit(&data, 3, 42).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.weights, b.weights);
        let wsum: f64 = a.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-9);
        assert!(a.weights.iter().all(|&w| w >= 0.0));
        assert!(gmm_fit(&data, 31, 0).is_err());
    }

    #[test]
    fn information_criteria_formulas() {
        assert_eq!(aic(0.0, 10), 20.0);
        assert!((bic(0.0, 10, std::f64::consts::E) - 10.0).abs() < 1e-12);
        assert_eq!(gmm_param_count(8, 51), 8 * 103 - 1);
    }

    #[test]
    fn gmm_select_prefers_small_k_on_single_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| sample_standard_normal(&mut rng, 2))
            .collect();
        let (rows, best) = gmm_model_select(&data, &[1, 2, 4], 0).unwrap();
        assert!(rows[best].k <= 2, "selected k {}", rows[best].k);
    }

    #[test]
    fn beatgan_widths_and_errors() {
        let m = BeatGan::new(0);
        for (l, w) in BEATGAN_G_WIDTHS.windows(2).enumerate() {
            assert_eq!(
                m.generator.get(&format!("dense{}.w", l + 1)).unwrap().shape,
                vec![w[0], w[1]]
            );
        }
        assert_eq!(
            m.discriminator.get("dense4.w").unwrap().shape,
            vec![32, 1]
        );
        assert!(beatgan_score(&m, &vec![0.0; 100]).is_err());
    }

    #[test]
    fn beatgan_training_reduces_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let windows: Vec<Vec<f64>> = (0..24)
            .map(|_| {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (0..BEATGAN_INPUT)
                    .map(|i| (i as f64 * 0.05 + phase).sin())
                    .collect()
            })
            .collect();
        let mut m = BeatGan::new(1);
        let before: f64 = windows.iter().map(|w| beatgan_score(&m, w).unwrap()).sum();
        let log = beatgan_train(
            &mut m,
            &windows,
            &TrainConfig {
                epochs: 5,
                batch_size: 8,
                seed: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(log.records.len(), 5);
        let after: f64 = windows.iter().map(|w| beatgan_score(&m, w).unwrap()).sum();
        assert!(after < before, "{after} !< {before}");
        assert!(after.is_finite());
    }
}
