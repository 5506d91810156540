//! Generator/discriminator pairs for the four conditional-GAN variants.
//!
//! All four share the same contract: the generator maps (condition, noise) to
//! a prediction with exactly the target-window shape, the discriminator maps a
//! candidate window (plus condition, where the architecture is conditional) to
//! a sigmoid scalar. Hidden activations are leaky ReLU for dense/conv layers
//! and the standard tanh/sigmoid cell inside the LSTM; generator outputs are
//! linear.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DaganError;
use crate::features::feature_dimension;
use crate::graph::{Graph, LstmLayerIds, NodeId};
use crate::nn::{glorot_uniform, ParamSet};

pub const NOISE_DIM: usize = 16;
/// Negative-side slope of the hidden leaky-ReLU activations. A plain ReLU
/// lets the discriminator's narrow conv funnel (final layer is one channel)
/// die irrecoverably during adversarial training.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const TARGET_SECONDS: usize = 6;
pub const TARGET_FRAMES: usize = 180;
pub const LSTM_CONDITION_SECONDS: usize = 60;
pub const SHORT_CONDITION_SECONDS: usize = 6;
pub const LSTM_HIDDEN: usize = 27;
pub const LSTM_LAYERS: usize = 2;
pub const CNN_CHANNELS: [usize; 4] = [18, 18, 9, 1];
pub const CNN_KERNELS: [usize; 4] = [9, 3, 3, 3];
pub const FC_G_WIDTH: usize = 180;
pub const FC_D_WIDTH: usize = 51;
pub const FC_HIDDEN_LAYERS: usize = 5;
/// The long condition splits into this many non-overlapping 6 s segments.
pub const CNN_LSTM_SEGMENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Fc,
    Cnn,
    Lstm,
    CnnLstm,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Fc => "fc",
            Arch::Cnn => "cnn",
            Arch::Lstm => "lstm",
            Arch::CnnLstm => "cnn-lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DaganError> {
        match s {
            "fc" => Ok(Arch::Fc),
            "cnn" => Ok(Arch::Cnn),
            "lstm" => Ok(Arch::Lstm),
            "cnn-lstm" => Ok(Arch::CnnLstm),
            other => Err(DaganError::Usage(format!("unknown architecture '{other}'"))),
        }
    }

    pub fn condition_seconds(&self) -> usize {
        match self {
            Arch::Fc | Arch::Cnn => SHORT_CONDITION_SECONDS,
            Arch::Lstm | Arch::CnnLstm => LSTM_CONDITION_SECONDS,
        }
    }

    pub const ALL: [Arch; 4] = [Arch::Fc, Arch::Cnn, Arch::Lstm, Arch::CnnLstm];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Can,
    Phy,
    Both,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Can => "can",
            Modality::Phy => "physio",
            Modality::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DaganError> {
        match s {
            "can" => Ok(Modality::Can),
            "physio" | "phy" => Ok(Modality::Phy),
            "both" => Ok(Modality::Both),
            other => Err(DaganError::Usage(format!("unknown modality '{other}'"))),
        }
    }

    /// Indices into the 9-channel header-order signal.
    pub fn channel_indices(&self) -> &'static [usize] {
        match self {
            Modality::Can => &[0, 1, 2, 3, 4, 5],
            Modality::Phy => &[6, 7, 8],
            Modality::Both => &[0, 1, 2, 3, 4, 5, 6, 7, 8],
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channel_indices().len()
    }

    /// Positions of the physiological channels inside this modality's subset.
    pub fn physio_positions(&self) -> &'static [usize] {
        match self {
            Modality::Can => &[],
            Modality::Phy => &[0, 1, 2],
            Modality::Both => &[6, 7, 8],
        }
    }

    /// Window-descriptor length for this subset (51 for both).
    pub fn feature_dim(&self) -> usize {
        feature_dimension(self.channel_count(), self.physio_positions().len())
    }

    pub const ALL: [Modality; 3] = [Modality::Can, Modality::Phy, Modality::Both];
}

/// Output time length of the shared 4-layer conv block for input length `t`.
pub fn conv_block_out_len(t: usize) -> usize {
    CNN_KERNELS.iter().fold(t, |acc, &k| acc - k + 1)
}

/// Standard-normal draws via Box-Muller (two uniforms per pair of outputs).
pub fn sample_standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        out.push(r * a.cos());
        if out.len() < n {
            out.push(r * a.sin());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GanModel {
    pub arch: Arch,
    pub modality: Modality,
    pub seed: u64,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
}

fn init_dense(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, nin: usize, nout: usize) {
    ps.insert(&format!("{name}.w"), glorot_uniform(rng, nin, nout, &[nin, nout]));
    ps.insert(&format!("{name}.b"), crate::tensor::Tensor::zeros(&[nout]));
}

fn init_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize) {
    ps.insert(
        &format!("{name}.k"),
        glorot_uniform(rng, cin * k, cout * k, &[cout, cin, k]),
    );
    ps.insert(&format!("{name}.b"), crate::tensor::Tensor::zeros(&[cout]));
}

fn init_lstm(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, din: usize, hidden: usize) {
    let h4 = 4 * hidden;
    ps.insert(&format!("{name}.wx"), glorot_uniform(rng, din, h4, &[din, h4]));
    ps.insert(&format!("{name}.wh"), glorot_uniform(rng, hidden, h4, &[hidden, h4]));
    let mut b = crate::tensor::Tensor::zeros(&[h4]);
    // forget-gate bias starts at +1 so early training keeps long memory
    for j in 0..hidden {
        b.data[hidden + j] = 1.0;
    }
    ps.insert(&format!("{name}.b"), b);
}

impl GanModel {
    pub fn new(arch: Arch, modality: Modality, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = modality.channel_count();
        let feat = modality.feature_dim();
        let out_dim = ch * TARGET_FRAMES;
        let token = conv_block_out_len(TARGET_FRAMES);
        let mut g = ParamSet::new();
        let mut d = ParamSet::new();
        match arch {
            Arch::Fc => {
                init_dense(&mut g, &mut rng, "dense1", feat + NOISE_DIM, FC_G_WIDTH);
                for l in 2..=FC_HIDDEN_LAYERS {
                    init_dense(&mut g, &mut rng, &format!("dense{l}"), FC_G_WIDTH, FC_G_WIDTH);
                }
                init_dense(&mut g, &mut rng, "out", FC_G_WIDTH, feat);
                init_dense(&mut d, &mut rng, "dense1", feat, FC_D_WIDTH);
                for l in 2..=FC_HIDDEN_LAYERS {
                    init_dense(&mut d, &mut rng, &format!("dense{l}"), FC_D_WIDTH, FC_D_WIDTH);
                }
                init_dense(&mut d, &mut rng, "out", FC_D_WIDTH, 1);
            }
            Arch::Cnn => {
                let mut cin = ch + 1; // condition plus one noise channel
                for (i, (&cout, &k)) in CNN_CHANNELS.iter().zip(CNN_KERNELS.iter()).enumerate() {
                    init_conv(&mut g, &mut rng, &format!("conv{}", i + 1), cout, cin, k);
                    cin = cout;
                }
                init_dense(&mut g, &mut rng, "head", token, out_dim);
                let mut cin = ch;
                for (i, (&cout, &k)) in CNN_CHANNELS.iter().zip(CNN_KERNELS.iter()).enumerate() {
                    init_conv(&mut d, &mut rng, &format!("conv{}", i + 1), cout, cin, k);
                    cin = cout;
                }
                init_dense(&mut d, &mut rng, "head", conv_block_out_len(2 * TARGET_FRAMES), 1);
            }
            Arch::Lstm => {
                init_lstm(&mut g, &mut rng, "lstm1", ch, LSTM_HIDDEN);
                init_lstm(&mut g, &mut rng, "lstm2", LSTM_HIDDEN, LSTM_HIDDEN);
                init_dense(&mut g, &mut rng, "head", LSTM_HIDDEN + NOISE_DIM, out_dim);
                init_lstm(&mut d, &mut rng, "lstm1", ch, LSTM_HIDDEN);
                init_lstm(&mut d, &mut rng, "lstm2", LSTM_HIDDEN, LSTM_HIDDEN);
                init_dense(&mut d, &mut rng, "head", LSTM_HIDDEN, 1);
            }
            Arch::CnnLstm => {
                let mut cin = ch + 1;
                for (i, (&cout, &k)) in CNN_CHANNELS.iter().zip(CNN_KERNELS.iter()).enumerate() {
                    init_conv(&mut g, &mut rng, &format!("conv{}", i + 1), cout, cin, k);
                    cin = cout;
                }
                init_lstm(&mut g, &mut rng, "lstm1", token, LSTM_HIDDEN);
                init_lstm(&mut g, &mut rng, "lstm2", LSTM_HIDDEN, LSTM_HIDDEN);
                init_dense(&mut g, &mut rng, "head", LSTM_HIDDEN, out_dim);
                let mut cin = ch;
                for (i, (&cout, &k)) in CNN_CHANNELS.iter().zip(CNN_KERNELS.iter()).enumerate() {
                    init_conv(&mut d, &mut rng, &format!("conv{}", i + 1), cout, cin, k);
                    cin = cout;
                }
                init_lstm(&mut d, &mut rng, "lstm1", token, LSTM_HIDDEN);
                init_lstm(&mut d, &mut rng, "lstm2", LSTM_HIDDEN, LSTM_HIDDEN);
                // The head reads the final LSTM state plus the candidate's raw
                // conv token. Routing the candidate evidence only through the
                // saturating LSTM gates flattens the real/fake score gap that
                // the anomaly score is built on.
                init_dense(&mut d, &mut rng, "head", LSTM_HIDDEN + token, 1);
            }
        }
        GanModel {
            arch,
            modality,
            seed,
            generator: g,
            discriminator: d,
        }
    }

    pub fn condition_frames(&self) -> usize {
        self.arch.condition_seconds() * crate::data::SAMPLE_RATE
    }

    /// Shape of one noise draw for a batch of `batch` samples.
    pub fn noise_shape(&self, batch: usize) -> Vec<usize> {
        match self.arch {
            Arch::Fc | Arch::Lstm => vec![batch, NOISE_DIM],
            Arch::Cnn => vec![batch, 1, TARGET_FRAMES],
            Arch::CnnLstm => vec![batch, CNN_LSTM_SEGMENTS * TARGET_FRAMES],
        }
    }

    /// Generator prediction with the exact target shape: [B x feat] for FC,
    /// [B x ch x 180] otherwise.
    pub fn generator_forward(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        condition: NodeId,
        noise: NodeId,
    ) -> Result<NodeId, DaganError> {
        let ch = self.modality.channel_count();
        match self.arch {
            Arch::Fc => {
                let mut x = g.concat_last(condition, noise)?;
                for l in 1..=FC_HIDDEN_LAYERS {
                    x = dense(g, p, &format!("dense{l}"), x)?;
                    x = g.leaky_relu(x, LEAKY_SLOPE);
                }
                dense(g, p, "out", x)
            }
            Arch::Cnn => {
                let batch = g.value(condition).shape[0];
                let x = g.concat_channels(condition, noise)?;
                let x = conv_block(g, p, x)?;
                let token = conv_block_out_len(TARGET_FRAMES);
                let x = g.reshape(x, &[batch, token])?;
                let x = dense(g, p, "head", x)?;
                g.reshape(x, &[batch, ch, TARGET_FRAMES])
            }
            Arch::Lstm => {
                let batch = g.value(condition).shape[0];
                let seq = g.signal_to_seq(condition)?;
                let h = lstm_stack(g, p, seq)?;
                let x = g.concat_last(h, noise)?;
                let x = dense(g, p, "head", x)?;
                g.reshape(x, &[batch, ch, TARGET_FRAMES])
            }
            Arch::CnnLstm => {
                let batch = g.value(condition).shape[0];
                let frames = CNN_LSTM_SEGMENTS * TARGET_FRAMES;
                let flat = g.reshape(condition, &[batch * ch, frames])?;
                let token = conv_block_out_len(TARGET_FRAMES);
                let mut tokens = Vec::with_capacity(CNN_LSTM_SEGMENTS);
                for s in 0..CNN_LSTM_SEGMENTS {
                    let seg = g.slice_cols(flat, s * TARGET_FRAMES, TARGET_FRAMES)?;
                    let seg = g.reshape(seg, &[batch, ch, TARGET_FRAMES])?;
                    let nz = g.slice_cols(noise, s * TARGET_FRAMES, TARGET_FRAMES)?;
                    let nz = g.reshape(nz, &[batch, 1, TARGET_FRAMES])?;
                    let x = g.concat_channels(seg, nz)?;
                    let x = conv_block(g, p, x)?;
                    tokens.push(g.reshape(x, &[batch, token])?);
                }
                let seq = g.stack_seq(&tokens)?;
                let h = lstm_stack(g, p, seq)?;
                let x = dense(g, p, "head", h)?;
                g.reshape(x, &[batch, ch, TARGET_FRAMES])
            }
        }
    }

    /// Discriminator score in (0,1), shape [B x 1].
    pub fn discriminator_forward(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        condition: NodeId,
        candidate: NodeId,
    ) -> Result<NodeId, DaganError> {
        let x = self.discriminator_logits(g, p, condition, candidate)?;
        Ok(g.sigmoid(x))
    }

    /// Pre-sigmoid discriminator output, shape [B x 1]. Training losses work
    /// on logits so saturated scores keep a usable gradient. The FC variant
    /// judges the candidate features alone; the others condition on the past
    /// window.
    pub fn discriminator_logits(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        condition: NodeId,
        candidate: NodeId,
    ) -> Result<NodeId, DaganError> {
        match self.arch {
            Arch::Fc => {
                let mut x = candidate;
                for l in 1..=FC_HIDDEN_LAYERS {
                    x = dense(g, p, &format!("dense{l}"), x)?;
                    x = g.leaky_relu(x, LEAKY_SLOPE);
                }
                dense(g, p, "out", x)
            }
            Arch::Cnn => {
                let batch = g.value(condition).shape[0];
                let x = g.concat_last(condition, candidate)?; // time concat
                let x = conv_block(g, p, x)?;
                let len = conv_block_out_len(2 * TARGET_FRAMES);
                let x = g.reshape(x, &[batch, len])?;
                dense(g, p, "head", x)
            }
            Arch::Lstm => {
                let x = g.concat_last(condition, candidate)?;
                let seq = g.signal_to_seq(x)?;
                let h = lstm_stack(g, p, seq)?;
                dense(g, p, "head", h)
            }
            Arch::CnnLstm => {
                let batch = g.value(condition).shape[0];
                let ch = self.modality.channel_count();
                let frames = CNN_LSTM_SEGMENTS * TARGET_FRAMES;
                let flat = g.reshape(condition, &[batch * ch, frames])?;
                let token = conv_block_out_len(TARGET_FRAMES);
                let mut tokens = Vec::with_capacity(CNN_LSTM_SEGMENTS + 1);
                for s in 0..CNN_LSTM_SEGMENTS {
                    let seg = g.slice_cols(flat, s * TARGET_FRAMES, TARGET_FRAMES)?;
                    let seg = g.reshape(seg, &[batch, ch, TARGET_FRAMES])?;
                    let x = conv_block(g, p, seg)?;
                    tokens.push(g.reshape(x, &[batch, token])?);
                }
                let x = conv_block(g, p, candidate)?;
                let cand_token = g.reshape(x, &[batch, token])?;
                tokens.push(cand_token);
                let seq = g.stack_seq(&tokens)?;
                let h = lstm_stack(g, p, seq)?;
                let h = g.concat_last(h, cand_token)?; // candidate skip path
                dense(g, p, "head", h)
            }
        }
    }

    /// Copy every same-named, same-shaped parameter from the donors. Used to
    /// warm-start the CNN+LSTM variant from trained CNN and LSTM models.
    pub fn import_donor_params(&mut self, donors: &[&GanModel]) {
        for donor in donors {
            for (dst, src) in [
                (&mut self.generator, &donor.generator),
                (&mut self.discriminator, &donor.discriminator),
            ] {
                let names: Vec<String> = dst.names().map(|s| s.to_string()).collect();
                for name in names {
                    if let Some(t) = src.get(&name) {
                        let target = dst.get_mut(&name).unwrap();
                        if target.shape == t.shape {
                            *target = t.clone();
                        }
                    }
                }
            }
        }
    }
}

/// Parameters whose names mark them as part of the shared conv block.
pub fn is_conv_param(name: &str) -> bool {
    name.starts_with("conv")
}

fn pid(p: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, DaganError> {
    p.get(name)
        .copied()
        .ok_or_else(|| DaganError::Usage(format!("missing parameter node '{name}'")))
}

fn dense(
    g: &mut Graph,
    p: &BTreeMap<String, NodeId>,
    name: &str,
    x: NodeId,
) -> Result<NodeId, DaganError> {
    let w = pid(p, &format!("{name}.w"))?;
    let b = pid(p, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn conv_block(
    g: &mut Graph,
    p: &BTreeMap<String, NodeId>,
    mut x: NodeId,
) -> Result<NodeId, DaganError> {
    for i in 1..=CNN_CHANNELS.len() {
        let k = pid(p, &format!("conv{i}.k"))?;
        let b = pid(p, &format!("conv{i}.b"))?;
        x = g.conv1d(x, k, b, 1)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
    }
    Ok(x)
}

fn lstm_stack(
    g: &mut Graph,
    p: &BTreeMap<String, NodeId>,
    seq: NodeId,
) -> Result<NodeId, DaganError> {
    let mut layers = Vec::with_capacity(LSTM_LAYERS);
    for l in 1..=LSTM_LAYERS {
        layers.push(LstmLayerIds {
            wx: pid(p, &format!("lstm{l}.wx"))?,
            wh: pid(p, &format!("lstm{l}.wh"))?,
            b: pid(p, &format!("lstm{l}.b"))?,
        });
    }
    g.lstm_seq(seq, &layers, LSTM_HIDDEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn forward_shapes(arch: Arch, modality: Modality) {
        let model = GanModel::new(arch, modality, 9);
        let ch = modality.channel_count();
        let batch = 2;
        let cond_frames = model.condition_frames();
        let mut g = Graph::new();
        let gp = model.generator.bind_frozen(&mut g);
        let dp = model.discriminator.bind_frozen(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let (cond, target) = if arch == Arch::Fc {
            let f = modality.feature_dim();
            (
                g.constant(Tensor::from_vec(&[batch, f], sample_standard_normal(&mut rng, batch * f)).unwrap()),
                g.constant(Tensor::from_vec(&[batch, f], sample_standard_normal(&mut rng, batch * f)).unwrap()),
            )
        } else {
            (
                g.constant(
                    Tensor::from_vec(
                        &[batch, ch, cond_frames],
                        sample_standard_normal(&mut rng, batch * ch * cond_frames),
                    )
                    .unwrap(),
                ),
                g.constant(
                    Tensor::from_vec(
                        &[batch, ch, TARGET_FRAMES],
                        sample_standard_normal(&mut rng, batch * ch * TARGET_FRAMES),
                    )
                    .unwrap(),
                ),
            )
        };
        let nshape = model.noise_shape(batch);
        let n: usize = nshape.iter().product();
        let noise = g.constant(Tensor::from_vec(&nshape, sample_standard_normal(&mut rng, n)).unwrap());

        let fake = model.generator_forward(&mut g, &gp, cond, noise).unwrap();
        assert_eq!(g.value(fake).shape, g.value(target).shape, "{arch:?} {modality:?}");
        assert!(g.value(fake).all_finite());

        let s_real = model.discriminator_forward(&mut g, &dp, cond, target).unwrap();
        let s_fake = model.discriminator_forward(&mut g, &dp, cond, fake).unwrap();
        for &id in &[s_real, s_fake] {
            let v = g.value(id);
            assert_eq!(v.shape, vec![batch, 1]);
            assert!(v.data.iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn fc_shapes_all_modalities() {
        for m in Modality::ALL {
            forward_shapes(Arch::Fc, m);
        }
    }

    #[test]
    fn cnn_shapes_all_modalities() {
        for m in Modality::ALL {
            forward_shapes(Arch::Cnn, m);
        }
    }

    #[test]
    fn lstm_shapes() {
        forward_shapes(Arch::Lstm, Modality::Both);
    }

    #[test]
    fn cnn_lstm_shapes() {
        forward_shapes(Arch::CnnLstm, Modality::Both);
    }

    #[test]
    fn fc_layer_widths() {
        let m = GanModel::new(Arch::Fc, Modality::Both, 0);
        assert_eq!(m.modality.feature_dim(), 51);
        assert_eq!(
            m.generator.get("dense1.w").unwrap().shape,
            vec![51 + NOISE_DIM, 180]
        );
        for l in 2..=5 {
            assert_eq!(
                m.generator.get(&format!("dense{l}.w")).unwrap().shape,
                vec![180, 180]
            );
        }
        assert_eq!(m.generator.get("out.w").unwrap().shape, vec![180, 51]);
        assert_eq!(m.discriminator.get("dense1.w").unwrap().shape, vec![51, 51]);
        assert_eq!(m.discriminator.get("out.w").unwrap().shape, vec![51, 1]);
    }

    #[test]
    fn cnn_geometry() {
        let m = GanModel::new(Arch::Cnn, Modality::Both, 0);
        let expect = [(18, 10, 9), (18, 18, 3), (9, 18, 3), (1, 9, 3)];
        for (i, &(cout, cin, k)) in expect.iter().enumerate() {
            assert_eq!(
                m.generator.get(&format!("conv{}.k", i + 1)).unwrap().shape,
                vec![cout, cin, k]
            );
        }
        assert_eq!(m.discriminator.get("conv1.k").unwrap().shape, vec![18, 9, 9]);
        assert_eq!(conv_block_out_len(180), 166);
        assert_eq!(conv_block_out_len(360), 346);
        assert_eq!(m.generator.get("head.w").unwrap().shape, vec![166, 9 * 180]);
        assert_eq!(m.discriminator.get("head.w").unwrap().shape, vec![346, 1]);
    }

    #[test]
    fn lstm_geometry() {
        let m = GanModel::new(Arch::Lstm, Modality::Both, 0);
        assert_eq!(m.generator.get("lstm1.wx").unwrap().shape, vec![9, 108]);
        assert_eq!(m.generator.get("lstm2.wx").unwrap().shape, vec![27, 108]);
        assert_eq!(m.generator.get("lstm1.wh").unwrap().shape, vec![27, 108]);
        assert_eq!(m.generator.get("head.w").unwrap().shape, vec![27 + 16, 9 * 180]);
        assert_eq!(m.discriminator.get("head.w").unwrap().shape, vec![27, 1]);
        // forget-gate bias block is +1
        let b = m.generator.get("lstm1.b").unwrap();
        assert!(b.data[27..54].iter().all(|&v| v == 1.0));
        assert!(b.data[..27].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = GanModel::new(Arch::Cnn, Modality::Both, 5);
        let b = GanModel::new(Arch::Cnn, Modality::Both, 5);
        let c = GanModel::new(Arch::Cnn, Modality::Both, 6);
        for (name, t) in a.generator.iter() {
            assert_eq!(t.data, b.generator.get(name).unwrap().data);
        }
        assert_ne!(
            a.generator.get("conv1.k").unwrap().data,
            c.generator.get("conv1.k").unwrap().data
        );
    }

    #[test]
    fn donor_import_copies_matching_shapes_only() {
        let cnn = GanModel::new(Arch::Cnn, Modality::Both, 1);
        let lstm = GanModel::new(Arch::Lstm, Modality::Both, 2);
        let mut joint = GanModel::new(Arch::CnnLstm, Modality::Both, 3);
        let head_before = joint.generator.get("head.w").unwrap().clone();
        let lstm1_before = joint.generator.get("lstm1.wx").unwrap().clone();
        joint.import_donor_params(&[&cnn, &lstm]);
        // conv block comes from the CNN donor
        assert_eq!(
            joint.generator.get("conv1.k").unwrap().data,
            cnn.generator.get("conv1.k").unwrap().data
        );
        // second LSTM layer is shape-compatible with the LSTM donor
        assert_eq!(
            joint.generator.get("lstm2.wx").unwrap().data,
            lstm.generator.get("lstm2.wx").unwrap().data
        );
        // first LSTM layer consumes conv tokens, donor shape differs: untouched
        assert_eq!(joint.generator.get("lstm1.wx").unwrap().data, lstm1_before.data);
        // heads have different input widths: untouched
        assert_eq!(joint.generator.get("head.w").unwrap().data, head_before.data);
    }

    #[test]
    fn arch_and_modality_roundtrip() {
        for a in Arch::ALL {
            assert_eq!(Arch::parse(a.as_str()).unwrap(), a);
        }
        for m in Modality::ALL {
            assert_eq!(Modality::parse(m.as_str()).unwrap(), m);
        }
        assert!(Arch::parse("mlp").is_err());
        assert!(Modality::parse("video").is_err());
    }
}
