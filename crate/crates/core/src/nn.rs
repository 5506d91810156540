//! Parameter containers, initialization, plain-forward layer primitives and
//! the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::DaganError;
use crate::graph::{sigmoid, Graph, NodeId};
use crate::tensor::{matmul_acc, Tensor};

pub const GRAD_CLIP_NORM: f64 = 5.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named map of trainable tensors. Every parameter carries a gradient slot
/// and Adam moment buffers of identical shape. Iteration order is the sorted
/// name order, which keeps updates and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape.clone();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor) -> Result<(), DaganError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DaganError::Usage(format!("unknown parameter {name}")))?;
        if e.grad.shape != g.shape {
            return Err(DaganError::Shape(format!(
                "gradient shape {:?} for parameter {name} of shape {:?}",
                g.shape, e.grad.shape
            )));
        }
        for (d, &v) in e.grad.data.iter_mut().zip(g.data.iter()) {
            *d += v;
        }
        Ok(())
    }

    /// Register all parameters as trainable graph leaves.
    pub fn bind(&self, graph: &mut Graph) -> BTreeMap<String, NodeId> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), graph.param(e.value.clone())))
            .collect()
    }

    /// Register all parameters as constants: values flow forward, no gradients.
    pub fn bind_frozen(&self, graph: &mut Graph) -> BTreeMap<String, NodeId> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), graph.constant(e.value.clone())))
            .collect()
    }

    /// Pull gradients accumulated in the graph back into the grad slots.
    pub fn collect_grads(
        &mut self,
        graph: &Graph,
        ids: &BTreeMap<String, NodeId>,
    ) -> Result<(), DaganError> {
        for (name, &id) in ids {
            if let Some(g) = graph.grad(id) {
                let g = g.clone();
                self.add_grad(name, &g)?;
            }
        }
        Ok(())
    }

    /// Global L2-norm gradient clipping at `max_norm`.
    pub fn clip_grads(&mut self, max_norm: f64) {
        let sq: f64 = self
            .entries
            .values()
            .map(|e| e.grad.data.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                e.grad.data.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// One Adam update with bias correction; `t` is the 1-based step index.
    /// Parameters whose name satisfies `frozen` are left untouched.
    pub fn adam_step(
        &mut self,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        t: usize,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Result<(), DaganError> {
        if t < 1 {
            return Err(DaganError::Usage("adam step index must be >= 1".into()));
        }
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for (name, e) in self.entries.iter_mut() {
            if frozen(name) {
                continue;
            }
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                e.m.data[i] = b1 * e.m.data[i] + (1.0 - b1) * g;
                e.v.data[i] = b2 * e.v.data[i] + (1.0 - b2) * g * g;
                let mhat = e.m.data[i] / bc1;
                let vhat = e.v.data[i] / bc2;
                e.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Glorot-uniform initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

/// Elementwise activation over an arbitrary tensor.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = match kind {
            Activation::Sigmoid => sigmoid(*v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        };
    }
    out
}

/// out = input[batch x n] . weights[n x m] + bias[m]
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, DaganError> {
    if input.ndim() != 2 || weights.ndim() != 2 || input.shape[1] != weights.shape[0] {
        return Err(DaganError::Shape(format!(
            "dense shapes {:?} x {:?}",
            input.shape, weights.shape
        )));
    }
    if bias.shape != vec![weights.shape[1]] {
        return Err(DaganError::Shape("dense bias shape".into()));
    }
    let (m, k, n) = (input.shape[0], input.shape[1], weights.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(&input.data, &weights.data, &mut out.data, m, k, n);
    for r in 0..m {
        for c in 0..n {
            out.data[r * n + c] += bias.data[c];
        }
    }
    Ok(out)
}

/// Valid cross-correlation of a single [ch_in x T] signal.
pub fn conv1d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor, DaganError> {
    if input.ndim() != 2 {
        return Err(DaganError::Shape("conv1d_forward input must be 2-D".into()));
    }
    let mut g = Graph::new();
    let batched = input.reshaped(&[1, input.shape[0], input.shape[1]])?;
    let i = g.constant(batched);
    let k = g.constant(kernels.clone());
    let b = g.constant(bias.clone());
    let out = g.conv1d(i, k, b, stride)?;
    let v = g.value(out);
    v.reshaped(&v.shape[1..].to_vec())
}

/// Binary cross-entropy of a scalar prediction, clamped to [eps, 1-eps].
pub fn bce_loss(prediction: f64, label: f64) -> f64 {
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// One stacked-LSTM layer's parameters for the plain (non-graph) forward.
pub struct LstmLayerRef<'a> {
    pub wx: &'a Tensor, // [d_in x 4H]
    pub wh: &'a Tensor, // [H x 4H]
    pub b: &'a Tensor,  // [4H]
}

/// Plain LSTM forward over a [T x d] input. Returns all hidden states of the
/// top layer as [T x H] plus the final (h, c) of every layer. Gate block
/// order is (input, forget, cell, output).
pub fn lstm_forward(
    inputs: &Tensor,
    layers: &[LstmLayerRef<'_>],
    initial: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Result<(Tensor, Vec<(Vec<f64>, Vec<f64>)>), DaganError> {
    if inputs.ndim() != 2 || layers.is_empty() {
        return Err(DaganError::Shape("lstm_forward needs [T x d] input".into()));
    }
    let t_steps = inputs.shape[0];
    let hidden = layers[0].wh.shape[0];
    let h4 = 4 * hidden;
    let mut d_in = inputs.shape[1];
    for l in layers {
        if l.wx.shape != vec![d_in, h4] || l.wh.shape != vec![hidden, h4] || l.b.shape != vec![h4] {
            return Err(DaganError::Shape(format!(
                "lstm layer shapes wx {:?} wh {:?} b {:?}",
                l.wx.shape, l.wh.shape, l.b.shape
            )));
        }
        d_in = hidden;
    }
    let mut h: Vec<Vec<f64>> = (0..layers.len()).map(|_| vec![0.0; hidden]).collect();
    let mut c: Vec<Vec<f64>> = (0..layers.len()).map(|_| vec![0.0; hidden]).collect();
    if let Some((h0, c0)) = initial {
        if h0.len() != layers.len() || c0.len() != layers.len() {
            return Err(DaganError::Shape("initial state layer count".into()));
        }
        for (dst, src) in h.iter_mut().zip(h0) {
            dst.copy_from_slice(src);
        }
        for (dst, src) in c.iter_mut().zip(c0) {
            dst.copy_from_slice(src);
        }
    }
    let mut top = Tensor::zeros(&[t_steps, hidden]);
    let mut x = vec![0.0; inputs.shape[1].max(hidden)];
    for t in 0..t_steps {
        let mut d = inputs.shape[1];
        x[..d].copy_from_slice(inputs.row(t));
        for (li, l) in layers.iter().enumerate() {
            let mut z = vec![0.0; h4];
            matmul_acc(&x[..d], &l.wx.data, &mut z, 1, d, h4);
            matmul_acc(&h[li], &l.wh.data, &mut z, 1, hidden, h4);
            for j in 0..hidden {
                let zi = sigmoid(z[j] + l.b.data[j]);
                let zf = sigmoid(z[hidden + j] + l.b.data[hidden + j]);
                let zg = (z[2 * hidden + j] + l.b.data[2 * hidden + j]).tanh();
                let zo = sigmoid(z[3 * hidden + j] + l.b.data[3 * hidden + j]);
                let cn = zf * c[li][j] + zi * zg;
                c[li][j] = cn;
                h[li][j] = zo * cn.tanh();
            }
            x[..hidden].copy_from_slice(&h[li]);
            d = hidden;
        }
        top.data[t * hidden..(t + 1) * hidden].copy_from_slice(h.last().unwrap());
    }
    let finals = h.into_iter().zip(c).collect();
    Ok((top, finals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dense_identity() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn dense_formula() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data, vec![6.0]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![0.3, -0.7, 2.0, 0.1]).unwrap();
        let b = Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data, vec![5.0, 5.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0; 2]).unwrap();
        assert!(dense_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn conv_center_impulse() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let out = conv1d_forward(&x, &k, &b, 1).unwrap();
        assert_eq!(out.data, vec![2.0]);
    }

    #[test]
    fn conv_sliding_window() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(conv1d_forward(&x, &k, &b, 1).unwrap().data, vec![6.0, 9.0]);

        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(conv1d_forward(&x, &k, &b, 1).unwrap().data, vec![3.0]);
    }

    #[test]
    fn conv_too_short() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3], vec![1.0; 3]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(conv1d_forward(&x, &k, &b, 1).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::from_vec(&[3], vec![0.0, 0.0, -3.0]).unwrap();
        assert_eq!(activation(&x, Activation::Sigmoid).data[0], 0.5);
        assert_eq!(activation(&x, Activation::Tanh).data[1], 0.0);
        assert_eq!(activation(&x, Activation::Relu).data[2], 0.0);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-7, 1.0) < 1e-6);
        assert!((bce_loss(0.9, 0.0) - 2.302585092994046).abs() < 1e-9);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn lstm_zero_params_zero_hidden() {
        let wx = Tensor::zeros(&[2, 12]);
        let wh = Tensor::zeros(&[3, 12]);
        let b = Tensor::zeros(&[12]);
        let layers = [LstmLayerRef {
            wx: &wx,
            wh: &wh,
            b: &b,
        }];
        let inputs = Tensor::from_vec(&[4, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let (h, finals) = lstm_forward(&inputs, &layers, None).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
        assert!(finals[0].0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_scalar_reimplementation() {
        // independent scalar oracle for a 1-layer, 2-unit LSTM over T=3
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 2;
        let d = 3;
        let wx = glorot_uniform(&mut rng, d, 4 * h, &[d, 4 * h]);
        let wh = glorot_uniform(&mut rng, h, 4 * h, &[h, 4 * h]);
        let mut b = Tensor::zeros(&[4 * h]);
        for j in 0..h {
            b.data[h + j] = 1.0;
        }
        let inputs = Tensor::from_vec(
            &[3, d],
            (0..9).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect(),
        )
        .unwrap();

        let layers = [LstmLayerRef {
            wx: &wx,
            wh: &wh,
            b: &b,
        }];
        let (got, _) = lstm_forward(&inputs, &layers, None).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut expect = Vec::new();
        for t in 0..3 {
            let x = inputs.row(t);
            let mut hn = vec![0.0; h];
            for j in 0..h {
                let mut zi = b.data[j];
                let mut zf = b.data[h + j];
                let mut zg = b.data[2 * h + j];
                let mut zo = b.data[3 * h + j];
                for p in 0..d {
                    zi += x[p] * wx.data[p * 4 * h + j];
                    zf += x[p] * wx.data[p * 4 * h + h + j];
                    zg += x[p] * wx.data[p * 4 * h + 2 * h + j];
                    zo += x[p] * wx.data[p * 4 * h + 3 * h + j];
                }
                for p in 0..h {
                    zi += hs[p] * wh.data[p * 4 * h + j];
                    zf += hs[p] * wh.data[p * 4 * h + h + j];
                    zg += hs[p] * wh.data[p * 4 * h + 2 * h + j];
                    zo += hs[p] * wh.data[p * 4 * h + 3 * h + j];
                }
                let c = sig(zf) * cs[j] + sig(zi) * zg.tanh();
                cs[j] = c;
                hn[j] = sig(zo) * c.tanh();
            }
            hs = hn.clone();
            expect.extend(hn);
        }
        for (a, e) in got.data.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn adam_basics() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());

        // zero gradient leaves parameters unchanged
        ps.adam_step(0.001, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, 1, &|_| false)
            .unwrap();
        assert_eq!(ps.get("w").unwrap().data[0], 1.0);

        // single step with g = 1 moves by about -lr
        ps.add_grad("w", &Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        ps.adam_step(0.001, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, 1, &|_| false)
            .unwrap();
        let delta = ps.get("w").unwrap().data[0] - 1.0;
        assert!((delta + 0.001).abs() < 1e-6, "delta {delta}");

        // t = 0 is a usage error
        assert!(ps
            .adam_step(0.001, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, 0, &|_| false)
            .is_err());
    }

    #[test]
    fn adam_constant_gradient_moves_against_sign() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        for t in 1..=50 {
            ps.zero_grads();
            ps.add_grad("w", &Tensor::from_vec(&[1], vec![2.5]).unwrap())
                .unwrap();
            ps.adam_step(0.01, (ADAM_BETA1, ADAM_BETA2), ADAM_EPS, t, &|_| false)
                .unwrap();
        }
        assert!(ps.get("w").unwrap().data[0] < -0.1);
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(&[3]));
        ps.add_grad("a", &Tensor::from_vec(&[3], vec![30.0, 40.0, 0.0]).unwrap())
            .unwrap();
        ps.clip_grads(GRAD_CLIP_NORM);
        let n: f64 = ps
            .grad("a")
            .unwrap()
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((n - GRAD_CLIP_NORM).abs() < 1e-12);
    }
}
