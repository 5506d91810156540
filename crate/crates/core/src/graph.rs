//! Reverse-mode autodiff over a flat tape of dense tensors.
//!
//! Every forward op appends a node; `backward` walks the tape in reverse and
//! accumulates gradients into nodes flagged as parameters. The op set is
//! exactly what the GAN variants need: dense layers, 1-D convolution, a fused
//! two-tensor LSTM step sequence, pointwise activations, concatenation and
//! binary cross-entropy.

use crate::error::DaganError;
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

pub type NodeId = usize;

const BCE_EPS: f64 = 1e-7;

/// Parameters of one stacked-LSTM layer inside the graph.
#[derive(Clone, Copy)]
pub struct LstmLayerIds {
    pub wx: NodeId, // [d_in x 4H]
    pub wh: NodeId, // [H x 4H]
    pub b: NodeId,  // [4H]
}

/// Per-layer forward activations kept for backpropagation through time.
struct LstmLayerCache {
    d_in: usize,
    // each is T*B*H, row-major over (t, b, h)
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

struct LstmCache {
    steps: usize,
    batch: usize,
    hidden: usize,
    layers: Vec<LstmLayerCache>,
}

enum Op {
    Leaf,
    /// [m x k] * [k x n]
    MatMul(NodeId, NodeId),
    /// [m x n] + row-broadcast [n]
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// input [B x cin x T], kernels [cout x cin x k], bias [cout]
    Conv1d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
    },
    /// concat along the last axis; leading dims must match
    ConcatLast(NodeId, NodeId),
    /// 2-D column slice
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    /// stack T nodes of [B x d] into [T x B x d]
    StackSeq(Vec<NodeId>),
    /// permute [B x c x T] into [T x B x c]
    SignalToSeq(NodeId),
    /// concat along the first axis of 3-D tensors
    ConcatFirst(NodeId, NodeId),
    /// concat 3-D tensors [B x c x T] along the channel axis
    ConcatChannels(NodeId, NodeId),
    /// mean of elementwise bce against a constant label, output scalar
    /// binary cross-entropy against a constant label, computed on logits
    MeanBceLogits { logits: NodeId, label: f64 },
    MeanBce {
        pred: NodeId,
        label: f64,
    },
    /// mean of squared entries, output scalar
    MeanSq(NodeId),
    Sum(NodeId),
    /// stacked LSTM over [T x B x d], output = last hidden of top layer [B x H]
    LstmSeq {
        input: NodeId,
        layers: Vec<LstmLayerIds>,
        cache: LstmCache,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DaganError> {
        let (sa, sb) = (&self.nodes[a].value.shape, &self.nodes[b].value.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DaganError::Shape(format!(
                "matmul shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(
            &self.nodes[a].value.data,
            &self.nodes[b].value.data,
            &mut out.data,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, DaganError> {
        let (sx, sb) = (&self.nodes[x].value.shape, &self.nodes[bias].value.shape);
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(DaganError::Shape(format!(
                "add_row shapes {:?} + {:?}",
                sx, sb
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = self.nodes[x].value.clone();
        for r in 0..m {
            for c in 0..n {
                out.data[r * n + c] += self.nodes[bias].value.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DaganError> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(DaganError::Shape("add shape mismatch".into()));
        }
        let mut out = self.nodes[a].value.clone();
        for (o, &v) in out.data.iter_mut().zip(self.nodes[b].value.data.iter()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in out.data.iter_mut() {
            *v = sigmoid(*v);
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in out.data.iter_mut() {
            *v = v.tanh();
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    /// max(x, slope·x) for 0 < slope < 1; keeps a gradient on the negative
    /// side so stacked units cannot die.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::LeakyRelu(x, slope))
    }

    /// Valid (no padding) cross-correlation over the time axis.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, DaganError> {
        let si = self.nodes[input].value.shape.clone();
        let sk = self.nodes[kernels].value.shape.clone();
        if si.len() != 3 || sk.len() != 3 || si[1] != sk[1] {
            return Err(DaganError::Shape(format!(
                "conv1d shapes input {:?} kernels {:?}",
                si, sk
            )));
        }
        if stride == 0 {
            return Err(DaganError::Usage("conv1d stride must be >= 1".into()));
        }
        let (batch, cin, t) = (si[0], si[1], si[2]);
        let (cout, _, k) = (sk[0], sk[1], sk[2]);
        if t < k {
            return Err(DaganError::Shape(format!(
                "conv1d input length {} shorter than kernel {}",
                t, k
            )));
        }
        if self.nodes[bias].value.shape != vec![cout] {
            return Err(DaganError::Shape("conv1d bias shape".into()));
        }
        let t_out = (t - k) / stride + 1;
        let mut out = Tensor::zeros(&[batch, cout, t_out]);
        let kern = &self.nodes[kernels].value.data; // [cout x (cin*k)] row-major
        let bdat = &self.nodes[bias].value.data;
        let mut col = vec![0.0; cin * k * t_out];
        for b in 0..batch {
            let inp = &self.nodes[input].value.data[b * cin * t..(b + 1) * cin * t];
            im2col(inp, &mut col, cin, t, k, stride, t_out);
            let ob = &mut out.data[b * cout * t_out..(b + 1) * cout * t_out];
            matmul_acc(kern, &col, ob, cout, cin * k, t_out);
            for co in 0..cout {
                for v in ob[co * t_out..(co + 1) * t_out].iter_mut() {
                    *v += bdat[co];
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
            },
        ))
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DaganError> {
        let (sa, sb) = (
            self.nodes[a].value.shape.clone(),
            self.nodes[b].value.shape.clone(),
        );
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(DaganError::Shape(format!(
                "concat_last shapes {:?} | {:?}",
                sa, sb
            )));
        }
        let lead: usize = sa[..sa.len() - 1].iter().product();
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = la + lb;
        let mut out = Tensor::zeros(&shape);
        for r in 0..lead {
            out.data[r * (la + lb)..r * (la + lb) + la]
                .copy_from_slice(&self.nodes[a].value.data[r * la..(r + 1) * la]);
            out.data[r * (la + lb) + la..(r + 1) * (la + lb)]
                .copy_from_slice(&self.nodes[b].value.data[r * lb..(r + 1) * lb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::ConcatLast(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DaganError> {
        let sx = self.nodes[x].value.shape.clone();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(DaganError::Shape("slice_cols out of bounds".into()));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = Tensor::zeros(&[m, len]);
        for r in 0..m {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[x].value.data[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SliceCols { x, start, len }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, DaganError> {
        let out = self.nodes[x].value.reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    pub fn stack_seq(&mut self, tokens: &[NodeId]) -> Result<NodeId, DaganError> {
        if tokens.is_empty() {
            return Err(DaganError::Usage("stack_seq needs tokens".into()));
        }
        let s0 = self.nodes[tokens[0]].value.shape.clone();
        if s0.len() != 2 {
            return Err(DaganError::Shape("stack_seq tokens must be 2-D".into()));
        }
        let mut rg = false;
        let mut out = Tensor::zeros(&[tokens.len(), s0[0], s0[1]]);
        let step = s0[0] * s0[1];
        for (t, &id) in tokens.iter().enumerate() {
            if self.nodes[id].value.shape != s0 {
                return Err(DaganError::Shape("stack_seq token shape mismatch".into()));
            }
            out.data[t * step..(t + 1) * step].copy_from_slice(&self.nodes[id].value.data);
            rg |= self.rg(id);
        }
        Ok(self.push(out, rg, Op::StackSeq(tokens.to_vec())))
    }

    /// Reorder a [B x c x T] signal into the [T x B x c] layout `lstm_seq` expects.
    pub fn signal_to_seq(&mut self, x: NodeId) -> Result<NodeId, DaganError> {
        let s = self.nodes[x].value.shape.clone();
        if s.len() != 3 {
            return Err(DaganError::Shape("signal_to_seq input must be 3-D".into()));
        }
        let (b, c, t) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[t, b, c]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    out.data[ti * b * c + bi * c + ci] =
                        self.nodes[x].value.data[bi * c * t + ci * t + ti];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SignalToSeq(x)))
    }

    pub fn concat_first(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DaganError> {
        let (sa, sb) = (
            self.nodes[a].value.shape.clone(),
            self.nodes[b].value.shape.clone(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(DaganError::Shape(format!(
                "concat_first shapes {:?} | {:?}",
                sa, sb
            )));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(&self.nodes[a].value.data);
        data.extend_from_slice(&self.nodes[b].value.data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, rg, Op::ConcatFirst(a, b)))
    }

    /// Concat [B x c1 x T] and [B x c2 x T] into [B x (c1+c2) x T].
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DaganError> {
        let (sa, sb) = (
            self.nodes[a].value.shape.clone(),
            self.nodes[b].value.shape.clone(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(DaganError::Shape(format!(
                "concat_channels shapes {:?} | {:?}",
                sa, sb
            )));
        }
        let (batch, ca, cb, t) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Tensor::zeros(&[batch, ca + cb, t]);
        for bi in 0..batch {
            let dst = &mut out.data[bi * (ca + cb) * t..(bi + 1) * (ca + cb) * t];
            dst[..ca * t].copy_from_slice(&self.nodes[a].value.data[bi * ca * t..(bi + 1) * ca * t]);
            dst[ca * t..].copy_from_slice(&self.nodes[b].value.data[bi * cb * t..(bi + 1) * cb * t]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::ConcatChannels(a, b)))
    }

    /// Mean of squared entries (used as reconstruction loss).
    pub fn mean_sq(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let s: f64 = self.nodes[x].value.data.iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), rg, Op::MeanSq(x))
    }

    /// Mean binary cross-entropy of predictions in (0,1) against a constant label.
    pub fn mean_bce(&mut self, pred: NodeId, label: f64) -> NodeId {
        let p = &self.nodes[pred].value;
        let n = p.len() as f64;
        let mut loss = 0.0;
        for &v in p.data.iter() {
            let v = v.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= label * v.ln() + (1.0 - label) * (1.0 - v).ln();
        }
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss / n), rg, Op::MeanBce { pred, label })
    }

    /// Mean binary cross-entropy of sigmoid(logits) against a constant label,
    /// fused for numerical stability: the gradient (sigmoid(x) − label)/n
    /// never underflows, so a saturated discriminator still teaches the
    /// generator.
    pub fn mean_bce_logits(&mut self, logits: NodeId, label: f64) -> NodeId {
        let x = &self.nodes[logits].value;
        let n = x.len() as f64;
        let mut loss = 0.0;
        for &v in x.data.iter() {
            // softplus(v) - label*v, computed without overflow
            loss += v.max(0.0) - label * v + (-v.abs()).exp().ln_1p();
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n),
            rg,
            Op::MeanBceLogits { logits, label },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Stacked LSTM over a [T x B x d] sequence; returns the last hidden state
    /// of the top layer, shape [B x H]. Gate block order in the 4H axis is
    /// (input, forget, cell, output); forget-gate bias sits in the second block.
    pub fn lstm_seq(
        &mut self,
        input: NodeId,
        layers: &[LstmLayerIds],
        hidden: usize,
    ) -> Result<NodeId, DaganError> {
        let si = self.nodes[input].value.shape.clone();
        if si.len() != 3 {
            return Err(DaganError::Shape("lstm_seq input must be [T,B,d]".into()));
        }
        let (steps, batch, d0) = (si[0], si[1], si[2]);
        let h4 = 4 * hidden;
        let mut caches = Vec::with_capacity(layers.len());
        let mut d_in = d0;
        let mut rg = self.rg(input);
        for l in layers {
            let sw = &self.nodes[l.wx].value.shape;
            let sh = &self.nodes[l.wh].value.shape;
            let sb = &self.nodes[l.b].value.shape;
            if *sw != vec![d_in, h4] || *sh != vec![hidden, h4] || *sb != vec![h4] {
                return Err(DaganError::Shape(format!(
                    "lstm layer shapes wx {:?} wh {:?} b {:?}, expected [{},{}] [{},{}] [{}]",
                    sw, sh, sb, d_in, h4, hidden, h4, h4
                )));
            }
            rg = rg || self.rg(l.wx) || self.rg(l.wh) || self.rg(l.b);
            caches.push(LstmLayerCache {
                d_in,
                i: vec![0.0; steps * batch * hidden],
                f: vec![0.0; steps * batch * hidden],
                g: vec![0.0; steps * batch * hidden],
                o: vec![0.0; steps * batch * hidden],
                c: vec![0.0; steps * batch * hidden],
                tanh_c: vec![0.0; steps * batch * hidden],
                h: vec![0.0; steps * batch * hidden],
            });
            d_in = hidden;
        }

        let bh = batch * hidden;
        let mut z = vec![0.0; batch * h4];
        for (li, l) in layers.iter().enumerate() {
            let wx = self.nodes[l.wx].value.data.clone();
            let wh = self.nodes[l.wh].value.data.clone();
            let bias = self.nodes[l.b].value.data.clone();
            let din = caches[li].d_in;
            for t in 0..steps {
                z.iter_mut().for_each(|v| *v = 0.0);
                {
                    // layer input: raw sequence for layer 0, lower hidden otherwise
                    let xin: &[f64] = if li == 0 {
                        &self.nodes[input].value.data[t * batch * d0..(t + 1) * batch * d0]
                    } else {
                        &caches[li - 1].h[t * bh..(t + 1) * bh]
                    };
                    matmul_acc(xin, &wx, &mut z, batch, din, h4);
                }
                if t > 0 {
                    let hp = caches[li].h[(t - 1) * bh..t * bh].to_vec();
                    matmul_acc(&hp, &wh, &mut z, batch, hidden, h4);
                }
                let cache = &mut caches[li];
                for b in 0..batch {
                    for j in 0..hidden {
                        let zi = sigmoid(z[b * h4 + j] + bias[j]);
                        let zf = sigmoid(z[b * h4 + hidden + j] + bias[hidden + j]);
                        let zg = (z[b * h4 + 2 * hidden + j] + bias[2 * hidden + j]).tanh();
                        let zo = sigmoid(z[b * h4 + 3 * hidden + j] + bias[3 * hidden + j]);
                        let cp = if t > 0 {
                            cache.c[(t - 1) * bh + b * hidden + j]
                        } else {
                            0.0
                        };
                        let c = zf * cp + zi * zg;
                        let tc = c.tanh();
                        let idx = t * bh + b * hidden + j;
                        cache.i[idx] = zi;
                        cache.f[idx] = zf;
                        cache.g[idx] = zg;
                        cache.o[idx] = zo;
                        cache.c[idx] = c;
                        cache.tanh_c[idx] = tc;
                        cache.h[idx] = zo * tc;
                    }
                }
            }
        }
        let last = &caches.last().unwrap().h[(steps - 1) * bh..steps * bh];
        let out = Tensor::from_vec(&[batch, hidden], last.to_vec())?;
        Ok(self.push(
            out,
            rg,
            Op::LstmSeq {
                input,
                layers: layers.to_vec(),
                cache: LstmCache {
                    steps,
                    batch,
                    hidden,
                    layers: caches,
                },
            },
        ))
    }

    /// Full hidden-state sequence of the top layer after `lstm_seq`, [T x B x H].
    pub fn lstm_hidden_history(&self, lstm_node: NodeId) -> Result<Tensor, DaganError> {
        match &self.nodes[lstm_node].op {
            Op::LstmSeq { cache, .. } => Tensor::from_vec(
                &[cache.steps, cache.batch, cache.hidden],
                cache.layers.last().unwrap().h.clone(),
            ),
            _ => Err(DaganError::Usage("node is not an lstm_seq".into())),
        }
    }

    fn add_grad(&mut self, id: NodeId, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        if self.nodes[id].grad.is_none() {
            let shape = self.nodes[id].value.shape.clone();
            self.nodes[id].grad = Some(Tensor::zeros(&shape));
        }
        let dst = &mut self.nodes[id].grad.as_mut().unwrap().data;
        debug_assert_eq!(dst.len(), g.len());
        for (d, &v) in dst.iter_mut().zip(g.iter()) {
            *d += v;
        }
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate into every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DaganError> {
        if self.nodes[loss].value.len() != 1 {
            return Err(DaganError::Usage("backward needs a scalar loss".into()));
        }
        if !self.nodes[loss].requires_grad {
            return Err(DaganError::Usage(
                "loss does not depend on any parameter".into(),
            ));
        }
        let shape = self.nodes[loss].value.shape.clone();
        self.nodes[loss].grad = Some(Tensor::from_vec(&shape, vec![1.0])?);

        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            self.dispatch_backward(id, &g)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, id: NodeId, g: &Tensor) -> Result<(), DaganError> {
        // Parents always precede `id` on the tape, so reads of node `id` and
        // writes to parents never alias.
        let (before, at) = self.nodes.split_at_mut(id);
        let node = &at[0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = before[a].value.shape.clone();
                let sb = before[b].value.shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if before[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_acc(&g.data, &before[b].value.data, &mut da, m, n, k);
                    let _ = before;
                    self.add_grad(a, &da);
                    return self.finish_second_matmul(id, g);
                }
                if before[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_acc(&before[a].value.data, &g.data, &mut db, m, k, n);
                    let _ = before;
                    self.add_grad(b, &db);
                }
            }
            Op::AddRow(x, bias) => {
                let (x, bias) = (*x, *bias);
                let n = before[bias].value.len();
                let mut db = vec![0.0; n];
                for (i, &v) in g.data.iter().enumerate() {
                    db[i % n] += v;
                }
                let _ = before;
                self.add_grad(x, &g.data);
                self.add_grad(bias, &db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let _ = before;
                self.add_grad(a, &g.data);
                self.add_grad(b, &g.data);
            }
            Op::Scale(x, s) => {
                let (x, s) = (*x, *s);
                let dx: Vec<f64> = g.data.iter().map(|v| v * s).collect();
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(node.value.data.iter())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::Tanh(x) => {
                let x = *x;
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(node.value.data.iter())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::Relu(x) => {
                let x = *x;
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(node.value.data.iter())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::LeakyRelu(x, slope) => {
                let (x, slope) = (*x, *slope);
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(before[x].value.data.iter())
                    .map(|(&gv, &xi)| if xi > 0.0 { gv } else { gv * slope })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
            } => {
                let (input, kernels, bias, stride) = (*input, *kernels, *bias, *stride);
                let si = before[input].value.shape.clone();
                let sk = before[kernels].value.shape.clone();
                let (batch, cin, t) = (si[0], si[1], si[2]);
                let (cout, _, k) = (sk[0], sk[1], sk[2]);
                let t_out = (t - k) / stride + 1;
                let input_rg = before[input].requires_grad;
                let mut dk = vec![0.0; cout * cin * k];
                let mut db = vec![0.0; cout];
                let mut dinp = if input_rg {
                    vec![0.0; batch * cin * t]
                } else {
                    Vec::new()
                };
                let mut col = vec![0.0; cin * k * t_out];
                let mut dcol = vec![0.0; cin * k * t_out];
                let kern = before[kernels].value.data.clone();
                for b in 0..batch {
                    let gout = &g.data[b * cout * t_out..(b + 1) * cout * t_out];
                    let inp = &before[input].value.data[b * cin * t..(b + 1) * cin * t];
                    im2col(inp, &mut col, cin, t, k, stride, t_out);
                    matmul_a_bt_acc(gout, &col, &mut dk, cout, t_out, cin * k);
                    for co in 0..cout {
                        db[co] += gout[co * t_out..(co + 1) * t_out].iter().sum::<f64>();
                    }
                    if input_rg {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        matmul_at_b_acc(&kern, gout, &mut dcol, cout, cin * k, t_out);
                        let dinp_b = &mut dinp[b * cin * t..(b + 1) * cin * t];
                        col2im_acc(&dcol, dinp_b, cin, t, k, stride, t_out);
                    }
                }
                let _ = before;
                self.add_grad(kernels, &dk);
                self.add_grad(bias, &db);
                if input_rg {
                    self.add_grad(input, &dinp);
                }
            }
            Op::ConcatLast(a, b) => {
                let (a, b) = (*a, *b);
                let sa = before[a].value.shape.clone();
                let sb = before[b].value.shape.clone();
                let lead: usize = sa[..sa.len() - 1].iter().product();
                let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let mut da = vec![0.0; lead * la];
                let mut db = vec![0.0; lead * lb];
                for r in 0..lead {
                    da[r * la..(r + 1) * la]
                        .copy_from_slice(&g.data[r * (la + lb)..r * (la + lb) + la]);
                    db[r * lb..(r + 1) * lb]
                        .copy_from_slice(&g.data[r * (la + lb) + la..(r + 1) * (la + lb)]);
                }
                let _ = before;
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let sx = before[x].value.shape.clone();
                let (m, n) = (sx[0], sx[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                let _ = before;
                self.add_grad(x, &g.data);
            }
            Op::StackSeq(tokens) => {
                let tokens = tokens.clone();
                let step = g.data.len() / tokens.len();
                let _ = before;
                for (t, tok) in tokens.iter().enumerate() {
                    self.add_grad(*tok, &g.data[t * step..(t + 1) * step]);
                }
            }
            Op::SignalToSeq(x) => {
                let x = *x;
                let s = before[x].value.shape.clone();
                let (b, c, t) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * c * t];
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            dx[bi * c * t + ci * t + ti] = g.data[ti * b * c + bi * c + ci];
                        }
                    }
                }
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let sa = before[a].value.shape.clone();
                let sb = before[b].value.shape.clone();
                let (batch, ca, cb, t) = (sa[0], sa[1], sb[1], sa[2]);
                let mut da = vec![0.0; batch * ca * t];
                let mut db = vec![0.0; batch * cb * t];
                for bi in 0..batch {
                    let src = &g.data[bi * (ca + cb) * t..(bi + 1) * (ca + cb) * t];
                    da[bi * ca * t..(bi + 1) * ca * t].copy_from_slice(&src[..ca * t]);
                    db[bi * cb * t..(bi + 1) * cb * t].copy_from_slice(&src[ca * t..]);
                }
                let _ = before;
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::ConcatFirst(a, b) => {
                let (a, b) = (*a, *b);
                let na = before[a].value.len();
                let _ = before;
                self.add_grad(a, &g.data[..na]);
                self.add_grad(b, &g.data[na..]);
            }
            Op::MeanSq(x) => {
                let x = *x;
                let n = before[x].value.len() as f64;
                let dx: Vec<f64> = before[x]
                    .value
                    .data
                    .iter()
                    .map(|&v| g.data[0] * 2.0 * v / n)
                    .collect();
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::MeanBce { pred, label } => {
                let (pred, label) = (*pred, *label);
                let p = &before[pred].value.data;
                let n = p.len() as f64;
                let dx: Vec<f64> = p
                    .iter()
                    .map(|&v| {
                        if v <= BCE_EPS || v >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            g.data[0] * (v - label) / (v * (1.0 - v)) / n
                        }
                    })
                    .collect();
                let _ = before;
                self.add_grad(pred, &dx);
            }
            Op::Sum(x) => {
                let x = *x;
                let n = before[x].value.len();
                let dx = vec![g.data[0]; n];
                let _ = before;
                self.add_grad(x, &dx);
            }
            Op::MeanBceLogits { logits, label } => {
                let (logits, label) = (*logits, *label);
                let n = before[logits].value.len() as f64;
                let dx: Vec<f64> = before[logits]
                    .value
                    .data
                    .iter()
                    .map(|&v| g.data[0] * (sigmoid(v) - label) / n)
                    .collect();
                self.add_grad(logits, &dx);
            }
            Op::LstmSeq {
                input,
                layers,
                cache,
            } => {
                let input = *input;
                let layers = layers.clone();
                lstm_backward(before, input, &layers, cache, g)?;
            }
        }
        Ok(())
    }

    // MatMul may need gradients for both operands; the first arm of the match
    // handled A, this finishes B.
    fn finish_second_matmul(&mut self, id: NodeId, g: &Tensor) -> Result<(), DaganError> {
        let (a, b) = match self.nodes[id].op {
            Op::MatMul(a, b) => (a, b),
            _ => unreachable!(),
        };
        if self.nodes[b].requires_grad {
            let sa = self.nodes[a].value.shape.clone();
            let sb = self.nodes[b].value.shape.clone();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut db = vec![0.0; k * n];
            matmul_at_b_acc(&self.nodes[a].value.data, &g.data, &mut db, m, k, n);
            self.add_grad(b, &db);
        }
        Ok(())
    }
}

/// Backpropagation through time for the fused stacked LSTM.
fn lstm_backward(
    nodes: &mut [Node],
    input: NodeId,
    layers: &[LstmLayerIds],
    cache: &LstmCache,
    g_last: &Tensor,
) -> Result<(), DaganError> {
    let (steps, batch, hidden) = (cache.steps, cache.batch, cache.hidden);
    let h4 = 4 * hidden;
    let bh = batch * hidden;

    // gradient flowing into the hidden sequence of each layer
    let mut dh_seq = vec![vec![0.0; steps * bh]; layers.len()];
    let top = layers.len() - 1;
    dh_seq[top][(steps - 1) * bh..steps * bh].copy_from_slice(&g_last.data);

    let input_rg = nodes[input].requires_grad;
    let d0 = nodes[input].value.shape[2];
    let mut dinput = if input_rg {
        vec![0.0; steps * batch * d0]
    } else {
        Vec::new()
    };

    for li in (0..layers.len()).rev() {
        let lc = &cache.layers[li];
        let din = lc.d_in;
        let wx = nodes[layers[li].wx].value.data.clone();
        let wh = nodes[layers[li].wh].value.data.clone();
        let mut dwx = vec![0.0; din * h4];
        let mut dwh = vec![0.0; hidden * h4];
        let mut db = vec![0.0; h4];
        let mut dc = vec![0.0; bh];
        let mut dh_rec = vec![0.0; bh]; // recurrent grad from step t+1
        let mut dz = vec![0.0; batch * h4];
        for t in (0..steps).rev() {
            for b in 0..batch {
                for j in 0..hidden {
                    let idx = t * bh + b * hidden + j;
                    let dh = dh_seq[li][idx] + dh_rec[b * hidden + j];
                    let (i, f, gg, o, tc) = (lc.i[idx], lc.f[idx], lc.g[idx], lc.o[idx], lc.tanh_c[idx]);
                    let dct = dh * o * (1.0 - tc * tc) + dc[b * hidden + j];
                    let do_ = dh * tc;
                    let cp = if t > 0 { lc.c[idx - bh] } else { 0.0 };
                    let di = dct * gg;
                    let df = dct * cp;
                    let dg = dct * i;
                    dc[b * hidden + j] = dct * f;
                    dz[b * h4 + j] = di * i * (1.0 - i);
                    dz[b * h4 + hidden + j] = df * f * (1.0 - f);
                    dz[b * h4 + 2 * hidden + j] = dg * (1.0 - gg * gg);
                    dz[b * h4 + 3 * hidden + j] = do_ * o * (1.0 - o);
                }
            }
            for b in 0..batch {
                for j in 0..h4 {
                    db[j] += dz[b * h4 + j];
                }
            }
            // dWx += x_t^T dz; dx_t = dz Wx^T
            {
                let xin: &[f64] = if li == 0 {
                    &nodes[input].value.data[t * batch * d0..(t + 1) * batch * d0]
                } else {
                    &cache.layers[li - 1].h[t * bh..(t + 1) * bh]
                };
                matmul_at_b_acc(xin, &dz, &mut dwx, batch, din, h4);
            }
            if li == 0 {
                if input_rg {
                    let dx = &mut dinput[t * batch * d0..(t + 1) * batch * d0];
                    matmul_a_bt_acc(&dz, &wx, dx, batch, h4, d0);
                }
            } else {
                let dx = &mut dh_seq[li - 1][t * bh..(t + 1) * bh];
                matmul_a_bt_acc(&dz, &wx, dx, batch, h4, din);
            }
            // dWh += h_{t-1}^T dz; dh_{t-1} = dz Wh^T
            dh_rec.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                let hp = &lc.h[(t - 1) * bh..t * bh];
                matmul_at_b_acc(hp, &dz, &mut dwh, batch, hidden, h4);
                matmul_a_bt_acc(&dz, &wh, &mut dh_rec, batch, h4, hidden);
            }
        }
        add_grad_raw(nodes, layers[li].wx, &dwx);
        add_grad_raw(nodes, layers[li].wh, &dwh);
        add_grad_raw(nodes, layers[li].b, &db);
    }
    if input_rg {
        add_grad_raw(nodes, input, &dinput);
    }
    Ok(())
}

fn add_grad_raw(nodes: &mut [Node], id: NodeId, g: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    if nodes[id].grad.is_none() {
        let shape = nodes[id].value.shape.clone();
        nodes[id].grad = Some(Tensor::zeros(&shape));
    }
    let dst = &mut nodes[id].grad.as_mut().unwrap().data;
    for (d, &v) in dst.iter_mut().zip(g.iter()) {
        *d += v;
    }
}

fn im2col(inp: &[f64], col: &mut [f64], cin: usize, t: usize, k: usize, stride: usize, t_out: usize) {
    for ci in 0..cin {
        for kk in 0..k {
            let dst = &mut col[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (to, d) in dst.iter_mut().enumerate() {
                *d = inp[ci * t + to * stride + kk];
            }
        }
    }
}

fn col2im_acc(
    dcol: &[f64],
    dinp: &mut [f64],
    cin: usize,
    t: usize,
    k: usize,
    stride: usize,
    t_out: usize,
) {
    for ci in 0..cin {
        for kk in 0..k {
            let src = &dcol[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            for (to, &v) in src.iter().enumerate() {
                dinp[ci * t + to * stride + kk] += v;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
