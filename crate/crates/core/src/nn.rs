//! Small fully-connected residual network with hand-written backprop.
//!
//! Layout: `stem` (input -> hidden, ReLU), then residual blocks
//! `h <- h + relu(W h + b)`, then a linear `head`. Gradients are accumulated
//! sample by sample in a fixed order so training is reproducible.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs][inputs]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    /// He-normal initialisation.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f32], out: &mut [f32]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
        }
    }

    /// Accumulate parameter gradients into `grad`; write input gradient to
    /// `grad_in` when given.
    fn backward(&self, x: &[f32], grad_out: &[f32], grad: &mut Dense, grad_in: Option<&mut [f32]>) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for (w, &v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if let Some(gi) = grad_in {
            gi.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                for (acc, &w) in gi.iter_mut().zip(row) {
                    *acc += g * w;
                }
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f32> {
        self.weights.iter().chain(self.bias.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub stem: Dense,
    pub blocks: Vec<Dense>,
    pub head: Dense,
}

/// Activations kept from a forward pass for backprop.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    input: Vec<f32>,
    stem_pre: Vec<f32>,
    /// Hidden state before each block, plus the final one.
    hidden: Vec<Vec<f32>>,
    block_pre: Vec<Vec<f32>>,
}

fn relu(v: f32) -> f32 {
    v.max(0.0)
}

impl Network {
    pub fn new<R: Rng>(
        inputs: usize,
        hidden: usize,
        blocks: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let stem = Dense::new(inputs, hidden, rng);
        let blocks = (0..blocks)
            .map(|_| {
                let mut d = Dense::new(hidden, hidden, rng);
                // Start residual branches near identity.
                d.weights.iter_mut().for_each(|w| *w *= 0.1);
                d
            })
            .collect();
        let mut head = Dense::new(hidden, outputs, rng);
        let scale = (1.0 / hidden as f32).sqrt() / (2.0 / hidden as f32).sqrt();
        head.weights.iter_mut().for_each(|w| *w *= scale);
        Self { stem, blocks, head }
    }

    pub fn inputs(&self) -> usize {
        self.stem.inputs
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        self.forward_traced(x, None)
    }

    pub fn forward_traced(&self, x: &[f32], trace: Option<&mut Trace>) -> Vec<f32> {
        let hdim = self.stem.outputs;
        let mut pre = vec![0.0; hdim];
        self.stem.forward(x, &mut pre);
        let mut h: Vec<f32> = pre.iter().map(|&v| relu(v)).collect();
        let mut hidden = Vec::new();
        let mut block_pre = Vec::new();
        let tracing = trace.is_some();
        for block in &self.blocks {
            let mut z = vec![0.0; hdim];
            block.forward(&h, &mut z);
            let next: Vec<f32> = h.iter().zip(&z).map(|(a, &b)| a + relu(b)).collect();
            if tracing {
                hidden.push(std::mem::replace(&mut h, next));
                block_pre.push(z);
            } else {
                h = next;
            }
        }
        let mut out = vec![0.0; self.head.outputs];
        self.head.forward(&h, &mut out);
        if let Some(t) = trace {
            hidden.push(h);
            *t = Trace {
                input: x.to_vec(),
                stem_pre: pre,
                hidden,
                block_pre,
            };
        }
        out
    }

    /// Accumulate gradients of one sample given d(loss)/d(output).
    pub fn backward(&self, trace: &Trace, grad_out: &[f32], grads: &mut Network) {
        let hdim = self.stem.outputs;
        let last = trace.hidden.last().expect("trace populated");
        let mut gh = vec![0.0; hdim];
        self.head
            .backward(last, grad_out, &mut grads.head, Some(&mut gh));
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let gz: Vec<f32> = gh
                .iter()
                .zip(&trace.block_pre[k])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            let mut g_prev = vec![0.0; hdim];
            block.backward(
                &trace.hidden[k],
                &gz,
                &mut grads.blocks[k],
                Some(&mut g_prev),
            );
            for (a, b) in gh.iter_mut().zip(&g_prev) {
                *a += b;
            }
        }
        let gpre: Vec<f32> = gh
            .iter()
            .zip(&trace.stem_pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        self.stem
            .backward(&trace.input, &gpre, &mut grads.stem, None);
    }

    pub fn scale_grads(&mut self, s: f32) {
        self.all_mut().for_each(|p| *p *= s);
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.stem
            .params_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.params_mut()))
            .chain(self.head.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.stem.params().count()
            + self
                .blocks
                .iter()
                .map(|b| b.params().count())
                .sum::<usize>()
            + self.head.params().count()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.stem
            .params()
            .chain(self.blocks.iter().flat_map(|b| b.params()))
            .chain(self.head.params())
            .copied()
            .collect()
    }
}

/// SGD with heavy-ball momentum (`v <- mu v + g; w <- w - lr v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Network,
}

impl Sgd {
    pub fn new(net: &Network, learning_rate: f32, momentum: f32) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: net.zeros_like(),
        }
    }

    /// Apply one step. With `freeze_body`, only the head moves.
    pub fn step(&mut self, net: &mut Network, grads: &Network, freeze_body: bool) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        let update = |p: &mut Dense, v: &mut Dense, g: &Dense| {
            for ((w, vel), gr) in p.params_mut().zip(v.params_mut()).zip(g.params()) {
                *vel = mu * *vel + gr;
                *w -= lr * *vel;
            }
        };
        update(&mut net.head, &mut self.velocity.head, &grads.head);
        if freeze_body {
            return;
        }
        update(&mut net.stem, &mut self.velocity.stem, &grads.stem);
        for ((b, v), g) in net
            .blocks
            .iter_mut()
            .zip(self.velocity.blocks.iter_mut())
            .zip(&grads.blocks)
        {
            update(b, v, g);
        }
    }
}

/// Per-feature standardisation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>, dims: usize) -> Self {
        let mut n = 0f64;
        let mut sum = vec![0f64; dims];
        let mut sq = vec![0f64; dims];
        for r in rows {
            n += 1.0;
            for (i, &v) in r.iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += v as f64 * v as f64;
            }
        }
        let n = n.max(1.0);
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd as f32
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
