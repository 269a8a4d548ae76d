//! The conditional denoiser `D(x; sigma, c)`.
//!
//! A SiLU MLP over `[c_in(sigma) * x | fourier(ln sigma) | class embedding]`
//! with inverted dropout after hidden activations, and the output
//! preconditioning
//!
//! ```text
//! D = c_skip(sigma) * x + c_out(sigma) * raw
//! c_skip = sd^2 / (sigma^2 + sd^2),  c_out = sigma * sd / sqrt(sigma^2 + sd^2),
//! c_in = 1 / sqrt(sigma^2 + sd^2),   sd = 0.5.
//! ```
//!
//! Parameters live in one flat `f64` vector with this layout (also the
//! checkpoint layout):
//!
//! 1. class embedding table, `(num_classes + 1) x class_embed_dim`, row-major;
//!    row `num_classes` is the null token,
//! 2. for each layer `l`: weights `W_l` as `fan_in x fan_out` row-major, then
//!    bias `b_l` (`fan_out`).

use crate::error::{Error, Result};
use crate::linalg::{gemm, Vec2};
use crate::rng::RngStream;

/// Data standard deviation assumed by the preconditioning.
pub const SIGMA_DATA: f64 = 0.5;
pub const DEFAULT_SIGMA_EMBED_DIM: usize = 16;
pub const DEFAULT_CLASS_EMBED_DIM: usize = 8;
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Class label or the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Class(usize),
    Null,
}

pub fn c_skip(sigma: f64) -> f64 {
    SIGMA_DATA * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA)
}

pub fn c_out(sigma: f64) -> f64 {
    sigma * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

pub fn c_in(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Layer widths from input to output, e.g. `[26, 128, 128, 128, 2]`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub sigma_embed_dim: usize,
    pub class_embed_dim: usize,
    /// Layer indices `l` (in `1..widths.len() - 1`) whose activations are followed by dropout.
    pub dropout_sites: Vec<usize>,
}

impl Architecture {
    /// Default shape: 128-128-128 hidden, dropout after every hidden activation.
    pub fn standard(num_classes: usize) -> Self {
        Self::with_hidden(&DEFAULT_HIDDEN, num_classes, DEFAULT_SIGMA_EMBED_DIM, DEFAULT_CLASS_EMBED_DIM)
    }

    pub fn with_hidden(hidden: &[usize], num_classes: usize, sigma_embed_dim: usize, class_embed_dim: usize) -> Self {
        let mut widths = vec![2 + sigma_embed_dim + class_embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(2);
        Self {
            dropout_sites: (1..widths.len() - 1).collect(),
            widths,
            num_classes,
            sigma_embed_dim,
            class_embed_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 + self.sigma_embed_dim + self.class_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if w.len() < 2 {
            return Err(Error::Config(format!("need at least 2 layer widths, got {}", w.len())));
        }
        if self.sigma_embed_dim % 2 != 0 {
            return Err(Error::Config("sigma embedding dimension must be even".into()));
        }
        if w[0] != self.input_dim() {
            return Err(Error::Config(format!(
                "input width {} must equal 2 + sigma_embed_dim + class_embed_dim = {}",
                w[0],
                self.input_dim()
            )));
        }
        if *w.last().unwrap() != 2 {
            return Err(Error::Config(format!("output width must be 2, got {}", w.last().unwrap())));
        }
        if w.iter().any(|&x| x == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let mut prev = 0;
        for &s in &self.dropout_sites {
            if s == 0 || s >= w.len() - 1 || s <= prev {
                return Err(Error::Config(format!(
                    "dropout sites must be strictly increasing hidden-layer indices in 1..{}",
                    w.len() - 1
                )));
            }
            prev = s;
        }
        Ok(())
    }

    fn embed_len(&self) -> usize {
        (self.num_classes + 1) * self.class_embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.embed_len()
            + self
                .widths
                .windows(2)
                .map(|p| p[0] * p[1] + p[1])
                .sum::<usize>()
    }

    fn is_dropout_site(&self, layer: usize) -> bool {
        self.dropout_sites.contains(&layer)
    }
}

/// Offsets of the weight and bias blocks of one layer in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlots {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

fn layer_slots(arch: &Architecture) -> Vec<LayerSlots> {
    let mut off = arch.embed_len();
    arch.widths
        .windows(2)
        .map(|p| {
            let s = LayerSlots {
                fan_in: p[0],
                fan_out: p[1],
                w: off,
                b: off + p[0] * p[1],
            };
            off += p[0] * p[1] + p[1];
            s
        })
        .collect()
}

/// The trainable denoiser network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    arch: Architecture,
    slots: Vec<LayerSlots>,
    params: Vec<f64>,
}

/// Evaluation mode of a forward pass.
#[derive(Debug)]
pub enum EvalMode<'a> {
    /// Dropout disabled; a pure function of the inputs.
    Deterministic,
    /// Dropout active with probability `p`. One stream per batch row; each
    /// row draws its masks site by site, `width` draws per site.
    Stochastic { p: f64, streams: &'a mut [RngStream] },
}

impl EvalMode<'_> {
    /// Shorter-lived copy of this mode, so one mode can drive several passes.
    pub fn reborrow(&mut self) -> EvalMode<'_> {
        match self {
            EvalMode::Deterministic => EvalMode::Deterministic,
            EvalMode::Stochastic { p, streams } => EvalMode::Stochastic { p: *p, streams },
        }
    }
}

/// Recorded activations of a batched forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    conds: Vec<Condition>,
    c_out: Vec<f64>,
    /// Layer inputs: `inputs[l]` is the `batch x widths[l]` activation fed to layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers (index `l - 1` for layer `l`).
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    outputs: Vec<Vec2>,
}

impl Tape {
    pub fn outputs(&self) -> &[Vec2] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<Vec2> {
        self.outputs
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1 / (1 - p)`.
/// Consumes `n` draws.
pub fn dropout_mask(stream: &mut RngStream, n: usize, p: f64) -> Result<Vec<f64>> {
    check_dropout_p(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok((0..n).map(|_| if stream.uniform() < p { 0.0 } else { keep }).collect())
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl DenoiserNet {
    /// Fresh network. Weights `~ N(0, 1/fan_in)`, biases zero, embedding rows
    /// `~ N(0, 1)`; all drawn from stream `(seed, "net-init")`, forked per block.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let slots = layer_slots(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let root = RngStream::new(seed, "net-init")?;
        let mut emb = root.fork(0);
        for v in &mut params[..arch.embed_len()] {
            *v = emb.gaussian();
        }
        for (l, s) in slots.iter().enumerate() {
            let mut st = root.fork(l as u64 + 1);
            let scale = 1.0 / (s.fan_in as f64).sqrt();
            for v in &mut params[s.w..s.b] {
                *v = scale * st.gaussian();
            }
        }
        Ok(Self { arch, slots, params })
    }

    /// Network from an existing flat parameter vector.
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        let slots = layer_slots(&arch);
        Ok(Self { arch, slots, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block of layer `l` (`fan_in x fan_out`, row-major).
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let s = self.slots[l];
        &self.params[s.w..s.b]
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// Range of the embedding row for `cond` within the flat parameter vector.
    pub fn embedding_range(&self, cond: Condition) -> std::ops::Range<usize> {
        let row = match cond {
            Condition::Class(k) => k,
            Condition::Null => self.arch.num_classes,
        };
        let d = self.arch.class_embed_dim;
        row * d..(row + 1) * d
    }

    fn check_inputs(&self, sigma: f64, cond: Condition) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
        }
        if let Condition::Class(k) = cond {
            if k >= self.arch.num_classes {
                return Err(Error::Domain(format!(
                    "class {k} out of range for a {}-class network",
                    self.arch.num_classes
                )));
            }
        }
        Ok(())
    }

    fn write_features(&self, x: Vec2, sigma: f64, cond: Condition, out: &mut [f64]) {
        let ci = c_in(sigma);
        out[0] = ci * x.x;
        out[1] = ci * x.y;
        let log_sigma = sigma.ln();
        let half = self.arch.sigma_embed_dim / 2;
        for k in 0..half {
            let angle = log_sigma * 2f64.powi(k as i32 - 3);
            out[2 + k] = angle.sin();
            out[2 + half + k] = angle.cos();
        }
        let e = self.embedding_range(cond);
        out[2 + self.arch.sigma_embed_dim..].copy_from_slice(&self.params[e]);
    }

    /// Single-point forward pass.
    pub fn forward(&self, x: Vec2, sigma: f64, cond: Condition, mode: EvalMode<'_>) -> Result<Vec2> {
        Ok(self.forward_batch(&[x], &[sigma], &[cond], mode)?.outputs[0])
    }

    /// Batched forward pass recording everything `backward` needs.
    pub fn forward_batch(&self, xs: &[Vec2], sigmas: &[f64], conds: &[Condition], mode: EvalMode<'_>) -> Result<Tape> {
        let batch = xs.len();
        if sigmas.len() != batch || conds.len() != batch {
            return Err(Error::Internal(format!(
                "forward batch lengths differ: {} points, {} sigmas, {} conditions",
                batch,
                sigmas.len(),
                conds.len()
            )));
        }
        let (p, mut streams) = match mode {
            EvalMode::Deterministic => (0.0, None),
            EvalMode::Stochastic { p, streams } => {
                check_dropout_p(p)?;
                if streams.len() != batch {
                    return Err(Error::Internal(format!(
                        "stochastic forward needs one stream per row: {} streams for {} rows",
                        streams.len(),
                        batch
                    )));
                }
                (p, Some(streams))
            }
        };
        for (&s, &c) in sigmas.iter().zip(conds) {
            self.check_inputs(s, c)?;
        }

        let d_in = self.arch.input_dim();
        let mut input = vec![0.0; batch * d_in];
        for (r, ((&x, &s), &c)) in xs.iter().zip(sigmas).zip(conds).enumerate() {
            self.write_features(x, s, c, &mut input[r * d_in..(r + 1) * d_in]);
        }

        let n_layers = self.slots.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_acts = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        inputs.push(input);
        let mut raw = Vec::new();
        for (l, s) in self.slots.iter().enumerate() {
            let mut z = vec![0.0; batch * s.fan_out];
            let bias = &self.params[s.b..s.b + s.fan_out];
            for row in z.chunks_exact_mut(s.fan_out) {
                row.copy_from_slice(bias);
            }
            gemm(
                batch,
                s.fan_in,
                s.fan_out,
                &inputs[l],
                false,
                &self.params[s.w..s.b],
                false,
                1.0,
                &mut z,
            );
            if l + 1 == n_layers {
                raw = z;
                break;
            }
            let mut h: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            let mask = match streams.as_deref_mut() {
                Some(streams) if self.arch.is_dropout_site(l + 1) => {
                    let mut m = Vec::with_capacity(batch * s.fan_out);
                    for st in streams.iter_mut() {
                        m.extend(dropout_mask(st, s.fan_out, p)?);
                    }
                    for (hv, mv) in h.iter_mut().zip(&m) {
                        *hv *= mv;
                    }
                    Some(m)
                }
                _ => None,
            };
            pre_acts.push(z);
            masks.push(mask);
            inputs.push(h);
        }

        let mut c_outs = Vec::with_capacity(batch);
        let mut outputs = Vec::with_capacity(batch);
        for (r, (&x, &s)) in xs.iter().zip(sigmas).enumerate() {
            let co = c_out(s);
            let d = c_skip(s) * x + co * Vec2::new(raw[2 * r], raw[2 * r + 1]);
            c_outs.push(co);
            outputs.push(d);
        }
        Ok(Tape {
            batch,
            conds: conds.to_vec(),
            c_out: c_outs,
            inputs,
            pre: pre_acts,
            masks,
            outputs,
        })
    }

    /// Reverse-mode gradient of `sum_i <d_out[i], D_i>` with respect to every
    /// parameter, given the tape of the forward pass that produced `D`.
    pub fn backward(&self, tape: &Tape, d_out: &[Vec2]) -> Result<Vec<f64>> {
        let batch = tape.batch;
        if d_out.len() != batch {
            return Err(Error::Internal(format!(
                "backward got {} output gradients for a batch of {}",
                d_out.len(),
                batch
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta: Vec<f64> = d_out
            .iter()
            .zip(&tape.c_out)
            .flat_map(|(g, &co)| [co * g.x, co * g.y])
            .collect();

        for l in (0..self.slots.len()).rev() {
            let s = self.slots[l];
            let (gw, rest) = grad[s.w..].split_at_mut(s.b - s.w);
            gemm(s.fan_in, batch, s.fan_out, &tape.inputs[l], true, &delta, false, 0.0, gw);
            let gb = &mut rest[..s.fan_out];
            for row in delta.chunks_exact(s.fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let mut d_in = vec![0.0; batch * s.fan_in];
            gemm(batch, s.fan_out, s.fan_in, &delta, false, &self.params[s.w..s.b], true, 0.0, &mut d_in);
            if l > 0 {
                if let Some(mask) = &tape.masks[l - 1] {
                    for (d, m) in d_in.iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                for (d, &z) in d_in.iter_mut().zip(&tape.pre[l - 1]) {
                    *d *= silu_grad(z);
                }
            }
            delta = d_in;
        }

        let d_in = self.arch.input_dim();
        let e0 = 2 + self.arch.sigma_embed_dim;
        for (r, &c) in tape.conds.iter().enumerate() {
            let range = self.embedding_range(c);
            let src = &delta[r * d_in + e0..(r + 1) * d_in];
            for (g, d) in grad[range].iter_mut().zip(src) {
                *g += d;
            }
        }
        Ok(grad)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn for_net(net: &DenoiserNet, lr: f64) -> Self {
        Self::new(net.params().len(), lr, 0.9, 0.999, 1e-8)
    }

    /// One Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam: gradient has {} entries, parameters {}, state {}",
                grad.len(),
                params.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: self.step as usize,
                message: format!("non-finite gradient component {i}: {}", grad[i]),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut DenoiserNet, grad: &[f64]) -> Result<()> {
        self.update(net.params_mut(), grad)
    }
}
