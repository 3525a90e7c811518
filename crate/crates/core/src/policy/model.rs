//! A small decoder-only transformer over the byte vocabulary, written
//! directly against a flat `f64` parameter vector with hand-derived
//! reverse-mode gradients.
//!
//! The point of this model is not capacity but *exactness*: every public
//! quantity — per-position log-probabilities, their sum, and the gradient of
//! that sum with respect to every parameter — is computed analytically and
//! is checkable against finite differences. Architecture: learned token +
//! position embeddings, pre-norm blocks (layer norm → causal multi-head
//! attention → residual, layer norm → GELU MLP → residual), final layer
//! norm, untied unembedding.
//!
//! Everything is `f64`. The model is small enough (≈150 k parameters at the
//! default size) that wide precision costs nothing and buys clean
//! finite-difference agreement.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counters::record_policy_sample;
use crate::error::{Error, Result};
use crate::policy::tokenizer::{Token, BOS, EOS, VOCAB_SIZE};
use crate::seeding::derive_seed;

const LN_EPS: f64 = 1e-5;
/// MLP hidden width as a multiple of the embedding dim.
const FFN_MULT: usize = 4;

/// Architecture descriptor: shapes only, no weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { embed_dim: 64, layers: 2, heads: 2, context: 256 }
    }
}

impl ArchConfig {
    /// Reduced shape for finite-difference gradient checking (< 50 000
    /// parameters, so full-Jacobian comparisons stay fast).
    pub fn grad_check() -> Self {
        ArchConfig { embed_dim: 32, layers: 1, heads: 2, context: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.context < 2 {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::build(self).total
    }
}

/// One contiguous region of the flat parameter vector with a 2-D shape;
/// vectors are spans with `cols == 1`.
#[derive(Debug, Clone, Copy)]
struct Span {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Span {
    fn len(self) -> usize {
        self.rows * self.cols
    }

    fn mat(self, p: &[f64]) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.offset..self.offset + self.len()])
            .expect("span shape matches slice")
    }

    fn mat_mut(self, p: &mut [f64]) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape(
            (self.rows, self.cols),
            &mut p[self.offset..self.offset + self.len()],
        )
        .expect("span shape matches slice")
    }

    fn vec(self, p: &[f64]) -> ArrayView1<'_, f64> {
        debug_assert_eq!(self.cols, 1);
        ArrayView1::from(&p[self.offset..self.offset + self.rows])
    }

    fn vec_mut(self, p: &mut [f64]) -> ArrayViewMut1<'_, f64> {
        debug_assert_eq!(self.cols, 1);
        ArrayViewMut1::from(&mut p[self.offset..self.offset + self.rows])
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpans {
    ln1_g: Span,
    ln1_b: Span,
    wq: Span,
    wk: Span,
    wv: Span,
    wo: Span,
    ln2_g: Span,
    ln2_b: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

/// Deterministic carving of the flat vector into named tensors.
#[derive(Debug, Clone)]
struct Layout {
    embed: Span,
    pos: Span,
    layers: Vec<LayerSpans>,
    lnf_g: Span,
    lnf_b: Span,
    unembed: Span,
    out_bias: Span,
    total: usize,
}

impl Layout {
    fn build(arch: &ArchConfig) -> Layout {
        let d = arch.embed_dim;
        let f = FFN_MULT * d;
        let mut offset = 0usize;
        let mut next = |rows: usize, cols: usize| {
            let span = Span { offset, rows, cols };
            offset += rows * cols;
            span
        };
        let embed = next(VOCAB_SIZE, d);
        let pos = next(arch.context, d);
        let layers = (0..arch.layers)
            .map(|_| LayerSpans {
                ln1_g: next(d, 1),
                ln1_b: next(d, 1),
                wq: next(d, d),
                wk: next(d, d),
                wv: next(d, d),
                wo: next(d, d),
                ln2_g: next(d, 1),
                ln2_b: next(d, 1),
                w1: next(d, f),
                b1: next(f, 1),
                w2: next(f, d),
                b2: next(d, 1),
            })
            .collect();
        let lnf_g = next(d, 1);
        let lnf_b = next(d, 1);
        let unembed = next(d, VOCAB_SIZE);
        let out_bias = next(VOCAB_SIZE, 1);
        Layout { embed, pos, layers, lnf_g, lnf_b, unembed, out_bias, total: offset }
    }
}

/// Exact teacher-forced log-probability of a completion.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbResult {
    /// `log π_θ(completion | prompt)`, summed over completion tokens.
    pub total: f64,
    /// One log-probability per completion token, in order.
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    arch: ArchConfig,
    layout: Layout,
    params: Vec<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    x_ln1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head post-softmax attention probabilities, each T×T.
    probs: Vec<Array2<f64>>,
    att_concat: Array2<f64>,
    ln2: LnCache,
    x_ln2: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let t = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut out = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..x.ncols() {
            let xh = (row[j] - mean) * r;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * gamma[j] + beta[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    mut dgamma: ArrayViewMut1<f64>,
    mut dbeta: ArrayViewMut1<f64>,
) -> Array2<f64> {
    let t = dy.nrows();
    let d = dy.ncols();
    let dn = d as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..t {
        // dxhat = dy * gamma; then the standard two-correction formula.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[[i, j]];
            dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbeta[j] += dy[[i, j]];
        }
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            dx[[i, j]] =
                r * (dxh - sum_dxhat / dn - cache.xhat[[i, j]] * sum_dxhat_xhat / dn);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise log-softmax, numerically stabilized.
fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl PolicyModel {
    pub fn zeros(arch: ArchConfig) -> Result<PolicyModel> {
        arch.validate()?;
        let layout = Layout::build(&arch);
        let params = vec![0.0; layout.total];
        Ok(PolicyModel { arch, layout, params })
    }

    /// Standard transformer initialization: N(0, 0.02²) embeddings and
    /// projections, residual-output projections scaled down by
    /// 1/√(2·layers), unit layer-norm gains, zero biases.
    pub fn random(arch: ArchConfig, seed: u64) -> Result<PolicyModel> {
        let mut model = PolicyModel::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"policy-init"]));
        let mut normal = move |std: f64| {
            // Box–Muller; u1 in (0, 1] avoids ln(0).
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let base_std = 0.02;
        let resid_std = base_std / ((2 * model.arch.layers) as f64).sqrt();
        let layout = model.layout.clone();
        let fill = |params: &mut [f64], span: Span, normal: &mut dyn FnMut(f64) -> f64, std: f64| {
            for v in &mut params[span.offset..span.offset + span.len()] {
                *v = normal(std);
            }
        };
        let ones = |params: &mut [f64], span: Span| {
            params[span.offset..span.offset + span.len()].fill(1.0);
        };
        fill(&mut model.params, layout.embed, &mut normal, base_std);
        fill(&mut model.params, layout.pos, &mut normal, base_std);
        for layer in &layout.layers {
            ones(&mut model.params, layer.ln1_g);
            ones(&mut model.params, layer.ln2_g);
            fill(&mut model.params, layer.wq, &mut normal, base_std);
            fill(&mut model.params, layer.wk, &mut normal, base_std);
            fill(&mut model.params, layer.wv, &mut normal, base_std);
            fill(&mut model.params, layer.wo, &mut normal, resid_std);
            fill(&mut model.params, layer.w1, &mut normal, base_std);
            fill(&mut model.params, layer.w2, &mut normal, resid_std);
        }
        ones(&mut model.params, layout.lnf_g);
        fill(&mut model.params, layout.unembed, &mut normal, base_std);
        Ok(model)
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<PolicyModel> {
        arch.validate()?;
        let layout = Layout::build(&arch);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(PolicyModel { arch, layout, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn validate_tokens(&self, tokens: &[Token]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= VOCAB_SIZE) {
            return Err(Error::Argument(format!("token {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// Model inputs for teacher forcing: BOS, prompt, completion minus its
    /// final token (targets are the sequence shifted left).
    fn teacher_inputs(&self, prompt: &[Token], completion: &[Token]) -> Result<Vec<Token>> {
        self.validate_tokens(prompt)?;
        self.validate_tokens(completion)?;
        if completion.is_empty() || *completion.last().unwrap() != EOS {
            return Err(Error::Argument("completion must be non-empty and end with EOS".into()));
        }
        let input_len = prompt.len() + completion.len();
        if input_len > self.arch.context {
            return Err(Error::Argument(format!(
                "prompt + completion length {input_len} exceeds context {}",
                self.arch.context
            )));
        }
        let mut inputs = Vec::with_capacity(input_len);
        inputs.push(BOS);
        inputs.extend_from_slice(prompt);
        inputs.extend_from_slice(&completion[..completion.len() - 1]);
        Ok(inputs)
    }

    /// Full forward pass: logits for every input position plus the
    /// activation cache needed by `backward`.
    fn forward(&self, inputs: &[Token]) -> (Array2<f64>, Cache) {
        let t = inputs.len();
        let d = self.arch.embed_dim;
        let heads = self.arch.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let embed = self.layout.embed.mat(p);
        let pos = self.layout.pos.mat(p);

        let mut x = Array2::zeros((t, d));
        for (i, &tok) in inputs.iter().enumerate() {
            let e = embed.row(tok as usize);
            let pe = pos.row(i);
            for j in 0..d {
                x[[i, j]] = e[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(self.arch.layers);
        for spans in &self.layout.layers {
            let (x_ln1, ln1) = layer_norm(&x, spans.ln1_g.vec(p), spans.ln1_b.vec(p));
            let q = x_ln1.dot(&spans.wq.mat(p));
            let k = x_ln1.dot(&spans.wk.mat(p));
            let v = x_ln1.dot(&spans.wv.mat(p));

            let mut att_concat = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v * scale);
                // Causal mask: position i attends to j ≤ i only.
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                for mut row in scores.axis_iter_mut(Axis(0)) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let out_h = scores.dot(&vh);
                att_concat.slice_mut(cols).assign(&out_h);
                probs.push(scores);
            }
            let att_out = att_concat.dot(&spans.wo.mat(p));
            let x_mid = &x + &att_out;

            let (x_ln2, ln2) = layer_norm(&x_mid, spans.ln2_g.vec(p), spans.ln2_b.vec(p));
            let mut h_pre = x_ln2.dot(&spans.w1.mat(p));
            let b1 = spans.b1.vec(p);
            for mut row in h_pre.axis_iter_mut(Axis(0)) {
                row += &b1;
            }
            let h_act = h_pre.mapv(gelu);
            let mut mlp_out = h_act.dot(&spans.w2.mat(p));
            let b2 = spans.b2.vec(p);
            for mut row in mlp_out.axis_iter_mut(Axis(0)) {
                row += &b2;
            }
            x = &x_mid + &mlp_out;

            layers.push(LayerCache {
                ln1,
                x_ln1,
                q,
                k,
                v,
                probs,
                att_concat,
                ln2,
                x_ln2,
                h_pre,
                h_act,
            });
        }

        let (xf, lnf) = layer_norm(&x, self.layout.lnf_g.vec(p), self.layout.lnf_b.vec(p));
        let mut logits = xf.dot(&self.layout.unembed.mat(p));
        let ob = self.layout.out_bias.vec(p);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            row += &ob;
        }
        (logits, Cache { layers, lnf, xf })
    }

    /// Reverse-mode sweep from an upstream `d(objective)/d(logits)` matrix
    /// to the full flat parameter gradient.
    fn backward(&self, inputs: &[Token], cache: &Cache, dlogits: &Array2<f64>) -> Vec<f64> {
        let t = inputs.len();
        let d = self.arch.embed_dim;
        let heads = self.arch.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let mut grad = vec![0.0; self.layout.total];

        // Unembedding.
        {
            let mut du = self.layout.unembed.mat_mut(&mut grad);
            du += &cache.xf.t().dot(dlogits);
        }
        {
            let mut dob = self.layout.out_bias.vec_mut(&mut grad);
            dob += &dlogits.sum_axis(Axis(0));
        }
        let dxf = dlogits.dot(&self.layout.unembed.mat(p).t());

        // Final layer norm.
        let mut dx = {
            let (dg_span, db_span) = (self.layout.lnf_g, self.layout.lnf_b);
            let (left, right) = grad.split_at_mut(db_span.offset);
            let dgamma = ArrayViewMut1::from(&mut left[dg_span.offset..dg_span.offset + dg_span.rows]);
            let dbeta = ArrayViewMut1::from(&mut right[..db_span.rows]);
            layer_norm_backward(&dxf, &cache.lnf, self.layout.lnf_g.vec(p), dgamma, dbeta)
        };

        for (spans, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            // MLP residual branch: dx flows into both x_mid and the branch.
            let dmlp_out = dx.clone();
            {
                let mut db2 = spans.b2.vec_mut(&mut grad);
                db2 += &dmlp_out.sum_axis(Axis(0));
            }
            {
                let mut dw2 = spans.w2.mat_mut(&mut grad);
                dw2 += &lc.h_act.t().dot(&dmlp_out);
            }
            let mut dh_act = dmlp_out.dot(&spans.w2.mat(p).t());
            // Through GELU.
            for i in 0..t {
                for j in 0..dh_act.ncols() {
                    dh_act[[i, j]] *= gelu_prime(lc.h_pre[[i, j]]);
                }
            }
            let dh_pre = dh_act;
            {
                let mut db1 = spans.b1.vec_mut(&mut grad);
                db1 += &dh_pre.sum_axis(Axis(0));
            }
            {
                let mut dw1 = spans.w1.mat_mut(&mut grad);
                dw1 += &lc.x_ln2.t().dot(&dh_pre);
            }
            let dx_ln2 = dh_pre.dot(&spans.w1.mat(p).t());
            let dx_mid_from_ln2 = {
                let (dg_span, db_span) = (spans.ln2_g, spans.ln2_b);
                let (left, right) = grad.split_at_mut(db_span.offset);
                let dgamma =
                    ArrayViewMut1::from(&mut left[dg_span.offset..dg_span.offset + dg_span.rows]);
                let dbeta = ArrayViewMut1::from(&mut right[..db_span.rows]);
                layer_norm_backward(&dx_ln2, &lc.ln2, spans.ln2_g.vec(p), dgamma, dbeta)
            };
            let dx_mid = &dx + &dx_mid_from_ln2;

            // Attention residual branch.
            let datt_out = dx_mid.clone();
            {
                let mut dwo = spans.wo.mat_mut(&mut grad);
                dwo += &lc.att_concat.t().dot(&datt_out);
            }
            let datt_concat = datt_out.dot(&spans.wo.mat(p).t());

            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let probs = &lc.probs[h];
                let dout_h = datt_concat.slice(cols);
                let vh = lc.v.slice(cols);
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);

                let dprobs = dout_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dout_h));

                // Softmax backward per row, restricted to the causal prefix
                // (masked entries have prob 0 and contribute nothing).
                let mut dscores = Array2::zeros((t, t));
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += dprobs[[i, j]] * probs[[i, j]];
                    }
                    for j in 0..=i {
                        dscores[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&dscores.dot(&kh));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            }

            {
                let mut dwq = spans.wq.mat_mut(&mut grad);
                dwq += &lc.x_ln1.t().dot(&dq);
            }
            {
                let mut dwk = spans.wk.mat_mut(&mut grad);
                dwk += &lc.x_ln1.t().dot(&dk);
            }
            {
                let mut dwv = spans.wv.mat_mut(&mut grad);
                dwv += &lc.x_ln1.t().dot(&dv);
            }
            let dx_ln1 = dq.dot(&spans.wq.mat(p).t())
                + dk.dot(&spans.wk.mat(p).t())
                + dv.dot(&spans.wv.mat(p).t());
            let dx_in_from_ln1 = {
                let (dg_span, db_span) = (spans.ln1_g, spans.ln1_b);
                let (left, right) = grad.split_at_mut(db_span.offset);
                let dgamma =
                    ArrayViewMut1::from(&mut left[dg_span.offset..dg_span.offset + dg_span.rows]);
                let dbeta = ArrayViewMut1::from(&mut right[..db_span.rows]);
                layer_norm_backward(&dx_ln1, &lc.ln1, spans.ln1_g.vec(p), dgamma, dbeta)
            };
            dx = &dx_mid + &dx_in_from_ln1;
        }

        // Embeddings.
        {
            let mut dembed = self.layout.embed.mat_mut(&mut grad);
            for (i, &tok) in inputs.iter().enumerate() {
                let mut row = dembed.row_mut(tok as usize);
                row += &dx.row(i);
            }
        }
        {
            let mut dpos = self.layout.pos.mat_mut(&mut grad);
            for i in 0..t {
                let mut row = dpos.row_mut(i);
                row += &dx.row(i);
            }
        }
        grad
    }

    /// Per-completion-token log-probabilities and their masked rows.
    ///
    /// Row `prompt_len + j` of the teacher-forced logits predicts completion
    /// token `j`.
    fn completion_rows(prompt_len: usize, completion_len: usize) -> std::ops::Range<usize> {
        prompt_len..prompt_len + completion_len
    }

    /// Exact `log π_θ(completion | prompt)` with per-token breakdown.
    /// Prompt tokens contribute no terms. The completion must end with EOS.
    pub fn sequence_logprob(&self, prompt: &[Token], completion: &[Token]) -> Result<LogProbResult> {
        let inputs = self.teacher_inputs(prompt, completion)?;
        let (logits, _) = self.forward(&inputs);
        let logp = log_softmax_rows(&logits);
        let rows = Self::completion_rows(prompt.len(), completion.len());
        let per_token: Vec<f64> = rows
            .clone()
            .zip(completion)
            .map(|(row, &target)| logp[[row, target as usize]])
            .collect();
        Ok(LogProbResult { total: per_token.iter().sum(), per_token })
    }

    /// Gradient of `sequence_logprob(..).total` with respect to every
    /// parameter, plus the log-prob itself (one shared forward pass).
    pub fn logprob_gradient(
        &self,
        prompt: &[Token],
        completion: &[Token],
    ) -> Result<(LogProbResult, Vec<f64>)> {
        let inputs = self.teacher_inputs(prompt, completion)?;
        let (logits, cache) = self.forward(&inputs);
        let logp = log_softmax_rows(&logits);
        let rows = Self::completion_rows(prompt.len(), completion.len());

        let per_token: Vec<f64> = rows
            .clone()
            .zip(completion)
            .map(|(row, &target)| logp[[row, target as usize]])
            .collect();
        let result = LogProbResult { total: per_token.iter().sum(), per_token };

        // d(total)/d(logits) = onehot(target) − softmax on completion rows,
        // zero elsewhere.
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (row, &target) in rows.zip(completion) {
            for j in 0..VOCAB_SIZE {
                dlogits[[row, j]] = -logp[[row, j]].exp();
            }
            dlogits[[row, target as usize]] += 1.0;
        }
        let grad = self.backward(&inputs, &cache, &dlogits);
        Ok((result, grad))
    }

    /// Next-token log-probabilities after `[BOS] ++ prefix`; used by
    /// sampling and by normalization tests.
    pub(crate) fn next_token_logprobs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.validate_tokens(prefix)?;
        if prefix.len() + 1 > self.arch.context {
            return Err(Error::Argument(format!(
                "prefix length {} exceeds context {}",
                prefix.len(),
                self.arch.context
            )));
        }
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let (logits, _) = self.forward(&inputs);
        let logp = log_softmax_rows(&logits);
        Ok(logp.row(logits.nrows() - 1).to_vec())
    }

    /// Ancestral sampling at `temperature`; exactly 0.0 selects greedy
    /// (argmax) decoding. Stops after EOS, `max_new_tokens`, or a full
    /// context. Deterministic for a fixed seed.
    pub fn sample_completion(
        &self,
        prompt: &[Token],
        temperature: f64,
        max_new_tokens: usize,
        seed: u64,
    ) -> Result<Vec<Token>> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::Argument(format!("temperature {temperature} must be ≥ 0")));
        }
        if max_new_tokens == 0 {
            return Err(Error::Argument("max_new_tokens must be positive".into()));
        }
        self.validate_tokens(prompt)?;
        if prompt.len() + 1 > self.arch.context {
            return Err(Error::Argument(format!(
                "prompt length {} does not fit context {}",
                prompt.len(),
                self.arch.context
            )));
        }
        record_policy_sample();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"sample", prompt_bytes(prompt).as_slice()]));
        let mut prefix: Vec<Token> = prompt.to_vec();
        let mut completion = Vec::new();
        while completion.len() < max_new_tokens && prefix.len() + 1 <= self.arch.context {
            let logp = self.next_token_logprobs(&prefix)?;
            let next = if temperature == 0.0 {
                argmax(&logp)
            } else {
                sample_index(&logp, temperature, &mut rng)
            } as Token;
            completion.push(next);
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(completion)
    }
}

fn prompt_bytes(prompt: &[Token]) -> Vec<u8> {
    prompt.iter().flat_map(|t| t.to_le_bytes()).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draw from softmax(logp / temperature) by inverse CDF over the
/// renormalized distribution.
fn sample_index(logp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|&v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
pub(crate) mod grad_test_support {
    use super::*;

    /// Max relative error between an analytic gradient and central finite
    /// differences at `coords`, re-evaluating `objective` per probe.
    pub fn max_fd_rel_error(
        model: &PolicyModel,
        grad: &[f64],
        coords: &[usize],
        step: f64,
        mut objective: impl FnMut(&PolicyModel) -> f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        let mut probe = model.clone();
        for &c in coords {
            let original = probe.params()[c];
            probe.params_mut()[c] = original + step;
            let plus = objective(&probe);
            probe.params_mut()[c] = original - step;
            let minus = objective(&probe);
            probe.params_mut()[c] = original;
            let fd = (plus - minus) / (2.0 * step);
            let denom = grad[c].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[c] - fd).abs() / denom);
        }
        worst
    }

    pub fn pick_coords(total: usize, count: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| rng.random_range(0..total)).collect()
    }
}
