//! Forward passes: batched full-sequence evaluation (with an activation
//! trace for the backward pass) and incremental decoding with a KV cache.
//!
//! Sequences are fed shifted right behind an internal start token, so the
//! logit row at position `n` is a function of tokens `< n` only and the
//! table covers every original position including the first.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::sample_categorical;
use crate::tokens::VocabLayout;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer norm; returns (normalized output scaled by gain+bias,
/// pre-scale normalized values, reciprocal std per row).
pub(crate) fn layernorm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (rows, w) = x.dim();
    let mut xhat = Array2::zeros((rows, w));
    let mut out = Array2::zeros((rows, w));
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..w {
            let xh = (x[[r, c]] - mean) * rs;
            xhat[[r, c]] = xh;
            out[[r, c]] = gain[c] * xh + bias[c];
        }
    }
    (out, xhat, rstd)
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let (rows, v) = logits.dim();
    let mut out = Array2::zeros((rows, v));
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        for c in 0..v {
            out[[r, c]] = logits[[r, c]] - lse;
        }
    }
    out
}

fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

pub(crate) struct LnTrace {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct LayerTrace {
    pub ln1: LnTrace,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Post-softmax attention weights, one [L, L] matrix per (batch, head).
    pub probs: Vec<Array2<f64>>,
    pub probs_mask: Option<Vec<Array2<f64>>>,
    /// Head-concatenated context, before the output projection.
    pub ctx: Array2<f64>,
    pub attn_out_mask: Option<Array2<f64>>,
    pub ln2: LnTrace,
    /// Pre-activation feed-forward values.
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
    pub mlp_out_mask: Option<Array2<f64>>,
}

pub(crate) struct Trace {
    pub bsz: usize,
    pub len: usize,
    /// Input ids (start-shifted), row-major `[bsz * len]`.
    pub ids: Vec<usize>,
    /// Prediction targets, row-major `[bsz * len]`.
    pub targets: Vec<u16>,
    pub emb_mask: Option<Array2<f64>>,
    pub layers: Vec<LayerTrace>,
    pub lnf: LnTrace,
    pub logprobs: Array2<f64>,
}

fn batch_ids(model: &Model, batch: &[&[u16]]) -> Result<(Vec<usize>, Vec<u16>, usize, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let len = batch[0].len();
    if len == 0 {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if len > model.cfg.context {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {len} exceeds context {}",
            model.cfg.context
        )));
    }
    let bsz = batch.len();
    let mut ids = Vec::with_capacity(bsz * len);
    let mut targets = Vec::with_capacity(bsz * len);
    for seq in batch {
        if seq.len() != len {
            return Err(Error::ShapeMismatch("training batch sequences must share one length".into()));
        }
        ids.push(model.cfg.start_token());
        for (i, &t) in seq.iter().enumerate() {
            if (t as usize) >= model.cfg.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: model.cfg.vocab });
            }
            if i + 1 < len {
                ids.push(t as usize);
            }
            targets.push(t);
        }
    }
    Ok((ids, targets, bsz, len))
}

/// Full forward over a batch of equal-length sequences.
/// `dropout_rng` enables dropout (training mode); trace is built when requested.
pub(crate) fn forward_batch(
    model: &Model,
    batch: &[&[u16]],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    want_trace: bool,
) -> Result<(Array2<f64>, Vec<u16>, usize, usize, Option<Trace>)> {
    let cfg = &model.cfg;
    let (ids, targets, bsz, len) = batch_ids(model, batch)?;
    let w = cfg.width;
    let hd = cfg.head_dim();
    let rows = bsz * len;
    let p = cfg.dropout;
    let dropping = p > 0.0 && dropout_rng.is_some();

    // token + position embeddings
    let mut x = Array2::zeros((rows, w));
    for r in 0..rows {
        let pos = r % len;
        let id = ids[r];
        for c in 0..w {
            x[[r, c]] = model.params.tok_emb[[id, c]] + model.params.pos_emb[[pos, c]];
        }
    }
    let emb_mask = if dropping {
        let m = dropout_mask(dropout_rng.as_deref_mut().unwrap(), rows, w, p);
        x *= &m;
        Some(m)
    } else {
        None
    };

    let mut layer_traces = Vec::with_capacity(cfg.layers);
    let scale = 1.0 / (hd as f64).sqrt();

    for layer in &model.params.layers {
        let (h, xhat1, rstd1) = layernorm(&x, &layer.ln1_g, &layer.ln1_b);
        let mut q = h.dot(&layer.wq);
        let mut k = h.dot(&layer.wk);
        let mut v = h.dot(&layer.wv);
        q += &layer.bq;
        k += &layer.bk;
        v += &layer.bv;

        let mut ctx = Array2::zeros((rows, w));
        let mut probs_all = Vec::with_capacity(if want_trace { bsz * cfg.heads } else { 0 });
        let mut masks_all = Vec::with_capacity(if want_trace && dropping { bsz * cfg.heads } else { 0 });
        for b in 0..bsz {
            let r0 = b * len;
            for head in 0..cfg.heads {
                let c0 = head * hd;
                let qh = q.slice(s![r0..r0 + len, c0..c0 + hd]);
                let kh = k.slice(s![r0..r0 + len, c0..c0 + hd]);
                let vh = v.slice(s![r0..r0 + len, c0..c0 + hd]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                for i in 0..len {
                    for j in i + 1..len {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                softmax_rows_inplace(&mut scores);
                let probs = scores;
                let weighted = if dropping {
                    let m = dropout_mask(dropout_rng.as_deref_mut().unwrap(), len, len, p);
                    let pd = &probs * &m;
                    if want_trace {
                        masks_all.push(m);
                    }
                    pd
                } else {
                    probs.clone()
                };
                let ctx_h = weighted.dot(&vh);
                ctx.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&ctx_h);
                if want_trace {
                    probs_all.push(probs);
                }
            }
        }

        let mut attn = ctx.dot(&layer.wo);
        attn += &layer.bo;
        let attn_out_mask = if dropping {
            let m = dropout_mask(dropout_rng.as_deref_mut().unwrap(), rows, w, p);
            attn *= &m;
            Some(m)
        } else {
            None
        };
        x += &attn;

        let (h2, xhat2, rstd2) = layernorm(&x, &layer.ln2_g, &layer.ln2_b);
        let mut ff_pre = h2.dot(&layer.w1);
        ff_pre += &layer.b1;
        let ff_act = ff_pre.mapv(gelu);
        let mut mlp = ff_act.dot(&layer.w2);
        mlp += &layer.b2;
        let mlp_out_mask = if dropping {
            let m = dropout_mask(dropout_rng.as_deref_mut().unwrap(), rows, w, p);
            mlp *= &m;
            Some(m)
        } else {
            None
        };
        x += &mlp;

        if want_trace {
            layer_traces.push(LayerTrace {
                ln1: LnTrace { xhat: xhat1, rstd: rstd1 },
                q,
                k,
                v,
                probs: probs_all,
                probs_mask: if dropping { Some(masks_all) } else { None },
                ctx,
                attn_out_mask,
                ln2: LnTrace { xhat: xhat2, rstd: rstd2 },
                ff_pre,
                ff_act,
                mlp_out_mask,
            });
        }
    }

    let (xf, xhatf, rstdf) = layernorm(&x, &model.params.lnf_g, &model.params.lnf_b);
    let logits = xf.dot(&model.params.head);
    let logprobs = log_softmax_rows(&logits);

    model.full_forwards.fetch_add(1, std::sync::atomic::Ordering::Relaxed);

    let trace = if want_trace {
        Some(Trace {
            bsz,
            len,
            ids,
            targets: targets.clone(),
            emb_mask,
            layers: layer_traces,
            lnf: LnTrace { xhat: xhatf, rstd: rstdf },
            logprobs: logprobs.clone(),
        })
    } else {
        None
    };
    Ok((logprobs, targets, bsz, len, trace))
}

impl Model {
    /// Per-position next-token log-probability table for one sequence:
    /// row `n` holds `log P(. | tokens[..n])`. Evaluation mode (no dropout).
    pub fn forward_logprobs(&self, tokens: &[u16]) -> Result<Array2<f64>> {
        let (logprobs, _, _, _, _) = forward_batch(self, &[tokens], None, false)?;
        Ok(logprobs)
    }

    /// Log-probability tables for a batch of equal-length sequences.
    pub fn forward_logprobs_batch(&self, batch: &[&[u16]]) -> Result<Vec<Array2<f64>>> {
        let (logprobs, _, bsz, len, _) = forward_batch(self, batch, None, false)?;
        let v = self.cfg.vocab;
        Ok((0..bsz)
            .map(|b| logprobs.slice(s![b * len..(b + 1) * len, 0..v]).to_owned())
            .collect())
    }

    /// Mean negative log-likelihood per token over the batch (evaluation mode).
    /// Sequences may have different lengths; each length group is batched.
    pub fn nll_loss(&self, batch: &[&[u16]]) -> Result<f64> {
        let (sum, count) = self.nll_sum(batch)?;
        Ok(sum / count as f64)
    }

    fn nll_sum(&self, batch: &[&[u16]]) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<&[u16]>> = std::collections::BTreeMap::new();
        for &seq in batch {
            groups.entry(seq.len()).or_default().push(seq);
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (len, group) in groups {
            let (logprobs, targets, bsz, _, _) = forward_batch(self, &group, None, false)?;
            for r in 0..bsz * len {
                sum -= logprobs[[r, targets[r] as usize]];
            }
            count += bsz * len;
        }
        Ok((sum, count))
    }

    /// Negative log-likelihood split by field kind (state/action/reward/rtg),
    /// as (sum, token count) per kind. The four sums add up to the total.
    pub fn nll_by_kind(&self, batch: &[&[u16]], layout: &VocabLayout) -> Result<[(f64, usize); 4]> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let tps = layout.tokens_per_step();
        let mut out = [(0.0, 0usize); 4];
        for &seq in batch {
            let logprobs = self.forward_logprobs(seq)?;
            for (i, &t) in seq.iter().enumerate() {
                let slot = match layout.kind_of_offset(i % tps) {
                    crate::tokens::FieldKind::State(_) => 0,
                    crate::tokens::FieldKind::Action(_) => 1,
                    crate::tokens::FieldKind::Reward => 2,
                    crate::tokens::FieldKind::RewardToGo => 3,
                };
                out[slot].0 -= logprobs[[i, t as usize]];
                out[slot].1 += 1;
            }
        }
        Ok(out)
    }
}

/// How `sample_next_token` turns a distribution into a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingPolicy {
    /// Plain categorical sampling at temperature 1.
    Categorical,
    /// Argmax; ties break toward the lowest token id.
    Greedy,
}

use serde::{Deserialize, Serialize};

pub fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Draw a token from a log-probability row under the given policy.
/// Returns the token and its log-probability.
pub fn pick_token(
    logprobs: ndarray::ArrayView1<'_, f64>,
    policy: SamplingPolicy,
    rng: &mut ChaCha8Rng,
) -> (u16, f64) {
    match policy {
        SamplingPolicy::Greedy => {
            let i = argmax_row(logprobs);
            (i as u16, logprobs[i])
        }
        SamplingPolicy::Categorical => {
            let probs: Vec<f64> = logprobs.iter().map(|&lp| lp.exp()).collect();
            let i = sample_categorical(rng, &probs);
            (i as u16, logprobs[i])
        }
    }
}

impl Model {
    /// Sample the token following `prefix`. Deterministic given the rng state.
    pub fn sample_next_token(
        &self,
        prefix: &[u16],
        rng: &mut ChaCha8Rng,
        policy: SamplingPolicy,
    ) -> Result<(u16, f64)> {
        if prefix.len() >= self.cfg.context {
            return Err(Error::ShapeMismatch(format!(
                "prefix of {} tokens leaves no room in context {}",
                prefix.len(),
                self.cfg.context
            )));
        }
        let mut session = DecodeSession::open(self, 1)?;
        session.advance(prefix)?;
        let lp = session.next_logprobs();
        Ok(pick_token(lp.row(0), policy, rng))
    }
}

/// Incremental decoding over `rows` parallel token streams sharing one
/// position counter. Evaluation mode: parameters are read-only, no dropout.
pub struct DecodeSession<'m> {
    model: &'m Model,
    rows: usize,
    /// Input positions consumed, including the internal start token.
    pos: usize,
    k: Vec<Array3<f64>>,
    v: Vec<Array3<f64>>,
    logits: Array2<f64>,
}

impl<'m> DecodeSession<'m> {
    /// Open a session and prime it with the start token, so `next_logprobs`
    /// immediately describes the first real position.
    pub fn open(model: &'m Model, rows: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidInput("session needs at least one row".into()));
        }
        let cfg = &model.cfg;
        let mut s = Self {
            model,
            rows,
            pos: 0,
            k: (0..cfg.layers).map(|_| Array3::zeros((rows, cfg.context, cfg.width))).collect(),
            v: (0..cfg.layers).map(|_| Array3::zeros((rows, cfg.context, cfg.width))).collect(),
            logits: Array2::zeros((rows, cfg.vocab)),
        };
        let start = vec![cfg.start_token(); rows];
        s.step_ids(&start)?;
        Ok(s)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Tokens fed so far (excluding the start token).
    pub fn tokens_fed(&self) -> usize {
        self.pos - 1
    }

    pub fn capacity_left(&self) -> usize {
        self.model.cfg.context - self.pos
    }

    /// Feed one token per row (all rows advance together).
    pub fn step(&mut self, tokens: &[u16]) -> Result<()> {
        if tokens.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "step got {} tokens for {} rows",
                tokens.len(),
                self.rows
            )));
        }
        for &t in tokens {
            if (t as usize) >= self.model.cfg.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.model.cfg.vocab });
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.step_ids(&ids)
    }

    /// Feed the same token sequence to every row, one position at a time.
    pub fn advance(&mut self, tokens: &[u16]) -> Result<()> {
        for &t in tokens {
            self.step(&vec![t; self.rows])?;
        }
        Ok(())
    }

    /// Feed a different prefix to each row; all prefixes share one length.
    pub fn advance_rows(&mut self, prefixes: &[&[u16]]) -> Result<()> {
        if prefixes.len() != self.rows {
            return Err(Error::ShapeMismatch("one prefix per row required".into()));
        }
        let len = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::ShapeMismatch("row prefixes must share one length".into()));
        }
        let mut step_tokens = vec![0u16; self.rows];
        for i in 0..len {
            for (r, p) in prefixes.iter().enumerate() {
                step_tokens[r] = p[i];
            }
            self.step(&step_tokens)?;
        }
        Ok(())
    }

    /// Logits for the next position, one row per stream.
    pub fn next_logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Log-softmax of `next_logits`.
    pub fn next_logprobs(&self) -> Array2<f64> {
        log_softmax_rows(&self.logits)
    }

    /// Reorder/duplicate rows (beam reshuffle). `idx` entries index old rows.
    pub fn select_rows(&mut self, idx: &[usize]) -> Result<()> {
        if idx.iter().any(|&i| i >= self.rows) {
            return Err(Error::InvalidInput("select_rows index out of range".into()));
        }
        for l in 0..self.k.len() {
            self.k[l] = self.k[l].select(ndarray::Axis(0), idx);
            self.v[l] = self.v[l].select(ndarray::Axis(0), idx);
        }
        self.logits = self.logits.select(ndarray::Axis(0), idx);
        self.rows = idx.len();
        Ok(())
    }

    fn step_ids(&mut self, ids: &[usize]) -> Result<()> {
        let cfg = &self.model.cfg;
        let params = &self.model.params;
        if self.pos >= cfg.context {
            return Err(Error::ShapeMismatch(format!("context {} exhausted", cfg.context)));
        }
        let w = cfg.width;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let rows = self.rows;
        let pos = self.pos;

        let mut x = Array2::zeros((rows, w));
        for r in 0..rows {
            for c in 0..w {
                x[[r, c]] = params.tok_emb[[ids[r], c]] + params.pos_emb[[pos, c]];
            }
        }

        for (l, layer) in params.layers.iter().enumerate() {
            let (h, _, _) = layernorm(&x, &layer.ln1_g, &layer.ln1_b);
            let mut q = h.dot(&layer.wq);
            let mut knew = h.dot(&layer.wk);
            let mut vnew = h.dot(&layer.wv);
            q += &layer.bq;
            knew += &layer.bk;
            vnew += &layer.bv;
            self.k[l].slice_mut(s![.., pos, ..]).assign(&knew);
            self.v[l].slice_mut(s![.., pos, ..]).assign(&vnew);

            let mut ctx = Array2::zeros((rows, w));
            let kcache = self.k[l].as_slice().expect("contiguous k cache");
            let vcache = self.v[l].as_slice().expect("contiguous v cache");
            let stride_r = cfg.context * w;
            let keys = pos + 1;
            let mut scores = vec![0.0; keys];
            for r in 0..rows {
                for head in 0..cfg.heads {
                    let c0 = head * hd;
                    for (p, score) in scores.iter_mut().enumerate() {
                        let off = r * stride_r + p * w + c0;
                        let kslice = &kcache[off..off + hd];
                        let mut dot = 0.0;
                        for d in 0..hd {
                            dot += q[[r, c0 + d]] * kslice[d];
                        }
                        *score = dot * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    for (p, &sc) in scores.iter().enumerate() {
                        let weight = sc / sum;
                        let off = r * stride_r + p * w + c0;
                        let vslice = &vcache[off..off + hd];
                        for d in 0..hd {
                            ctx[[r, c0 + d]] += weight * vslice[d];
                        }
                    }
                }
            }

            let mut attn = ctx.dot(&layer.wo);
            attn += &layer.bo;
            x += &attn;

            let (h2, _, _) = layernorm(&x, &layer.ln2_g, &layer.ln2_b);
            let mut ff = h2.dot(&layer.w1);
            ff += &layer.b1;
            ff.mapv_inplace(gelu);
            let mut mlp = ff.dot(&layer.w2);
            mlp += &layer.b2;
            x += &mlp;
        }

        let (xf, _, _) = layernorm(&x, &params.lnf_g, &params.lnf_b);
        self.logits = xf.dot(&params.head);
        self.pos += 1;
        self.model.decode_steps.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Ok(())
    }
}
