//! Reverse-mode gradients of the mean token NLL, walking the forward trace
//! backwards block by block.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::{forward_batch, gelu_grad};
use crate::model::{Model, ModelParams};

/// Layer-norm backward for one call site.
/// Returns dx; accumulates gain/bias gradients into the provided arrays.
fn layernorm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &[f64],
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, w) = dy.dim();
    let mut dx = Array2::zeros((rows, w));
    for r in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..w {
            let d = dy[[r, c]];
            let xh = xhat[[r, c]];
            dgain[c] += d * xh;
            dbias[c] += d;
            let dxh = d * gain[c];
            m1 += dxh;
            m2 += dxh * xh;
        }
        m1 /= w as f64;
        m2 /= w as f64;
        for c in 0..w {
            let dxh = dy[[r, c]] * gain[c];
            dx[[r, c]] = rstd[r] * (dxh - m1 - xhat[[r, c]] * m2);
        }
    }
    dx
}

/// Rebuild a layer-norm output from its cached normalized values.
fn ln_output(xhat: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v * gain[c] + bias[c];
        }
    }
    out
}

fn colsum_into(dy: &Array2<f64>, out: &mut Array1<f64>) {
    for row in dy.rows() {
        for (c, &v) in row.iter().enumerate() {
            out[c] += v;
        }
    }
}

impl Model {
    /// Mean NLL over the batch, per-sequence NLL, and the gradient of the
    /// mean NLL with respect to every parameter block.
    ///
    /// `dropout_rng` enables training-mode dropout; pass `None` for the exact
    /// deterministic loss (required by finite-difference checks).
    pub fn grad(
        &self,
        batch: &[&[u16]],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>, ModelParams)> {
        let cfg = &self.cfg;
        let (_, _, _, _, trace) = forward_batch(self, batch, dropout_rng, true)?;
        let trace = trace.expect("trace requested");
        let bsz = trace.bsz;
        let len = trace.len;
        let rows = bsz * len;
        let w = cfg.width;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let inv_count = 1.0 / rows as f64;

        // loss and dlogits = (softmax - onehot) / (B*L)
        let mut per_seq = vec![0.0; bsz];
        let mut dlogits = trace.logprobs.mapv(f64::exp);
        dlogits *= inv_count;
        for r in 0..rows {
            let t = trace.targets[r] as usize;
            per_seq[r / len] -= trace.logprobs[[r, t]];
            dlogits[[r, t]] -= inv_count;
        }
        let loss = per_seq.iter().sum::<f64>() / rows as f64;
        for v in per_seq.iter_mut() {
            *v /= len as f64;
        }

        let mut grads = self.params.zeros_like();

        // head projection: logits = lnf(x) . head
        let xf = ln_output(&trace.lnf.xhat, &self.params.lnf_g, &self.params.lnf_b);
        grads.head = xf.t().dot(&dlogits);
        let dxf = dlogits.dot(&self.params.head.t());
        let mut dx = layernorm_backward(
            &dxf,
            &trace.lnf.xhat,
            &trace.lnf.rstd,
            &self.params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for l in (0..cfg.layers).rev() {
            let layer = &self.params.layers[l];
            let lt = &trace.layers[l];
            let gl = &mut grads.layers[l];

            // mlp branch
            let dmlp = match &lt.mlp_out_mask {
                Some(m) => &dx * m,
                None => dx.clone(),
            };
            colsum_into(&dmlp, &mut gl.b2);
            gl.w2 = lt.ff_act.t().dot(&dmlp);
            let mut dff = dmlp.dot(&layer.w2.t());
            for (d, &pre) in dff.iter_mut().zip(lt.ff_pre.iter()) {
                *d *= gelu_grad(pre);
            }
            colsum_into(&dff, &mut gl.b1);
            let h2 = ln_output(&lt.ln2.xhat, &layer.ln2_g, &layer.ln2_b);
            gl.w1 = h2.t().dot(&dff);
            let dh2 = dff.dot(&layer.w1.t());
            let dx_ln2 = layernorm_backward(&dh2, &lt.ln2.xhat, &lt.ln2.rstd, &layer.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
            dx += &dx_ln2; // residual + norm path

            // attention branch
            let dattn = match &lt.attn_out_mask {
                Some(m) => &dx * m,
                None => dx.clone(),
            };
            colsum_into(&dattn, &mut gl.bo);
            gl.wo = lt.ctx.t().dot(&dattn);
            let dctx = dattn.dot(&layer.wo.t());

            let mut dq = Array2::zeros((rows, w));
            let mut dk = Array2::zeros((rows, w));
            let mut dv = Array2::zeros((rows, w));
            for b in 0..bsz {
                let r0 = b * len;
                for head in 0..cfg.heads {
                    let c0 = head * hd;
                    let probs = &lt.probs[b * cfg.heads + head];
                    let dctx_h = dctx.slice(s![r0..r0 + len, c0..c0 + hd]);
                    let vh = lt.v.slice(s![r0..r0 + len, c0..c0 + hd]);
                    let qh = lt.q.slice(s![r0..r0 + len, c0..c0 + hd]);
                    let kh = lt.k.slice(s![r0..r0 + len, c0..c0 + hd]);

                    let (weighted_grad, dv_h) = match lt.probs_mask.as_ref() {
                        Some(masks) => {
                            let mask = &masks[b * cfg.heads + head];
                            let weighted = probs * mask;
                            let dweighted = dctx_h.dot(&vh.t());
                            (dweighted * mask, weighted.t().dot(&dctx_h))
                        }
                        None => (dctx_h.dot(&vh.t()), probs.t().dot(&dctx_h)),
                    };
                    dv.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&dv_h);

                    // softmax backward; masked positions carry probs = 0
                    let mut dscores = weighted_grad;
                    for i in 0..len {
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += dscores[[i, j]] * probs[[i, j]];
                        }
                        for j in 0..len {
                            dscores[[i, j]] = probs[[i, j]] * (dscores[[i, j]] - dot);
                        }
                    }
                    let mut dq_h = dscores.dot(&kh);
                    dq_h *= scale;
                    let mut dk_h = dscores.t().dot(&qh);
                    dk_h *= scale;
                    dq.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&dq_h);
                    dk.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&dk_h);
                }
            }

            colsum_into(&dq, &mut gl.bq);
            colsum_into(&dk, &mut gl.bk);
            colsum_into(&dv, &mut gl.bv);
            let h1 = ln_output(&lt.ln1.xhat, &layer.ln1_g, &layer.ln1_b);
            gl.wq = h1.t().dot(&dq);
            gl.wk = h1.t().dot(&dk);
            gl.wv = h1.t().dot(&dv);
            let mut dh1 = dq.dot(&layer.wq.t());
            dh1 += &dk.dot(&layer.wk.t());
            dh1 += &dv.dot(&layer.wv.t());
            let dx_ln1 = layernorm_backward(&dh1, &lt.ln1.xhat, &lt.ln1.rstd, &layer.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
            dx += &dx_ln1;
        }

        // embeddings
        let dx0 = match &trace.emb_mask {
            Some(m) => &dx * m,
            None => dx,
        };
        for r in 0..rows {
            let id = trace.ids[r];
            let pos = r % len;
            for c in 0..w {
                grads.tok_emb[[id, c]] += dx0[[r, c]];
                grads.pos_emb[[pos, c]] += dx0[[r, c]];
            }
        }

        if let Some(block) = grads.find_non_finite() {
            return Err(Error::NonFinite(format!("gradient block {block}")));
        }
        Ok((loss, per_seq, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn fd_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            context: 12,
            width: 4,
            layers: 1,
            heads: 2,
            ff_width: 8,
            dropout: 0.0,
            init_scale: 0.15,
            seed: 21,
        }
    }

    /// Central finite differences over every parameter of a tiny model.
    #[test]
    fn gradient_matches_finite_differences() {
        let model = Model::new(fd_cfg()).unwrap();
        let seqs: Vec<Vec<u16>> = vec![vec![0, 3, 6, 1, 4, 2, 5, 0, 1, 6, 3, 2], vec![5, 5, 0, 2, 6, 6, 1, 0, 3, 4, 4, 1]];
        let batch: Vec<&[u16]> = seqs.iter().map(|s| s.as_slice()).collect();
        let (_, _, grads) = model.grad(&batch, None).unwrap();

        let step = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = model.params.blocks().iter().map(|(n, _)| n.clone()).collect();
        for (bi, name) in names.iter().enumerate() {
            let block_len = model.params.blocks()[bi].1.len();
            for j in 0..block_len {
                let mut plus = model.clone();
                {
                    let mut blocks = plus.params.blocks_mut();
                    let slice = blocks[bi].1.as_slice_mut().unwrap();
                    slice[j] += step;
                }
                let lp = plus.nll_loss(&batch).unwrap();
                let mut minus = model.clone();
                {
                    let mut blocks = minus.params.blocks_mut();
                    let slice = blocks[bi].1.as_slice_mut().unwrap();
                    slice[j] -= step;
                }
                let lm = minus.nll_loss(&batch).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let an = grads.blocks()[bi].1.as_slice().unwrap()[j];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                let rel = (fd - an).abs() / denom;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{j}]: analytic {an} vs fd {fd} (rel {rel})");
            }
        }
        println!("worst relative error: {worst:.3e}");
    }

    #[test]
    fn gradient_of_duplicated_batch_is_unchanged() {
        let model = Model::new(fd_cfg()).unwrap();
        let seq: Vec<u16> = vec![1, 2, 3, 4, 5, 6];
        let (_, _, g1) = model.grad(&[&seq], None).unwrap();
        let (_, _, g2) = model.grad(&[&seq, &seq], None).unwrap();
        for ((_, a), (_, b)) in g1.blocks().iter().zip(g2.blocks().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_sequence_nll_matches_eval_loss() {
        let model = Model::new(fd_cfg()).unwrap();
        let a: Vec<u16> = vec![1, 2, 3, 4];
        let b: Vec<u16> = vec![6, 5, 4, 3];
        let (loss, per_seq, _) = model.grad(&[&a, &b], None).unwrap();
        let la = model.nll_loss(&[&a]).unwrap();
        let lb = model.nll_loss(&[&b]).unwrap();
        assert!((per_seq[0] - la).abs() < 1e-12);
        assert!((per_seq[1] - lb).abs() < 1e-12);
        assert!((loss - (la + lb) / 2.0).abs() < 1e-12);
    }
}
