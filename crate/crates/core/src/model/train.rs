//! Short deterministic Adam training on next-token cross-entropy. Enough to
//! make the toy model's perplexity depend on its key/value projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{gelu_grad, CompressedOverride, LayerTrace};
use crate::model::{Model, ModelWeights};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("training batch_size must be positive"));
        }
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::invalid("training hyperparameters out of range"));
        }
        Ok(())
    }
}

/// Mean training loss (nats per predicted token) after each step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Trains in place, then rounds weights to `f32`. Sequences of each batch are
/// drawn with replacement from `corpus` using `cfg.seed`.
pub fn train(model: &mut Model, corpus: &[Vec<u16>], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let usable: Vec<&[u16]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| s.as_slice())
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "training corpus has no sequence of two or more tokens",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = model.weights.zeros_like();
    let mut v = model.weights.zeros_like();
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch: Vec<&[u16]> = (0..cfg.batch_size)
            .map(|_| usable[rng.random_range(0..usable.len())])
            .collect();
        let (loss, grad) = loss_and_grad(model, &batch)?;
        log.losses.push(loss);
        let b1 = 1.0 - cfg.beta1.powi(step as i32);
        let b2 = 1.0 - cfg.beta2.powi(step as i32);
        let params = model.weights.tensors_mut();
        let ms = m.tensors_mut();
        let vs = v.tensors_mut();
        for (((p, mt), vt), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grad.named()) {
            let p = p.as_mut_slice();
            let mt = mt.as_mut_slice();
            let vt = vt.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                mt[i] = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
                vt[i] = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.learning_rate * (mt[i] / b1) / ((vt[i] / b2).sqrt() + cfg.epsilon);
            }
        }
        log::debug!("train step {step}: loss {loss:.5}");
    }
    model.weights.round_to_f32();
    Ok(log)
}

/// Mean next-token NLL over a batch and its gradient.
pub fn loss_and_grad(model: &Model, batch: &[&[u16]]) -> Result<(f64, ModelWeights)> {
    let parts: Vec<(f64, usize, ModelWeights)> = batch
        .par_iter()
        .map(|seq| sequence_grad(model, seq))
        .collect::<Result<_>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::invalid("batch has no predicted positions"));
    }
    let scale = 1.0 / count as f64;
    let mut total = model.weights.zeros_like();
    let mut loss = 0.0;
    // Fixed reduction order keeps training bitwise reproducible.
    for (nll, _, g) in &parts {
        loss += nll;
        for (acc, (_, gi)) in total.tensors_mut().into_iter().zip(g.named()) {
            for (a, &b) in acc.as_mut_slice().iter_mut().zip(gi.as_slice()) {
                *a += b * scale;
            }
        }
    }
    Ok((loss * scale, total))
}

/// Summed NLL, scored positions and the gradient of the summed NLL.
fn sequence_grad(model: &Model, tokens: &[u16]) -> Result<(f64, usize, ModelWeights)> {
    let cfg = &model.config;
    let w = &model.weights;
    let mut g = w.zeros_like();
    let len = tokens.len();
    if len < 2 {
        return Ok((0.0, 0, g));
    }
    let tr = model.forward_traced(tokens, &CompressedOverride::new())?;

    let mut nll = 0.0;
    let mut dlogits = Matrix::zeros(len, cfg.vocab);
    for t in 0..len - 1 {
        let row = tr.logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let target = tokens[t + 1] as usize;
        nll -= row[target] - max - z.ln();
        for (d, &x) in dlogits.row_mut(t).iter_mut().zip(row) {
            *d = (x - max).exp() / z;
        }
        dlogits.row_mut(t)[target] -= 1.0;
    }

    // Tied head: logits = F·Eᵀ.
    add_into(
        &mut g.embedding,
        &dlogits.transpose().matmul(&tr.final_hidden)?,
    );
    let df = dlogits.matmul(&w.embedding)?;
    let mut dh = norm_backward(
        &tr.final_input,
        &tr.final_rms,
        &w.final_norm,
        &df,
        &mut g.final_norm,
    );

    for (li, lt) in tr.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let lg = &mut g.layers[li];

        // MLP sublayer.
        add_into(&mut lg.w_out, &lt.act.transpose().matmul(&dh)?);
        let dact = dh.matmul(&lw.w_out.transpose())?;
        let mut dpre = dact;
        for (d, &x) in dpre.as_mut_slice().iter_mut().zip(lt.pre_act.as_slice()) {
            *d *= gelu_grad(x);
        }
        add_into(&mut lg.w_in, &lt.mlp_input.transpose().matmul(&dpre)?);
        let dmlp_in = dpre.matmul(&lw.w_in.transpose())?;
        let dmid = dh.add(&norm_backward(
            &lt.mid,
            &lt.mlp_rms,
            &lw.mlp_norm,
            &dmlp_in,
            &mut lg.mlp_norm,
        ))?;

        // Attention sublayer.
        add_into(&mut lg.wo, &lt.attn_out.transpose().matmul(&dmid)?);
        let dout = dmid.matmul(&lw.wo.transpose())?;
        let (dq, dk, dv) = attention_backward(model, lt, &dout);
        let a = &lt.attn_input;
        add_into(&mut lg.wq, &a.transpose().matmul(&dq)?);
        add_into(&mut lg.wk, &a.transpose().matmul(&dk)?);
        add_into(&mut lg.wv, &a.transpose().matmul(&dv)?);
        let da = dq
            .matmul(&lw.wq.transpose())?
            .add(&dk.matmul(&lw.wk.transpose())?)?
            .add(&dv.matmul(&lw.wv.transpose())?)?;
        dh = dmid.add(&norm_backward(
            &lt.input,
            &lt.attn_rms,
            &lw.attn_norm,
            &da,
            &mut lg.attn_norm,
        ))?;
    }

    for (t, &tok) in tokens.iter().enumerate() {
        for (e, &d) in g.embedding.row_mut(tok as usize).iter_mut().zip(dh.row(t)) {
            *e += d;
        }
    }
    Ok((nll, len - 1, g))
}

fn add_into(acc: &mut Matrix, x: &Matrix) {
    for (a, &b) in acc.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a += b;
    }
}

/// Backward through `y = h / rms(h) ⊙ gain`. Accumulates the gain gradient
/// and returns the input gradient.
fn norm_backward(
    h: &Matrix,
    rms: &[f64],
    gain: &Matrix,
    dy: &Matrix,
    dgain: &mut Matrix,
) -> Matrix {
    let d = h.cols();
    let mut dh = Matrix::zeros(h.rows(), d);
    for t in 0..h.rows() {
        let r = rms[t];
        let n: Vec<f64> = h.row(t).iter().map(|x| x / r).collect();
        let dn: Vec<f64> = (0..d)
            .map(|c| {
                dgain.as_mut_slice()[c] += dy[(t, c)] * n[c];
                dy[(t, c)] * gain[(0, c)]
            })
            .collect();
        let dot: f64 = dn.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (c, o) in dh.row_mut(t).iter_mut().enumerate() {
            *o = (dn[c] - n[c] * dot) / r;
        }
    }
    dh
}

fn attention_backward(model: &Model, lt: &LayerTrace, dout: &Matrix) -> (Matrix, Matrix, Matrix) {
    let cfg = &model.config;
    let len = lt.q.rows();
    let dh = cfg.d_h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(len, cfg.q_dim());
    let mut dk = Matrix::zeros(len, cfg.kv_dim());
    let mut dv = Matrix::zeros(len, cfg.kv_dim());
    for head in 0..cfg.m_h {
        let g = cfg.group_of(head);
        let (hq, hk) = (head * dh..(head + 1) * dh, g * dh..(g + 1) * dh);
        for t in 0..len {
            let p = &lt.probs[head][t];
            let dot = &dout.row(t)[hq.clone()];
            let dp: Vec<f64> = (0..=t)
                .map(|j| {
                    dot.iter()
                        .zip(&lt.v.row(j)[hk.clone()])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..=t {
                for (c, &o) in dot.iter().enumerate() {
                    dv[(j, g * dh + c)] += p[j] * o;
                }
                let ds = p[j] * (dp[j] - mean) * scale;
                for c in 0..dh {
                    dq[(t, head * dh + c)] += ds * lt.k[(j, g * dh + c)];
                    dk[(j, g * dh + c)] += ds * lt.q[(t, head * dh + c)];
                }
            }
        }
    }
    (dq, dk, dv)
}
