//! Pre-norm decoder forward pass with grouped-query attention and no
//! positional encoding.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::compression::{build_factors, RankSpec};
use crate::error::{Error, Result};
use crate::metrics::PplGrid;
use crate::model::{ModelConfig, ModelWeights};
use crate::{Factors, Kind, Matrix, Spectrum};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Low-rank replacements for key/value projections, keyed by (layer, kind).
/// Absent entries use the original dense weight.
#[derive(Debug, Clone, Default)]
pub struct CompressedOverride {
    factors: BTreeMap<(u32, Kind), Factors>,
}

impl CompressedOverride {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, factors: Factors) -> Option<Factors> {
        self.factors
            .insert((factors.layer_index, factors.kind), factors)
    }

    pub fn get(&self, layer: u32, kind: Kind) -> Option<&Factors> {
        self.factors.get(&(layer, kind))
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (&(layer, kind), f) in &self.factors {
            if layer as usize >= cfg.n_layers {
                return Err(Error::invalid(format!(
                    "override for layer {layer}, model has {}",
                    cfg.n_layers
                )));
            }
            if f.input_dim() != cfg.d_e || f.output_dim() != cfg.kv_dim() || f.up.rows() != f.rank {
                return Err(Error::invalid(format!(
                    "layer {layer} {kind} factors are {}x{} · {}x{}, expected {}x{} · {}x{}",
                    f.down.rows(),
                    f.down.cols(),
                    f.up.rows(),
                    f.up.cols(),
                    cfg.d_e,
                    f.rank,
                    f.rank,
                    cfg.kv_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate activations of one layer for one sequence.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the layer.
    pub input: Matrix,
    pub(crate) attn_rms: Vec<f64>,
    /// Normalized attention input `x_t`, the operand of `W^K` and `W^V`.
    pub attn_input: Matrix,
    pub q: Matrix,
    /// `T × m_g·d_h`, groups concatenated in group order.
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, row `t` holds softmax weights over positions `0..=t`.
    pub(crate) probs: Vec<Vec<Vec<f64>>>,
    /// `T × m_h·d_h`, heads concatenated.
    pub attn_out: Matrix,
    pub(crate) mid: Matrix,
    pub(crate) mlp_rms: Vec<f64>,
    pub(crate) mlp_input: Matrix,
    pub(crate) pre_act: Matrix,
    pub(crate) act: Matrix,
}

impl LayerTrace {
    /// The `T × d_h` keys head `head` (0-based) attends against.
    pub fn head_keys(&self, cfg: &ModelConfig, head: usize) -> Matrix {
        let g = cfg.group_of(head);
        Matrix::from_fn(self.k.rows(), cfg.d_h, |t, c| self.k[(t, g * cfg.d_h + c)])
    }

    pub fn head_values(&self, cfg: &ModelConfig, head: usize) -> Matrix {
        let g = cfg.group_of(head);
        Matrix::from_fn(self.v.rows(), cfg.d_h, |t, c| self.v[(t, g * cfg.d_h + c)])
    }

    pub fn head_output(&self, cfg: &ModelConfig, head: usize) -> Matrix {
        Matrix::from_fn(self.attn_out.rows(), cfg.d_h, |t, c| {
            self.attn_out[(t, head * cfg.d_h + c)]
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
    pub(crate) final_input: Matrix,
    pub(crate) final_rms: Vec<f64>,
    pub(crate) final_hidden: Matrix,
    /// `T × vocab`
    pub logits: Matrix,
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            weights: ModelWeights::init(&config)?,
            config,
        })
    }

    /// Logits (`len × vocab`) for a token sequence.
    pub fn forward(&self, tokens: &[u16], over: &CompressedOverride) -> Result<Matrix> {
        Ok(self.forward_traced(tokens, over)?.logits)
    }

    pub fn forward_traced(&self, tokens: &[u16], over: &CompressedOverride) -> Result<Trace> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::invalid("cannot run the model on an empty sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocab of {}",
                cfg.vocab
            )));
        }
        over.validate(cfg)?;

        let w = &self.weights;
        let mut h = Matrix::from_fn(tokens.len(), cfg.d_e, |t, c| {
            w.embedding[(tokens[t] as usize, c)]
        });
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, lw) in w.layers.iter().enumerate() {
            let (attn_input, attn_rms) = rms_norm(&h, &lw.attn_norm);
            let q = attn_input.matmul(&lw.wq)?;
            let project = |kind: Kind, dense: &Matrix| -> Result<Matrix> {
                match over.get(li as u32, kind) {
                    Some(f) => f.apply(&attn_input),
                    None => attn_input.matmul(dense),
                }
            };
            let k = project(Kind::Key, &lw.wk)?;
            let v = project(Kind::Value, &lw.wv)?;
            let (attn_out, probs) = attention(cfg, &q, &k, &v);
            let mid = h.add(&attn_out.matmul(&lw.wo)?)?;
            let (mlp_input, mlp_rms) = rms_norm(&mid, &lw.mlp_norm);
            let pre_act = mlp_input.matmul(&lw.w_in)?;
            let act = pre_act.map(gelu);
            let out = mid.add(&act.matmul(&lw.w_out)?)?;
            layers.push(LayerTrace {
                input: std::mem::replace(&mut h, out),
                attn_rms,
                attn_input,
                q,
                k,
                v,
                probs,
                attn_out,
                mid,
                mlp_rms,
                mlp_input,
                pre_act,
                act,
            });
        }
        let (final_hidden, final_rms) = rms_norm(&h, &w.final_norm);
        let logits = final_hidden.matmul(&w.embedding.transpose())?;
        Ok(Trace {
            layers,
            final_input: h,
            final_rms,
            final_hidden,
            logits,
        })
    }

    /// Summed next-token negative log-likelihood and the number of scored
    /// positions for one sequence.
    pub fn sequence_nll(&self, tokens: &[u16], over: &CompressedOverride) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let logits = self.forward(tokens, over)?;
        let mut nll = 0.0;
        for t in 0..tokens.len() - 1 {
            nll -= log_softmax_at(logits.row(t), tokens[t + 1] as usize);
        }
        Ok((nll, tokens.len() - 1))
    }

    /// `exp` of the mean next-token negative log-likelihood (natural log)
    /// over every position that has a successor within its sequence.
    pub fn perplexity(&self, corpus: &[Vec<u16>], over: &CompressedOverride) -> Result<f64> {
        let parts: Vec<(f64, usize)> = corpus
            .par_iter()
            .map(|seq| self.sequence_nll(seq, over))
            .collect::<Result<_>>()?;
        // Summed in corpus order so the result does not depend on scheduling.
        let (nll, count) = parts
            .iter()
            .fold((0.0, 0), |(a, n), &(b, m)| (a + b, n + m));
        if count == 0 {
            return Err(Error::invalid(
                "perplexity needs at least one sequence of two or more tokens",
            ));
        }
        Ok((nll / count as f64).exp())
    }

    /// Compresses every layer's key projection at one ratio and every value
    /// projection at another.
    pub fn uniform_override(
        &self,
        spectra: &BTreeMap<(u32, Kind), Spectrum>,
        key_ratio: f64,
        value_ratio: f64,
    ) -> Result<CompressedOverride> {
        let mut over = CompressedOverride::new();
        for (li, lw) in self.weights.layers.iter().enumerate() {
            for (kind, w, ratio) in [
                (Kind::Key, &lw.wk, key_ratio),
                (Kind::Value, &lw.wv, value_ratio),
            ] {
                let spec = spectra.get(&(li as u32, kind)).ok_or_else(|| {
                    Error::invalid(format!("missing spectrum for layer {li} {kind}"))
                })?;
                over.insert(build_factors(w, spec, RankSpec::Ratio(ratio))?);
            }
        }
        Ok(over)
    }

    /// Perplexity at every (key ratio, value ratio) pair, with the ratio
    /// applied uniformly across layers.
    pub fn ppl_grid(
        &self,
        corpus: &[Vec<u16>],
        key_ratios: &[f64],
        value_ratios: &[f64],
        spectra: &BTreeMap<(u32, Kind), Spectrum>,
    ) -> Result<PplGrid> {
        // Validate ratio sets before the expensive sweep.
        PplGrid::new(
            key_ratios.to_vec(),
            value_ratios.to_vec(),
            vec![1.0; key_ratios.len() * value_ratios.len()],
        )?;
        let points: Vec<(f64, f64)> = key_ratios
            .iter()
            .flat_map(|&k| value_ratios.iter().map(move |&v| (k, v)))
            .collect();
        let ppl = points
            .par_iter()
            .map(|&(k, v)| {
                let over = self.uniform_override(spectra, k, v)?;
                self.perplexity(corpus, &over)
            })
            .collect::<Result<Vec<_>>>()?;
        PplGrid::new(key_ratios.to_vec(), value_ratios.to_vec(), ppl)
    }
}

/// Row-wise RMS norm with gain; returns the output and each row's RMS.
pub(crate) fn rms_norm(h: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = h.cols();
    let mut out = Matrix::zeros(h.rows(), d);
    let mut rms = Vec::with_capacity(h.rows());
    for t in 0..h.rows() {
        let row = h.row(t);
        let r = (row.iter().map(|x| x * x).sum::<f64>() / d as f64 + NORM_EPS).sqrt();
        for (c, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = row[c] / r * gain[(0, c)];
        }
        rms.push(r);
    }
    (out, rms)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal grouped-query attention. Head `i` reads keys and values of group
/// `i / (m_h / m_g)`.
fn attention(
    cfg: &ModelConfig,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> (Matrix, Vec<Vec<Vec<f64>>>) {
    let len = q.rows();
    let dh = cfg.d_h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(len, cfg.q_dim());
    let mut probs = Vec::with_capacity(cfg.m_h);
    for head in 0..cfg.m_h {
        let g = cfg.group_of(head);
        let mut head_probs = Vec::with_capacity(len);
        for t in 0..len {
            let qt = &q.row(t)[head * dh..(head + 1) * dh];
            let mut p: Vec<f64> = (0..=t)
                .map(|j| {
                    let kj = &k.row(j)[g * dh..(g + 1) * dh];
                    qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in p.iter_mut() {
                *x /= total;
            }
            let o = &mut out.row_mut(t)[head * dh..(head + 1) * dh];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v.row(j)[g * dh..(g + 1) * dh];
                for (oc, &vc) in o.iter_mut().zip(vj) {
                    *oc += pj * vc;
                }
            }
            head_probs.push(p);
        }
        probs.push(head_probs);
    }
    (out, probs)
}

pub(crate) fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}
