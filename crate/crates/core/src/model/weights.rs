use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{write_atomic, ByteReader};
use crate::error::{Error, Result, ResultExt};
use crate::model::ModelConfig;
use crate::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KVCM";
const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Gain of the RMS norm in front of attention (`1 × d_e`).
    pub attn_norm: Matrix,
    /// `d_e × m_h·d_h`
    pub wq: Matrix,
    /// `d_e × m_g·d_h`
    pub wk: Matrix,
    /// `d_e × m_g·d_h`
    pub wv: Matrix,
    /// `m_h·d_h × d_e`
    pub wo: Matrix,
    pub mlp_norm: Matrix,
    /// `d_e × d_ff`
    pub w_in: Matrix,
    /// `d_ff × d_e`
    pub w_out: Matrix,
}

/// All parameters. The output head is tied to `embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab × d_e`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
}

impl ModelWeights {
    /// Gaussian(0, 0.02) matrices and unit norm gains, seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let embedding = gauss(cfg.vocab, cfg.d_e);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(cfg.d_e),
                wq: gauss(cfg.d_e, cfg.q_dim()),
                wk: gauss(cfg.d_e, cfg.kv_dim()),
                wv: gauss(cfg.d_e, cfg.kv_dim()),
                wo: gauss(cfg.q_dim(), cfg.d_e),
                mlp_norm: ones(cfg.d_e),
                w_in: gauss(cfg.d_e, cfg.d_ff),
                w_out: gauss(cfg.d_ff, cfg.d_e),
            })
            .collect();
        let mut w = Self {
            embedding,
            layers,
            final_norm: ones(cfg.d_e),
        };
        w.round_to_f32();
        Ok(w)
    }

    /// A model whose logits are identically zero: the embedding (and so the
    /// tied output head) is all zeros.
    pub fn uniform_logits(cfg: &ModelConfig) -> Result<Self> {
        let mut w = Self::init(cfg)?;
        w.embedding = Matrix::zeros(cfg.vocab, cfg.d_e);
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_in: z(&l.w_in),
                    w_out: z(&l.w_out),
                })
                .collect(),
            final_norm: z(&self.final_norm),
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_in", &l.w_in),
                ("w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Rounds every parameter to the nearest `f32`, so the in-memory model is
    /// exactly what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for m in self.tensors_mut() {
            for x in m.as_mut_slice() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros_for(cfg);
        let got = self.named();
        let want = expected.named();
        if got.len() != want.len() {
            return Err(Error::invalid(format!(
                "model has {} tensors, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, m), (_, e)) in got.iter().zip(&want) {
            if m.shape() != e.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name} is {}x{}, config implies {}x{}",
                    m.rows(),
                    m.cols(),
                    e.rows(),
                    e.cols()
                )));
            }
        }
        Ok(())
    }

    fn zeros_for(cfg: &ModelConfig) -> Self {
        let z = Matrix::zeros;
        Self {
            embedding: z(cfg.vocab, cfg.d_e),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(1, cfg.d_e),
                    wq: z(cfg.d_e, cfg.q_dim()),
                    wk: z(cfg.d_e, cfg.kv_dim()),
                    wv: z(cfg.d_e, cfg.kv_dim()),
                    wo: z(cfg.q_dim(), cfg.d_e),
                    mlp_norm: z(1, cfg.d_e),
                    w_in: z(cfg.d_e, cfg.d_ff),
                    w_out: z(cfg.d_ff, cfg.d_e),
                })
                .collect(),
            final_norm: z(1, cfg.d_e),
        }
    }
}

fn ones(n: usize) -> Matrix {
    Matrix::from_fn(1, n, |_, _| 1.0)
}

/// Writes a `KVCM` checkpoint: magic, version u32, the config (seven u32
/// dimensions then the u64 seed), then each tensor as name length u16, name
/// bytes, rank u8, dims u32×rank and an f32 payload. Norm gains are rank 1.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    weights: &ModelWeights,
) -> Result<()> {
    let path = path.as_ref();
    weights.check_shapes(cfg).in_file(path)?;
    let mut b = Vec::new();
    b.extend_from_slice(&CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [
        cfg.d_e,
        cfg.n_layers,
        cfg.m_h,
        cfg.m_g,
        cfg.d_h,
        cfg.vocab,
        cfg.d_ff,
    ] {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&cfg.seed.to_le_bytes());
    for (name, m) in weights.named() {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        let dims: Vec<usize> = if m.rows() == 1 && name.ends_with("norm") {
            vec![m.cols()]
        } else {
            vec![m.rows(), m.cols()]
        };
        b.push(dims.len() as u8);
        for d in dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in m.as_slice() {
            b.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    write_atomic(path, &b)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let bytes = fs::read(path).in_file(path)?;
    decode_checkpoint(&bytes).in_file(path)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = ByteReader::new(bytes);
    r.magic(&CHECKPOINT_MAGIC)?;
    let at = r.pos as u64;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let cfg = ModelConfig {
        d_e: dims[0],
        n_layers: dims[1],
        m_h: dims[2],
        m_g: dims[3],
        d_h: dims[4],
        vocab: dims[5],
        d_ff: dims[6],
        seed: r.u64()?,
    };
    cfg.validate()
        .map_err(|e| Error::format(8, e.to_string()))?;

    let mut tensors: BTreeMap<String, (u64, Matrix)> = BTreeMap::new();
    while !r.is_empty() {
        let start = r.pos as u64;
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| Error::format(start + 2, "tensor name is not UTF-8"))?;
        let rank = r.u8()?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let (rows, cols) = match shape[..] {
            [n] => (1, n),
            [m, n] => (m, n),
            _ => {
                return Err(Error::format(
                    start,
                    format!("tensor {name} has unsupported rank {rank}"),
                ))
            }
        };
        let data = r.f32s(rows * cols)?.into_iter().map(f64::from).collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        if tensors.insert(name.clone(), (start, m)).is_some() {
            return Err(Error::format(start, format!("duplicate tensor {name}")));
        }
    }

    let mut take = |name: String| -> Result<Matrix> {
        tensors
            .remove(&name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing tensor {name}")))
    };
    let embedding = take("embedding".into())?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut t = |n: &str| take(format!("layers.{i}.{n}"));
        layers.push(LayerWeights {
            attn_norm: t("attn_norm")?,
            wq: t("wq")?,
            wk: t("wk")?,
            wv: t("wv")?,
            wo: t("wo")?,
            mlp_norm: t("mlp_norm")?,
            w_in: t("w_in")?,
            w_out: t("w_out")?,
        });
    }
    let final_norm = take("final_norm".into())?;
    if let Some((name, (offset, _))) = tensors.into_iter().next() {
        return Err(Error::format(offset, format!("unexpected tensor {name}")));
    }
    let weights = ModelWeights {
        embedding,
        layers,
        final_norm,
    };
    weights
        .check_shapes(&cfg)
        .map_err(|e| Error::format(0, e.to_string()))?;
    Ok((cfg, weights))
}
