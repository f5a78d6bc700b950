//! Compressibility and degradation scores.
//!
//! * Effective rank: `exp(H(p))` with `p_i = σ_i / Σσ_j` over the numerically
//!   non-zero singular values and natural-log entropy `H`.
//! * NER: effective rank divided by the numerical rank, in `[1/r, 1]`.
//! * ND-PPL: perplexity differences between every pair of retain ratios,
//!   normalized by the less-compressed perplexity and averaged.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::SpectralResult;
use crate::error::{Error, Result, ResultExt};
use crate::scalar::Real;
use crate::Kind;

/// Effective rank of the top `rank_r` singular values.
pub fn effective_rank<T: Real>(sigma: &[T], rank_r: usize) -> Result<T> {
    if rank_r == 0 || rank_r > sigma.len() {
        return Err(Error::invalid(format!(
            "rank {rank_r} outside 1..={}",
            sigma.len()
        )));
    }
    let top = &sigma[..rank_r];
    if top.iter().any(|&s| s < T::zero() || !s.is_finite()) {
        return Err(Error::invalid(
            "singular values must be finite and non-negative",
        ));
    }
    let total: T = top.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::invalid(
            "effective rank of a zero spectrum is undefined",
        ));
    }
    let entropy: T = top
        .iter()
        .filter(|&&s| s > T::zero())
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    // 1 ≤ erank ≤ r holds exactly; clamp away rounding at the ends.
    Ok(entropy.exp().max(T::one()).min(T::of(rank_r as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerReport {
    #[serde(rename = "layer")]
    pub layer_index: u32,
    pub kind: Kind,
    pub erank: f64,
    #[serde(rename = "rank")]
    pub rank_r: usize,
    pub ner: f64,
    pub sigma: Vec<f64>,
}

impl NerReport {
    /// Keeps only the `n` largest singular values in the report.
    pub fn truncate_sigma(mut self, n: usize) -> Self {
        self.sigma.truncate(n);
        self
    }
}

pub fn ner<T: Real>(spectrum: &SpectralResult<T>) -> Result<NerReport> {
    let r = spectrum.numerical_rank;
    if r == 0 {
        return Err(Error::invalid(format!(
            "layer {} {}: zero spectrum has no normalized effective rank",
            spectrum.layer_index, spectrum.kind
        )));
    }
    let erank = effective_rank(&spectrum.sigma, r)?.as_f64();
    Ok(NerReport {
        layer_index: spectrum.layer_index,
        kind: spectrum.kind,
        erank,
        rank_r: r,
        ner: erank / r as f64,
        sigma: spectrum.sigma.iter().map(|s| s.as_f64()).collect(),
    })
}

/// Unweighted mean NER over the reports of one kind, or `None` if there are none.
pub fn mean_ner(reports: &[NerReport], kind: Kind) -> Option<f64> {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| r.ner)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Perplexity measured over a key-ratio × value-ratio grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PplGrid {
    key_ratios: Vec<f64>,
    value_ratios: Vec<f64>,
    /// Row-major: `ppl[i * |V| + j] = PPL(key_ratios[i], value_ratios[j])`.
    ppl: Vec<f64>,
}

impl PplGrid {
    pub fn new(key_ratios: Vec<f64>, value_ratios: Vec<f64>, ppl: Vec<f64>) -> Result<Self> {
        check_ratios("key", &key_ratios)?;
        check_ratios("value", &value_ratios)?;
        if ppl.len() != key_ratios.len() * value_ratios.len() {
            return Err(Error::invalid(format!(
                "grid needs {}x{} perplexities, got {}",
                key_ratios.len(),
                value_ratios.len(),
                ppl.len()
            )));
        }
        if let Some(i) = ppl.iter().position(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(Error::invalid(format!(
                "perplexity at (k={}, v={}) is {}, expected positive and finite",
                key_ratios[i / value_ratios.len()],
                value_ratios[i % value_ratios.len()],
                ppl[i]
            )));
        }
        Ok(Self {
            key_ratios,
            value_ratios,
            ppl,
        })
    }

    pub fn key_ratios(&self) -> &[f64] {
        &self.key_ratios
    }

    pub fn value_ratios(&self) -> &[f64] {
        &self.value_ratios
    }

    /// PPL at key index `i`, value index `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.ppl[i * self.value_ratios.len() + j]
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.key_ratios.clone(),
            self.value_ratios.clone(),
            self.ppl.iter().map(|p| p * c).collect(),
        )
    }

    /// Parses the `k,v,ppl` CSV form. Every (k, v) combination of the ratios
    /// that appear must be present exactly once.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["k", "v", "ppl"] {
            return Err(Error::format(
                0,
                format!(
                    "expected header `k,v,ppl`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut points: BTreeMap<(u64, u64), f64> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let field = |i: usize| -> Result<f64> {
                let raw = rec.get(i).ok_or_else(|| {
                    Error::format(offset, format!("row {} has too few fields", line + 1))
                })?;
                raw.parse::<f64>().map_err(|_| {
                    Error::format(
                        offset,
                        format!("row {}: cannot parse {raw:?} as a number", line + 1),
                    )
                })
            };
            let (k, v, p) = (field(0)?, field(1)?, field(2)?);
            if points.insert((k.to_bits(), v.to_bits()), p).is_some() {
                return Err(Error::format(
                    offset,
                    format!("duplicate grid point k={k}, v={v}"),
                ));
            }
            keys.push(k);
            values.push(v);
        }
        let sort_unique = |mut xs: Vec<f64>| {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            xs.dedup();
            xs
        };
        let keys = sort_unique(keys);
        let values = sort_unique(values);
        let mut missing = Vec::new();
        let mut ppl = Vec::with_capacity(keys.len() * values.len());
        for &k in &keys {
            for &v in &values {
                match points.get(&(k.to_bits(), v.to_bits())) {
                    Some(&p) => ppl.push(p),
                    None => missing.push(format!("(k={k}, v={v})")),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::format(
                0,
                format!(
                    "grid is not a full cartesian product; missing {}",
                    missing.join(", ")
                ),
            ));
        }
        Self::new(keys, values, ppl)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).in_file(path)?;
        Self::read_csv(file).in_file(path)
    }

    /// Writes rows in ascending key-ratio then value-ratio order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "v", "ppl"])?;
        for (i, k) in self.key_ratios.iter().enumerate() {
            for (j, v) in self.value_ratios.iter().enumerate() {
                w.write_record([k.to_string(), v.to_string(), self.get(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_ratios(side: &str, ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::invalid(format!("{side} ratio set is empty")));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::invalid(format!("{side} ratio {r} outside (0, 1]")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "{side} ratios must be strictly increasing"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NdPplReport {
    pub nd_ppl_key: f64,
    pub nd_ppl_value: f64,
    pub key_pairs: usize,
    pub value_pairs: usize,
}

/// Key-side ND-PPL: for each value ratio, the mean over key pairs
/// `k_i > k_j` of `(PPL(k_j, v) − PPL(k_i, v)) / PPL(k_i, v)`, then the mean
/// over value ratios.
pub fn nd_ppl_key(grid: &PplGrid) -> Result<f64> {
    side_score(
        grid.key_ratios.len(),
        grid.value_ratios.len(),
        "key",
        |more, less, fixed| (grid.get(more, fixed), grid.get(less, fixed)),
    )
}

/// Value-side ND-PPL, with the roles of the two ratio sets swapped.
pub fn nd_ppl_value(grid: &PplGrid) -> Result<f64> {
    side_score(
        grid.value_ratios.len(),
        grid.key_ratios.len(),
        "value",
        |more, less, fixed| (grid.get(fixed, more), grid.get(fixed, less)),
    )
}

pub fn nd_ppl(grid: &PplGrid) -> Result<NdPplReport> {
    let pairs = |n: usize| n * n.saturating_sub(1) / 2;
    Ok(NdPplReport {
        nd_ppl_key: nd_ppl_key(grid)?,
        nd_ppl_value: nd_ppl_value(grid)?,
        key_pairs: pairs(grid.key_ratios.len()),
        value_pairs: pairs(grid.value_ratios.len()),
    })
}

/// `lookup(more, less, fixed)` returns (PPL at the larger ratio, PPL at the
/// smaller ratio) along the varied side.
fn side_score(
    n_varied: usize,
    n_fixed: usize,
    side: &str,
    lookup: impl Fn(usize, usize, usize) -> (f64, f64),
) -> Result<f64> {
    if n_varied < 2 {
        return Err(Error::invalid(format!(
            "{side}-side ND-PPL needs at least two {side} ratios, got {n_varied}"
        )));
    }
    let n_pairs = (n_varied * (n_varied - 1) / 2) as f64;
    let mut outer = 0.0;
    for fixed in 0..n_fixed {
        let mut inner = 0.0;
        for more in 1..n_varied {
            for less in 0..more {
                let (base, compressed) = lookup(more, less, fixed);
                inner += (compressed - base) / base;
            }
        }
        outer += inner / n_pairs;
    }
    Ok(outer / n_fixed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn spectrum(sigma: &[f64]) -> SpectralResult<f64> {
        SpectralResult {
            layer_index: 0,
            kind: Kind::Key,
            sigma: sigma.to_vec(),
            v: DenseMatrix::identity(sigma.len()),
            tokens_seen: 1,
            numerical_rank: crate::analysis::numerical_rank(sigma, 1e-10),
            rank_tol: 1e-10,
        }
    }

    #[test]
    fn uniform_spectrum_has_full_effective_rank() {
        for r in 1..20 {
            let e = effective_rank(&vec![2.5; r], r).unwrap();
            assert!((e - r as f64).abs() <= 1e-12 * r as f64);
        }
    }

    #[test]
    fn rank_one() {
        assert_eq!(effective_rank(&[5.0, 0.0, 0.0], 1).unwrap(), 1.0);
        let rep = ner(&spectrum(&[5.0, 0.0, 0.0])).unwrap();
        assert_eq!((rep.rank_r, rep.ner), (1, 1.0));
    }

    #[test]
    fn two_value_oracle() {
        // p = (0.75, 0.25): exp(0.75 ln(4/3) + 0.25 ln 4)
        let want = (0.75 * (4.0f64 / 3.0).ln() + 0.25 * 4.0f64.ln()).exp();
        let got = effective_rank(&[3.0, 1.0], 2).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 1.754765).abs() < 1e-6);
    }

    #[test]
    fn zero_terms_contribute_nothing() {
        let a = effective_rank(&[3.0, 1.0, 0.0], 3).unwrap();
        let b = effective_rank(&[3.0, 1.0], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_errors() {
        assert!(effective_rank(&[0.0, 0.0], 2).is_err());
        assert!(effective_rank(&[1.0], 0).is_err());
        assert!(effective_rank(&[1.0], 2).is_err());
        assert!(ner(&spectrum(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn dominant_value_approaches_lower_bound() {
        let r = 8;
        let mut s = vec![1e-6; r];
        s[0] = 1.0;
        let rep = ner(&spectrum(&s)).unwrap();
        assert_eq!(rep.rank_r, r);
        assert!(rep.ner < 1.0 / r as f64 + 1e-3);
        assert!(rep.ner >= 1.0 / r as f64);
    }

    #[test]
    fn steeper_power_law_is_more_compressible() {
        let steep: Vec<f64> = (1..=32).map(|i| (i as f64).powf(-2.0)).collect();
        let flat: Vec<f64> = (1..=32).map(|i| (i as f64).powf(-0.5)).collect();
        assert!(ner(&spectrum(&steep)).unwrap().ner < ner(&spectrum(&flat)).unwrap().ner);
    }

    fn hand_grid() -> PplGrid {
        PplGrid::new(vec![0.5, 1.0], vec![0.5, 1.0], vec![12.0, 12.0, 10.0, 10.0]).unwrap()
    }

    #[test]
    fn hand_evaluated_nd_ppl() {
        let rep = nd_ppl(&hand_grid()).unwrap();
        assert!((rep.nd_ppl_key - 0.2).abs() < 1e-15);
        assert_eq!(rep.nd_ppl_value, 0.0);
        assert_eq!((rep.key_pairs, rep.value_pairs), (1, 1));
    }

    #[test]
    fn constant_grid_scores_zero() {
        let g = PplGrid::new(vec![0.25, 0.5, 1.0], vec![0.5, 1.0], vec![7.0; 6]).unwrap();
        let rep = nd_ppl(&g).unwrap();
        assert_eq!((rep.nd_ppl_key, rep.nd_ppl_value), (0.0, 0.0));
        assert_eq!(rep.key_pairs, 3);
    }

    #[test]
    fn sign_is_preserved() {
        let g = PplGrid::new(vec![0.5, 1.0], vec![0.5, 1.0], vec![8.0, 8.0, 10.0, 10.0]).unwrap();
        assert!((nd_ppl_key(&g).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn value_side_mirrors_key_side() {
        let g = PplGrid::new(
            vec![0.5, 1.0],
            vec![0.25, 0.5, 1.0],
            vec![9.0, 8.0, 7.0, 6.0, 5.5, 5.0],
        )
        .unwrap();
        let t = PplGrid::new(
            vec![0.25, 0.5, 1.0],
            vec![0.5, 1.0],
            vec![9.0, 6.0, 8.0, 5.5, 7.0, 5.0],
        )
        .unwrap();
        assert_eq!(nd_ppl_value(&g).unwrap(), nd_ppl_key(&t).unwrap());
    }

    #[test]
    fn degenerate_sides_error_independently() {
        let g = PplGrid::new(vec![1.0], vec![0.5, 1.0], vec![3.0, 2.0]).unwrap();
        assert!(nd_ppl_key(&g).is_err());
        assert!(nd_ppl_value(&g).is_ok());
        assert!(nd_ppl(&g).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(PplGrid::new(vec![1.0, 0.5], vec![1.0], vec![1.0, 1.0]).is_err());
        assert!(PplGrid::new(vec![0.0], vec![1.0], vec![1.0]).is_err());
        assert!(PplGrid::new(vec![1.0], vec![1.0], vec![-1.0]).is_err());
        assert!(PplGrid::new(vec![1.0], vec![1.0], vec![f64::NAN]).is_err());
        assert!(PplGrid::new(vec![1.0], vec![1.0], vec![]).is_err());
    }

    #[test]
    fn csv_round_trip_and_missing_points() {
        let g = hand_grid();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,v,ppl\n"));
        assert_eq!(text.lines().count(), 5);
        assert_eq!(PplGrid::read_csv(&buf[..]).unwrap(), g);

        let err = PplGrid::read_csv("k,v,ppl\n0.5,0.5,1\n1,1,1\n".as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("(k=0.5, v=1)") && msg.contains("(k=1, v=0.5)"),
            "{msg}"
        );
        assert!(PplGrid::read_csv("a,b,c\n".as_bytes()).is_err());
        assert!(PplGrid::read_csv("k,v,ppl\n1,1,1\n1,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn ner_json_shape() {
        let rep = ner(&spectrum(&[3.0, 1.0])).unwrap().truncate_sigma(1);
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["layer", "kind", "erank", "rank", "ner", "sigma"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["kind"], "key");
        assert_eq!(json["sigma"].as_array().unwrap().len(), 1);
    }
}
