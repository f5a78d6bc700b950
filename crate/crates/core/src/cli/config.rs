//! Per-command parameters. Each args struct is both a set of flags and a
//! table of the config file; flags win field by field.

use std::path::{Path, PathBuf};

use clap::Args;
use kvcore::analysis::DEFAULT_RANK_TOL;
use kvcore::model::{MarkovSpec, ModelConfig, TrainConfig};
use kvcore::stream::DEFAULT_BATCH_SIZE;
use kvcore::{Error, Result};
use serde::{Deserialize, Serialize};

/// The config file: one optional table per subcommand.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub gen_synthetic: Option<GenArgs>,
    pub analyze: Option<AnalyzeArgs>,
    pub compress: Option<CompressArgs>,
    pub pplgrid: Option<PplGridArgs>,
    pub ndppl: Option<NdPplArgs>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "missing required setting `{name}` (flag or config file)"
        ))
    })
}

fn positive(v: usize, name: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::InvalidArgument(format!("`{name}` must be positive")));
    }
    Ok(v)
}

fn ratios(list: Vec<f64>, name: &str) -> Result<Vec<f64>> {
    if list.is_empty() {
        return Err(Error::InvalidArgument(format!("`{name}` is empty")));
    }
    if let Some(r) = list
        .iter()
        .find(|r| !(r.is_finite() && **r > 0.0 && **r <= 1.0))
    {
        return Err(Error::InvalidArgument(format!(
            "`{name}` entry {r} outside (0, 1]"
        )));
    }
    Ok(list)
}

/// Grid axes are ascending and duplicate-free.
fn grid_axis(list: Vec<f64>, name: &str) -> Result<Vec<f64>> {
    let mut list = ratios(list, name)?;
    list.sort_by(f64::total_cmp);
    list.dedup();
    Ok(list)
}

fn rank_tol(v: Option<f64>) -> Result<f64> {
    let t = v.unwrap_or(DEFAULT_RANK_TOL);
    if !(t.is_finite() && (0.0..1.0).contains(&t)) {
        return Err(Error::InvalidArgument(format!(
            "rank_tol {t} outside [0, 1)"
        )));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_e: usize,
    pub n_layers: usize,
    pub m_h: usize,
    pub m_g: usize,
    pub d_h: usize,
    pub vocab: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            d_e: c.d_e,
            n_layers: c.n_layers,
            m_h: c.m_h,
            m_g: c.m_g,
            d_h: c.d_h,
            vocab: c.vocab,
            d_ff: c.d_ff,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub order: usize,
    pub branching: usize,
    pub sharpness: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            order: 2,
            branching: 4,
            sharpness: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds the weights, the corpus and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus length in tokens.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Tokens per sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Training steps (0 keeps the random initialization).
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(skip)]
    pub model: Option<ModelSection>,
    #[arg(skip)]
    pub corpus: Option<CorpusSection>,
    #[arg(skip)]
    pub train: Option<TrainSection>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSettings {
    #[serde(skip)]
    pub out: PathBuf,
    pub seed: u64,
    pub tokens: usize,
    pub seq_len: usize,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub train: TrainSection,
}

impl GenSettings {
    pub fn resolve(flags: GenArgs, file: Option<GenArgs>) -> Result<Self> {
        let file = file.unwrap_or_default();
        let mut train = file.train.unwrap_or_default();
        if let Some(s) = flags.train_steps.or(file.train_steps) {
            train.steps = s;
        }
        let s = Self {
            out: required(flags.out.or(file.out), "out")?,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            tokens: positive(flags.tokens.or(file.tokens).unwrap_or(16_384), "tokens")?,
            seq_len: positive(flags.seq_len.or(file.seq_len).unwrap_or(64), "seq_len")?,
            model: file.model.unwrap_or_default(),
            corpus: file.corpus.unwrap_or_default(),
            train,
        };
        s.model_config().validate()?;
        s.markov().validate()?;
        s.train_config().validate()?;
        if s.seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
        }
        Ok(s)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = self.model;
        ModelConfig {
            d_e: m.d_e,
            n_layers: m.n_layers,
            m_h: m.m_h,
            m_g: m.m_g,
            d_h: m.d_h,
            vocab: m.vocab,
            d_ff: m.d_ff,
            seed: self.seed,
        }
    }

    pub fn markov(&self) -> MarkovSpec {
        MarkovSpec {
            vocab: self.model.vocab,
            order: self.corpus.order,
            branching: self.corpus.branching,
            sharpness: self.corpus.sharpness,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: self.seed.wrapping_add(2),
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeArgs {
    /// Directory of `.kvcr` streams.
    #[arg(long)]
    pub streams: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rows per ingested batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Relative tolerance for numerical rank.
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// Keep only the leading singular values in `ner.json`.
    #[arg(long)]
    pub top_sigma: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSettings {
    #[serde(skip)]
    pub streams: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub batch_size: usize,
    pub rank_tol: f64,
    pub top_sigma: Option<usize>,
}

impl AnalyzeSettings {
    pub fn resolve(flags: AnalyzeArgs, file: Option<AnalyzeArgs>) -> Result<Self> {
        let file = file.unwrap_or_default();
        Ok(Self {
            streams: required(flags.streams.or(file.streams), "streams")?,
            out: required(flags.out.or(file.out), "out")?,
            batch_size: positive(
                flags
                    .batch_size
                    .or(file.batch_size)
                    .unwrap_or(DEFAULT_BATCH_SIZE),
                "batch_size",
            )?,
            rank_tol: rank_tol(flags.rank_tol.or(file.rank_tol))?,
            top_sigma: flags.top_sigma.or(file.top_sigma),
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressArgs {
    /// Model checkpoint supplying the key/value weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `.kvcs` spectra.
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    /// Directory of `.kvcr` streams used to measure the error.
    #[arg(long)]
    pub streams: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retained fractions of each projection's output width.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Explicit retained ranks, in addition to `ratios`.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressSettings {
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[serde(skip)]
    pub spectra: PathBuf,
    #[serde(skip)]
    pub streams: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub ratios: Vec<f64>,
    pub ranks: Vec<usize>,
    pub batch_size: usize,
}

impl CompressSettings {
    pub fn resolve(flags: CompressArgs, file: Option<CompressArgs>) -> Result<Self> {
        let file = file.unwrap_or_default();
        let ratio_list = flags.ratios.or(file.ratios).unwrap_or_default();
        let ranks = flags.ranks.or(file.ranks).unwrap_or_default();
        if ratio_list.is_empty() && ranks.is_empty() {
            return Err(Error::InvalidArgument(
                "ratio list is empty: give `ratios` or `ranks`".into(),
            ));
        }
        if ranks.contains(&0) {
            return Err(Error::InvalidArgument(
                "`ranks` entries must be positive".into(),
            ));
        }
        Ok(Self {
            checkpoint: required(flags.checkpoint.or(file.checkpoint), "checkpoint")?,
            spectra: required(flags.spectra.or(file.spectra), "spectra")?,
            streams: required(flags.streams.or(file.streams), "streams")?,
            out: required(flags.out.or(file.out), "out")?,
            ratios: if ratio_list.is_empty() {
                ratio_list
            } else {
                ratios(ratio_list, "ratios")?
            },
            ranks,
            batch_size: positive(
                flags
                    .batch_size
                    .or(file.batch_size)
                    .unwrap_or(DEFAULT_BATCH_SIZE),
                "batch_size",
            )?,
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplGridArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Raw `u16` corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub key_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub value_ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Evaluate only the first N sequences.
    #[arg(long)]
    pub max_sequences: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PplGridSettings {
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[serde(skip)]
    pub corpus: PathBuf,
    #[serde(skip)]
    pub spectra: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub key_ratios: Vec<f64>,
    pub value_ratios: Vec<f64>,
    pub seq_len: usize,
    pub max_sequences: Option<usize>,
}

const DEFAULT_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

impl PplGridSettings {
    pub fn resolve(flags: PplGridArgs, file: Option<PplGridArgs>) -> Result<Self> {
        let file = file.unwrap_or_default();
        let seq_len = positive(flags.seq_len.or(file.seq_len).unwrap_or(64), "seq_len")?;
        if seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
        }
        Ok(Self {
            checkpoint: required(flags.checkpoint.or(file.checkpoint), "checkpoint")?,
            corpus: required(flags.corpus.or(file.corpus), "corpus")?,
            spectra: required(flags.spectra.or(file.spectra), "spectra")?,
            out: required(flags.out.or(file.out), "out")?,
            key_ratios: grid_axis(
                flags
                    .key_ratios
                    .or(file.key_ratios)
                    .unwrap_or(DEFAULT_GRID.to_vec()),
                "key_ratios",
            )?,
            value_ratios: grid_axis(
                flags
                    .value_ratios
                    .or(file.value_ratios)
                    .unwrap_or(DEFAULT_GRID.to_vec()),
                "value_ratios",
            )?,
            seq_len,
            max_sequences: flags
                .max_sequences
                .or(file.max_sequences)
                .map(|n| positive(n, "max_sequences"))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdPplArgs {
    /// Grid CSV with header `k,v,ppl`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NdPplSettings {
    #[serde(skip)]
    pub grid: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
}

impl NdPplSettings {
    pub fn resolve(flags: NdPplArgs, file: Option<NdPplArgs>) -> Result<Self> {
        let file = file.unwrap_or_default();
        Ok(Self {
            grid: required(flags.grid.or(file.grid), "grid")?,
            out: required(flags.out.or(file.out), "out")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: ConfigFile = toml::from_str(
            "[analyze]\nstreams = \"s\"\nout = \"o\"\nbatch_size = 10\n[gen-synthetic]\nseed = 3\n[gen-synthetic.model]\nd_e = 32\n",
        )
        .unwrap();
        let flags = AnalyzeArgs {
            batch_size: Some(99),
            ..Default::default()
        };
        let s = AnalyzeSettings::resolve(flags, file.analyze).unwrap();
        assert_eq!(s.batch_size, 99);
        assert_eq!(s.streams, PathBuf::from("s"));
        assert_eq!(s.rank_tol, DEFAULT_RANK_TOL);
        let g = GenSettings::resolve(
            GenArgs {
                out: Some("x".into()),
                ..Default::default()
            },
            file.gen_synthetic,
        )
        .unwrap();
        assert_eq!((g.seed, g.model.d_e, g.model.n_layers), (3, 32, 2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[analyze]\nbatchsize = 1\n").is_err());
        assert!(toml::from_str::<ConfigFile>("[other]\n").is_err());
        assert!(toml::from_str::<ConfigFile>("[gen-synthetic.model]\nheads = 2\n").is_err());
    }

    #[test]
    fn validation_happens_before_io() {
        let empty = CompressArgs {
            checkpoint: Some("c".into()),
            spectra: Some("s".into()),
            streams: Some("t".into()),
            out: Some("o".into()),
            ..Default::default()
        };
        assert!(CompressSettings::resolve(empty.clone(), None).is_err());
        let bad = CompressArgs {
            ratios: Some(vec![1.5]),
            ..empty
        };
        assert!(CompressSettings::resolve(bad, None).is_err());
        assert!(AnalyzeSettings::resolve(AnalyzeArgs::default(), None).is_err());
    }
}
