use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use kvcore::analysis::{analyze_stream, spectrum_file_name};
use kvcore::compression::{
    build_factors, factor_file_name, predicted_error, CompressionReport, ErrorMeter, Norm, RankSpec,
};
use kvcore::metrics::{mean_ner, nd_ppl, ner, NdPplReport, NerReport, PplGrid};
use kvcore::model::{
    dump_activations, load_checkpoint, read_corpus, save_checkpoint, split_sequences, train,
    write_corpus, CompressedOverride, Model,
};
use kvcore::stream::{batch_iter, read_stream, stream_file_name};
use kvcore::{Error, Kind, Result, Spectrum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{
    AnalyzeSettings, CompressSettings, GenSettings, NdPplSettings, PplGridSettings,
};
use super::manifest::Manifest;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::from(e).in_file(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(io_err(path))
}

/// Files in `dir` with the given extension, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        let e = io::Error::new(io::ErrorKind::NotFound, format!("no .{ext} files"));
        return Err(Error::from(e).in_file(dir));
    }
    Ok(out)
}

fn load_spectra(dir: &Path, manifest: &mut Manifest) -> Result<BTreeMap<(u32, Kind), Spectrum>> {
    let mut map = BTreeMap::new();
    for path in files_with_ext(dir, "kvcs")? {
        let s = Spectrum::load(&path)?;
        manifest.input(&path)?;
        let key = (s.layer_index, s.kind);
        if map.insert(key, s).is_some() {
            let e = Error::Format {
                offset: 0,
                message: format!("second spectrum for layer {} {}", key.0, key.1),
            };
            return Err(e.in_file(path));
        }
    }
    Ok(map)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<Model> {
    let (cfg, weights) = load_checkpoint(path)?;
    manifest.input(path)?;
    Model::new(cfg, weights).map_err(|e| e.in_file(path))
}

pub fn gen_synthetic(s: &GenSettings) -> Result<String> {
    let mut manifest = Manifest::new("gen-synthetic", s)?;
    let streams_dir = s.out.join("streams");
    create_dir(&streams_dir)?;

    let tokens = s.markov().generate(s.tokens)?;
    let corpus_path = s.out.join("corpus.u16");
    write_corpus(&corpus_path, &tokens)?;
    let sequences = split_sequences(&tokens, s.seq_len)?;
    info!(
        "generated {} tokens in {} sequences",
        tokens.len(),
        sequences.len()
    );

    let mut model = Model::init(s.model_config())?;
    if s.train.steps > 0 {
        let log = train(&mut model, &sequences, &s.train_config())?;
        info!(
            "trained {} steps, loss {:.4} -> {:.4}",
            s.train.steps,
            log.losses[0],
            log.losses[log.losses.len() - 1]
        );
    }
    let model_path = s.out.join("model.kvcm");
    save_checkpoint(&model_path, &model.config, &model.weights)?;

    let streams = dump_activations(&model, &sequences, &streams_dir)?;
    manifest.output(&s.out, &corpus_path)?;
    manifest.output(&s.out, &model_path)?;
    for p in &streams {
        manifest.output(&s.out, p)?;
    }
    manifest.finish(&s.out)
}

#[derive(Serialize)]
struct NerSummary {
    unweighted_mean_ner_key: Option<f64>,
    unweighted_mean_ner_value: Option<f64>,
    reports: Vec<NerReport>,
}

#[derive(Serialize)]
struct NerRow {
    layer: u32,
    kind: Kind,
    ner: f64,
    erank: f64,
    rank: usize,
}

pub fn analyze(s: &AnalyzeSettings) -> Result<String> {
    let mut manifest = Manifest::new("analyze", s)?;
    let inputs = files_with_ext(&s.streams, "kvcr")?;
    create_dir(&s.out)?;
    // One worker per stream; each holds only its own d×d accumulator.
    let spectra: Vec<Spectrum> = inputs
        .par_iter()
        .map(|p| {
            let spec =
                analyze_stream::<f64>(p, s.batch_size, s.rank_tol).map_err(|e| e.in_file(p))?;
            info!(
                "{}: {} tokens, numerical rank {}/{}",
                p.display(),
                spec.tokens_seen,
                spec.numerical_rank,
                spec.dim()
            );
            Ok(spec)
        })
        .collect::<Result<_>>()?;
    for p in &inputs {
        manifest.input(p)?;
    }

    let mut seen = BTreeMap::new();
    for (spec, p) in spectra.iter().zip(&inputs) {
        if let Some(prev) = seen.insert((spec.layer_index, spec.kind), p) {
            return Err(Error::InvalidArgument(format!(
                "{} and {} both hold layer {} {}",
                prev.display(),
                p.display(),
                spec.layer_index,
                spec.kind
            )));
        }
    }

    let mut order: Vec<usize> = (0..spectra.len()).collect();
    order.sort_by_key(|&i| (spectra[i].layer_index, spectra[i].kind));
    let mut reports = Vec::with_capacity(spectra.len());
    for &i in &order {
        let spec = &spectra[i];
        let path = s.out.join(spectrum_file_name(spec.layer_index, spec.kind));
        spec.save(&path)?;
        manifest.output(&s.out, &path)?;
        reports.push(ner(spec)?);
    }

    let csv_path = s.out.join("ner.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::from(e).in_file(&csv_path))?;
    for r in &reports {
        w.serialize(NerRow {
            layer: r.layer_index,
            kind: r.kind,
            ner: r.ner,
            erank: r.erank,
            rank: r.rank_r,
        })?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    drop(w);

    let summary = NerSummary {
        unweighted_mean_ner_key: mean_ner(&reports, Kind::Key),
        unweighted_mean_ner_value: mean_ner(&reports, Kind::Value),
        reports: reports
            .into_iter()
            .map(|r| match s.top_sigma {
                Some(n) => r.truncate_sigma(n),
                None => r,
            })
            .collect(),
    };
    let json_path = s.out.join("ner.json");
    write_json(&json_path, &summary)?;
    manifest.output(&s.out, &json_path)?;
    manifest.output(&s.out, &csv_path)?;
    manifest.finish(&s.out)
}

#[derive(Serialize)]
struct CompressionEntry {
    layer: u32,
    kind: Kind,
    rank: usize,
    retain_ratio: f64,
    file: String,
    predicted_frobenius_error: f64,
    predicted_spectral_error: f64,
    measured: CompressionReport,
}

#[derive(Serialize)]
struct CompressionCsvRow {
    layer: u32,
    kind: Kind,
    rank: usize,
    retain_ratio: f64,
    predicted_frobenius_error: f64,
    measured_frobenius_error: f64,
    predicted_spectral_error: f64,
    measured_spectral_error: f64,
    relative_error: f64,
    retained_energy: f64,
}

pub fn compress(s: &CompressSettings) -> Result<String> {
    let mut manifest = Manifest::new("compress", s)?;
    let model = load_model(&s.checkpoint, &mut manifest)?;
    let spectra = load_spectra(&s.spectra, &mut manifest)?;
    create_dir(&s.out)?;

    let mut entries = Vec::new();
    for (&(layer, kind), spec) in &spectra {
        let lw = model.weights.layers.get(layer as usize).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "spectrum for layer {layer}, checkpoint has {}",
                model.config.n_layers
            ))
        })?;
        let w = match kind {
            Kind::Key => &lw.wk,
            Kind::Value => &lw.wv,
        };
        let dim = spec.dim();
        let mut ranks = s
            .ratios
            .iter()
            .map(|&r| RankSpec::Ratio(r).resolve(dim))
            .chain(s.ranks.iter().map(|&k| RankSpec::Rank(k).resolve(dim)))
            .collect::<Result<Vec<_>>>()?;
        ranks.sort_unstable();
        ranks.dedup();
        let factors = ranks
            .iter()
            .map(|&k| build_factors(w, spec, RankSpec::Rank(k)))
            .collect::<Result<Vec<_>>>()?;

        // One pass over the stream feeds every rank's meter.
        let stream_path = s.streams.join(stream_file_name(layer, kind));
        let stream = read_stream(&stream_path)?;
        let h = *stream.header();
        if h.feature_dim as usize != dim {
            return Err(Error::InvalidArgument(format!(
                "{} has width {}, spectrum has {dim}",
                stream_path.display(),
                h.feature_dim
            )));
        }
        let mut meters: Vec<ErrorMeter<f64>> = factors.iter().map(ErrorMeter::new).collect();
        for chunk in batch_iter::<f64>(stream, s.batch_size)? {
            let chunk = chunk?;
            for m in meters.iter_mut() {
                m.ingest_projected(&chunk.matrix)?;
            }
        }
        manifest.input(&stream_path)?;

        for (f, meter) in factors.iter().zip(meters) {
            let measured = meter.finish(Some(spec))?;
            let name = factor_file_name(layer, kind, f.rank);
            let path = s.out.join(&name);
            f.save(&path)?;
            manifest.output(&s.out, &path)?;
            entries.push(CompressionEntry {
                layer,
                kind,
                rank: f.rank,
                retain_ratio: f.retain_ratio,
                file: name,
                predicted_frobenius_error: predicted_error(spec, f.rank, Norm::Frobenius)?,
                predicted_spectral_error: predicted_error(spec, f.rank, Norm::Spectral)?,
                measured,
            });
        }
        info!("layer {layer} {kind}: ranks {ranks:?}");
    }

    let json_path = s.out.join("compression.json");
    write_json(&json_path, &entries)?;
    let csv_path = s.out.join("compression.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::from(e).in_file(&csv_path))?;
    for e in &entries {
        w.serialize(CompressionCsvRow {
            layer: e.layer,
            kind: e.kind,
            rank: e.rank,
            retain_ratio: e.retain_ratio,
            predicted_frobenius_error: e.predicted_frobenius_error,
            measured_frobenius_error: e.measured.frobenius_error,
            predicted_spectral_error: e.predicted_spectral_error,
            measured_spectral_error: e.measured.spectral_error,
            relative_error: e.measured.relative_error,
            retained_energy: e.measured.retained_energy,
        })?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    drop(w);
    manifest.output(&s.out, &json_path)?;
    manifest.output(&s.out, &csv_path)?;
    manifest.finish(&s.out)
}

#[derive(Serialize)]
struct PplGridSummary {
    baseline_ppl: f64,
    sequences: usize,
    tokens: usize,
    key_ratios: Vec<f64>,
    value_ratios: Vec<f64>,
}

pub fn pplgrid(s: &PplGridSettings) -> Result<String> {
    let mut manifest = Manifest::new("pplgrid", s)?;
    let model = load_model(&s.checkpoint, &mut manifest)?;
    let tokens = read_corpus(&s.corpus)?;
    manifest.input(&s.corpus)?;
    let spectra = load_spectra(&s.spectra, &mut manifest)?;
    let mut sequences = split_sequences(&tokens, s.seq_len)?;
    if let Some(n) = s.max_sequences {
        sequences.truncate(n);
    }
    create_dir(&s.out)?;

    let baseline = model.perplexity(&sequences, &CompressedOverride::new())?;
    info!(
        "baseline perplexity {baseline:.6} over {} sequences",
        sequences.len()
    );
    let grid = model.ppl_grid(&sequences, &s.key_ratios, &s.value_ratios, &spectra)?;

    let csv_path = s.out.join("pplgrid.csv");
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    grid.write_csv(file).map_err(|e| e.in_file(&csv_path))?;
    let json_path = s.out.join("pplgrid.json");
    write_json(
        &json_path,
        &PplGridSummary {
            baseline_ppl: baseline,
            sequences: sequences.len(),
            tokens: sequences.iter().map(Vec::len).sum(),
            key_ratios: grid.key_ratios().to_vec(),
            value_ratios: grid.value_ratios().to_vec(),
        },
    )?;
    manifest.output(&s.out, &csv_path)?;
    manifest.output(&s.out, &json_path)?;
    manifest.finish(&s.out)
}

pub fn ndppl(s: &NdPplSettings) -> Result<String> {
    let mut manifest = Manifest::new("ndppl", s)?;
    let grid = PplGrid::load_csv(&s.grid)?;
    manifest.input(&s.grid)?;
    let report: NdPplReport = nd_ppl(&grid)?;
    info!(
        "ND-PPL key {:.6}, value {:.6}",
        report.nd_ppl_key, report.nd_ppl_value
    );
    create_dir(&s.out)?;
    let path = s.out.join("ndppl.json");
    write_json(&path, &report)?;
    manifest.output(&s.out, &path)?;
    manifest.finish(&s.out)
}
