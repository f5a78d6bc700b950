//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kvcore::analysis::DEFAULT_RANK_TOL;
use kvcore::compression::{build_factors, measured_error, verify_optimality, RankSpec};
use kvcore::linalg::{projector, svd_direct};
use kvcore::metrics::{effective_rank, nd_ppl, ner, PplGrid};
use kvcore::model::{
    load_checkpoint, read_corpus, split_sequences, CompressedOverride, Model, ModelConfig,
    ModelWeights,
};
use kvcore::stream::{batch_iter, read_stream, write_stream, StreamHeader};
use kvcore::{Accumulator, Factors, Kind, Matrix, Spectrum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const BIN: &str = env!("CARGO_BIN_EXE_kvcore");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn spectrum_of(k: &Matrix, batch: usize) -> Spectrum {
    let mut acc = Accumulator::new(k.cols()).unwrap();
    let mut start = 0;
    while start < k.rows() {
        let end = (start + batch).min(k.rows());
        acc.ingest_rows(&Matrix::from_fn(end - start, k.cols(), |i, j| {
            k[(start + i, j)]
        }))
        .unwrap();
        start = end;
    }
    acc.finalize(0, Kind::Key, DEFAULT_RANK_TOL).unwrap()
}

fn streaming_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let dir = tempfile::tempdir().unwrap();
    let (mut worst_sigma, mut worst_proj, mut projectors_checked) = (0f64, 0f64, 0);
    for case in 0..50 {
        let rows = rng.random_range(64..=512);
        let cols = rng.random_range(8..=64);
        // Mildly decaying column scales spread the spectrum; values are
        // rounded to f32 so the stream holds exactly the oracle's input.
        let scales: Vec<f64> = (0..cols).map(|j| (1.0 + j as f64).powf(-0.5)).collect();
        let g = gaussian(&mut rng, rows, cols);
        let k = Matrix::from_fn(rows, cols, |i, j| (g[(i, j)] * scales[j]) as f32 as f64);
        let path = dir.path().join(format!("k{case}.kvcr"));
        let header = StreamHeader::new(0, Kind::Key, cols as u32, rows as u64);
        write_stream(&path, header, (0..rows).map(|i| k.row(i).to_vec())).unwrap();

        let mut acc = Accumulator::new(cols).unwrap();
        let batch = rng.random_range(1..=rows);
        for chunk in batch_iter::<f64>(read_stream(&path).unwrap(), batch).unwrap() {
            acc.ingest_batch(&chunk.unwrap()).unwrap();
        }
        let spec = acc.finalize(0, Kind::Key, DEFAULT_RANK_TOL).unwrap();
        let oracle = svd_direct(&k).unwrap();

        let top = oracle.sigma[0];
        for (i, (&s, &o)) in spec.sigma.iter().zip(&oracle.sigma).enumerate() {
            let err = if o >= 1e-10 * top {
                (s - o).abs() / o
            } else {
                (s - o).abs() / (1e-10 * top) * 1e-8
            };
            worst_sigma = worst_sigma.max(err);
            ensure!(
                err <= 1e-8,
                "case {case} ({rows}x{cols}, batch {batch}): sigma[{i}] {s} vs {o}"
            );
        }
        for kk in 1..cols {
            let gap = (oracle.sigma[kk - 1] - oracle.sigma[kk]) / oracle.sigma[kk - 1];
            if gap > 1e-3 {
                let d = projector(&spec.v, kk)
                    .sub(&projector(&oracle.v, kk))
                    .unwrap()
                    .frobenius_norm();
                worst_proj = worst_proj.max(d);
                projectors_checked += 1;
                ensure!(
                    d <= 1e-6,
                    "case {case}: projector at k={kk} differs by {d:e}"
                );
            }
        }
    }
    Ok(format!(
        "50 matrices, max sigma error {worst_sigma:.1e}, {projectors_checked} projectors within {worst_proj:.1e}"
    ))
}

fn eckart_young() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7);
    let mut worst = 0f64;
    for case in 0..20 {
        let x = gaussian(&mut rng, 128, 16);
        let w = gaussian(&mut rng, 16, 8);
        let kmat = x.matmul(&w).unwrap();
        let spec = spectrum_of(&kmat, 37);
        let oracle = svd_direct(&kmat).unwrap();
        let norm = kmat.frobenius_norm();
        for k in 1..=8 {
            let f = build_factors(&w, &spec, RankSpec::Rank(k)).unwrap();
            let measured = measured_error(&x, &w, &f, Some(&spec))
                .unwrap()
                .frobenius_error;
            let predicted = oracle.sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            // At full rank the prediction is 0 and only rounding remains.
            let err = (measured - predicted).abs() / predicted.max(1e-6 * norm);
            worst = worst.max(err);
            ensure!(
                err <= 1e-7,
                "case {case}, k={k}: measured {measured} vs {predicted}"
            );
        }
    }
    Ok(format!(
        "20 instances x 8 ranks, max relative deviation {worst:.1e}"
    ))
}

fn optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0B);
    let mut least_baseline = f64::INFINITY;
    let mut least_margin = f64::INFINITY;
    for case in 0..10u64 {
        // Anisotropic inputs: geometrically decaying scales, then a random mixing.
        let a = gaussian(&mut rng, 16, 16);
        let mix = Matrix::from_fn(16, 16, |i, j| 0.7f64.powi(i as i32) * a[(i, j)]);
        let x = gaussian(&mut rng, 128, 16).matmul(&mix).unwrap();
        let w = gaussian(&mut rng, 16, 8);
        let spec = spectrum_of(&x.matmul(&w).unwrap(), 64);
        let k = 1 + case as usize % 7;
        let f = build_factors(&w, &spec, RankSpec::Rank(k)).unwrap();
        let report = verify_optimality(&x, &w, &f, 200, 1000 * case)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure!(
            report.baseline_margin > 1e-6 * report.optimal_error,
            "case {case}: baseline margin {:e} not positive",
            report.baseline_margin
        );
        least_baseline = least_baseline.min(report.baseline_margin / report.optimal_error);
        least_margin = least_margin.min(report.min_margin);
    }
    Ok(format!(
        "10 instances x 200 alternatives, no violation (min margin {least_margin:.1e}), baseline worse by >= {:.1}%",
        100.0 * least_baseline
    ))
}

fn monoid_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3D);
    let k = gaussian(&mut rng, 1000, 16);
    let whole = spectrum_input(&k, 0, 1000, 1000);
    let scale = whole.gram().max_abs();
    let mut worst = 0f64;
    for plan in 0..20 {
        let shards = rng.random_range(1..=8);
        let mut cuts: Vec<usize> = (0..shards - 1)
            .map(|_| rng.random_range(0..=1000))
            .collect();
        cuts.extend([0, 1000]);
        cuts.sort_unstable();
        let mut parts: Vec<Accumulator> = cuts
            .windows(2)
            .map(|w| spectrum_input(&k, w[0], w[1], rng.random_range(1..=200)))
            .collect();
        parts.shuffle(&mut rng);
        // Merge in a random tree shape.
        while parts.len() > 1 {
            let i = rng.random_range(0..parts.len() - 1);
            let b = parts.remove(i + 1);
            let a = parts.remove(i);
            parts.insert(i, a.merge(&b).unwrap());
        }
        let merged = parts.pop().unwrap();
        ensure!(
            merged.tokens_seen() == 1000,
            "plan {plan}: tokens {}",
            merged.tokens_seen()
        );
        let d = merged.gram().max_abs_diff(whole.gram()) / scale;
        worst = worst.max(d);
        ensure!(
            d <= 1e-12,
            "plan {plan} ({shards} shards): max-norm deviation {d:e}"
        );
    }
    Ok(format!(
        "20 split plans, max relative deviation {worst:.1e}"
    ))
}

fn spectrum_input(k: &Matrix, from: usize, to: usize, batch: usize) -> Accumulator {
    let mut acc = Accumulator::new(k.cols()).unwrap();
    let mut s = from;
    while s < to {
        let e = (s + batch).min(to);
        acc.ingest_rows(&Matrix::from_fn(e - s, k.cols(), |i, j| k[(s + i, j)]))
            .unwrap();
        s = e;
    }
    acc
}

fn synthetic_spectrum(sigma: Vec<f64>) -> Spectrum {
    let n = sigma.len();
    let numerical_rank = kvcore::analysis::numerical_rank(&sigma, DEFAULT_RANK_TOL);
    Spectrum {
        layer_index: 0,
        kind: Kind::Key,
        sigma,
        v: Matrix::identity(n),
        tokens_seen: n as u64,
        numerical_rank,
        rank_tol: DEFAULT_RANK_TOL,
    }
}

fn ner_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E);
    let mut worst_scale = 0f64;
    for case in 0..10_000 {
        let n = rng.random_range(1..=64);
        let mut sigma: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..3) {
                0 => rng.random::<f64>(),
                1 => 10f64.powf(rng.random_range(-8.0..4.0)),
                _ => {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random::<f64>() * 100.0
                    }
                }
            })
            .collect();
        sigma[0] += 1.0;
        sigma.sort_by(|a, b| b.total_cmp(a));
        let spec = synthetic_spectrum(sigma.clone());
        let r = ner(&spec).map_err(|e| format!("case {case}: {e}"))?;
        let rank = r.rank_r as f64;
        ensure!(
            r.erank >= 1.0 - 1e-12 && r.erank <= rank + 1e-12,
            "case {case}: erank {} for r={rank}",
            r.erank
        );
        ensure!(
            r.ner >= 1.0 / rank - 1e-12 && r.ner <= 1.0 + 1e-12,
            "case {case}: NER {}",
            r.ner
        );
        let c = 10f64.powf(rng.random_range(-6.0..6.0));
        let scaled = ner(&synthetic_spectrum(sigma.iter().map(|s| s * c).collect())).unwrap();
        worst_scale = worst_scale.max((scaled.ner - r.ner).abs());
        ensure!(
            (scaled.ner - r.ner).abs() <= 1e-12,
            "case {case}: ner changes by {:e} under scaling",
            (scaled.ner - r.ner).abs()
        );
    }
    for n in [1, 2, 7, 64] {
        let u = ner(&synthetic_spectrum(vec![2.5; n])).unwrap();
        ensure!(
            (u.ner - 1.0).abs() <= 1e-12,
            "uniform spectrum of {n}: NER {}",
            u.ner
        );
    }
    // exp of the entropy of p = (3/4, 1/4).
    let oracle = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
    let e: f64 = effective_rank(&[3.0, 1.0], 2).unwrap();
    ensure!(
        (e - 1.754765).abs() <= 1e-5 && (e - oracle).abs() <= 1e-12,
        "erank(3, 1) = {e}"
    );
    Ok(format!(
        "10^4 spectra in bounds, erank(3,1) = {e:.6}, max scaling drift {worst_scale:.1e}"
    ))
}

fn nd_ppl_contract() -> Outcome {
    let constant = PplGrid::new(vec![0.25, 0.5, 1.0], vec![0.25, 0.5, 1.0], vec![7.5; 9]).unwrap();
    let c = nd_ppl(&constant).unwrap();
    ensure!(
        c.nd_ppl_key == 0.0 && c.nd_ppl_value == 0.0,
        "constant grid: {c:?}"
    );

    let hand = PplGrid::new(vec![0.5, 1.0], vec![0.5, 1.0], vec![12.0, 12.0, 10.0, 10.0]).unwrap();
    let h = nd_ppl(&hand).unwrap();
    ensure!(
        (h.nd_ppl_key - 0.2).abs() <= 1e-9,
        "hand grid: ND-PPL_K = {}",
        h.nd_ppl_key
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0x9D);
    let mut worst = 0f64;
    for _ in 0..100 {
        let ppl: Vec<f64> = (0..12).map(|_| rng.random_range(2.0..500.0)).collect();
        let g = PplGrid::new(vec![0.25, 0.5, 0.75, 1.0], vec![0.3, 0.6, 1.0], ppl).unwrap();
        let base = nd_ppl(&g).unwrap();
        let s = nd_ppl(&g.scaled(10f64.powf(rng.random_range(-3.0..3.0))).unwrap()).unwrap();
        let d = (s.nd_ppl_key - base.nd_ppl_key)
            .abs()
            .max((s.nd_ppl_value - base.nd_ppl_value).abs());
        worst = worst.max(d);
        ensure!(d <= 1e-12, "rescaling changes ND-PPL by {d:e}");
    }
    Ok(format!(
        "constant 0, hand grid {:.9}, rescaling drift {worst:.1e}",
        h.nd_ppl_key
    ))
}

fn kvcore(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "kvcore {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Runs every subcommand into `root` and returns each command's stdout.
fn pipeline(
    root: &Path,
    config: Option<&Path>,
    key_ratios: &str,
    value_ratios: &str,
) -> Result<Vec<Vec<u8>>, String> {
    let run = root.join("run");
    let streams = run.join("streams");
    let (an, cmp, grid, nd) = (
        root.join("an"),
        root.join("cmp"),
        root.join("grid"),
        root.join("nd"),
    );
    let mut gen = vec!["gen-synthetic", "--out", p(&run)];
    if let Some(c) = config {
        gen.splice(0..0, ["--config", p(c)]);
    }
    Ok(vec![
        kvcore(&gen)?,
        kvcore(&["analyze", "--streams", p(&streams), "--out", p(&an)])?,
        kvcore(&[
            "compress",
            "--checkpoint",
            p(&run.join("model.kvcm")),
            "--spectra",
            p(&an),
            "--streams",
            p(&streams),
            "--out",
            p(&cmp),
            "--ratios",
            "0.25,0.5,1.0",
        ])?,
        kvcore(&[
            "pplgrid",
            "--checkpoint",
            p(&run.join("model.kvcm")),
            "--corpus",
            p(&run.join("corpus.u16")),
            "--spectra",
            p(&an),
            "--out",
            p(&grid),
            "--key-ratios",
            key_ratios,
            "--value-ratios",
            value_ratios,
        ])?,
        kvcore(&[
            "ndppl",
            "--grid",
            p(&grid.join("pplgrid.csv")),
            "--out",
            p(&nd),
        ])?,
    ])
}

fn read_grid(root: &Path) -> (PplGrid, f64) {
    let grid = PplGrid::load_csv(root.join("grid/pplgrid.csv")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("grid/pplgrid.json")).unwrap()).unwrap();
    (grid, summary["baseline_ppl"].as_f64().unwrap())
}

/// The default toy pipeline, shared by the identity and trend checks.
struct DefaultRun {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn default_run() -> Result<DefaultRun, String> {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    pipeline(&root, None, "0.25,0.5,0.75,1.0", "0.25,1.0")?;
    Ok(DefaultRun { _dir: dir, root })
}

fn end_to_end_identity(run: &DefaultRun) -> Outcome {
    let (grid, baseline) = read_grid(&run.root);
    let n = grid.key_ratios().len();
    let m = grid.value_ratios().len();
    let full = grid.get(n - 1, m - 1);
    ensure!(
        (full - baseline).abs() <= 1e-6 * baseline,
        "pplgrid(1,1) = {full}, baseline {baseline}"
    );

    // The factor files written by `compress` at ratio 1.0, loaded into the model.
    let (cfg, weights) = load_checkpoint(run.root.join("run/model.kvcm")).unwrap();
    let model = Model::new(cfg, weights).unwrap();
    let mut over = CompressedOverride::new();
    for layer in 0..cfg.n_layers as u32 {
        for kind in Kind::ALL {
            let name = format!("layer{layer}_{kind}_k{}.kvcf", cfg.kv_dim());
            over.insert(Factors::load(run.root.join("cmp").join(name)).unwrap());
        }
    }
    let corpus =
        split_sequences(&read_corpus(run.root.join("run/corpus.u16")).unwrap(), 64).unwrap();
    let with_files = model.perplexity(&corpus, &over).unwrap();
    ensure!(
        (with_files - baseline).abs() <= 1e-6 * baseline,
        "full-rank factor files give {with_files} vs {baseline}"
    );
    let probe: Vec<u16> = corpus[0].clone();
    let dev = model
        .forward(&probe, &over)
        .unwrap()
        .max_abs_diff(&model.forward(&probe, &CompressedOverride::new()).unwrap());
    ensure!(dev <= 1e-6, "full-rank override moves logits by {dev:e}");

    let ucfg = ModelConfig::default();
    let uniform = Model::new(ucfg, ModelWeights::uniform_logits(&ucfg).unwrap()).unwrap();
    let u = uniform
        .perplexity(&corpus, &CompressedOverride::new())
        .unwrap();
    ensure!(
        (u - ucfg.vocab as f64).abs() <= 1e-6 * ucfg.vocab as f64,
        "uniform-logit PPL {u}"
    );
    Ok(format!(
        "baseline {baseline:.6}, grid(1,1) {full:.6}, factor files {with_files:.6}, uniform model {u:.6}"
    ))
}

fn degradation_trend(run: &DefaultRun) -> Outcome {
    let (grid, _) = read_grid(&run.root);
    let m = grid.value_ratios().len();
    ensure!(
        grid.key_ratios() == [0.25, 0.5, 0.75, 1.0],
        "key ratios {:?}",
        grid.key_ratios()
    );
    let col: Vec<f64> = (0..4).map(|i| grid.get(i, m - 1)).collect();
    for i in 0..3 {
        ensure!(
            col[i] >= col[i + 1] * (1.0 - 1e-6),
            "PPL(k, 1.0) rises between k={} and k={}: {col:?}",
            grid.key_ratios()[i],
            grid.key_ratios()[i + 1]
        );
    }
    ensure!(
        col[0] > col[3],
        "PPL(0.25, 1.0) = {} not above PPL(1.0, 1.0) = {}",
        col[0],
        col[3]
    );
    Ok(format!("PPL(k, 1.0) over k = 0.25..1.0: {:.4?}", col))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let cfg = c.path().join("small.toml");
    fs::write(
        &cfg,
        "[gen-synthetic]\nseed = 5\ntokens = 2048\ntrain_steps = 10\n",
    )
    .unwrap();
    let out_a = pipeline(a.path(), Some(&cfg), "0.5,1.0", "0.5,1.0")?;
    let out_b = pipeline(b.path(), Some(&cfg), "0.5,1.0", "0.5,1.0")?;
    let names = ["gen-synthetic", "analyze", "compress", "pplgrid", "ndppl"];
    for (i, name) in names.iter().enumerate() {
        ensure!(out_a[i] == out_b[i], "{name} manifests differ");
    }
    let files_a = tree(a.path());
    let files_b = tree(b.path());
    ensure!(files_a.keys().eq(files_b.keys()), "output file sets differ");
    for (name, bytes) in &files_a {
        ensure!(files_b[name] == *bytes, "{name} differs between runs");
    }
    Ok(format!(
        "5 commands, {} files byte-identical",
        files_a.len()
    ))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn check(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {name} ({secs:.1}s): {why}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= check("streaming equivalence", streaming_equivalence);
    ok &= check("eckart-young identity", eckart_young);
    ok &= check("optimality audit", optimality);
    ok &= check("monoid laws", monoid_laws);
    ok &= check("ner contract", ner_contract);
    ok &= check("nd-ppl contract", nd_ppl_contract);
    let started = Instant::now();
    match default_run() {
        Ok(run) => {
            let setup = started.elapsed().as_secs_f64();
            println!("      default toy pipeline ran in {setup:.1}s");
            ok &= check("end-to-end identity", || end_to_end_identity(&run));
            ok &= check("end-to-end degradation trend", || degradation_trend(&run));
        }
        Err(e) => {
            println!("FAIL  end-to-end identity: pipeline failed: {e}");
            println!("FAIL  end-to-end degradation trend: pipeline failed");
            ok = false;
        }
    }
    ok &= check("cli determinism", determinism);
    if !ok {
        std::process::exit(1);
    }
}
