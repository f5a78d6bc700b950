use std::path::{Path, PathBuf};

use crate::error::{Error, Result, ResultExt};
use crate::model::forward::CompressedOverride;
use crate::model::Model;
use crate::stream::{stream_file_name, StreamHeader, StreamWriter};
use crate::Kind;

/// Writes the key and value projection outputs of every layer, one stream per
/// (layer, kind), rows in corpus order. Returns the written paths, ordered by
/// layer then kind.
pub fn dump_activations(
    model: &Model,
    corpus: &[Vec<u16>],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let cfg = &model.config;
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid(
            "cannot dump activations for an empty corpus",
        ));
    }
    std::fs::create_dir_all(out_dir).in_file(out_dir)?;
    let mut writers = Vec::with_capacity(cfg.n_layers * 2);
    let mut paths = Vec::with_capacity(cfg.n_layers * 2);
    for layer in 0..cfg.n_layers as u32 {
        for kind in Kind::ALL {
            let path = out_dir.join(stream_file_name(layer, kind));
            let header = StreamHeader::new(layer, kind, cfg.kv_dim() as u32, total as u64);
            writers.push(StreamWriter::create(&path, header)?);
            paths.push(path);
        }
    }
    let none = CompressedOverride::new();
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let trace = model.forward_traced(seq, &none)?;
        for (li, lt) in trace.layers.iter().enumerate() {
            for t in 0..seq.len() {
                writers[2 * li].push_row(lt.k.row(t))?;
                writers[2 * li + 1].push_row(lt.v.row(t))?;
            }
        }
    }
    for w in writers {
        w.finish()?;
    }
    Ok(paths)
}
