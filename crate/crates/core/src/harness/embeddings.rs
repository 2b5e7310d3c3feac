//! Representation dumps for external inspection (t-SNE and the like).

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use crate::data::{write_feature_csv, LabeledDataset, RowMeta, TaskStream};
use crate::error::{Error, Result};
use crate::model::{extract_batch, AdapterRegistry, Backbone};

/// Which extractor produces the dumped representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// The frozen backbone alone.
    Raw,
    /// Every sample through its own task's adapter.
    OwnAdapter,
    /// Every sample through the adapter of one fixed task.
    Adapter(usize),
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingSource::Raw => f.write_str("raw"),
            EmbeddingSource::OwnAdapter => f.write_str("own"),
            EmbeddingSource::Adapter(t) => write!(f, "adapter:{t}"),
        }
    }
}

impl FromStr for EmbeddingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EmbeddingSource::Raw),
            "own" => Ok(EmbeddingSource::OwnAdapter),
            _ => s
                .strip_prefix("adapter:")
                .and_then(|t| t.parse().ok())
                .map(EmbeddingSource::Adapter)
                .ok_or_else(|| {
                    Error::Config(format!("bad embedding source {s:?}; expected raw, own or adapter:<task>"))
                }),
        }
    }
}

/// Representations of every test sample of the stream, in task order.
/// Sample ids count rows of the concatenated test sets.
pub fn embed_test_sets(
    backbone: &Backbone,
    registry: &AdapterRegistry,
    stream: &TaskStream,
    source: EmbeddingSource,
) -> Result<(LabeledDataset, Vec<RowMeta>)> {
    let mut parts = Vec::with_capacity(stream.num_tasks());
    let mut meta = Vec::new();
    for (i, task) in stream.tasks().iter().enumerate() {
        let t = i + 1;
        let adapter = match source {
            EmbeddingSource::Raw => None,
            EmbeddingSource::OwnAdapter => Some(registry.get(t)?),
            EmbeddingSource::Adapter(a) => Some(registry.get(a)?),
        };
        let reps = extract_batch(backbone, task.test.features(), adapter)?;
        parts.push(LabeledDataset::new(reps, task.test.labels().to_vec())?);
        let start = meta.len();
        meta.extend((0..task.test.len()).map(|i| RowMeta { sample_id: start + i, task_id: t }));
    }
    let data = LabeledDataset::concat(&parts)?;
    Ok((data, meta))
}

/// Writes [`embed_test_sets`] as a feature CSV with metadata columns.
pub fn dump_embeddings(
    backbone: &Backbone,
    registry: &AdapterRegistry,
    stream: &TaskStream,
    source: EmbeddingSource,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let (data, meta) = embed_test_sets(backbone, registry, stream, source)?;
    write_feature_csv(BufWriter::new(File::create(path)?), &data, Some(&meta))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_names_round_trip() {
        for s in [EmbeddingSource::Raw, EmbeddingSource::OwnAdapter, EmbeddingSource::Adapter(3)] {
            assert_eq!(s.to_string().parse::<EmbeddingSource>().unwrap(), s);
        }
        assert!("adapter:x".parse::<EmbeddingSource>().is_err());
    }
}
