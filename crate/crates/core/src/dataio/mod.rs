//! Dataset plumbing: manifests, protocol-aware splits, a procedural ridge
//! generator, and image loading.

mod generator;
mod manifest;
mod pgm;
mod splits;

use std::path::Path;

pub use generator::{
    corrupt, generate_corpus, high_band_energy, render_field, GenSpec, GeneratedCorpus,
    RidgeParams, WarpParams, PSEUDO_SPECIES,
};
pub use manifest::{
    is_known_species, parse_manifest, Class, Manifest, ParsedManifest, Provenance, SampleRecord,
    Split, Summary, KNOWN_SPECIES,
};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use splits::{make_splits, SplitPlan};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Loads one record's image: graymap for `.pgm` paths, raw tensor bytes
/// otherwise. Paths resolve relative to `root`.
pub fn load_sample(root: &Path, record: &SampleRecord) -> Result<Tensor> {
    let path = root.join(&record.path);
    let image = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        read_pgm(&path)?
    } else {
        Tensor::load(&path)?
    };
    match image.shape.as_slice() {
        [_, _, _] => Ok(image),
        [h, w] => {
            let (h, w) = (*h, *w);
            Tensor::new(vec![1, h, w], image.data)
        }
        other => Err(Error::Io(format!(
            "{}: sample {} has shape {other:?}, expected an image",
            path.display(),
            record.id
        ))),
    }
}

/// Stacks records' images into one `[batch, c, h, w]` tensor. All images
/// must share a shape.
pub fn load_batch(root: &Path, records: &[&SampleRecord]) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Usage("cannot load an empty batch".into()));
    }
    let first = load_sample(root, records[0])?;
    let sample_shape = first.shape.clone();
    let mut data = Vec::with_capacity(records.len() * first.numel());
    data.extend_from_slice(&first.data);
    for record in &records[1..] {
        let image = load_sample(root, record)?;
        if image.shape != sample_shape {
            return Err(Error::Io(format!(
                "sample {} has shape {:?}, batch expects {:?}",
                record.id, image.shape, sample_shape
            )));
        }
        data.extend_from_slice(&image.data);
    }
    let mut shape = vec![records.len()];
    shape.extend_from_slice(&sample_shape);
    Tensor::new(shape, data)
}

/// Writes a generated corpus under `root`: tensors in `tensors/` and the
/// manifest as `manifest.jsonl`.
pub fn write_corpus(root: &Path, corpus: &GeneratedCorpus) -> Result<()> {
    let tensor_dir = root.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    for (record, image) in corpus.manifest.records.iter().zip(&corpus.images) {
        image.save(&root.join(&record.path))?;
    }
    corpus.manifest.save(&root.join("manifest.jsonl"))
}
