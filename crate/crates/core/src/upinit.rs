//! User/product matrices initialized from pooled review encodings, with
//! Frobenius-norm rescaling and an on-disk cache.
//!
//! Cache layout: magic `UPCCEMB1`, `u32` rows, `u32` cols, `f64` scale
//! factor, `u8` mode, `u64` seed, 32-byte encoder hash, then the scaled
//! matrix as row-major `f32`, all little-endian. Row ids live in a
//! companion `.ids` file (one per line) and the remaining metadata in a
//! `.meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EntityIndex, Split};
use crate::encoder::{checkpoint::params_hash, Encoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Mat;
use crate::tokenizer::{encode, Vocab};

const MAGIC: &[u8; 8] = b"UPCCEMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `f = √(rows·h) / ‖M‖_F`, the expected norm of a standard-normal matrix.
    #[default]
    ClosedForm,
    /// `f = ‖E‖_F / ‖M‖_F` for a seeded standard-normal draw `E`.
    Sampled,
}

impl ScalingMode {
    fn code(self) -> u8 {
        match self {
            ScalingMode::ClosedForm => 0,
            ScalingMode::Sampled => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ScalingMode::ClosedForm),
            1 => Ok(ScalingMode::Sampled),
            _ => Err(Error::Format(format!("unknown scaling mode {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub mode: ScalingMode,
    pub seed: u64,
    /// Hex SHA-256 of the encoder checkpoint the rows were pooled from.
    pub encoder_hash: String,
    /// Split whose reviews formed the pool.
    pub split: String,
    /// Rows without pooled reviews, filled with the mean row.
    pub cold_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    /// Scaled matrix, rounded through `f32` so it equals its cached form.
    pub matrix: Mat,
    pub scale: f64,
    pub meta: EmbeddingMeta,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// The matrix as if it had been scaled by `factor` instead of `scale`.
    pub fn with_scale(&self, factor: f64) -> Result<Mat> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidParam(format!("scale factor must be positive, got {factor}")));
        }
        Ok(&self.matrix * (factor / self.scale))
    }

    pub fn staleness_warning(&self, encoder_hash: &str) -> Option<String> {
        (self.meta.encoder_hash != encoder_hash).then(|| {
            let msg = format!(
                "stale embedding cache: built from encoder {}, current encoder {}",
                self.meta.encoder_hash, encoder_hash
            );
            log::warn!("{msg}");
            msg
        })
    }
}

/// Mean of the rows of `h_d` flagged as content.
pub fn doc_vector(h_d: &Mat, content_flags: &[bool]) -> Result<Mat> {
    if content_flags.len() != h_d.nrows() {
        return Err(Error::Shape(format!(
            "{} flags for {} rows",
            content_flags.len(),
            h_d.nrows()
        )));
    }
    let mut sum = Array2::zeros((1, h_d.ncols()));
    let mut n = 0usize;
    for (row, _) in h_d.outer_iter().zip(content_flags).filter(|(_, &f)| f) {
        let mut s = sum.row_mut(0);
        s += &row;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDocument);
    }
    Ok(sum / n as f64)
}

/// Mean of `n ≥ 1` document vectors (`n×h`).
pub fn entity_vector(doc_vectors: &Mat) -> Result<Mat> {
    doc_vectors
        .mean_axis(Axis(0))
        .map(|m| m.insert_axis(Axis(0)))
        .ok_or(Error::ColdEntity)
}

pub fn frobenius_norm(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `m` so its Frobenius norm matches a same-shape standard-normal
/// matrix, returning the scaled matrix and the factor.
pub fn frobenius_scale(m: &Mat, mode: ScalingMode, seed: u64) -> Result<(Mat, f64)> {
    let norm = frobenius_norm(m);
    if !norm.is_finite() {
        return Err(Error::NonFinite("matrix to scale".into()));
    }
    if norm == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let target = match mode {
        ScalingMode::ClosedForm => (m.len() as f64).sqrt(),
        ScalingMode::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..m.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * z
                })
                .sum::<f64>()
                .sqrt()
        }
    };
    let f = target / norm;
    Ok((m * f, f))
}

/// Document vectors of the training split, `None` for empty documents.
pub fn train_doc_vectors(
    corpus: &Corpus,
    encoder: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<Option<Mat>>> {
    let max_len = encoder.config().max_len;
    let docs = corpus
        .split(Split::Train)
        .iter()
        .map(|r| encode(&r.text, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        for (doc, enc) in chunk.iter().zip(encoder.encode_batch(store, &refs)?) {
            out.push(match doc_vector(&enc.h_d, &doc.content_flags) {
                Ok(v) => Some(v),
                Err(Error::EmptyDocument) => None,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(out)
}

/// Pre-scaling rows of one entity type from training-split document
/// vectors; entities without any usable review get the mean of the others.
pub fn pooled_rows(corpus: &Corpus, index: &EntityIndex, doc_vecs: &[Option<Mat>], h: usize) -> Result<(Mat, Vec<usize>)> {
    let train = corpus.split(Split::Train);
    let mut rows = Mat::zeros((index.len(), h));
    let mut cold = Vec::new();
    for i in 0..index.len() {
        let mut history: Vec<usize> = index.history(i).to_vec();
        history.sort_by(|&a, &b| train[a].review_id.cmp(&train[b].review_id));
        let vecs: Vec<_> = history.iter().filter_map(|&p| doc_vecs[p].as_ref()).map(|v| v.view()).collect();
        if vecs.is_empty() {
            cold.push(i);
            continue;
        }
        let stacked = ndarray::concatenate(Axis(0), &vecs).map_err(|e| Error::Shape(e.to_string()))?;
        rows.row_mut(i).assign(&entity_vector(&stacked)?.row(0));
    }
    if cold.len() == index.len() {
        return Err(Error::DegenerateNorm);
    }
    if !cold.is_empty() {
        let warm: Vec<usize> = (0..index.len()).filter(|i| !cold.contains(i)).collect();
        let mean = rows.select(Axis(0), &warm).mean_axis(Axis(0)).expect("non-empty");
        for &i in &cold {
            rows.row_mut(i).assign(&mean);
        }
    }
    Ok((rows, cold))
}

#[derive(Clone, Copy, Debug)]
pub struct PrecomputeOptions {
    pub batch_size: usize,
    pub mode: ScalingMode,
    pub seed: u64,
}

/// Builds both scaled matrices from the training split with a frozen encoder.
pub fn precompute(
    corpus: &Corpus,
    encoder: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    opts: PrecomputeOptions,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let doc_vecs = train_doc_vectors(corpus, encoder, store, vocab, opts.batch_size)?;
    let hash = params_hash(store, &encoder.param_ids());
    build_matrices(corpus, &doc_vecs, encoder.config().hidden, opts.mode, opts.seed, &hash)
}

/// Users are scaled with `seed`, products with `seed + 1`.
pub fn build_matrices(
    corpus: &Corpus,
    doc_vecs: &[Option<Mat>],
    h: usize,
    mode: ScalingMode,
    seed: u64,
    encoder_hash: &str,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let build = |index: &EntityIndex, seed: u64| -> Result<EmbeddingMatrix> {
        let (rows, cold_rows) = pooled_rows(corpus, index, doc_vecs, h)?;
        let (mut matrix, scale) = frobenius_scale(&rows, mode, seed)?;
        matrix.mapv_inplace(|v| v as f32 as f64);
        Ok(EmbeddingMatrix {
            ids: index.ids().to_vec(),
            matrix,
            scale,
            meta: EmbeddingMeta {
                mode,
                seed,
                encoder_hash: encoder_hash.to_owned(),
                split: Split::Train.name().to_owned(),
                cold_rows,
            },
        })
    };
    Ok((build(corpus.users(), seed)?, build(corpus.products(), seed.wrapping_add(1))?))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn save_cache(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let hash = hex::decode(&m.meta.encoder_hash)
        .ok()
        .filter(|h| h.len() == 32)
        .ok_or_else(|| Error::Format(format!("encoder hash {:?} is not 32 hex bytes", m.meta.encoder_hash)))?;
    let mut out = Vec::with_capacity(61 + 4 * m.matrix.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&m.scale.to_le_bytes());
    out.push(m.meta.mode.code());
    out.extend_from_slice(&m.meta.seed.to_le_bytes());
    out.extend_from_slice(&hash);
    for &v in m.matrix.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    let mut ids = m.ids.join("\n");
    if !ids.is_empty() {
        ids.push('\n');
    }
    fs::write(sidecar(path, ".ids"), ids)?;
    let meta = serde_json::json!({ "split": m.meta.split, "cold_rows": m.meta.cold_rows });
    fs::write(sidecar(path, ".meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path)?;
    let header = 8 + 4 + 4 + 8 + 1 + 8 + 32;
    if bytes.len() < header || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{}: not an embedding cache", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let rows = u32_at(8);
    let cols = u32_at(12);
    let scale = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let mode = ScalingMode::from_code(bytes[24])?;
    let seed = u64::from_le_bytes(bytes[25..33].try_into().expect("8 bytes"));
    let encoder_hash = hex::encode(&bytes[33..65]);
    if bytes.len() != header + 4 * rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            4 * rows * cols,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let matrix = Array2::from_shape_vec((rows, cols), data).expect("checked size");
    let ids: Vec<String> = fs::read_to_string(sidecar(path, ".ids"))?
        .lines()
        .map(str::to_owned)
        .collect();
    if ids.len() != rows {
        return Err(Error::Format(format!("{} ids for {rows} rows", ids.len())));
    }
    #[derive(Deserialize)]
    struct Side {
        split: String,
        cold_rows: Vec<usize>,
    }
    let side: Side = serde_json::from_str(&fs::read_to_string(sidecar(path, ".meta.json"))?)?;
    Ok(EmbeddingMatrix {
        ids,
        matrix,
        scale,
        meta: EmbeddingMeta {
            mode,
            seed,
            encoder_hash,
            split: side.split,
            cold_rows: side.cold_rows,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn doc_vector_ignores_unflagged_rows() {
        let h = array![[1e9, -1e9], [1.0, 1.0], [3.0, 3.0], [1e9, 1e9]];
        let v = doc_vector(&h, &[false, true, true, false]).unwrap();
        assert_eq!(v, array![[2.0, 2.0]]);
        let single = doc_vector(&h, &[false, false, true, false]).unwrap();
        assert_eq!(single, array![[3.0, 3.0]]);
        assert!(matches!(doc_vector(&h, &[false; 4]), Err(Error::EmptyDocument)));
    }

    #[test]
    fn entity_vector_means() {
        assert_eq!(entity_vector(&array![[0.0, 2.0], [2.0, 0.0]]).unwrap(), array![[1.0, 1.0]]);
        assert_eq!(entity_vector(&array![[0.5, 2.0]]).unwrap(), array![[0.5, 2.0]]);
        assert!(matches!(entity_vector(&Mat::zeros((0, 2))), Err(Error::ColdEntity)));
    }

    #[test]
    fn closed_form_scaling_examples() {
        let (s, f) = frobenius_scale(&array![[3.0, 0.0], [0.0, 4.0]], ScalingMode::ClosedForm, 0).unwrap();
        assert_abs_diff_eq!(f, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(s, array![[1.2, 0.0], [0.0, 1.6]], epsilon = 1e-15);
        let (_, f) = frobenius_scale(&array![[1.0, -1.0], [1.0, 1.0]], ScalingMode::ClosedForm, 0).unwrap();
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-15);
        assert!(matches!(
            frobenius_scale(&Mat::zeros((2, 2)), ScalingMode::ClosedForm, 0),
            Err(Error::DegenerateNorm)
        ));
    }

    #[test]
    fn sampled_factor_matches_closed_form_at_scale() {
        let m = Mat::from_elem((1000, 1000), 0.5);
        let (_, closed) = frobenius_scale(&m, ScalingMode::ClosedForm, 0).unwrap();
        for seed in 0..3 {
            let (_, sampled) = frobenius_scale(&m, ScalingMode::Sampled, seed).unwrap();
            assert!((sampled / closed - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users.emb");
        let m = EmbeddingMatrix {
            ids: vec!["u1".into(), "u2".into()],
            matrix: array![[0.5, -1.25], [2.0, 0.125]],
            scale: 0.731,
            meta: EmbeddingMeta {
                mode: ScalingMode::Sampled,
                seed: 9,
                encoder_hash: "ab".repeat(32),
                split: "train".into(),
                cold_rows: vec![1],
            },
        };
        save_cache(&m, &path).unwrap();
        let back = load_cache(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.staleness_warning(&"ab".repeat(32)).is_none());
        assert!(back.staleness_warning(&"cd".repeat(32)).is_some());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_cache(&path), Err(Error::Format(_))));
    }
}
