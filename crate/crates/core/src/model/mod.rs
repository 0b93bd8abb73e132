//! The trainable sequence classifier: a single-layer gated recurrent cell
//! with a linear softmax head, trained by plain minibatch SGD on
//! cross-entropy. Fully fine-tuning updates every parameter, which is what
//! lets the same model keep evolving stage after stage.

pub mod checkpoint;
mod gru;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gru::{clip_global_norm, Dims};
pub use metrics::{evaluate, metrics_from_confusion, ClassMetrics, Metrics};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FeatureVector, LabelDict};
use crate::util;

/// Gradient-norm clip applied to every SGD step.
pub const GRAD_CLIP: f64 = 5.0;
/// Samples per forward pass during batch prediction.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("num_classes must be >= 2, got {0}")]
    NumClasses(usize),
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("item {index}: feature length {got} does not match model seq_len {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("nothing to evolve on: silver set is empty")]
    EmptySilverSet,
    #[error("item {index}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("label dictionary has {dict} entries but model has {model} classes")]
    LabelDictSize { dict: usize, model: usize },
    #[error("checkpoint file has wrong magic bytes")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported")]
    UnsupportedVersion(u16),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint content digest mismatch")]
    DigestMismatch,
    #[error("checkpoint header unreadable: {0}")]
    HeaderParse(String),
    #[error("checkpoint parameter count {got} does not match architecture ({expected})")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden_dim: usize,
    pub seq_len: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            hidden_dim: 64,
            seq_len: crate::flow::DEFAULT_SEQ_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 50,
            batch_size: 500,
            learning_rate: 0.0025,
            seed: 1,
        }
    }
}

impl Hyperparams {
    fn check(&self) -> Result<(), ModelError> {
        if self.epochs < 1 {
            return Err(ModelError::BadHyper("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(ModelError::BadHyper("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::BadHyper("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub dataset_digest: String,
    pub hyper: Hyperparams,
}

/// Versioned, immutable classifier parameters with lineage back to the
/// initially trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version_id: String,
    /// 0 = initially trained; k = k-th generation of fine-tuning.
    pub lineage_level: u32,
    pub parent_version: Option<String>,
    pub num_classes: usize,
    pub arch: Arch,
    pub parameters: Vec<f64>,
    pub label_dict: LabelDict,
    pub created_ts_us: i64,
    pub train_provenance: Option<TrainProvenance>,
}

impl ModelCheckpoint {
    pub fn dims(&self) -> Dims {
        Dims {
            hidden: self.arch.hidden_dim,
            classes: self.num_classes,
            seq_len: self.arch.seq_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::NumClasses(self.num_classes));
        }
        let expected = self.dims().param_count();
        if self.parameters.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: self.parameters.len(),
            });
        }
        if (self.lineage_level == 0) != self.parent_version.is_none() {
            return Err(ModelError::BadArch(
                "lineage_level 0 must (only) have no parent".into(),
            ));
        }
        if self.label_dict.num_classes() != self.num_classes {
            return Err(ModelError::LabelDictSize {
                dict: self.label_dict.num_classes(),
                model: self.num_classes,
            });
        }
        Ok(())
    }

    /// Content-derived id: any change to parameters, lineage, or provenance
    /// produces a new version.
    fn compute_version_id(&self) -> String {
        let mut bytes = Vec::new();
        let meta = (
            self.lineage_level,
            &self.parent_version,
            self.num_classes,
            &self.arch,
            &self.label_dict,
            self.created_ts_us,
            &self.train_provenance,
        );
        bytes.extend_from_slice(serde_json::to_string(&meta).expect("meta serializes").as_bytes());
        for p in &self.parameters {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        format!("L{}-{}", self.lineage_level, &util::sha256_hex(&bytes)[..12])
    }

    fn reversion(mut self) -> Self {
        self.version_id = self.compute_version_id();
        self
    }
}

/// Per-class posterior for one sample. Ties in `argmax` break toward the
/// lowest class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    pub probs: Vec<f64>,
    pub argmax: usize,
    pub max_prob: f64,
}

impl ConfidenceVector {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let mut argmax = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &p) in probs.iter().enumerate() {
            if p > best {
                best = p;
                argmax = i;
            }
        }
        ConfidenceVector {
            max_prob: probs[argmax],
            probs,
            argmax,
        }
    }

    /// Check the softmax invariants; used by tests and self-checks.
    pub fn check(&self) -> Result<(), String> {
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("probs sum to {sum}"));
        }
        for (i, &p) in self.probs.iter().enumerate() {
            if p < 0.0 {
                return Err(format!("probs[{i}] = {p} negative"));
            }
            if p > self.max_prob {
                return Err(format!("probs[{i}] exceeds max_prob"));
            }
        }
        if self.probs[self.argmax] != self.max_prob {
            return Err("max_prob != probs[argmax]".into());
        }
        Ok(())
    }
}

/// Deterministically initialize a model: parameters uniform in
/// `[-s, s]` with `s = 1/sqrt(hidden_dim)`.
pub fn init_model(
    num_classes: usize,
    arch: Arch,
    seed: u64,
    label_dict: Option<LabelDict>,
    created_ts_us: i64,
) -> Result<ModelCheckpoint, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::NumClasses(num_classes));
    }
    if arch.hidden_dim < 1 || arch.seq_len < 1 {
        return Err(ModelError::BadArch(
            "hidden_dim and seq_len must be >= 1".into(),
        ));
    }
    let label_dict = match label_dict {
        Some(d) => {
            if d.num_classes() != num_classes {
                return Err(ModelError::LabelDictSize {
                    dict: d.num_classes(),
                    model: num_classes,
                });
            }
            d
        }
        None => LabelDict::from_labels((0..num_classes).map(|i| format!("class_{i}"))),
    };
    let dims = Dims {
        hidden: arch.hidden_dim,
        classes: num_classes,
        seq_len: arch.seq_len,
    };
    let s = 1.0 / (arch.hidden_dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parameters: Vec<f64> = (0..dims.param_count())
        .map(|_| rng.random_range(-s..=s))
        .collect();
    Ok(ModelCheckpoint {
        version_id: String::new(),
        lineage_level: 0,
        parent_version: None,
        num_classes,
        arch,
        parameters,
        label_dict,
        created_ts_us,
        train_provenance: None,
    }
    .reversion())
}

fn batch_arrays(
    model: &ModelCheckpoint,
    items: &[&FeatureVector],
    base_index: usize,
) -> Result<(Array2<f64>, Vec<usize>), ModelError> {
    let seq_len = model.arch.seq_len;
    let mut xs = Array2::<f64>::zeros((items.len(), seq_len));
    let mut true_lens = Vec::with_capacity(items.len());
    for (i, fv) in items.iter().enumerate() {
        if fv.values.len() != seq_len {
            return Err(ModelError::DimMismatch {
                index: base_index + i,
                expected: seq_len,
                got: fv.values.len(),
            });
        }
        for (t, &v) in fv.values.iter().enumerate() {
            xs[(i, t)] = v;
        }
        true_lens.push(fv.true_len.min(seq_len));
    }
    Ok((xs, true_lens))
}

/// Softmax posterior for a single feature vector.
pub fn predict(
    model: &ModelCheckpoint,
    x: &FeatureVector,
) -> Result<ConfidenceVector, ModelError> {
    let (xs, true_lens) = batch_arrays(model, &[x], 0)?;
    let probs = gru::forward_probs(&model.parameters, &model.dims(), &xs, &true_lens);
    Ok(ConfidenceVector::from_probs(probs.column(0).to_vec()))
}

/// Batched prediction, chunked internally. Output order matches input
/// order, so results are independent of the worker count.
pub fn predict_batch(
    model: &ModelCheckpoint,
    xs: &[FeatureVector],
) -> Result<Vec<ConfidenceVector>, ModelError> {
    let dims = model.dims();
    let chunks: Vec<(usize, &[FeatureVector])> = xs
        .chunks(PREDICT_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * PREDICT_CHUNK, c))
        .collect();
    let per_chunk: Result<Vec<Vec<ConfidenceVector>>, ModelError> = chunks
        .par_iter()
        .map(|(base, chunk)| {
            let refs: Vec<&FeatureVector> = chunk.iter().collect();
            let (arr, true_lens) = batch_arrays(model, &refs, *base)?;
            let probs = gru::forward_probs(&model.parameters, &dims, &arr, &true_lens);
            Ok((0..chunk.len())
                .map(|b| ConfidenceVector::from_probs(probs.column(b).to_vec()))
                .collect())
        })
        .collect();
    Ok(per_chunk?.into_iter().flatten().collect())
}

/// A finished training run: the new checkpoint plus its per-epoch mean
/// training loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: ModelCheckpoint,
    pub epoch_losses: Vec<f64>,
}

fn check_labels(
    data: &[(FeatureVector, usize)],
    num_classes: usize,
) -> Result<(), ModelError> {
    for (i, (_, y)) in data.iter().enumerate() {
        if *y >= num_classes {
            return Err(ModelError::LabelOutOfRange {
                index: i,
                label: *y,
                num_classes,
            });
        }
    }
    Ok(())
}

pub fn dataset_digest(data: &[(FeatureVector, usize)]) -> String {
    let mut bytes = Vec::new();
    for (fv, y) in data {
        for v in &fv.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(fv.true_len as u64).to_le_bytes());
        bytes.extend_from_slice(&(*y as u64).to_le_bytes());
    }
    util::sha256_hex(&bytes)
}

fn run_sgd(
    model: &ModelCheckpoint,
    data: &[(FeatureVector, usize)],
    hyper: &Hyperparams,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    hyper.check()?;
    check_labels(data, model.num_classes)?;
    let dims = model.dims();
    let mut params = model.parameters.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let refs: Vec<&FeatureVector> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let (xs, true_lens) = batch_arrays(model, &refs, 0).map_err(|e| match e {
                // Report the dataset index, not the position within the batch.
                ModelError::DimMismatch { index, expected, got } => ModelError::DimMismatch {
                    index: chunk[index],
                    expected,
                    got,
                },
                other => other,
            })?;
            let (loss, mut grad) = gru::loss_and_grad(&params, &dims, &xs, &true_lens, &labels);
            clip_global_norm(&mut grad, GRAD_CLIP);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= hyper.learning_rate * g;
            }
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }
    Ok((params, epoch_losses))
}

/// Minibatch SGD on cross-entropy. Keeps the input model's lineage, so a
/// freshly initialized model stays at level 0 (initial training).
pub fn train(
    model: &ModelCheckpoint,
    data: &[(FeatureVector, usize)],
    hyper: &Hyperparams,
) -> Result<Trained, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (parameters, epoch_losses) = run_sgd(model, data, hyper)?;
    let checkpoint = ModelCheckpoint {
        version_id: String::new(),
        parameters,
        train_provenance: Some(TrainProvenance {
            dataset_digest: dataset_digest(data),
            hyper: *hyper,
        }),
        ..model.clone()
    }
    .reversion();
    Ok(Trained {
        checkpoint,
        epoch_losses,
    })
}

/// Fully fine-tune: every parameter is updated (no frozen subsets), the
/// lineage level increments, and the parent version is recorded.
pub fn fine_tune(
    model: &ModelCheckpoint,
    silver_train: &[(FeatureVector, usize)],
    hyper: &Hyperparams,
) -> Result<Trained, ModelError> {
    if silver_train.is_empty() {
        return Err(ModelError::EmptySilverSet);
    }
    let (parameters, epoch_losses) = run_sgd(model, silver_train, hyper)?;
    let checkpoint = ModelCheckpoint {
        version_id: String::new(),
        lineage_level: model.lineage_level + 1,
        parent_version: Some(model.version_id.clone()),
        parameters,
        train_provenance: Some(TrainProvenance {
            dataset_digest: dataset_digest(silver_train),
            hyper: *hyper,
        }),
        ..model.clone()
    }
    .reversion();
    Ok(Trained {
        checkpoint,
        epoch_losses,
    })
}
