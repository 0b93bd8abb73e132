//! Silver sampling: harvesting high-confidence predictions as pseudo-labeled
//! fine-tuning data.
//!
//! A prediction whose maximum softmax confidence strictly exceeds the
//! three-sigma threshold (0.997 by default) is adopted as a silver sample —
//! labeled by the classifier itself rather than by hand. Samples accumulate
//! in per-stage pools that are later split 80/20 for fine-tuning and
//! held-out measurement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FeatureConfig, FeatureVector, FlowError};
use crate::model::ConfidenceVector;
use crate::util;

/// Default confidence cutoff: the three-sigma tail of an assumed-normal
/// confidence distribution.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.997;

#[derive(Debug, Error)]
pub enum SilverError {
    #[error("confidence threshold must be in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("sample stage {sample} does not match pool stage {pool}")]
    StageMismatch { sample: u32, pool: u32 },
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("silver pool is empty")]
    EmptyPool,
    #[error("total_classified {total} is less than pool size {pool}")]
    BadTotal { total: usize, pool: usize },
    #[error(transparent)]
    File(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaidaConfig {
    pub confidence_threshold: f64,
    /// Informational only: the sigma level the threshold was derived from.
    pub sigma_level: f64,
}

impl Default for LaidaConfig {
    fn default() -> Self {
        LaidaConfig {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            sigma_level: 3.0,
        }
    }
}

impl LaidaConfig {
    pub fn check(&self) -> Result<(), SilverError> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(SilverError::BadThreshold(self.confidence_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverSample {
    pub features: FeatureVector,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub harvested_ts_us: i64,
    pub stage_id: u32,
    pub model_version: String,
}

/// Keep a prediction as a silver sample iff its confidence is strictly
/// above the threshold. The decision depends on nothing else.
pub fn harvest(
    conf: &ConfidenceVector,
    features: &FeatureVector,
    cfg: &LaidaConfig,
    stage_id: u32,
    model_version: &str,
    ts_us: i64,
) -> Option<SilverSample> {
    if conf.max_prob > cfg.confidence_threshold {
        Some(SilverSample {
            features: features.clone(),
            pseudo_label: conf.argmax,
            confidence: conf.max_prob,
            harvested_ts_us: ts_us,
            stage_id,
            model_version: model_version.to_owned(),
        })
    } else {
        None
    }
}

/// All silver samples gathered in one classification stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverPool {
    pub stage_id: u32,
    pub samples: Vec<SilverSample>,
    pub per_class_counts: BTreeMap<usize, u64>,
}

impl SilverPool {
    pub fn new(stage_id: u32) -> Self {
        SilverPool {
            stage_id,
            samples: Vec::new(),
            per_class_counts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn add(&mut self, sample: SilverSample) -> Result<(), SilverError> {
        if sample.stage_id != self.stage_id {
            return Err(SilverError::StageMismatch {
                sample: sample.stage_id,
                pool: self.stage_id,
            });
        }
        *self.per_class_counts.entry(sample.pseudo_label).or_insert(0) += 1;
        self.samples.push(sample);
        Ok(())
    }

    /// Fraction of an observed stream that ended up in this pool.
    pub fn silver_rate(&self, total_classified: usize) -> Result<f64, SilverError> {
        if total_classified < self.len() {
            return Err(SilverError::BadTotal {
                total: total_classified,
                pool: self.len(),
            });
        }
        if total_classified == 0 {
            return Ok(0.0);
        }
        Ok(self.len() as f64 / total_classified as f64)
    }

    /// Stratified seed-deterministic split. Every class with at least two
    /// samples contributes at least one sample to each side; a singleton
    /// class goes entirely to the training side.
    pub fn split(
        &self,
        train_fraction: f64,
        seed: u64,
    ) -> Result<(Vec<SilverSample>, Vec<SilverSample>), SilverError> {
        let labels: Vec<usize> = self.samples.iter().map(|s| s.pseudo_label).collect();
        let (train_idx, test_idx) = stratified_indices(&labels, train_fraction, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].clone()).collect();
        Ok((pick(&train_idx), pick(&test_idx)))
    }

    /// Pseudo-labeled training pairs for fine-tuning.
    pub fn as_labeled(samples: &[SilverSample]) -> Vec<(FeatureVector, usize)> {
        samples
            .iter()
            .map(|s| (s.features.clone(), s.pseudo_label))
            .collect()
    }
}

/// Class-stratified index split, deterministic in the seed. Returned index
/// lists preserve input order. Classes with one member go entirely to the
/// training side; larger classes land within one sample of the fraction on
/// both sides.
pub fn stratified_indices(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), SilverError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SilverError::BadFraction(train_fraction));
    }
    if labels.is_empty() {
        return Err(SilverError::EmptyPool);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (&class, indices) in &by_class {
        let n = indices.len();
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix_seed(&[seed, class as u64]));
        shuffled.shuffle(&mut rng);
        let take = if n == 1 {
            1
        } else {
            ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
        };
        train_idx.extend_from_slice(&shuffled[..take]);
        test_idx.extend_from_slice(&shuffled[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((train_idx, test_idx))
}

/// One pool line on disk: the dataset schema (lengths are de-normalized
/// from the stored features) plus the silver-specific fields.
#[derive(Debug, Serialize, Deserialize)]
struct PoolLine {
    lengths: Vec<i32>,
    ts: f64,
    pseudo_label: usize,
    confidence: f64,
    model_version: String,
    stage_id: u32,
}

/// Persist a pool as NDJSON, one sample per line.
pub fn write_pool(pool: &SilverPool, path: &Path, feat: &FeatureConfig) -> Result<(), SilverError> {
    let mut buf = Vec::new();
    for s in &pool.samples {
        let line = PoolLine {
            lengths: s.features.to_lengths(feat.norm_divisor),
            ts: s.harvested_ts_us as f64 / 1e6,
            pseudo_label: s.pseudo_label,
            confidence: s.confidence,
            model_version: s.model_version.clone(),
            stage_id: s.stage_id,
        };
        serde_json::to_writer(&mut buf, &line).expect("pool line serializes");
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(FlowError::Io)?;
    Ok(())
}

/// Load a pool written by [`write_pool`]. The feature configuration must
/// match the one used during the harvesting run.
pub fn read_pool(path: &Path, feat: &FeatureConfig) -> Result<SilverPool, SilverError> {
    let text = std::fs::read_to_string(path).map_err(FlowError::Io)?;
    let mut pool: Option<SilverPool> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PoolLine = serde_json::from_str(line).map_err(|e| FlowError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let features = FeatureVector::from_lengths(&parsed.lengths, feat.seq_len, feat.norm_divisor)?;
        let sample = SilverSample {
            features,
            pseudo_label: parsed.pseudo_label,
            confidence: parsed.confidence,
            harvested_ts_us: (parsed.ts * 1e6).round() as i64,
            stage_id: parsed.stage_id,
            model_version: parsed.model_version,
        };
        let pool = pool.get_or_insert_with(|| SilverPool::new(sample.stage_id));
        pool.add(sample)?;
    }
    Ok(pool.unwrap_or_else(|| SilverPool::new(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn conf(probs: Vec<f64>) -> ConfidenceVector {
        ConfidenceVector::from_probs(probs)
    }

    fn feat() -> FeatureVector {
        FeatureVector::from_lengths(&[100, -200], 4, 1500).unwrap()
    }

    fn sample(class: usize, stage: u32) -> SilverSample {
        SilverSample {
            features: feat(),
            pseudo_label: class,
            confidence: 0.999,
            harvested_ts_us: 1_000_000,
            stage_id: stage,
            model_version: "L0-test".into(),
        }
    }

    #[test]
    fn harvest_keeps_only_strictly_above_threshold() {
        let cfg = LaidaConfig::default();
        let s = harvest(&conf(vec![0.998, 0.001, 0.001]), &feat(), &cfg, 1, "m", 7).unwrap();
        assert_eq!(s.pseudo_label, 0);
        assert_eq!(s.confidence, 0.998);
        assert_eq!(s.stage_id, 1);

        // exactly at the threshold: rejected
        assert!(harvest(&conf(vec![0.997, 0.002, 0.001]), &feat(), &cfg, 1, "m", 7).is_none());
        assert!(harvest(&conf(vec![0.5, 0.3, 0.2]), &feat(), &cfg, 1, "m", 7).is_none());
    }

    #[test]
    fn pool_counts_track_additions() {
        let mut pool = SilverPool::new(2);
        assert!(pool.per_class_counts.is_empty());
        for _ in 0..3 {
            pool.add(sample(2, 2)).unwrap();
        }
        pool.add(sample(0, 2)).unwrap();
        assert_eq!(pool.per_class_counts[&2], 3);
        assert_eq!(pool.per_class_counts[&0], 1);

        let err = pool.add(sample(1, 5)).unwrap_err();
        assert!(matches!(err, SilverError::StageMismatch { sample: 5, pool: 2 }));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let mut pool = SilverPool::new(0);
        for i in 0..100 {
            pool.add(sample(i % 2, 0)).unwrap();
        }
        let (train, test) = pool.split(0.8, 42).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for side in [&train, &test] {
            let c0 = side.iter().filter(|s| s.pseudo_label == 0).count();
            assert_eq!(c0 * 2, side.len()); // perfectly stratified here
        }
        let (train2, test2) = pool.split(0.8, 42).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = pool.split(0.8, 43).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let mut pool = SilverPool::new(0);
        pool.add(sample(0, 0)).unwrap();
        for _ in 0..10 {
            pool.add(sample(1, 0)).unwrap();
        }
        let (train, test) = pool.split(0.8, 1).unwrap();
        assert_eq!(train.iter().filter(|s| s.pseudo_label == 0).count(), 1);
        assert_eq!(test.iter().filter(|s| s.pseudo_label == 0).count(), 0);
        // class 1 still contributes to both sides
        assert!(test.iter().any(|s| s.pseudo_label == 1));
    }

    #[test]
    fn split_rejects_empty_and_bad_fraction() {
        let pool = SilverPool::new(0);
        assert!(matches!(pool.split(0.8, 1), Err(SilverError::EmptyPool)));
        let mut pool = SilverPool::new(0);
        pool.add(sample(0, 0)).unwrap();
        assert!(matches!(pool.split(1.0, 1), Err(SilverError::BadFraction(_))));
    }

    #[test]
    fn silver_rate_is_a_plain_ratio() {
        let mut pool = SilverPool::new(0);
        for _ in 0..4332 {
            pool.add(sample(0, 0)).unwrap();
        }
        assert!((pool.silver_rate(10_000).unwrap() - 0.4332).abs() < 1e-12);
        assert_eq!(SilverPool::new(0).silver_rate(100).unwrap(), 0.0);
        assert_eq!(SilverPool::new(0).silver_rate(0).unwrap(), 0.0);
        assert!(pool.silver_rate(10).is_err());
    }

    #[test]
    fn pool_file_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("pool.ndjson");
        let feat_cfg = FeatureConfig { seq_len: 4, norm_divisor: 1500 };
        let mut pool = SilverPool::new(3);
        for i in 0..5 {
            pool.add(sample(i % 3, 3)).unwrap();
        }
        write_pool(&pool, &path, &feat_cfg).unwrap();
        let loaded = read_pool(&path, &feat_cfg).unwrap();
        assert_eq!(pool, loaded);

        // write/load/write is byte-stable
        let path2 = dir.path().join("pool2.ndjson");
        write_pool(&loaded, &path2, &feat_cfg).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
