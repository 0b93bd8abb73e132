//! Concept-drift determination by windowed multi-threshold accumulation.
//!
//! Every prediction lands on the scoreboard of its predicted class (the true
//! class is unknown online). The prediction's confidence is scored against a
//! descending ladder of thresholds — the further it falls, the higher the
//! score — and scores accumulate over a count-based sliding window. A class
//! whose windowed sum reaches the judgment thresholds is drifting, mildly or
//! severely; when enough classes drift at once the whole model is declared
//! drifted and must be fine-tuned.
//!
//! Score-0 entries occupy window slots too, which makes the windowed sum a
//! throughput-independent drift-rate proxy and keeps a brute-force recount
//! of the retained log equal to `score_sum` at all times.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("unknown class {class_id} (scoreboard has {num_classes} classes)")]
    UnknownClass { class_id: usize, num_classes: usize },
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
    #[error("invalid threshold ladder: {0}")]
    BadLadder(String),
    #[error("invalid judgment config: {0}")]
    BadJudgment(String),
    #[error("scoreboard needs at least one class")]
    NoClasses,
}

/// Descending confidence thresholds with ascending scores: the lower the
/// confidence falls, the more it accumulates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLadder {
    pub rungs: Vec<(f64, u32)>,
}

impl Default for ThresholdLadder {
    fn default() -> Self {
        ThresholdLadder {
            rungs: vec![(0.9, 1), (0.7, 2), (0.5, 3)],
        }
    }
}

impl ThresholdLadder {
    pub fn check(&self) -> Result<(), DriftError> {
        if self.rungs.is_empty() {
            return Err(DriftError::BadLadder("ladder has no rungs".into()));
        }
        for (i, &(t, s)) in self.rungs.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) {
                return Err(DriftError::BadLadder(format!("threshold {t} outside (0, 1)")));
            }
            if s == 0 {
                return Err(DriftError::BadLadder("scores must be positive".into()));
            }
            if i > 0 {
                let (pt, ps) = self.rungs[i - 1];
                if t >= pt {
                    return Err(DriftError::BadLadder(
                        "thresholds must be strictly descending".into(),
                    ));
                }
                if s <= ps {
                    return Err(DriftError::BadLadder(
                        "scores must be strictly ascending".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Score of the deepest rung whose threshold the confidence falls below;
    /// 0 when the confidence is at or above the highest rung.
    pub fn score(&self, confidence: f64) -> u32 {
        let mut score = 0;
        for &(t, s) in &self.rungs {
            if confidence < t {
                score = s;
            } else {
                break;
            }
        }
        score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgmentConfig {
    /// Count-based sliding window per class.
    pub window_size: usize,
    pub mild_threshold: u64,
    pub severe_threshold: u64,
    /// Fraction of (observed) classes at Mild or above that declares the
    /// whole model drifted.
    pub model_drift_fraction: f64,
}

impl Default for JudgmentConfig {
    fn default() -> Self {
        JudgmentConfig {
            window_size: 200,
            mild_threshold: 60,
            severe_threshold: 150,
            model_drift_fraction: 0.5,
        }
    }
}

impl JudgmentConfig {
    pub fn check(&self) -> Result<(), DriftError> {
        if self.window_size < 1 {
            return Err(DriftError::BadJudgment("window_size must be >= 1".into()));
        }
        if self.mild_threshold == 0 || self.severe_threshold <= self.mild_threshold {
            return Err(DriftError::BadJudgment(
                "need severe_threshold > mild_threshold > 0".into(),
            ));
        }
        if !(self.model_drift_fraction > 0.0 && self.model_drift_fraction <= 1.0) {
            return Err(DriftError::BadJudgment(
                "model_drift_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DriftLevel {
    None,
    Mild,
    Severe,
}

/// Verdict for one class. `observed` is false for a class with no entries
/// in its window (never observed, or reset since).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVerdict {
    pub level: DriftLevel,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftVerdict {
    /// Indexed by class id.
    pub per_class: Vec<ClassVerdict>,
    pub model_drifted: bool,
    /// Classes at Mild or above over observed classes; 0 when nothing has
    /// been observed.
    pub drifted_fraction: f64,
}

impl DriftVerdict {
    pub fn any_severe(&self) -> bool {
        self.per_class.iter().any(|c| c.level == DriftLevel::Severe)
    }

    pub fn all_none(&self) -> bool {
        self.per_class.iter().all(|c| c.level == DriftLevel::None)
    }
}

#[derive(Debug, Clone, Default)]
struct ClassWindow {
    log: VecDeque<(i64, u32)>,
    score_sum: u64,
}

/// Per-class accumulation state. Single writer; clone for concurrent reads.
#[derive(Debug, Clone)]
pub struct DriftScoreboard {
    classes: Vec<ClassWindow>,
    ladder: ThresholdLadder,
    judgment: JudgmentConfig,
}

impl DriftScoreboard {
    pub fn new(
        num_classes: usize,
        ladder: ThresholdLadder,
        judgment: JudgmentConfig,
    ) -> Result<Self, DriftError> {
        if num_classes == 0 {
            return Err(DriftError::NoClasses);
        }
        ladder.check()?;
        judgment.check()?;
        Ok(DriftScoreboard {
            classes: vec![ClassWindow::default(); num_classes],
            ladder,
            judgment,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ladder(&self) -> &ThresholdLadder {
        &self.ladder
    }

    pub fn judgment(&self) -> &JudgmentConfig {
        &self.judgment
    }

    fn class(&self, class_id: usize) -> Result<&ClassWindow, DriftError> {
        self.classes.get(class_id).ok_or(DriftError::UnknownClass {
            class_id,
            num_classes: self.classes.len(),
        })
    }

    /// Record one prediction for its (predicted) class. Score-0 entries are
    /// pushed too; the oldest entry falls out once the window is full.
    pub fn observe(
        &mut self,
        class_id: usize,
        max_confidence: f64,
        ts_us: i64,
    ) -> Result<(), DriftError> {
        if !(0.0..=1.0).contains(&max_confidence) {
            return Err(DriftError::BadConfidence(max_confidence));
        }
        let num_classes = self.classes.len();
        let window_size = self.judgment.window_size;
        let score = self.ladder.score(max_confidence);
        let class = self
            .classes
            .get_mut(class_id)
            .ok_or(DriftError::UnknownClass { class_id, num_classes })?;
        class.log.push_back((ts_us, score));
        class.score_sum += score as u64;
        if class.log.len() > window_size {
            let (_, evicted) = class.log.pop_front().expect("window non-empty");
            class.score_sum -= evicted as u64;
        }
        Ok(())
    }

    pub fn score_sum(&self, class_id: usize) -> Result<u64, DriftError> {
        Ok(self.class(class_id)?.score_sum)
    }

    /// The retained (ts, score) window, oldest first. This is what a
    /// brute-force recount replays.
    pub fn window_log(&self, class_id: usize) -> Result<Vec<(i64, u32)>, DriftError> {
        Ok(self.class(class_id)?.log.iter().copied().collect())
    }

    pub fn class_verdict(&self, class_id: usize) -> Result<ClassVerdict, DriftError> {
        let class = self.class(class_id)?;
        if class.log.is_empty() {
            return Ok(ClassVerdict {
                level: DriftLevel::None,
                observed: false,
            });
        }
        let level = if class.score_sum >= self.judgment.severe_threshold {
            DriftLevel::Severe
        } else if class.score_sum >= self.judgment.mild_threshold {
            DriftLevel::Mild
        } else {
            DriftLevel::None
        };
        Ok(ClassVerdict { level, observed: true })
    }

    /// Whole-model determination: the fraction of observed classes at Mild
    /// or above, compared against the configured fraction.
    pub fn model_verdict(&self) -> DriftVerdict {
        let per_class: Vec<ClassVerdict> = (0..self.classes.len())
            .map(|c| self.class_verdict(c).expect("class id in range"))
            .collect();
        let observed = per_class.iter().filter(|c| c.observed).count();
        let drifted = per_class
            .iter()
            .filter(|c| c.observed && c.level >= DriftLevel::Mild)
            .count();
        let drifted_fraction = if observed > 0 {
            drifted as f64 / observed as f64
        } else {
            0.0
        };
        DriftVerdict {
            per_class,
            model_drifted: drifted_fraction >= self.judgment.model_drift_fraction
                && observed > 0,
            drifted_fraction,
        }
    }

    /// Clear one class's window, e.g. after the model evolved.
    pub fn reset_class(&mut self, class_id: usize) -> Result<(), DriftError> {
        let num_classes = self.classes.len();
        let class = self
            .classes
            .get_mut(class_id)
            .ok_or(DriftError::UnknownClass { class_id, num_classes })?;
        class.log.clear();
        class.score_sum = 0;
        Ok(())
    }

    pub fn reset_all(&mut self) {
        for class in &mut self.classes {
            class.log.clear();
            class.score_sum = 0;
        }
    }

    pub fn snapshot(&self) -> ScoreboardSnapshot {
        ScoreboardSnapshot {
            classes: (0..self.classes.len())
                .map(|c| {
                    let v = self.class_verdict(c).expect("class id in range");
                    ClassSnapshot {
                        score_sum: self.classes[c].score_sum,
                        window_len: self.classes[c].log.len(),
                        level: v.level,
                        observed: v.observed,
                    }
                })
                .collect(),
            ladder: self.ladder.clone(),
            judgment: self.judgment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSnapshot {
    pub score_sum: u64,
    pub window_len: usize,
    pub level: DriftLevel,
    pub observed: bool,
}

/// JSON-exportable scoreboard state plus a config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreboardSnapshot {
    pub classes: Vec<ClassSnapshot>,
    pub ladder: ThresholdLadder,
    pub judgment: JudgmentConfig,
}
