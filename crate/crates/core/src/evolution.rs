//! The self-evolving lifecycle: classify a stage, harvest silver samples,
//! judge drift, fully fine-tune, and carry the evolved model into the next
//! stage.
//!
//! A stage never mutates its model — all evolution happens between stages in
//! [`evolve`], which splits the stage's silver pool 80/20, fine-tunes on the
//! training side, measures the held-out side, optionally measures forgetting
//! on the initial test set, and resets the drift scoreboard for the new
//! model. Every artifact of a lifecycle run (checkpoints, pools, reports,
//! scoreboard snapshots) is persisted under one run directory so a run can
//! be audited or replayed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{DriftError, DriftScoreboard, DriftVerdict, JudgmentConfig, ThresholdLadder};
use crate::flow::{DatasetRecord, FeatureConfig, FeatureVector, FlowError, LabelDict};
use crate::model::{
    self, evaluate, fine_tune, save_checkpoint, Hyperparams, Metrics, ModelCheckpoint, ModelError,
};
use crate::silver::{self, harvest, LaidaConfig, SilverError, SilverPool};
use crate::util;

/// Train-side share of each silver pool.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("stage stream is empty")]
    EmptyStream,
    #[error("lifecycle needs at least one stage")]
    NoStages,
    #[error("duplicate stage id {0} in lifecycle")]
    DuplicateStageId(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Silver(#[from] SilverError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    /// Evolve after every stage regardless of the verdict.
    Forced,
    /// Evolve only when the verdict calls for it.
    VerdictDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u32,
    pub evolution_mode: EvolutionMode,
    pub laida: LaidaConfig,
    pub ladder: ThresholdLadder,
    pub judgment: JudgmentConfig,
    pub hyper: Hyperparams,
    pub train_fraction: f64,
}

impl StageConfig {
    pub fn new(stage_id: u32, evolution_mode: EvolutionMode) -> Self {
        StageConfig {
            stage_id,
            evolution_mode,
            laida: LaidaConfig::default(),
            ladder: ThresholdLadder::default(),
            judgment: JudgmentConfig::default(),
            hyper: Hyperparams::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

/// One item of a stage stream: features, optional ground truth, timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct StageItem {
    pub features: FeatureVector,
    pub label: Option<usize>,
    pub ts_us: i64,
}

/// What happened in one stage, in the shape of one experiment-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_id: u32,
    pub model_version_in: String,
    pub model_version_out: String,
    pub n_classified: usize,
    pub silver_count: usize,
    pub silver_rate: f64,
    pub verdict: DriftVerdict,
    /// Metrics over the labeled part of the stream, when any.
    pub metrics_labeled: Option<Metrics>,
    /// The evolved model on the retained initial test set.
    pub forgetting_metrics: Option<Metrics>,
    pub evolution: Option<EvolutionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub fired: bool,
    pub skipped_reason: Option<String>,
    pub silver_train_count: usize,
    pub silver_test_count: usize,
    /// New model on its own fine-tuning samples.
    pub silver_train_metrics: Option<Metrics>,
    /// New model on the held-out 20% of the pool.
    pub silver_test_metrics: Option<Metrics>,
}

impl EvolutionRecord {
    fn skipped(reason: &str) -> Self {
        EvolutionRecord {
            fired: false,
            skipped_reason: Some(reason.to_owned()),
            silver_train_count: 0,
            silver_test_count: 0,
            silver_train_metrics: None,
            silver_test_metrics: None,
        }
    }
}

/// Classify a whole stage stream: every item is predicted once, feeding the
/// silver pool and the drift scoreboard. The model is never mutated here.
pub fn run_stage(
    model: &ModelCheckpoint,
    items: &[StageItem],
    cfg: &StageConfig,
) -> Result<(StageReport, SilverPool, DriftScoreboard), EvolutionError> {
    let board = DriftScoreboard::new(model.num_classes, cfg.ladder.clone(), cfg.judgment)?;
    run_stage_with_board(model, items, cfg, board)
}

/// [`run_stage`] continuing an existing scoreboard, so accumulation windows
/// survive stage boundaries until an evolution resets them.
pub fn run_stage_with_board(
    model: &ModelCheckpoint,
    items: &[StageItem],
    cfg: &StageConfig,
    mut board: DriftScoreboard,
) -> Result<(StageReport, SilverPool, DriftScoreboard), EvolutionError> {
    if items.is_empty() {
        return Err(EvolutionError::EmptyStream);
    }
    cfg.laida.check()?;
    let features: Vec<FeatureVector> = items.iter().map(|i| i.features.clone()).collect();
    let confs = model::predict_batch(model, &features)?;

    let mut pool = SilverPool::new(cfg.stage_id);
    let mut labeled_pairs: Vec<(usize, usize)> = Vec::new();
    for (item, conf) in items.iter().zip(&confs) {
        board.observe(conf.argmax, conf.max_prob, item.ts_us)?;
        if let Some(sample) = harvest(
            conf,
            &item.features,
            &cfg.laida,
            cfg.stage_id,
            &model.version_id,
            item.ts_us,
        ) {
            pool.add(sample)?;
        }
        if let Some(label) = item.label {
            if label >= model.num_classes {
                return Err(ModelError::LabelOutOfRange {
                    index: labeled_pairs.len(),
                    label,
                    num_classes: model.num_classes,
                }
                .into());
            }
            labeled_pairs.push((label, conf.argmax));
        }
    }

    let metrics_labeled = if labeled_pairs.is_empty() {
        None
    } else {
        Some(model::metrics_from_confusion(
            &model::metrics::confusion_from_pairs(model.num_classes, labeled_pairs),
        ))
    };

    let verdict = board.model_verdict();
    let report = StageReport {
        stage_id: cfg.stage_id,
        model_version_in: model.version_id.clone(),
        model_version_out: model.version_id.clone(),
        n_classified: items.len(),
        silver_count: pool.len(),
        silver_rate: pool.silver_rate(items.len())?,
        verdict,
        metrics_labeled,
        forgetting_metrics: None,
        evolution: None,
    };
    Ok((report, pool, board))
}

/// The complete evolution firing rule: forced mode, any Severe class, or a
/// whole-model drift verdict — nothing else.
pub fn should_evolve(mode: EvolutionMode, verdict: &DriftVerdict) -> bool {
    mode == EvolutionMode::Forced || verdict.any_severe() || verdict.model_drifted
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    /// The evolved checkpoint, or a clone of the input when nothing fired.
    pub model: ModelCheckpoint,
    pub fired: bool,
    pub record: EvolutionRecord,
    pub forgetting_metrics: Option<Metrics>,
}

/// Fully fine-tune on a stage's silver pool (80/20 split) if the firing rule
/// says so. An empty pool downgrades to a skip-with-warning rather than an
/// error so a lifecycle can continue with the stale model.
pub fn evolve(
    model: &ModelCheckpoint,
    pool: &SilverPool,
    cfg: &StageConfig,
    verdict: &DriftVerdict,
    board: Option<&mut DriftScoreboard>,
    initial_test: Option<&[(FeatureVector, usize)]>,
) -> Result<EvolveOutcome, EvolutionError> {
    if !should_evolve(cfg.evolution_mode, verdict) {
        return Ok(EvolveOutcome {
            model: model.clone(),
            fired: false,
            record: EvolutionRecord::skipped("verdict below evolution threshold"),
            forgetting_metrics: None,
        });
    }
    if pool.is_empty() {
        return Ok(EvolveOutcome {
            model: model.clone(),
            fired: false,
            record: EvolutionRecord::skipped("silver pool empty; model continues unevolved"),
            forgetting_metrics: None,
        });
    }

    let split_seed = util::mix_seed(&[cfg.hyper.seed, cfg.stage_id as u64]);
    let (train_samples, test_samples) = pool.split(cfg.train_fraction, split_seed)?;
    let train_set = SilverPool::as_labeled(&train_samples);
    let test_set = SilverPool::as_labeled(&test_samples);

    let trained = fine_tune(model, &train_set, &cfg.hyper)?;
    let new_model = trained.checkpoint;

    let silver_train_metrics = Some(evaluate(&new_model, &train_set)?);
    let silver_test_metrics = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&new_model, &test_set)?)
    };
    let forgetting_metrics = match initial_test {
        Some(set) if !set.is_empty() => Some(evaluate(&new_model, set)?),
        _ => None,
    };
    if let Some(board) = board {
        board.reset_all();
    }

    Ok(EvolveOutcome {
        model: new_model,
        fired: true,
        record: EvolutionRecord {
            fired: true,
            skipped_reason: None,
            silver_train_count: train_set.len(),
            silver_test_count: test_set.len(),
            silver_train_metrics,
            silver_test_metrics,
        },
        forgetting_metrics,
    })
}

/// Side inputs and persistence settings for a lifecycle run.
#[derive(Debug, Clone, Default)]
pub struct LifecycleOptions {
    /// Persist artifacts under this directory when set.
    pub run_dir: Option<PathBuf>,
    /// Held-out initial test set for forgetting checks.
    pub initial_test: Option<Vec<(FeatureVector, usize)>>,
    /// Feature parameters used when persisting pools.
    pub feature: Option<FeatureConfig>,
}

/// Run stages in order; each stage's evolution output feeds the next stage.
/// One drift scoreboard is carried across stages and reset whenever an
/// evolution fires (or rebuilt if a stage changes the drift config).
pub fn run_lifecycle(
    initial: &ModelCheckpoint,
    stages: &[(Vec<StageItem>, StageConfig)],
    opts: &LifecycleOptions,
) -> Result<Vec<StageReport>, EvolutionError> {
    if stages.is_empty() {
        return Err(EvolutionError::NoStages);
    }
    let mut seen = std::collections::HashSet::new();
    for (_, cfg) in stages {
        if !seen.insert(cfg.stage_id) {
            return Err(EvolutionError::DuplicateStageId(cfg.stage_id));
        }
    }

    let dirs = match &opts.run_dir {
        Some(root) => Some(RunDirs::create(root)?),
        None => None,
    };
    if let Some(d) = &dirs {
        save_checkpoint(initial, &d.checkpoints.join("initial.devo"))?;
    }
    let feature = opts.feature.unwrap_or_default();

    let mut current = initial.clone();
    let mut board: Option<DriftScoreboard> = None;
    let mut reports = Vec::with_capacity(stages.len());

    for (items, cfg) in stages {
        let stage_board = match board.take() {
            Some(b) if b.ladder() == &cfg.ladder && b.judgment() == &cfg.judgment => b,
            _ => DriftScoreboard::new(current.num_classes, cfg.ladder.clone(), cfg.judgment)?,
        };
        let (mut report, pool, mut stage_board) =
            run_stage_with_board(&current, items, cfg, stage_board)?;

        if let Some(d) = &dirs {
            let snapshot = stage_board.snapshot();
            write_json(&d.scoreboards.join(stage_file(cfg.stage_id, "json")), &snapshot)?;
            silver::write_pool(&pool, &d.pools.join(stage_file(cfg.stage_id, "ndjson")), &feature)?;
        }

        let outcome = evolve(
            &current,
            &pool,
            cfg,
            &report.verdict,
            Some(&mut stage_board),
            opts.initial_test.as_deref(),
        )?;
        report.model_version_out = outcome.model.version_id.clone();
        report.forgetting_metrics = outcome.forgetting_metrics.clone();
        report.evolution = Some(outcome.record.clone());

        if let Some(d) = &dirs {
            write_json(&d.reports.join(stage_file(cfg.stage_id, "json")), &report)?;
            if outcome.fired {
                save_checkpoint(&outcome.model, &d.checkpoints.join(stage_file(cfg.stage_id, "devo")))?;
            }
        }

        current = outcome.model;
        board = Some(stage_board);
        reports.push(report);
    }
    Ok(reports)
}

fn stage_file(stage_id: u32, ext: &str) -> String {
    format!("stage_{stage_id:03}.{ext}")
}

struct RunDirs {
    checkpoints: PathBuf,
    pools: PathBuf,
    reports: PathBuf,
    scoreboards: PathBuf,
}

impl RunDirs {
    fn create(root: &Path) -> std::io::Result<Self> {
        let dirs = RunDirs {
            checkpoints: root.join("checkpoints"),
            pools: root.join("pools"),
            reports: root.join("reports"),
            scoreboards: root.join("scoreboards"),
        };
        for d in [&dirs.checkpoints, &dirs.pools, &dirs.reports, &dirs.scoreboards] {
            std::fs::create_dir_all(d)?;
        }
        Ok(dirs)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text)
}

/// Cross-product evaluation grid: `grid[m][s]` is model `m` on set `s`.
pub fn compare_models(
    models: &[ModelCheckpoint],
    sets: &[Vec<(FeatureVector, usize)>],
) -> Result<Vec<Vec<Metrics>>, EvolutionError> {
    let mut grid = Vec::with_capacity(models.len());
    for model in models {
        let mut row = Vec::with_capacity(sets.len());
        for set in sets {
            row.push(evaluate(model, set)?);
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Fraction of a stream a model would harvest as silver samples.
pub fn silver_rate_of(
    model: &ModelCheckpoint,
    features: &[FeatureVector],
    laida: &LaidaConfig,
) -> Result<f64, EvolutionError> {
    laida.check()?;
    if features.is_empty() {
        return Ok(0.0);
    }
    let confs = model::predict_batch(model, features)?;
    let n = confs
        .iter()
        .filter(|c| c.max_prob > laida.confidence_threshold)
        .count();
    Ok(n as f64 / features.len() as f64)
}

/// Stage items from dataset records: labels resolved through the
/// dictionary, timestamps taken from the record (or the line index).
pub fn stage_items(
    records: &[DatasetRecord],
    dict: &LabelDict,
    feat: &FeatureConfig,
) -> Result<Vec<StageItem>, FlowError> {
    let labels = dict.resolve(records)?;
    records
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (rec, label))| {
            Ok(StageItem {
                features: rec.to_feature(feat)?,
                label,
                ts_us: rec.ts.map(|s| (s * 1e6).round() as i64).unwrap_or(i as i64),
            })
        })
        .collect()
}

/// Fully labeled training pairs from dataset records; any unlabeled record
/// is an error naming its line.
pub fn labeled_set(
    records: &[DatasetRecord],
    dict: &LabelDict,
    feat: &FeatureConfig,
) -> Result<Vec<(FeatureVector, usize)>, FlowError> {
    let labels = dict.resolve(records)?;
    records
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (rec, label))| {
            let label = label.ok_or(FlowError::Parse {
                line: i + 1,
                reason: "record has no label".into(),
            })?;
            Ok((rec.to_feature(feat)?, label))
        })
        .collect()
}

/// Stratified split of a labeled set, for carving held-out test data.
pub fn split_labeled(
    data: &[(FeatureVector, usize)],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<(FeatureVector, usize)>, Vec<(FeatureVector, usize)>), SilverError> {
    let labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    let (train_idx, test_idx) = silver::stratified_indices(&labels, train_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect();
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftLevel;
    use crate::model::{init_model, Arch};

    fn fv(values: Vec<f64>) -> FeatureVector {
        let true_len = values.len();
        FeatureVector { values, true_len }
    }

    fn arch() -> Arch {
        Arch { hidden_dim: 8, seq_len: 6 }
    }

    fn toy_items(n_per_class: usize) -> Vec<StageItem> {
        let mut items = Vec::new();
        for i in 0..n_per_class {
            let w = (i as f64 * 0.37).sin() * 0.1;
            items.push(StageItem {
                features: fv(vec![0.6 + w, 0.5, 0.7, 0.6, 0.5, 0.6]),
                label: Some(0),
                ts_us: (2 * i) as i64,
            });
            items.push(StageItem {
                features: fv(vec![-0.6 - w, -0.5, -0.7, -0.6, -0.5, -0.6]),
                label: Some(1),
                ts_us: (2 * i + 1) as i64,
            });
        }
        items
    }

    fn trained_toy_model() -> ModelCheckpoint {
        let data: Vec<(FeatureVector, usize)> = toy_items(60)
            .into_iter()
            .map(|it| (it.features, it.label.unwrap()))
            .collect();
        let m0 = init_model(2, arch(), 3, None, 0).unwrap();
        let hyper = Hyperparams { epochs: 80, batch_size: 30, learning_rate: 0.3, seed: 5 };
        model::train(&m0, &data, &hyper).unwrap().checkpoint
    }

    #[test]
    fn run_stage_classifies_everything_without_mutating() {
        let model = trained_toy_model();
        let params_before = model.parameters.clone();
        let items = toy_items(30);
        let cfg = StageConfig::new(1, EvolutionMode::Forced);
        let (report, pool, board) = run_stage(&model, &items, &cfg).unwrap();
        assert_eq!(model.parameters, params_before);
        assert_eq!(report.n_classified, items.len());
        assert_eq!(report.silver_count, pool.len());
        assert!((report.silver_rate - pool.len() as f64 / items.len() as f64).abs() < 1e-12);
        assert_eq!(report.model_version_in, report.model_version_out);
        let m = report.metrics_labeled.as_ref().unwrap();
        assert!(m.macro_f1 > 0.99, "toy model should classify its stage, got {}", m.macro_f1);
        // scoreboard window lengths bounded by per-class observations
        for c in 0..2 {
            assert!(board.window_log(c).unwrap().len() <= items.len());
        }
    }

    #[test]
    fn run_stage_metrics_absent_for_unlabeled_stream() {
        let model = trained_toy_model();
        let items: Vec<StageItem> = toy_items(10)
            .into_iter()
            .map(|mut it| {
                it.label = None;
                it
            })
            .collect();
        let cfg = StageConfig::new(0, EvolutionMode::Forced);
        let (report, pool, _) = run_stage(&model, &items, &cfg).unwrap();
        assert!(report.metrics_labeled.is_none());
        assert!(pool.len() > 0, "confident toy model should harvest silver");
    }

    #[test]
    fn run_stage_rejects_empty_and_bad_dims() {
        let model = trained_toy_model();
        let cfg = StageConfig::new(0, EvolutionMode::Forced);
        assert!(matches!(
            run_stage(&model, &[], &cfg),
            Err(EvolutionError::EmptyStream)
        ));
        let mut items = toy_items(3);
        items[2].features = fv(vec![0.5; 4]);
        let err = run_stage(&model, &items, &cfg).unwrap_err();
        assert!(matches!(
            err,
            EvolutionError::Model(ModelError::DimMismatch { index: 2, .. })
        ));
    }

    #[test]
    fn firing_rule_is_exact() {
        let quiet = DriftVerdict {
            per_class: vec![crate::drift::ClassVerdict { level: DriftLevel::None, observed: true }; 2],
            model_drifted: false,
            drifted_fraction: 0.0,
        };
        let one_severe = DriftVerdict {
            per_class: vec![
                crate::drift::ClassVerdict { level: DriftLevel::Severe, observed: true },
                crate::drift::ClassVerdict { level: DriftLevel::None, observed: true },
            ],
            model_drifted: false,
            drifted_fraction: 0.5,
        };
        let model_wide = DriftVerdict {
            per_class: vec![crate::drift::ClassVerdict { level: DriftLevel::Mild, observed: true }; 2],
            model_drifted: true,
            drifted_fraction: 1.0,
        };
        assert!(should_evolve(EvolutionMode::Forced, &quiet));
        assert!(!should_evolve(EvolutionMode::VerdictDriven, &quiet));
        assert!(should_evolve(EvolutionMode::VerdictDriven, &one_severe));
        assert!(should_evolve(EvolutionMode::VerdictDriven, &model_wide));
        // mild classes without a model-wide verdict do not fire
        let mild_only = DriftVerdict {
            per_class: vec![
                crate::drift::ClassVerdict { level: DriftLevel::Mild, observed: true },
                crate::drift::ClassVerdict { level: DriftLevel::None, observed: true },
            ],
            model_drifted: false,
            drifted_fraction: 0.5,
        };
        assert!(!should_evolve(EvolutionMode::VerdictDriven, &mild_only));
    }

    #[test]
    fn evolve_advances_lineage_and_reports() {
        let model = trained_toy_model();
        let items = toy_items(40);
        let mut cfg = StageConfig::new(1, EvolutionMode::Forced);
        cfg.hyper = Hyperparams { epochs: 10, batch_size: 32, learning_rate: 0.1, seed: 2 };
        let (report, pool, mut board) = run_stage(&model, &items, &cfg).unwrap();
        assert!(pool.len() >= 10);
        let initial_test: Vec<(FeatureVector, usize)> = toy_items(5)
            .into_iter()
            .map(|it| (it.features, it.label.unwrap()))
            .collect();
        let outcome = evolve(
            &model,
            &pool,
            &cfg,
            &report.verdict,
            Some(&mut board),
            Some(&initial_test),
        )
        .unwrap();
        assert!(outcome.fired);
        assert_eq!(outcome.model.lineage_level, 1);
        assert_eq!(outcome.model.parent_version.as_deref(), Some(model.version_id.as_str()));
        let rec = &outcome.record;
        assert_eq!(rec.silver_train_count + rec.silver_test_count, pool.len());
        assert!(rec.silver_test_metrics.is_some());
        assert!(outcome.forgetting_metrics.is_some());
        // board was reset
        assert_eq!(board.score_sum(0).unwrap(), 0);
        assert_eq!(board.score_sum(1).unwrap(), 0);
    }

    #[test]
    fn evolve_skips_on_quiet_verdict_and_empty_pool() {
        let model = trained_toy_model();
        let cfg = StageConfig::new(0, EvolutionMode::VerdictDriven);
        let quiet = DriftVerdict {
            per_class: vec![crate::drift::ClassVerdict { level: DriftLevel::None, observed: true }; 2],
            model_drifted: false,
            drifted_fraction: 0.0,
        };
        let pool = SilverPool::new(0);
        let outcome = evolve(&model, &pool, &cfg, &quiet, None, None).unwrap();
        assert!(!outcome.fired);
        assert_eq!(outcome.model.version_id, model.version_id);

        // forced but empty pool: skip with a warning, not an error
        let cfg = StageConfig::new(0, EvolutionMode::Forced);
        let outcome = evolve(&model, &pool, &cfg, &quiet, None, None).unwrap();
        assert!(!outcome.fired);
        assert!(outcome.record.skipped_reason.as_deref().unwrap().contains("empty"));
    }

    #[test]
    fn lifecycle_chains_lineage_and_persists() {
        let dir = tempfile::TempDir::new().unwrap();
        let model = trained_toy_model();
        let mut stages = Vec::new();
        for k in 0..3u32 {
            let mut cfg = StageConfig::new(k, EvolutionMode::Forced);
            cfg.hyper = Hyperparams { epochs: 6, batch_size: 32, learning_rate: 0.05, seed: 4 };
            stages.push((toy_items(25), cfg));
        }
        let opts = LifecycleOptions {
            run_dir: Some(dir.path().to_path_buf()),
            initial_test: None,
            feature: Some(FeatureConfig { seq_len: 6, norm_divisor: 1500 }),
        };
        let reports = run_lifecycle(&model, &stages, &opts).unwrap();
        assert_eq!(reports.len(), 3);
        for (k, r) in reports.iter().enumerate() {
            assert_ne!(r.model_version_in, r.model_version_out, "stage {k} must evolve");
            assert!(r.evolution.as_ref().unwrap().fired);
        }
        // lineage chain 0 -> 1 -> 2 -> 3 across the run
        assert_eq!(reports[0].model_version_in, model.version_id);
        assert_eq!(reports[1].model_version_in, reports[0].model_version_out);
        assert_eq!(reports[2].model_version_in, reports[1].model_version_out);

        for name in ["checkpoints/initial.devo", "checkpoints/stage_000.devo",
                     "pools/stage_001.ndjson", "reports/stage_002.json",
                     "scoreboards/stage_000.json"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let loaded = crate::model::load_checkpoint(&dir.path().join("checkpoints/stage_002.devo")).unwrap();
        assert_eq!(loaded.lineage_level, 3);
    }

    #[test]
    fn lifecycle_rejects_bad_stage_lists() {
        let model = trained_toy_model();
        assert!(matches!(
            run_lifecycle(&model, &[], &LifecycleOptions::default()),
            Err(EvolutionError::NoStages)
        ));
        let stages = vec![
            (toy_items(5), StageConfig::new(7, EvolutionMode::Forced)),
            (toy_items(5), StageConfig::new(7, EvolutionMode::Forced)),
        ];
        assert!(matches!(
            run_lifecycle(&model, &stages, &LifecycleOptions::default()),
            Err(EvolutionError::DuplicateStageId(7))
        ));
        let stages = vec![(Vec::new(), StageConfig::new(0, EvolutionMode::Forced))];
        assert!(matches!(
            run_lifecycle(&model, &stages, &LifecycleOptions::default()),
            Err(EvolutionError::EmptyStream)
        ));
    }

    #[test]
    fn verdict_driven_lifecycle_without_drift_keeps_model() {
        let model = trained_toy_model();
        let stages = vec![(toy_items(30), StageConfig::new(0, EvolutionMode::VerdictDriven))];
        let reports = run_lifecycle(&model, &stages, &LifecycleOptions::default()).unwrap();
        assert_eq!(reports[0].model_version_in, reports[0].model_version_out);
        assert!(!reports[0].evolution.as_ref().unwrap().fired);
    }

    #[test]
    fn compare_models_grid_shape_and_determinism() {
        let model = trained_toy_model();
        let set_a: Vec<(FeatureVector, usize)> =
            toy_items(10).into_iter().map(|i| (i.features, i.label.unwrap())).collect();
        let set_b: Vec<(FeatureVector, usize)> =
            toy_items(4).into_iter().map(|i| (i.features, i.label.unwrap())).collect();
        let grid = compare_models(
            &[model.clone(), model.clone(), model.clone()],
            &[set_a, set_b],
        )
        .unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid[0].len(), 2);
        assert_eq!(grid[0], grid[1]);
        assert_eq!(grid[1], grid[2]);
    }

    #[test]
    fn stage_items_and_labeled_set_resolve_records() {
        let dict = LabelDict::from_labels(["a", "b"]);
        let feat = FeatureConfig { seq_len: 4, norm_divisor: 1500 };
        let records = vec![
            DatasetRecord { lengths: vec![100, -50], label: Some("b".into()), ts: Some(2.0), key: None },
            DatasetRecord { lengths: vec![700], label: None, ts: None, key: None },
        ];
        let items = stage_items(&records, &dict, &feat).unwrap();
        assert_eq!(items[0].label, Some(1));
        assert_eq!(items[0].ts_us, 2_000_000);
        assert_eq!(items[1].label, None);
        assert_eq!(items[1].ts_us, 1);

        let err = labeled_set(&records, &dict, &feat).unwrap_err();
        assert!(matches!(err, FlowError::Parse { line: 2, .. }));
    }
}
