//! Synthetic flow generator with controllable per-class, per-stage drift.
//!
//! Each class is a small Markov chain over signed length bands: states carry
//! a Gaussian emission (mean/std bytes) and a direction sign; a flow is a
//! walk of uniform-random length. A per-class drift rule shifts emission
//! means and perturbs the transition matrix cumulatively per stage, which is
//! enough to degrade a trained classifier the way real feature drift does.
//!
//! Generation is a pure function of (config, stage): every sample draws from
//! its own counter-seeded stream, so datasets are reproducible and the
//! per-class work could be farmed out without changing a byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{DatasetRecord, FlowKey, FlowRecord, LabelDict, Transport};
use crate::util;

/// Generated packet lengths clamp into this band (header-bearing minimum to
/// Ethernet MTU).
pub const LENGTH_CLAMP: (i32, i32) = (40, 1500);

/// Class count ratios for the skewed preset, mimicking a heavily uneven
/// production application mix.
pub const SKEWED_RATIOS: [f64; 6] = [4585.0, 125.0, 1965.0, 4425.0, 47828.0, 2925.0];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid class spec {class}: {reason}")]
    BadSpec { class: usize, reason: String },
    #[error("invalid sim config: {0}")]
    BadConfig(String),
    #[error("stage {stage} out of range ({n_stages} stages)")]
    BadStage { stage: usize, n_stages: usize },
    #[error("count profile: {0}")]
    BadCounts(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEmission {
    pub mean_bytes: f64,
    pub std_bytes: f64,
    /// +1 emits client->server, -1 server->client.
    pub direction: i8,
}

/// Per-stage parameter delta, applied cumulatively: at stage k the class has
/// absorbed k applications of its rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftRule {
    pub mean_shift_bytes: f64,
    pub transition_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimClassSpec {
    pub class_id: usize,
    pub emissions: Vec<StateEmission>,
    /// Row-stochastic transition matrix over the emission states.
    pub transition: Vec<Vec<f64>>,
    /// Uniform flow length range, inclusive.
    pub seq_len_range: (usize, usize),
    pub drift_rule: DriftRule,
}

impl SimClassSpec {
    fn check(&self, expected_id: usize) -> Result<(), SimError> {
        let err = |reason: String| SimError::BadSpec {
            class: self.class_id,
            reason,
        };
        if self.class_id != expected_id {
            return Err(err(format!("class_id must equal its position {expected_id}")));
        }
        let n = self.emissions.len();
        if n == 0 {
            return Err(err("needs at least one state".into()));
        }
        for e in &self.emissions {
            if !(e.std_bytes > 0.0) {
                return Err(err(format!("std {} must be > 0", e.std_bytes)));
            }
            if e.direction != 1 && e.direction != -1 {
                return Err(err(format!("direction {} must be +1 or -1", e.direction)));
            }
        }
        if self.transition.len() != n {
            return Err(err("transition matrix must be n_states x n_states".into()));
        }
        for row in &self.transition {
            if row.len() != n {
                return Err(err("transition matrix must be square".into()));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(err("transition entries must be non-negative".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(err(format!("transition row sums to {sum}, expected 1")));
            }
        }
        let (lo, hi) = self.seq_len_range;
        if lo < 1 || lo > hi {
            return Err(err(format!("bad sequence length range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// The spec as seen at stage k: drift applied k times.
    fn at_stage(&self, stage: usize, seed: u64) -> SimClassSpec {
        let mut spec = self.clone();
        let shift = self.drift_rule.mean_shift_bytes * stage as f64;
        for e in &mut spec.emissions {
            e.mean_bytes += shift;
        }
        if self.drift_rule.transition_noise != 0.0 {
            for round in 1..=stage {
                let mut rng = ChaCha8Rng::seed_from_u64(util::mix_seed(&[
                    seed,
                    0x7472_616e, // transition-perturbation stream tag
                    self.class_id as u64,
                    round as u64,
                ]));
                for row in &mut spec.transition {
                    for p in row.iter_mut() {
                        *p += self.drift_rule.transition_noise * rng.random::<f64>();
                    }
                    let sum: f64 = row.iter().sum();
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                }
            }
        }
        spec
    }
}

/// How many samples each class contributes per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountProfile {
    Uniform(usize),
    PerClass(Vec<usize>),
    /// Scaled skewed ratios; requires exactly 6 classes.
    Preset { name: String, scale: f64 },
}

impl CountProfile {
    /// Resolve to per-class counts. Every class must end up with at least
    /// two samples (a stratified split needs both sides).
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<usize>, SimError> {
        let counts = match self {
            CountProfile::Uniform(c) => vec![*c; num_classes],
            CountProfile::PerClass(v) => {
                if v.len() != num_classes {
                    return Err(SimError::BadCounts(format!(
                        "per_class has {} entries for {num_classes} classes",
                        v.len()
                    )));
                }
                v.clone()
            }
            CountProfile::Preset { name, scale } => {
                if name != "skewed" {
                    return Err(SimError::BadCounts(format!("unknown preset {name:?}")));
                }
                if num_classes != SKEWED_RATIOS.len() {
                    return Err(SimError::BadCounts(format!(
                        "skewed preset is 6-class, config has {num_classes}"
                    )));
                }
                SKEWED_RATIOS.iter().map(|r| (r * scale).round() as usize).collect()
            }
        };
        if let Some(i) = counts.iter().position(|&c| c < 2) {
            return Err(SimError::BadCounts(format!(
                "class {i} resolves to {} samples; every class needs >= 2",
                counts[i]
            )));
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub classes: Vec<SimClassSpec>,
    pub counts: CountProfile,
    pub n_stages: usize,
    pub seed: u64,
    /// When false, stages with identical (drifted) parameters reuse the same
    /// sample noise, so zero drift reproduces stage 0 byte-for-byte.
    #[serde(default = "default_stage_salt")]
    pub stage_salt: bool,
}

fn default_stage_salt() -> bool {
    true
}

impl SimConfig {
    pub fn check(&self) -> Result<(), SimError> {
        if self.classes.len() < 2 {
            return Err(SimError::BadConfig("need at least 2 classes".into()));
        }
        if self.n_stages < 1 {
            return Err(SimError::BadConfig("need at least 1 stage".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.check(i)?;
        }
        self.counts.resolve(self.classes.len())?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Well-separated two-state classes (adjacent class means 6 sigma
    /// apart), zero drift. The baseline config for lifecycle experiments;
    /// set `drift_rule` per class afterwards to inject drift.
    pub fn separated(num_classes: usize, samples_per_class: usize, n_stages: usize, seed: u64) -> SimConfig {
        let classes = (0..num_classes)
            .map(|c| {
                let base = 150.0 + 150.0 * c as f64;
                SimClassSpec {
                    class_id: c,
                    emissions: vec![
                        StateEmission { mean_bytes: base, std_bytes: 25.0, direction: 1 },
                        StateEmission { mean_bytes: base + 60.0, std_bytes: 25.0, direction: -1 },
                    ],
                    transition: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                    seq_len_range: (12, 24),
                    drift_rule: DriftRule::default(),
                }
            })
            .collect();
        SimConfig {
            classes,
            counts: CountProfile::Uniform(samples_per_class),
            n_stages,
            seed,
            stage_salt: true,
        }
    }

    pub fn label_dict(&self) -> LabelDict {
        LabelDict::from_labels(self.classes.iter().map(|c| label_name(c.class_id)))
    }
}

/// Stable label string for a simulated class id.
pub fn label_name(class_id: usize) -> String {
    format!("app_{class_id}")
}

/// Generate the labeled flows of one stage. Deterministic in (config,
/// stage); classes appear in id order, samples in index order.
pub fn gen_stage(cfg: &SimConfig, stage: usize) -> Result<Vec<FlowRecord>, SimError> {
    cfg.check()?;
    if stage >= cfg.n_stages {
        return Err(SimError::BadStage { stage, n_stages: cfg.n_stages });
    }
    let counts = cfg.counts.resolve(cfg.classes.len())?;
    let salt = if cfg.stage_salt { stage as u64 } else { 0 };
    let mut flows = Vec::with_capacity(counts.iter().sum());
    for (class_id, spec) in cfg.classes.iter().enumerate() {
        let staged = spec.at_stage(stage, cfg.seed);
        for i in 0..counts[class_id] {
            let sample_seed = util::mix_seed(&[cfg.seed, salt, class_id as u64, i as u64]);
            flows.push(gen_flow(&staged, stage, class_id, i, sample_seed));
        }
    }
    Ok(flows)
}

fn gen_flow(
    spec: &SimClassSpec,
    stage: usize,
    class_id: usize,
    index: usize,
    sample_seed: u64,
) -> FlowRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let (lo, hi) = spec.seq_len_range;
    let seq_len = rng.random_range(lo..=hi);
    let n_states = spec.emissions.len();
    let mut state = rng.random_range(0..n_states);
    let mut lengths = Vec::with_capacity(seq_len);
    for _ in 0..seq_len {
        let e = &spec.emissions[state];
        let normal = Normal::new(e.mean_bytes, e.std_bytes).expect("std checked > 0");
        let bytes = (normal.sample(&mut rng).round() as i32).clamp(LENGTH_CLAMP.0, LENGTH_CLAMP.1);
        lengths.push(bytes * e.direction as i32);
        // next state from the transition row
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &spec.transition[state];
        state = n_states - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                state = j;
                break;
            }
        }
    }

    // Synthetic but well-formed endpoints, unique per (class, index).
    let src: std::net::IpAddr = std::net::Ipv4Addr::new(
        10,
        class_id as u8,
        (index >> 8) as u8,
        (index & 0xff) as u8,
    )
    .into();
    let dst: std::net::IpAddr = std::net::Ipv4Addr::new(192, 168, 0, 1).into();
    let src_port = 1024 + (index % 60000) as u16;
    let (key, client_is_a) = FlowKey::canonical(src, src_port, dst, 443, Transport::Tcp);
    let first_ts_us = stage as i64 * 1_000_000_000_000 + (class_id * 1_000_000 + index) as i64 * 1_000;
    FlowRecord {
        key,
        client_is_a,
        first_ts_us,
        last_ts_us: first_ts_us + seq_len as i64 * 1_000,
        signed_lengths: lengths,
        label: Some(class_id),
    }
}

/// Convert generated flows to dataset records with their label strings.
pub fn flows_to_records(flows: &[FlowRecord], dict: &LabelDict) -> Vec<DatasetRecord> {
    flows
        .iter()
        .map(|f| {
            let name = f.label.and_then(|id| dict.name_of(id).map(str::to_owned));
            DatasetRecord::from_flow(f, name.as_deref())
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic, used by the generator's
/// self-checks to confirm injected drift actually moves the marginals.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Absolute packet lengths pooled over all flows.
pub fn length_marginal(flows: &[FlowRecord]) -> Vec<f64> {
    flows
        .iter()
        .flat_map(|f| f.signed_lengths.iter().map(|&l| l.abs() as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::separated(3, 20, 2, 77);
        let a = gen_stage(&cfg, 1).unwrap();
        let b = gen_stage(&cfg, 1).unwrap();
        assert_eq!(a, b);
        let c = gen_stage(&cfg, 0).unwrap();
        assert_ne!(a, c); // stage salt changes samples
    }

    #[test]
    fn generated_flows_satisfy_record_invariants() {
        let cfg = SimConfig::separated(2, 50, 1, 3);
        for f in gen_stage(&cfg, 0).unwrap() {
            f.validate().unwrap();
            for &l in &f.signed_lengths {
                let a = l.abs();
                assert!((LENGTH_CLAMP.0..=LENGTH_CLAMP.1).contains(&a));
            }
            let n = f.signed_lengths.len();
            assert!((12..=24).contains(&n));
        }
    }

    #[test]
    fn zero_drift_without_salt_reproduces_stage_zero() {
        let mut cfg = SimConfig::separated(2, 15, 3, 5);
        cfg.stage_salt = false;
        let s0 = gen_stage(&cfg, 0).unwrap();
        let s1 = gen_stage(&cfg, 1).unwrap();
        let lengths = |v: &[FlowRecord]| -> Vec<Vec<i32>> {
            v.iter().map(|f| f.signed_lengths.clone()).collect()
        };
        assert_eq!(lengths(&s0), lengths(&s1));
    }

    #[test]
    fn mean_shift_moves_the_empirical_mean_within_3_sem() {
        let mut cfg = SimConfig::separated(2, 1500, 2, 11);
        cfg.classes[0].drift_rule.mean_shift_bytes = 200.0;
        let class0 = |flows: Vec<FlowRecord>| -> Vec<f64> {
            flows
                .into_iter()
                .filter(|f| f.label == Some(0))
                .flat_map(|f| f.signed_lengths.iter().map(|&l| l.abs() as f64).collect::<Vec<_>>())
                .collect()
        };
        let s0 = class0(gen_stage(&cfg, 0).unwrap());
        let s1 = class0(gen_stage(&cfg, 1).unwrap());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        let (m0, m1) = (mean(&s0), mean(&s1));
        let sem = (var(&s0, m0) / s0.len() as f64 + var(&s1, m1) / s1.len() as f64).sqrt();
        let delta = m1 - m0;
        assert!(
            (delta - 200.0).abs() <= 3.0 * sem,
            "delta {delta} not within 200 +/- {}",
            3.0 * sem
        );
    }

    #[test]
    fn ks_statistic_of_injected_drift_is_monotone_in_stage() {
        // 10 seeds x 3 adjacent stage pairs. Under no ordering at all,
        // violations would be Binomial(30, 0.5); allowing at most 2 keeps
        // the false-pass probability near 4e-7, far below the 0.01 level.
        let mut violations = 0;
        for seed in 0..10 {
            let mut cfg = SimConfig::separated(2, 120, 4, 1000 + seed);
            for class in &mut cfg.classes {
                class.drift_rule.mean_shift_bytes = 40.0;
            }
            let marginals: Vec<Vec<f64>> = (0..4)
                .map(|k| length_marginal(&gen_stage(&cfg, k).unwrap()))
                .collect();
            let d: Vec<f64> = (1..4).map(|k| ks_statistic(&marginals[0], &marginals[k])).collect();
            for w in d.windows(2) {
                if w[1] < w[0] - 1e-9 {
                    violations += 1;
                }
            }
        }
        assert!(violations <= 2, "{violations} monotonicity violations of 30");
    }

    #[test]
    fn ks_statistic_basics() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b = vec![10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }

    #[test]
    fn skewed_preset_counts() {
        let profile = CountProfile::Preset { name: "skewed".into(), scale: 1.0 / 50.0 };
        assert_eq!(profile.resolve(6).unwrap(), vec![92, 3, 39, 89, 957, 59]);

        // a scale small enough to zero a class is rejected
        let tiny = CountProfile::Preset { name: "skewed".into(), scale: 1.0 / 100.0 };
        assert!(tiny.resolve(6).is_err());

        let uniform = CountProfile::Uniform(100);
        assert_eq!(uniform.resolve(6).unwrap(), vec![100; 6]);

        assert!(CountProfile::Preset { name: "nope".into(), scale: 1.0 }.resolve(6).is_err());
        assert!(CountProfile::PerClass(vec![5, 5]).resolve(3).is_err());
    }

    #[test]
    fn invalid_specs_rejected_before_sampling() {
        let mut cfg = SimConfig::separated(2, 10, 1, 0);
        cfg.classes[1].transition[0] = vec![0.5, 0.6]; // row sums to 1.1
        assert!(matches!(gen_stage(&cfg, 0), Err(SimError::BadSpec { class: 1, .. })));

        let mut cfg = SimConfig::separated(2, 10, 1, 0);
        cfg.classes[0].emissions[0].std_bytes = 0.0;
        assert!(gen_stage(&cfg, 0).is_err());

        let cfg = SimConfig::separated(2, 10, 2, 0);
        assert!(matches!(gen_stage(&cfg, 5), Err(SimError::BadStage { .. })));
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = SimConfig::separated(2, 10, 2, 9);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // stage_salt defaults to true when omitted
        let raw = r#"{"classes":[],"counts":{"uniform":4},"n_stages":1,"seed":0}"#;
        let parsed: SimConfig = serde_json::from_str(raw).unwrap();
        assert!(parsed.stage_salt);
    }
}
