//! Experiment orchestration: training, sweep evaluation, shift measurement,
//! bound calibration, and CSV / manifest emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::{write_jsonl, DataSplit, DatasetRecord, MeanCalcRecord};
use crate::error::{Error, Result};
use crate::gevrey::{calibrate, main_bound, BoundInputs, BoundTerms, Calibration};
use crate::model::{ModelConfig, ModelParams};
use crate::tasks::{
    child_seed, enumerate_theta_space, partition_theta, sample_zeta, scale_theta_set, CotInstance, LatentSpace,
    LatentTask, MeanCalcDraw, MeanCalcSample, Partition, ShiftSpec, Split,
};
use crate::trainer::{
    cot_batch, cot_eval_instances, eval_meancalc, eval_meancalc_samples, eval_stepwise, meancalc_eval_samples, train_cot, train_meancalc, MeanCalcData,
    TrainConfig, TrainReport,
};
use crate::transport::{
    w1_bound_interval, w1_bound_permutation, w1_bound_scaling, w1_record, EmpiricalDistribution, Metric, W1Record,
};

/// Slack allowed when comparing an empirical distance with its bound.
pub const DOMINATION_SLACK: f64 = 1e-6;
/// Window of the trailing average reported as the CoT training loss.
pub const TRAIN_LOSS_WINDOW: usize = 100;

const PARTITION_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const CLOUD_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Meancalc,
    Permutation,
    Scaling,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Meancalc => "meancalc",
            ExperimentKind::Permutation => "permutation",
            ExperimentKind::Scaling => "scaling",
        }
    }

    /// File name of the figure-analog CSV.
    pub fn figure_file(self) -> &'static str {
        match self {
            ExperimentKind::Meancalc => "fig1_meancalc.csv",
            ExperimentKind::Permutation => "fig2_permutation.csv",
            ExperimentKind::Scaling => "fig3_scaling.csv",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meancalc" => Ok(ExperimentKind::Meancalc),
            "permutation" => Ok(ExperimentKind::Permutation),
            "scaling" => Ok(ExperimentKind::Scaling),
            other => Err(Error::Config(format!("unknown experiment {other:?} (meancalc | permutation | scaling)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    /// Gevrey order of the theory curve.
    pub s: f64,
    /// Exponent constant of the shift term.
    pub c_exp: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { s: 2.0, c_exp: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Interval indices `i`, ratios `r`, or magnitudes `δ`.
    pub sweep: Vec<f64>,
    /// Scaling only: `+1` for `p = 1 + δ`, `-1` for `p = 1 - δ`.
    pub p_signs: Vec<i32>,
    /// Scaling only: permit factors that map values back into the value set.
    pub allow_violation: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Mean-calc training set size.
    pub n_train_samples: usize,
    pub n_demos: usize,
    pub space: LatentSpace,
    pub n_test_instances: usize,
    pub n_cloud_points: usize,
    pub theory: TheoryConfig,
    /// Root of the partition, evaluation, and cloud seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            experiment: kind,
            sweep: Vec::new(),
            p_signs: Vec::new(),
            allow_violation: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_train_samples: 0,
            n_demos: 20,
            space: LatentSpace::default(),
            n_test_instances: 500,
            n_cloud_points: 64,
            theory: TheoryConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("results").join(kind.as_str()),
        };
        match kind {
            ExperimentKind::Meancalc => ExperimentConfig {
                sweep: (0..6).map(f64::from).collect(),
                train: TrainConfig { batch_size: 32, n_steps: 2500, learning_rate: 3e-4, ..TrainConfig::default() },
                n_train_samples: 20_000,
                n_test_instances: 1000,
                ..base
            },
            ExperimentKind::Permutation => ExperimentConfig {
                sweep: vec![0.25, 1.0],
                train: TrainConfig { batch_size: 16, n_steps: 3125, learning_rate: 1e-3, ..TrainConfig::default() },
                ..base
            },
            ExperimentKind::Scaling => ExperimentConfig {
                sweep: vec![0.05, 0.5],
                p_signs: vec![1, -1],
                allow_violation: true,
                train: TrainConfig { batch_size: 16, n_steps: 3125, learning_rate: 1e-3, ..TrainConfig::default() },
                ..base
            },
        }
    }

    /// Builds a config from an optional JSON document, an optional
    /// experiment name, an optional seed, and `KEY=VALUE` overrides with
    /// dotted keys. Missing fields come from the experiment's preset.
    pub fn resolve(doc: Option<Value>, kind: Option<ExperimentKind>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let doc = doc.unwrap_or_else(|| Value::Object(Default::default()));
        if !doc.is_object() {
            return Err(Error::Config("config document must be a JSON object".into()));
        }
        let from_doc = match doc.get("experiment") {
            Some(v) => Some(serde_json::from_value::<ExperimentKind>(v.clone()).map_err(|e| Error::Config(e.to_string()))?),
            None => None,
        };
        let kind = match (kind, from_doc) {
            (Some(k), Some(d)) if k != d => {
                return Err(Error::Config(format!("--experiment {k} conflicts with config experiment {d}")))
            }
            (Some(k), _) | (None, Some(k)) => k,
            (None, None) => return Err(Error::Config("no experiment named in config or flags".into())),
        };
        let mut merged = serde_json::to_value(Self::preset(kind))?;
        merge_json(&mut merged, &doc, "")?;
        if let Some(s) = seed {
            for key in ["seed", "model.seed", "train.seed"] {
                set_path(&mut merged, key, Value::from(s))?;
            }
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut merged, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.sweep.is_empty() {
            return cfg_err("sweep is empty".into());
        }
        if self.sweep.iter().any(|v| !v.is_finite()) {
            return cfg_err("sweep values must be finite".into());
        }
        self.model.validate()?;
        self.train.validate()?;
        self.space.validate()?;
        if self.n_test_instances == 0 || self.n_cloud_points == 0 {
            return cfg_err("n_test_instances and n_cloud_points must be positive".into());
        }
        if !(self.theory.s >= 1.0) || !(self.theory.c_exp > 0.0) {
            return cfg_err("theory needs s >= 1 and c_exp > 0".into());
        }
        match self.experiment {
            ExperimentKind::Meancalc => {
                if self.sweep.iter().any(|&i| i < 0.0 || i.fract() != 0.0 || i > 1e6) {
                    return cfg_err("meancalc sweep values must be non-negative integers".into());
                }
                if self.n_train_samples == 0 {
                    return cfg_err("n_train_samples must be positive".into());
                }
                if self.model.max_seq_len < 5 {
                    return cfg_err("meancalc needs max_seq_len >= 5".into());
                }
            }
            ExperimentKind::Permutation | ExperimentKind::Scaling => {
                let needed = (self.n_demos + 1) * (self.space.h + 1) - 1;
                if needed > self.model.max_seq_len {
                    return cfg_err(format!("{} demonstrations need max_seq_len >= {needed}", self.n_demos));
                }
                if self.experiment == ExperimentKind::Permutation && self.sweep.iter().any(|&r| !(r > 0.0)) {
                    return cfg_err("permutation ratios must be positive".into());
                }
                if self.experiment == ExperimentKind::Scaling {
                    if self.p_signs.is_empty() || self.p_signs.iter().any(|&s| s != 1 && s != -1) {
                        return cfg_err("p_signs must be a nonempty subset of {1, -1}".into());
                    }
                    for &delta in &self.sweep {
                        for &sign in &self.p_signs {
                            let p = 1.0 + sign as f64 * delta;
                            if !(delta > 0.0) || !(p > 0.0) {
                                return cfg_err(format!("scaling factor p = 1 {:+} * {delta} is not positive and != 1", sign));
                            }
                            ShiftSpec::Scaling { p, allow_violation: self.allow_violation }.validate(&self.space)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the config with the output directory cleared.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan {
            master: self.seed,
            model_init: self.model.seed,
            train: self.train.seed,
            partition: child_seed(self.seed, PARTITION_STREAM),
            eval: child_seed(self.seed, EVAL_STREAM),
            cloud: child_seed(self.seed, CLOUD_STREAM),
        }
    }
}

fn merge_json(base: &mut Value, doc: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(d)) = (&mut *base, doc) else {
        *base = doc.clone();
        return Ok(());
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v, &path)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *cur = value;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub model_init: u64,
    pub train: u64,
    pub partition: u64,
    pub eval: u64,
    pub cloud: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSplit {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test_ID")]
    TestId,
    #[serde(rename = "test_OOD")]
    TestOod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: ExperimentKind,
    pub x_param: Option<f64>,
    pub p_sign: Option<i32>,
    pub split: RowSplit,
    pub h: Option<usize>,
    pub loss: f64,
    pub d_bound: Option<f64>,
    pub d_empirical: Option<f64>,
    pub theory_bound: Option<f64>,
    pub seed: u64,
}

/// Rounds to 9 significant digits. Every number written to CSV passes
/// through this, so the shortest decimal form reparses to the same value.
pub fn q9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One trained network and its loss curve.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub name: String,
    pub x_param: Option<f64>,
    pub params: ModelParams,
    pub report: TrainReport,
}

pub fn model_name(kind: ExperimentKind, x_param: Option<f64>) -> String {
    match x_param {
        Some(r) => format!("{kind}_r{r}"),
        None => kind.as_str().to_string(),
    }
}

/// Deterministic Θ / Θ̃ split for each permutation ratio.
pub fn permutation_partitions(cfg: &ExperimentConfig) -> Result<Vec<Partition>> {
    let seeds = cfg.seeds();
    cfg.sweep
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seeds.partition, k as u64));
            partition_theta(&cfg.space, r, &mut rng)
        })
        .collect()
}

pub fn train_models(cfg: &ExperimentConfig) -> Result<Vec<TrainedModel>> {
    let fresh = || ModelParams::init(&cfg.model);
    match cfg.experiment {
        ExperimentKind::Meancalc => {
            let mut params = fresh()?;
            let (report, _) = train_meancalc(&mut params, cfg.n_train_samples, &cfg.train)?;
            Ok(vec![TrainedModel { name: model_name(cfg.experiment, None), x_param: None, params, report }])
        }
        ExperimentKind::Permutation => {
            let parts = permutation_partitions(cfg)?;
            cfg.sweep
                .iter()
                .zip(parts)
                .map(|(&r, part)| {
                    let mut params = fresh()?;
                    let report = train_cot(&mut params, &part.train, &cfg.space, cfg.n_demos, &cfg.train)?;
                    Ok(TrainedModel { name: model_name(cfg.experiment, Some(r)), x_param: Some(r), params, report })
                })
                .collect()
        }
        ExperimentKind::Scaling => {
            let mut params = fresh()?;
            let all = enumerate_theta_space(&cfg.space);
            let report = train_cot(&mut params, &all, &cfg.space, cfg.n_demos, &cfg.train)?;
            Ok(vec![TrainedModel { name: model_name(cfg.experiment, None), x_param: None, params, report }])
        }
    }
}

fn row(cfg: &ExperimentConfig, x_param: Option<f64>, p_sign: Option<i32>, split: RowSplit, h: Option<usize>, loss: f64) -> ResultRow {
    ResultRow {
        experiment: cfg.experiment,
        x_param,
        p_sign,
        split,
        h,
        loss: q9(loss),
        d_bound: None,
        d_empirical: None,
        theory_bound: None,
        seed: cfg.seeds().eval,
    }
}

fn trailing_mean(curve: &[f64]) -> f64 {
    let tail = &curve[curve.len().saturating_sub(TRAIN_LOSS_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn stepwise_rows(cfg: &ExperimentConfig, model: &ModelParams, theta: &[LatentTask], x: Option<f64>, sign: Option<i32>, split: RowSplit) -> Result<Vec<ResultRow>> {
    let losses = eval_stepwise(model, theta, cfg.n_demos, cfg.n_test_instances, cfg.seeds().eval)?;
    Ok(losses.iter().enumerate().map(|(k, &l)| row(cfg, x, sign, split, Some(k + 1), l)).collect())
}

fn find_model<'a>(models: &'a [TrainedModel], name: &str) -> Result<&'a TrainedModel> {
    models
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::Contract(format!("no trained model named {name:?}")))
}

/// Loss rows for every split and sweep point; distance and theory columns
/// are filled by later stages.
pub fn evaluate(cfg: &ExperimentConfig, models: &[TrainedModel]) -> Result<Vec<ResultRow>> {
    let eval_seed = cfg.seeds().eval;
    let mut rows = Vec::new();
    match cfg.experiment {
        ExperimentKind::Meancalc => {
            let m = find_model(models, &model_name(cfg.experiment, None))?;
            // Training split: a prefix of the actual training set.
            let data = MeanCalcData::new(cfg.n_train_samples, cfg.train.batch_size, cfg.train.seed)?;
            let seen = &data.samples[..cfg.n_test_instances.min(cfg.n_train_samples)];
            rows.push(row(cfg, None, None, RowSplit::Train, None, eval_meancalc_samples(&m.params, seen)?));
            let fresh = meancalc_eval_samples(0, Split::Train, cfg.n_test_instances, eval_seed)?;
            rows.push(row(cfg, None, None, RowSplit::TestId, None, eval_meancalc_samples(&m.params, &fresh)?));
            for &i in &cfg.sweep {
                let l = eval_meancalc(&m.params, i as u32, cfg.n_test_instances, eval_seed)?;
                rows.push(row(cfg, Some(i), None, RowSplit::TestOod, None, l));
            }
        }
        ExperimentKind::Permutation => {
            let parts = permutation_partitions(cfg)?;
            for (&r, part) in cfg.sweep.iter().zip(&parts) {
                let m = find_model(models, &model_name(cfg.experiment, Some(r)))?;
                rows.push(row(cfg, Some(r), None, RowSplit::Train, None, trailing_mean(&m.report.curve)));
                rows.extend(stepwise_rows(cfg, &m.params, &part.train, Some(r), None, RowSplit::TestId)?);
                rows.extend(stepwise_rows(cfg, &m.params, &part.test, Some(r), None, RowSplit::TestOod)?);
            }
        }
        ExperimentKind::Scaling => {
            let m = find_model(models, &model_name(cfg.experiment, None))?;
            let all = enumerate_theta_space(&cfg.space);
            rows.push(row(cfg, None, None, RowSplit::Train, None, trailing_mean(&m.report.curve)));
            rows.extend(stepwise_rows(cfg, &m.params, &all, None, None, RowSplit::TestId)?);
            for &delta in &cfg.sweep {
                for &sign in &cfg.p_signs {
                    let scaled = scale_theta_set(&all, &cfg.space, 1.0 + sign as f64 * delta)?;
                    rows.extend(stepwise_rows(cfg, &m.params, &scaled.tasks, Some(delta), Some(sign), RowSplit::TestOod)?);
                }
            }
        }
    }
    Ok(rows)
}

/// Closed-form and measured shift size at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMeasurement {
    pub x_param: f64,
    pub p_sign: Option<i32>,
    pub d_bound: f64,
    pub d_empirical: f64,
    pub record: W1Record,
}

impl ShiftMeasurement {
    pub fn dominated(&self) -> bool {
        self.d_empirical <= self.d_bound + DOMINATION_SLACK
    }
}

fn prompt_of(theta: &LatentTask, zetas: &[f64]) -> Vec<f64> {
    CotInstance::from_zetas(theta, zetas).prompt().scalars
}

/// Exact W1 between desk-size clouds for every sweep point, next to the
/// closed-form bound. Mean-calc and scaling clouds share their noise draws
/// across the two sides; permutation clouds share the ζ draws but pick
/// their tasks independently from Θ and Θ̃.
pub fn measure_shift(cfg: &ExperimentConfig) -> Result<Vec<ShiftMeasurement>> {
    let cloud_seed = cfg.seeds().cloud;
    let n = cfg.n_cloud_points;
    let zetas = |rng: &mut ChaCha8Rng| (0..=cfg.n_demos).map(|_| sample_zeta(rng)).collect::<Vec<f64>>();
    let mut out = Vec::new();
    let mut push = |x: f64, sign: Option<i32>, bound: f64, p: Vec<Vec<f64>>, q: Vec<Vec<f64>>, metric: Metric| -> Result<()> {
        let rec = w1_record(&EmpiricalDistribution::new(p, metric)?, &EmpiricalDistribution::new(q, metric)?)?;
        out.push(ShiftMeasurement { x_param: q9(x), p_sign: sign, d_bound: q9(bound), d_empirical: q9(rec.distance), record: rec });
        Ok(())
    };
    match cfg.experiment {
        ExperimentKind::Meancalc => {
            for &i in &cfg.sweep {
                let i = i as u32;
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cloud_seed, i as u64));
                let (mut p, mut q) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let draw = MeanCalcDraw::sample(&mut rng);
                    p.push(draw.realize(0, Split::Train)?.x.to_vec());
                    q.push(draw.realize(i, Split::Test)?.x.to_vec());
                }
                push(i as f64, None, w1_bound_interval(i), p, q, Metric::L1)?;
            }
        }
        ExperimentKind::Permutation => {
            let parts = permutation_partitions(cfg)?;
            for (k, (&r, part)) in cfg.sweep.iter().zip(&parts).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cloud_seed, k as u64));
                let (mut p, mut q) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let z = zetas(&mut rng);
                    let a = &part.train[rng.random_range(0..part.train.len())];
                    let b = &part.test[rng.random_range(0..part.test.len())];
                    p.push(prompt_of(a, &z));
                    q.push(prompt_of(b, &z));
                }
                push(r, None, w1_bound_permutation(r, cfg.space.h, cfg.n_demos), p, q, Metric::L2)?;
            }
        }
        ExperimentKind::Scaling => {
            let all = enumerate_theta_space(&cfg.space);
            let dim = cfg.space.prompt_len(cfg.n_demos);
            for (k, &delta) in cfg.sweep.iter().enumerate() {
                for &sign in &cfg.p_signs {
                    let scaled = scale_theta_set(&all, &cfg.space, 1.0 + sign as f64 * delta)?;
                    let stream = 2 * k as u64 + u64::from(sign < 0);
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cloud_seed, stream));
                    let (mut p, mut q) = (Vec::with_capacity(n), Vec::with_capacity(n));
                    for _ in 0..n {
                        let z = zetas(&mut rng);
                        let j = rng.random_range(0..all.len());
                        p.push(prompt_of(&all[j], &z));
                        q.push(prompt_of(&scaled.tasks[j], &z));
                    }
                    push(delta, Some(sign), w1_bound_scaling(delta, dim), p, q, Metric::L2)?;
                }
            }
        }
    }
    Ok(out)
}

/// Copies distances onto the OOD rows of the matching sweep point.
pub fn attach_shift(rows: &mut [ResultRow], shifts: &[ShiftMeasurement]) {
    for r in rows.iter_mut().filter(|r| r.split == RowSplit::TestOod) {
        if let Some(m) = shifts.iter().find(|m| Some(m.x_param) == r.x_param.map(q9) && m.p_sign == r.p_sign) {
            r.d_bound = Some(m.d_bound);
            r.d_empirical = Some(m.d_empirical);
        }
    }
}

/// A theory curve fitted to one OOD series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCalibration {
    pub series: String,
    pub p_sign: Option<i32>,
    pub h: Option<usize>,
    /// `(d_bound, loss)` pairs in sweep order.
    pub points: Vec<(f64, f64)>,
    pub calibration: Calibration,
}

pub fn series_name(p_sign: Option<i32>, h: Option<usize>) -> String {
    let mut s = String::from("ood");
    if let Some(p) = p_sign {
        s.push_str(if p > 0 { "_p+" } else { "_p-" });
    }
    if let Some(h) = h {
        s.push_str(&format!("_h{h}"));
    }
    s
}

/// Fits one curve per OOD series (grouped by `p_sign` and `h`) against the
/// closed-form shift sizes and writes the fitted values into `theory_bound`.
pub fn calibrate_rows(rows: &mut [ResultRow], theory: &TheoryConfig) -> Result<Vec<SeriesCalibration>> {
    let mut groups: BTreeMap<(Option<i32>, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate().filter(|(_, r)| r.split == RowSplit::TestOod) {
        groups.entry((r.p_sign, r.h)).or_default().push(k);
    }
    let mut out = Vec::new();
    for ((sign, h), idx) in groups {
        let points = idx
            .iter()
            .map(|&k| {
                let d = rows[k].d_bound.ok_or_else(|| Error::Contract("OOD row lacks a shift bound".into()))?;
                Ok((d, rows[k].loss))
            })
            .collect::<Result<Vec<_>>>()?;
        let cal = calibrate(&points, theory.s, theory.c_exp)?;
        for &k in &idx {
            let d = rows[k].d_bound.expect("checked above");
            rows[k].theory_bound = Some(q9(cal.bound_at(d)?));
        }
        out.push(SeriesCalibration { series: series_name(sign, h), p_sign: sign, h, points, calibration: cal });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub models: Vec<TrainedModel>,
    pub rows: Vec<ResultRow>,
    pub shifts: Vec<ShiftMeasurement>,
    pub calibrations: Vec<SeriesCalibration>,
}

/// Every stage in memory: train, evaluate, measure, calibrate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate().map_err(|e| e.at("config"))?;
    let models = train_models(cfg).map_err(|e| e.at("train"))?;
    analyze(cfg, models)
}

/// The post-training stages, shared by `run_experiment` and checkpoint reloads.
pub fn analyze(cfg: &ExperimentConfig, models: Vec<TrainedModel>) -> Result<ExperimentOutput> {
    let mut rows = evaluate(cfg, &models).map_err(|e| e.at("eval"))?;
    let shifts = measure_shift(cfg).map_err(|e| e.at("w1"))?;
    attach_shift(&mut rows, &shifts);
    let calibrations = calibrate_rows(&mut rows, &cfg.theory).map_err(|e| e.at("calibrate"))?;
    Ok(ExperimentOutput { config: cfg.clone(), models, rows, shifts, calibrations })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn fmt_num(x: f64) -> String {
    let v = q9(x);
    if v == 0.0 || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

pub fn results_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    into_string(w)
}

pub fn results_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Columns `(step, split, loss)`; the split names the trained model.
pub fn loss_curve_csv(models: &[TrainedModel]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "split", "loss"]).map_err(csv_err)?;
    for m in models {
        let split = format!("train:{}", m.name);
        for (step, &l) in m.report.curve.iter().enumerate() {
            w.write_record([step.to_string(), split.clone(), fmt_num(l)]).map_err(csv_err)?;
        }
    }
    into_string(w)
}

/// Columns `(x_param, h, loss, n_samples, seed)` over the test rows.
pub fn eval_csv(rows: &[ResultRow], n_samples: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "x_param", "p_sign", "h", "loss", "n_samples", "seed"]).map_err(csv_err)?;
    for r in rows.iter().filter(|r| r.split != RowSplit::Train) {
        let split = serde_json::to_value(r.split)?.as_str().unwrap_or_default().to_string();
        w.write_record([
            split,
            fmt_opt(r.x_param),
            r.p_sign.map(|s| s.to_string()).unwrap_or_default(),
            r.h.map(|h| h.to_string()).unwrap_or_default(),
            fmt_num(r.loss),
            n_samples.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    into_string(w)
}

pub fn w1_csv(shifts: &[ShiftMeasurement]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x_param", "p_sign", "d_bound", "d_empirical", "metric", "n_points", "plan_checksum"]).map_err(csv_err)?;
    for m in shifts {
        w.write_record([
            fmt_num(m.x_param),
            m.p_sign.map(|s| s.to_string()).unwrap_or_default(),
            fmt_num(m.d_bound),
            fmt_num(m.d_empirical),
            serde_json::to_value(m.record.metric)?.as_str().unwrap_or_default().to_string(),
            m.record.n_points.to_string(),
            m.record.plan_checksum.clone(),
        ])
        .map_err(csv_err)?;
    }
    into_string(w)
}

/// Columns `(d, shift_term, eps_term, lip_term, total)`.
pub fn bound_curve_csv(terms: &[BoundTerms]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["d", "shift_term", "eps_term", "lip_term", "total"]).map_err(csv_err)?;
    for t in terms {
        w.write_record([t.d, t.shift, t.eps_term, t.lip_term, t.total].map(fmt_num)).map_err(csv_err)?;
    }
    into_string(w)
}

/// `n` log-spaced shift sizes on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi >= lo) || n < 2 {
        return Err(Error::Domain(format!("grid needs 0 < lo <= hi and n >= 2, got ({lo}, {hi}, {n})")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect())
}

pub fn bound_curve(base: &BoundInputs, grid: &[f64]) -> Result<Vec<BoundTerms>> {
    grid.iter().map(|&d| main_bound(&BoundInputs { d, ..*base })).collect()
}

/// Theory curve of a calibrated series, spanning its shift sizes.
pub fn series_bound_curve(cal: &SeriesCalibration, n: usize) -> Result<Vec<BoundTerms>> {
    let lo = cal.points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = cal.points.iter().map(|p| p.0).fold(0.0, f64::max);
    let c = &cal.calibration;
    let base = BoundInputs { a: c.a, c_exp: c.c_exp, s: c.s, eps: 0.0, lip: 0.0, d: lo };
    bound_curve(&base, &log_grid(0.5 * lo, 2.0 * hi, n)?)
}

fn lookup(rows: &[ResultRow], split: RowSplit, x: Option<f64>, h: Option<usize>) -> Option<&ResultRow> {
    rows.iter().find(|r| r.split == split && r.h == h && (x.is_none() || r.x_param.is_none() || r.x_param == x))
}

/// The figure-analog CSV for a result table. Fails if any theory value
/// sits below its measured loss.
pub fn emit_plotdata(rows: &[ResultRow]) -> Result<(String, String)> {
    let kind = rows.first().ok_or_else(|| Error::Contract("result table is empty".into()))?.experiment;
    if rows.iter().any(|r| r.experiment != kind) {
        return Err(Error::Contract("result table mixes experiments".into()));
    }
    for r in rows.iter().filter(|r| r.split == RowSplit::TestOod) {
        if let Some(t) = r.theory_bound {
            if t < r.loss {
                return Err(Error::Contract(format!("theory value {t} below measured loss {} at {:?}", r.loss, r.x_param)));
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let ood = rows.iter().filter(|r| r.split == RowSplit::TestOod);
    let missing = || Error::Contract("result table lacks an ID row".into());
    match kind {
        ExperimentKind::Meancalc => {
            w.write_record(["i", "train", "test_ID", "test_OOD", "theory"]).map_err(csv_err)?;
            let train = lookup(rows, RowSplit::Train, None, None).ok_or_else(missing)?.loss;
            let id = lookup(rows, RowSplit::TestId, None, None).ok_or_else(missing)?.loss;
            for r in ood {
                w.write_record([fmt_opt(r.x_param), fmt_num(train), fmt_num(id), fmt_num(r.loss), fmt_opt(r.theory_bound)])
                    .map_err(csv_err)?;
            }
        }
        ExperimentKind::Permutation => {
            w.write_record(["r", "h", "test_ID", "test_OOD", "theory"]).map_err(csv_err)?;
            for r in ood {
                let id = lookup(rows, RowSplit::TestId, r.x_param, r.h).ok_or_else(missing)?.loss;
                let h = r.h.map(|h| h.to_string()).unwrap_or_default();
                w.write_record([fmt_opt(r.x_param), h, fmt_num(id), fmt_num(r.loss), fmt_opt(r.theory_bound)]).map_err(csv_err)?;
            }
        }
        ExperimentKind::Scaling => {
            w.write_record(["delta", "p", "h", "test_ID", "test_OOD", "theory"]).map_err(csv_err)?;
            for r in ood {
                let id = lookup(rows, RowSplit::TestId, None, r.h).ok_or_else(missing)?.loss;
                let p = match (r.x_param, r.p_sign) {
                    (Some(d), Some(s)) => fmt_num(1.0 + s as f64 * d),
                    _ => String::new(),
                };
                let h = r.h.map(|h| h.to_string()).unwrap_or_default();
                w.write_record([fmt_opt(r.x_param), p, h, fmt_num(id), fmt_num(r.loss), fmt_opt(r.theory_bound)])
                    .map_err(csv_err)?;
            }
        }
    }
    Ok((kind.figure_file().to_string(), into_string(w)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seeds: SeedPlan,
    /// Artifact path (relative to the output directory) to SHA-256.
    pub files: BTreeMap<String, String>,
}

/// Writes files under `dir` and records their digests.
pub struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), hex(&Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<Manifest> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: cfg.experiment,
            config_hash: cfg.config_hash(),
            seeds: cfg.seeds(),
            files: std::mem::take(&mut self.files),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

pub fn checkpoint_path(name: &str) -> String {
    format!("checkpoints/{name}.ckpt")
}

pub fn write_models(w: &mut ArtifactWriter, models: &[TrainedModel]) -> Result<()> {
    for m in models {
        w.write(&checkpoint_path(&m.name), &checkpoint::encode(&m.params))?;
    }
    w.write("loss_curve.csv", loss_curve_csv(models)?.as_bytes())?;
    Ok(())
}

/// Writes the full artifact set of a run into `dir`.
pub fn write_artifacts(out: &ExperimentOutput, dir: &Path) -> Result<Manifest> {
    let mut w = ArtifactWriter::new(dir)?;
    let cfg = &out.config;
    w.write("config.json", (serde_json::to_string_pretty(cfg)? + "\n").as_bytes())?;
    write_models(&mut w, &out.models)?;
    write_analysis(&mut w, out)?;
    w.finish(cfg)
}

pub fn write_analysis(w: &mut ArtifactWriter, out: &ExperimentOutput) -> Result<()> {
    w.write("results.csv", results_to_csv(&out.rows)?.as_bytes())?;
    w.write("eval.csv", eval_csv(&out.rows, out.config.n_test_instances)?.as_bytes())?;
    w.write("w1.csv", w1_csv(&out.shifts)?.as_bytes())?;
    w.write("calibration.json", (serde_json::to_string_pretty(&out.calibrations)? + "\n").as_bytes())?;
    for cal in &out.calibrations {
        let curve = series_bound_curve(cal, 50)?;
        w.write(&format!("bound_{}.csv", cal.series), bound_curve_csv(&curve)?.as_bytes())?;
    }
    let (name, text) = emit_plotdata(&out.rows)?;
    w.write(&name, text.as_bytes())?;
    Ok(())
}

/// Reloads the checkpoints a previous `train` run wrote to `dir`.
pub fn load_models(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<TrainedModel>> {
    let xs: Vec<Option<f64>> = match cfg.experiment {
        ExperimentKind::Permutation => cfg.sweep.iter().map(|&r| Some(r)).collect(),
        _ => vec![None],
    };
    xs.into_iter()
        .map(|x| {
            let name = model_name(cfg.experiment, x);
            let params = checkpoint::load(&dir.join(checkpoint_path(&name)))?;
            if params.config != cfg.model {
                return Err(Error::Config(format!("checkpoint {name} was trained with a different model config")));
            }
            Ok(TrainedModel { name, x_param: x, params, report: TrainReport { curve: Vec::new() } })
        })
        .collect()
}

fn cot_records(theta: &[LatentTask], insts: &[CotInstance], split: DataSplit, spec: Option<&ShiftSpec>) -> Vec<DatasetRecord> {
    insts
        .iter()
        .map(|inst| {
            let id = theta.iter().position(|t| *t == inst.theta).expect("instance task comes from the set");
            DatasetRecord::from_instance(id, inst, split, spec.cloned())
        })
        .collect()
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf)?;
    Ok(buf)
}

/// The head of the training stream: whole batches covering `n` instances.
fn training_stream(cfg: &ExperimentConfig, theta: &[LatentTask], n: usize) -> Vec<CotInstance> {
    let bs = cfg.train.batch_size;
    (0..n.div_ceil(bs)).flat_map(|step| cot_batch(theta, cfg.n_demos, bs, cfg.train.seed, step)).take(n).collect()
}

/// JSONL dumps of the data every split of the experiment sees. CoT training
/// data is streamed, so only its first `n_test_instances` instances are
/// written.
pub fn write_datasets(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<()> {
    let seeds = cfg.seeds();
    let n = cfg.n_test_instances;
    let mc = |split: DataSplit, i: u32, samples: &[MeanCalcSample]| -> Vec<MeanCalcRecord> {
        samples.iter().map(|s| MeanCalcRecord { interval: i, split, x: s.x, y0: s.y0, y1: s.y1 }).collect()
    };
    match cfg.experiment {
        ExperimentKind::Meancalc => {
            let data = MeanCalcData::new(cfg.n_train_samples, cfg.train.batch_size, cfg.train.seed)?;
            w.write("data/train.jsonl", &jsonl(&mc(DataSplit::Train, 0, &data.samples))?)?;
            let id = meancalc_eval_samples(0, Split::Train, n, seeds.eval)?;
            w.write("data/test_id.jsonl", &jsonl(&mc(DataSplit::TestId, 0, &id))?)?;
            for &i in &cfg.sweep {
                let i = i as u32;
                let ood = meancalc_eval_samples(i, Split::Test, n, seeds.eval)?;
                w.write(&format!("data/test_ood_i{i}.jsonl"), &jsonl(&mc(DataSplit::TestOod, i, &ood))?)?;
            }
        }
        ExperimentKind::Permutation => {
            for (&r, part) in cfg.sweep.iter().zip(permutation_partitions(cfg)?) {
                let spec = ShiftSpec::Permutation { theta_train: part.train.clone(), theta_test: part.test.clone() };
                let train = training_stream(cfg, &part.train, n);
                let id = cot_eval_instances(&part.train, cfg.n_demos, n, seeds.eval);
                let ood = cot_eval_instances(&part.test, cfg.n_demos, n, seeds.eval);
                w.write(&format!("data/r{r}/train.jsonl"), &jsonl(&cot_records(&part.train, &train, DataSplit::Train, None))?)?;
                w.write(&format!("data/r{r}/test_id.jsonl"), &jsonl(&cot_records(&part.train, &id, DataSplit::TestId, None))?)?;
                let recs = cot_records(&part.test, &ood, DataSplit::TestOod, Some(&spec));
                w.write(&format!("data/r{r}/test_ood.jsonl"), &jsonl(&recs)?)?;
            }
        }
        ExperimentKind::Scaling => {
            let all = enumerate_theta_space(&cfg.space);
            let train = training_stream(cfg, &all, n);
            let id = cot_eval_instances(&all, cfg.n_demos, n, seeds.eval);
            w.write("data/train.jsonl", &jsonl(&cot_records(&all, &train, DataSplit::Train, None))?)?;
            w.write("data/test_id.jsonl", &jsonl(&cot_records(&all, &id, DataSplit::TestId, None))?)?;
            for &delta in &cfg.sweep {
                for &sign in &cfg.p_signs {
                    let p = 1.0 + sign as f64 * delta;
                    let scaled = scale_theta_set(&all, &cfg.space, p)?;
                    let spec = ShiftSpec::Scaling { p, allow_violation: cfg.allow_violation };
                    let ood = cot_eval_instances(&scaled.tasks, cfg.n_demos, n, seeds.eval);
                    let recs = cot_records(&scaled.tasks, &ood, DataSplit::TestOod, Some(&spec));
                    w.write(&format!("data/test_ood_p{p}.jsonl"), &jsonl(&recs)?)?;
                }
            }
        }
    }
    Ok(())
}
