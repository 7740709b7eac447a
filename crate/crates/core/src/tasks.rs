//! Synthetic task generators: the mean-square task, latent-variable chains,
//! prompt assembly, and the three structured shift constructions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the integer range each mean-calc coordinate is drawn from.
pub const MEANCALC_SPAN: u32 = 10;

const PARTITION_ATTEMPTS: usize = 2000;

/// Derives an independent stream seed from a parent seed (SplitMix64 finalizer).
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.5 * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpace {
    pub values: Vec<f64>,
    /// Number of chain steps after `z_0`.
    pub h: usize,
}

impl Default for LatentSpace {
    fn default() -> Self {
        LatentSpace { values: vec![-2.0, -1.0, 1.0, 2.0], h: 2 }
    }
}

impl LatentSpace {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::Config("latent space needs at least two values".into()));
        }
        for (i, a) in self.values.iter().enumerate() {
            if !a.is_finite() || self.values[..i].contains(a) {
                return Err(Error::Config(format!("latent values must be distinct and finite: {:?}", self.values)));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.values.len().pow(self.h as u32 + 1)
    }

    pub fn contains_value(&self, v: f64) -> bool {
        self.values.iter().any(|&u| (u - v).abs() <= 1e-12)
    }

    /// Length of a prompt with `n` demonstrations plus the test input.
    pub fn prompt_len(&self, n: usize) -> usize {
        (self.h + 1) * n + 1
    }
}

/// Per-step latent values `(θ_0, ..., θ_H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentTask(pub Vec<f64>);

impl LatentTask {
    pub fn steps(&self) -> usize {
        self.0.len()
    }

    fn key(&self) -> Vec<u64> {
        self.0.iter().map(|v| canonical_bits(*v)).collect()
    }
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// One `(value, position)` entry of a flattened task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlatPair {
    pub position: usize,
    bits: u64,
}

impl FlatPair {
    pub fn new(value: f64, position: usize) -> Self {
        FlatPair { position, bits: canonical_bits(value) }
    }

    pub fn value(&self) -> f64 {
        f64::from_bits(self.bits)
    }
}

pub fn flatten_set(theta: &LatentTask) -> BTreeSet<FlatPair> {
    theta.0.iter().enumerate().map(|(h, &v)| FlatPair::new(v, h)).collect()
}

/// Union of [`flatten_set`] over a collection of tasks.
pub fn coverage(tasks: &[LatentTask]) -> BTreeSet<FlatPair> {
    tasks.iter().flat_map(flatten_set).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub z: Vec<f64>,
    pub zeta: f64,
}

/// `z_0 = f(ζ + θ_0)`, `z_h = f(z_{h-1} + θ_h)` with `f` the leaky ReLU.
/// `zeta` is expected in `[-0.5, 0.5]`.
pub fn gen_chain(theta: &LatentTask, zeta: f64) -> ChainSample {
    let mut z = Vec::with_capacity(theta.steps());
    let mut prev = zeta;
    for &t in &theta.0 {
        prev = leaky_relu(prev + t);
        z.push(prev);
    }
    ChainSample { z, zeta }
}

pub fn sample_zeta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-0.5..=0.5)
}

/// Every task of the space, lexicographic in value index.
pub fn enumerate_theta_space(space: &LatentSpace) -> Vec<LatentTask> {
    let m = space.values.len();
    let len = space.h + 1;
    (0..space.size())
        .map(|mut code| {
            let mut idx = vec![0; len];
            for slot in idx.iter_mut().rev() {
                *slot = code % m;
                code /= m;
            }
            LatentTask(idx.into_iter().map(|i| space.values[i]).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<LatentTask>,
    pub test: Vec<LatentTask>,
}

impl Partition {
    /// `|test| / |train|` as realized by integer set sizes.
    pub fn achieved_ratio(&self) -> f64 {
        self.test.len() as f64 / self.train.len() as f64
    }
}

/// Size of the test side for a requested `|test| / |train|` ratio.
pub fn partition_test_size(total: usize, ratio: f64) -> usize {
    (total as f64 * ratio / (1.0 + ratio)).round() as usize
}

/// Splits the full space into disjoint train/test sets whose flattened
/// `(value, position)` unions agree.
pub fn partition_theta<R: Rng + ?Sized>(space: &LatentSpace, ratio: f64, rng: &mut R) -> Result<Partition> {
    space.validate()?;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Constraint(format!("partition ratio must be positive, got {ratio}")));
    }
    let all = enumerate_theta_space(space);
    let m = space.values.len();
    let n_test = partition_test_size(all.len(), ratio);
    let n_train = all.len() - n_test.min(all.len());
    if n_test < m || n_train < m {
        return Err(Error::Constraint(format!(
            "ratio {ratio} gives sides of {n_train} and {n_test}; each needs at least {m} tasks to cover every value"
        )));
    }
    let full = coverage(&all);

    let mut order: Vec<usize> = (0..all.len()).collect();
    for _ in 0..PARTITION_ATTEMPTS {
        order.shuffle(rng);
        let test: Vec<LatentTask> = order[..n_test].iter().map(|&i| all[i].clone()).collect();
        if coverage(&test) != full {
            continue;
        }
        let train: Vec<LatentTask> = order[n_test..].iter().map(|&i| all[i].clone()).collect();
        if coverage(&train) == full {
            let p = Partition { train, test };
            check_partition(&all, &p)?;
            return Ok(p);
        }
    }

    // Constructive fallback: the constant tasks cover every pair on one side,
    // the cyclic shifts (θ_h = v_{(k+h) mod M}) on the other.
    if space.h == 0 {
        return Err(Error::Constraint("single-step tasks cannot cover both sides".into()));
    }
    let index_of = |t: &LatentTask| all.iter().position(|a| a == t).unwrap();
    let diag: Vec<usize> = (0..m).map(|k| index_of(&LatentTask(vec![space.values[k]; space.h + 1]))).collect();
    let shifted: Vec<usize> = (0..m)
        .map(|k| index_of(&LatentTask((0..=space.h).map(|h| space.values[(k + h) % m]).collect())))
        .collect();
    let (seed_test, seed_train) = if rng.random::<bool>() { (diag, shifted) } else { (shifted, diag) };
    let mut rest: Vec<usize> = (0..all.len()).filter(|i| !seed_test.contains(i) && !seed_train.contains(i)).collect();
    rest.shuffle(rng);
    let mut test_idx = seed_test;
    let need = n_test - test_idx.len();
    test_idx.extend(&rest[..need]);
    let mut train_idx = seed_train;
    train_idx.extend(&rest[need..]);
    let p = Partition {
        train: train_idx.iter().map(|&i| all[i].clone()).collect(),
        test: test_idx.iter().map(|&i| all[i].clone()).collect(),
    };
    check_partition(&all, &p)?;
    Ok(p)
}

/// Disjointness, exact cover of the full space, and equal flattened unions.
pub fn check_partition(all: &[LatentTask], p: &Partition) -> Result<()> {
    let train: BTreeSet<Vec<u64>> = p.train.iter().map(LatentTask::key).collect();
    let test: BTreeSet<Vec<u64>> = p.test.iter().map(LatentTask::key).collect();
    if train.len() != p.train.len() || test.len() != p.test.len() {
        return Err(Error::Constraint("partition side contains duplicates".into()));
    }
    if !train.is_disjoint(&test) {
        return Err(Error::Constraint("partition sides overlap".into()));
    }
    let everything: BTreeSet<Vec<u64>> = all.iter().map(LatentTask::key).collect();
    if train.union(&test).cloned().collect::<BTreeSet<_>>() != everything {
        return Err(Error::Constraint("partition does not cover the latent space".into()));
    }
    if coverage(&p.train) != coverage(&p.test) {
        return Err(Error::Constraint("flattened value sets differ between sides".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleViolation {
    pub value: f64,
    pub scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledSet {
    pub tasks: Vec<LatentTask>,
    /// Base values whose scaled image lands back in the value set.
    pub violations: Vec<ScaleViolation>,
}

pub fn scale_theta_set(tasks: &[LatentTask], space: &LatentSpace, p: f64) -> Result<ScaledSet> {
    if p == 1.0 || !p.is_finite() {
        return Err(Error::Contract(format!("scaling factor must differ from 1, got {p}")));
    }
    let scaled = tasks
        .iter()
        .map(|t| LatentTask(t.0.iter().map(|v| p * v).collect()))
        .collect();
    let violations = space
        .values
        .iter()
        .filter(|&&v| space.contains_value(p * v))
        .map(|&v| ScaleViolation { value: v, scaled: p * v })
        .collect();
    Ok(ScaledSet { tasks: scaled, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    IntervalShift { i: u32 },
    Permutation { theta_train: Vec<LatentTask>, theta_test: Vec<LatentTask> },
    Scaling { p: f64, allow_violation: bool },
}

impl ShiftSpec {
    pub fn validate(&self, space: &LatentSpace) -> Result<()> {
        match self {
            ShiftSpec::IntervalShift { .. } => Ok(()),
            ShiftSpec::Permutation { theta_train, theta_test } => {
                let p = Partition { train: theta_train.clone(), test: theta_test.clone() };
                let train: BTreeSet<Vec<u64>> = p.train.iter().map(LatentTask::key).collect();
                if p.test.iter().any(|t| train.contains(&t.key())) {
                    return Err(Error::Constraint("permutation sides overlap".into()));
                }
                if coverage(&p.train) != coverage(&p.test) {
                    return Err(Error::Constraint("permutation sides cover different values".into()));
                }
                Ok(())
            }
            ShiftSpec::Scaling { p, allow_violation } => {
                let rep = scale_theta_set(&[], space, *p)?;
                if !rep.violations.is_empty() && !allow_violation {
                    return Err(Error::Constraint(format!(
                        "scaling by {p} maps values back into the value set: {:?}",
                        rep.violations
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// The uniform draws behind one mean-calc sample. Reusing a draw across
/// splits gives the coupling `x_test = x_train + i + 0.5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCalcDraw {
    pub ints: [u32; 4],
    /// Each in `[0, 0.5)`.
    pub fracs: [f64; 4],
}

impl MeanCalcDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut ints = [0; 4];
        let mut fracs = [0.0; 4];
        for j in 0..4 {
            ints[j] = rng.random_range(0..MEANCALC_SPAN);
            fracs[j] = rng.random_range(0.0..0.5);
        }
        MeanCalcDraw { ints, fracs }
    }

    pub fn realize(&self, i: u32, split: Split) -> Result<MeanCalcSample> {
        if split == Split::Train && i != 0 {
            return Err(Error::Contract(format!("training inputs use interval 0, got {i}")));
        }
        let x = std::array::from_fn(|j| match split {
            Split::Train => self.ints[j] as f64 + self.fracs[j],
            Split::Test => {
                let frac = (0.5 + self.fracs[j]).min(1.0f64.next_down());
                (self.ints[j] + i) as f64 + frac
            }
        });
        Ok(MeanCalcSample::from_inputs(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCalcSample {
    pub x: [f64; 4],
    pub y0: f64,
    pub y1: f64,
}

impl MeanCalcSample {
    pub fn from_inputs(x: [f64; 4]) -> Self {
        let y0 = x.iter().sum::<f64>() / 4.0;
        MeanCalcSample { x, y0, y1: y0 * y0 }
    }

    /// `x0 x1 x2 x3 y0`: the teacher-forced sequence.
    pub fn sequence(&self) -> [f64; 5] {
        [self.x[0], self.x[1], self.x[2], self.x[3], self.y0]
    }
}

/// Inputs on `[i, i + 10)` with fractional parts below 0.5 (train) or at
/// least 0.5 (test).
pub fn gen_mean_calc<R: Rng + ?Sized>(i: u32, split: Split, rng: &mut R) -> Result<MeanCalcSample> {
    if split == Split::Train && i != 0 {
        return Err(Error::Contract(format!("training inputs use interval 0, got {i}")));
    }
    MeanCalcDraw::sample(rng).realize(i, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRole {
    /// Demonstration index; the test input carries index `n`.
    pub demo: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub scalars: Vec<f64>,
    pub roles: Vec<StepRole>,
}

/// Concatenates demonstration chains and appends the test input `z_0`.
pub fn build_prompt(demos: &[ChainSample], z0_test: f64) -> Result<PromptSequence> {
    let steps = demos.first().map_or(0, |d| d.z.len());
    if demos.iter().any(|d| d.z.len() != steps) {
        return Err(Error::Shape("demonstrations have differing chain lengths".into()));
    }
    let mut scalars = Vec::with_capacity(demos.len() * steps + 1);
    let mut roles = Vec::with_capacity(scalars.capacity());
    for (k, d) in demos.iter().enumerate() {
        scalars.extend_from_slice(&d.z);
        roles.extend((0..steps).map(|h| StepRole { demo: k, h }));
    }
    scalars.push(z0_test);
    roles.push(StepRole { demo: demos.len(), h: 0 });
    Ok(PromptSequence { scalars, roles })
}

/// `n` demonstrations plus a full test chain, all under one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotInstance {
    pub theta: LatentTask,
    pub demos: Vec<ChainSample>,
    pub test: ChainSample,
}

impl CotInstance {
    pub fn from_zetas(theta: &LatentTask, zetas: &[f64]) -> Self {
        let (last, demo_zetas) = zetas.split_last().expect("at least the test zeta");
        CotInstance {
            theta: theta.clone(),
            demos: demo_zetas.iter().map(|&z| gen_chain(theta, z)).collect(),
            test: gen_chain(theta, *last),
        }
    }

    pub fn sample<R: Rng + ?Sized>(theta: &LatentTask, n: usize, rng: &mut R) -> Self {
        let zetas: Vec<f64> = (0..=n).map(|_| sample_zeta(rng)).collect();
        Self::from_zetas(theta, &zetas)
    }

    pub fn zetas(&self) -> Vec<f64> {
        self.demos.iter().chain(std::iter::once(&self.test)).map(|c| c.zeta).collect()
    }

    pub fn prompt(&self) -> PromptSequence {
        build_prompt(&self.demos, self.test.z[0]).expect("chains share one task")
    }

    /// Demonstrations followed by the whole test chain.
    pub fn full_sequence(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.demos.iter().flat_map(|d| d.z.iter().copied()).collect();
        s.extend_from_slice(&self.test.z);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> LatentTask {
        LatentTask(v.to_vec())
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(0.0), 0.0);
        assert_eq!(leaky_relu(2.024), 2.024);
        assert_eq!(leaky_relu(-2.476), -1.238);
    }

    #[test]
    fn chain_examples() {
        let c = gen_chain(&t(&[-2.0, 1.0, 2.0]), 0.048);
        for (a, b) in c.z.iter().zip([-0.976, 0.024, 2.024]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(gen_chain(&t(&[1.0, 1.0, 1.0]), 0.0).z, vec![1.0, 2.0, 3.0]);
        assert_eq!(gen_chain(&t(&[-2.0, -2.0, -2.0]), 0.5).z, vec![-0.75, -1.375, -1.6875]);
    }

    #[test]
    fn theta_space_enumeration() {
        let all = enumerate_theta_space(&LatentSpace::default());
        assert_eq!(all.len(), 64);
        assert_eq!(all[0], t(&[-2.0, -2.0, -2.0]));
        assert_eq!(all[1], t(&[-2.0, -2.0, -1.0]));
        assert_eq!(all[63], t(&[2.0, 2.0, 2.0]));
        let tiny = LatentSpace { values: vec![0.0, 1.0], h: 0 };
        assert_eq!(enumerate_theta_space(&tiny).len(), 2);
        let nine = enumerate_theta_space(&LatentSpace { values: vec![-1.0, 0.0, 1.0], h: 1 });
        assert_eq!(nine.len(), 9);
        for i in 0..9 {
            for j in 0..i {
                assert_ne!(nine[i], nine[j]);
            }
        }
    }

    #[test]
    fn flatten_set_examples() {
        let f = flatten_set(&t(&[-2.0, 1.0, 2.0]));
        let expect: BTreeSet<FlatPair> =
            [FlatPair::new(-2.0, 0), FlatPair::new(1.0, 1), FlatPair::new(2.0, 2)].into_iter().collect();
        assert_eq!(f, expect);
        assert_eq!(flatten_set(&t(&[1.0, 1.0, 1.0])).len(), 3);
        assert_eq!(coverage(&enumerate_theta_space(&LatentSpace::default())).len(), 12);
    }

    #[test]
    fn partition_sizes_and_invariants() {
        let space = LatentSpace::default();
        let all = enumerate_theta_space(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = partition_theta(&space, 1.0, &mut rng).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (32, 32));
        assert_eq!(coverage(&p.test).len(), 12);
        check_partition(&all, &p).unwrap();

        let p = partition_theta(&space, 0.25, &mut rng).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (51, 13));
        check_partition(&all, &p).unwrap();
        assert!((p.achieved_ratio() - 13.0 / 51.0).abs() < 1e-15);
    }

    #[test]
    fn partition_infeasible_ratios() {
        let space = LatentSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(partition_theta(&space, 0.001, &mut rng), Err(Error::Constraint(_))));
        assert!(matches!(partition_theta(&space, 1.0 / 19.0, &mut rng), Err(Error::Constraint(_))));
        assert!(matches!(partition_theta(&space, 0.0, &mut rng), Err(Error::Constraint(_))));
        assert!(matches!(partition_theta(&space, 1000.0, &mut rng), Err(Error::Constraint(_))));
    }

    #[test]
    fn partition_at_the_coverage_edge() {
        // Four tasks on the small side is the tightest feasible split.
        let space = LatentSpace::default();
        let all = enumerate_theta_space(&space);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = partition_theta(&space, 4.0 / 60.0, &mut rng).unwrap();
            assert_eq!(p.test.len(), 4);
            check_partition(&all, &p).unwrap();
        }
    }

    #[test]
    fn scaling_reports() {
        let space = LatentSpace::default();
        let s = scale_theta_set(&[t(&[-2.0, 1.0, 2.0])], &space, 1.1).unwrap();
        for (a, b) in s.tasks[0].0.iter().zip([-2.2, 1.1, 2.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.violations.is_empty());
        let s = scale_theta_set(&[], &space, 0.5).unwrap();
        assert!(s.violations.iter().any(|v| v.value == 2.0 && v.scaled == 1.0));
        assert!(scale_theta_set(&[], &space, 1.0).is_err());
        assert!(ShiftSpec::Scaling { p: 0.5, allow_violation: false }.validate(&space).is_err());
        assert!(ShiftSpec::Scaling { p: 0.5, allow_violation: true }.validate(&space).is_ok());
    }

    #[test]
    fn scaled_set_is_disjoint_when_clean() {
        let space = LatentSpace::default();
        let all = enumerate_theta_space(&space);
        for p in [0.95, 1.05, 1.3, 0.7, 1.5] {
            let s = scale_theta_set(&all, &space, p).unwrap();
            assert!(s.violations.is_empty());
            assert!(s.tasks.iter().all(|st| !all.contains(st)));
        }
    }

    #[test]
    fn mean_calc_examples() {
        let s = MeanCalcSample::from_inputs([0.0; 4]);
        assert_eq!((s.y0, s.y1), (0.0, 0.0));
        let s = MeanCalcSample::from_inputs([1.5, 2.5, 0.5, 3.5]);
        assert_eq!((s.y0, s.y1), (2.0, 4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_mean_calc(2, Split::Train, &mut rng).is_err());
    }

    #[test]
    fn mean_calc_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let s = gen_mean_calc(0, Split::Train, &mut rng).unwrap();
            assert!(s.x.iter().all(|&x| (0.0..10.0).contains(&x) && x.fract() < 0.5));
        }
        for _ in 0..10_000 {
            let s = gen_mean_calc(3, Split::Test, &mut rng).unwrap();
            assert!(s.x.iter().all(|&x| (3.0..13.0).contains(&x) && x.fract() >= 0.5));
        }
    }

    #[test]
    fn paired_draw_shifts_every_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let d = MeanCalcDraw::sample(&mut rng);
            let a = d.realize(0, Split::Train).unwrap();
            let b = d.realize(4, Split::Test).unwrap();
            for j in 0..4 {
                assert!((b.x[j] - a.x[j] - 4.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompt_layout() {
        let theta = t(&[1.0, -1.0, 2.0]);
        let demos = vec![gen_chain(&theta, 0.1), gen_chain(&theta, -0.2)];
        let p = build_prompt(&demos, 0.7).unwrap();
        let mut expect = demos[0].z.clone();
        expect.extend(&demos[1].z);
        expect.push(0.7);
        assert_eq!(p.scalars, expect);
        assert_eq!(p.roles[4], StepRole { demo: 1, h: 1 });
        assert_eq!(p.roles[6], StepRole { demo: 2, h: 0 });
        assert_eq!(build_prompt(&[], 0.3).unwrap().scalars.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = CotInstance::sample(&theta, 20, &mut rng);
        assert_eq!(inst.prompt().scalars.len(), 61);
        assert_eq!(LatentSpace::default().prompt_len(20), 61);
        let bad = vec![gen_chain(&theta, 0.0), gen_chain(&t(&[1.0]), 0.0)];
        assert!(matches!(build_prompt(&bad, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let theta = t(&[2.0, -1.0, 1.0]);
        let a = CotInstance::sample(&theta, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = CotInstance::sample(&theta, 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(child_seed(1, 0), child_seed(1, 1));
    }

    proptest::proptest! {
        #[test]
        fn chain_recomputes_bitwise(a in 0usize..4, b in 0usize..4, c in 0usize..4, zeta in -0.5f64..=0.5) {
            let v = [-2.0, -1.0, 1.0, 2.0];
            let theta = t(&[v[a], v[b], v[c]]);
            let s = gen_chain(&theta, zeta);
            let z0 = leaky_relu(zeta + theta.0[0]);
            let z1 = leaky_relu(z0 + theta.0[1]);
            let z2 = leaky_relu(z1 + theta.0[2]);
            proptest::prop_assert_eq!(s.z, vec![z0, z1, z2]);
        }

        #[test]
        fn partitions_always_valid(seed in 0u64..500, ratio in 0.1f64..5.0) {
            let space = LatentSpace::default();
            let all = enumerate_theta_space(&space);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(p) = partition_theta(&space, ratio, &mut rng) {
                check_partition(&all, &p).unwrap();
                proptest::prop_assert_eq!(p.test.len(), partition_test_size(64, ratio));
            }
        }
    }
}
