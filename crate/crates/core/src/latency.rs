//! Monte Carlo model of end-to-end latency for sequential and parallel
//! exploration.
//!
//! One trial draws `k1` plans, `k_i2` execution attempts per plan and a
//! multiplicative jitter per component call. The sequential time sums every
//! call; the parallel time takes the slowest plan and the slowest attempt,
//! each inflated by a communication delay. Proposer and verifier time is the
//! same in both modes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_flat_kv, ConfigError};
use crate::par;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("invalid latency spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Plans per trial are capped so a (trial, plan) pair fits one stream id.
const MAX_PLANS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModelSpec {
    pub t_plan_component: f64,
    pub t_generate_component: f64,
    pub t_exec_component: f64,
    pub t_propose_component: f64,
    pub t_verify_component: f64,
    pub k1: usize,
    pub k2_mu: f64,
    pub k2_sigma: f64,
    /// Fractional delay added to each max stage in parallel mode.
    pub comm_delay_range: (f64, f64),
    /// Log-normal spread of a single component call around its mean.
    pub jitter_sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for LatencyModelSpec {
    fn default() -> Self {
        LatencyModelSpec {
            t_plan_component: 18.9,
            t_generate_component: 20.4,
            t_exec_component: 2.4,
            t_propose_component: 51.8,
            t_verify_component: 10.6,
            k1: 3,
            k2_mu: 8.0,
            k2_sigma: 2.0,
            comm_delay_range: (0.05, 0.20),
            jitter_sigma: 0.25,
            trials: 10_000,
            seed: 42,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "t_plan_component",
    "t_generate_component",
    "t_exec_component",
    "t_propose_component",
    "t_verify_component",
    "k1",
    "k2_mu",
    "k2_sigma",
    "comm_delay_min",
    "comm_delay_max",
    "jitter_sigma",
    "trials",
    "seed",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl LatencyModelSpec {
    /// Parses `key = value` lines over the defaults. Unknown keys are errors.
    pub fn from_config_str(text: &str) -> Result<Self, LatencyError> {
        let mut spec = LatencyModelSpec::default();
        for (line, key, value) in parse_flat_kv(text)? {
            let v = value.as_str();
            match key.as_str() {
                "t_plan_component" => spec.t_plan_component = num(&key, v)?,
                "t_generate_component" => spec.t_generate_component = num(&key, v)?,
                "t_exec_component" => spec.t_exec_component = num(&key, v)?,
                "t_propose_component" => spec.t_propose_component = num(&key, v)?,
                "t_verify_component" => spec.t_verify_component = num(&key, v)?,
                "k1" => spec.k1 = num(&key, v)?,
                "k2_mu" => spec.k2_mu = num(&key, v)?,
                "k2_sigma" => spec.k2_sigma = num(&key, v)?,
                "comm_delay_min" => spec.comm_delay_range.0 = num(&key, v)?,
                "comm_delay_max" => spec.comm_delay_range.1 = num(&key, v)?,
                "jitter_sigma" => spec.jitter_sigma = num(&key, v)?,
                "trials" => spec.trials = num(&key, v)?,
                "seed" => spec.seed = num(&key, v)?,
                _ => return Err(ConfigError::UnknownKey { line, key }.into()),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let bad = |m: String| Err(LatencyError::InvalidSpec(m));
        for (name, t) in [
            ("t_plan_component", self.t_plan_component),
            ("t_generate_component", self.t_generate_component),
            ("t_exec_component", self.t_exec_component),
            ("t_propose_component", self.t_propose_component),
            ("t_verify_component", self.t_verify_component),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("{name} must be a positive number, got {t}"));
            }
        }
        if self.k1 == 0 || self.k1 >= MAX_PLANS {
            return bad(format!("k1 must be in 1..{MAX_PLANS}, got {}", self.k1));
        }
        if !self.k2_mu.is_finite() {
            return bad("k2_mu must be finite".into());
        }
        if !(self.k2_sigma.is_finite() && self.k2_sigma >= 0.0) {
            return bad(format!("k2_sigma must be >= 0, got {}", self.k2_sigma));
        }
        let (lo, hi) = self.comm_delay_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("comm delay range ({lo}, {hi}) must be ordered within [0, 1]"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return bad(format!("jitter_sigma must be >= 0, got {}", self.jitter_sigma));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        Ok(())
    }

    /// Generator plus executor time of one attempt, before jitter.
    pub fn t_attempt(&self) -> f64 {
        self.t_generate_component + self.t_exec_component
    }
}

/// Which component a jitter factor is drawn for. Indices name the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Plan(usize),
    Generate(usize),
    Exec(usize),
    Propose,
    Verify,
}

/// Source of the random quantities of one trial.
pub trait Sampler {
    /// Execution attempts for plan `plan`, at least 1.
    fn k2(&mut self, spec: &LatencyModelSpec, plan: usize) -> usize;
    /// Multiplicative factor on one component call.
    fn factor(&mut self, spec: &LatencyModelSpec, draw: Draw) -> f64;
    /// Fractional delay for one max stage.
    fn comm_delay(&mut self, spec: &LatencyModelSpec) -> f64;
}

/// Round half up, then clamp to at least one attempt.
pub fn discretize_k2(x: f64) -> usize {
    let r = (x + 0.5).floor();
    if r.is_nan() || r < 1.0 {
        1
    } else {
        r as usize
    }
}

/// Seeded sampler for one trial. Each plan has its own ChaCha stream, so
/// changing `k1` or one plan's attempt count leaves other draws unchanged.
#[derive(Debug, Clone)]
pub struct RandomSampler {
    seed: u64,
    trial: u64,
    global: ChaCha8Rng,
    plans: Vec<ChaCha8Rng>,
}

impl RandomSampler {
    pub fn new(seed: u64, trial: usize) -> Self {
        let trial = trial as u64;
        RandomSampler { seed, trial, global: Self::stream(seed, trial, 0), plans: Vec::new() }
    }

    fn stream(seed: u64, trial: u64, slot: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((trial << 24) | slot);
        rng
    }

    fn plan_rng(&mut self, plan: usize) -> &mut ChaCha8Rng {
        while self.plans.len() <= plan {
            let slot = self.plans.len() as u64 + 1;
            self.plans.push(Self::stream(self.seed, self.trial, slot));
        }
        &mut self.plans[plan]
    }
}

fn lognormal_unit_mean(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (sigma * z - sigma * sigma / 2.0).exp()
}

impl Sampler for RandomSampler {
    fn k2(&mut self, spec: &LatencyModelSpec, plan: usize) -> usize {
        let z: f64 = self.plan_rng(plan).sample(StandardNormal);
        discretize_k2(spec.k2_mu + spec.k2_sigma * z)
    }

    fn factor(&mut self, spec: &LatencyModelSpec, draw: Draw) -> f64 {
        let rng = match draw {
            Draw::Plan(i) | Draw::Generate(i) | Draw::Exec(i) => self.plan_rng(i),
            Draw::Propose | Draw::Verify => &mut self.global,
        };
        lognormal_unit_mean(rng, spec.jitter_sigma)
    }

    fn comm_delay(&mut self, spec: &LatencyModelSpec) -> f64 {
        let (lo, hi) = spec.comm_delay_range;
        if lo == hi {
            lo
        } else {
            self.global.random_range(lo..=hi)
        }
    }
}

/// No randomness: fixed attempt count, unit factors and a fixed delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedSampler {
    pub k2: usize,
    pub comm_delay: f64,
}

impl Sampler for FixedSampler {
    fn k2(&mut self, _: &LatencyModelSpec, _: usize) -> usize {
        self.k2.max(1)
    }
    fn factor(&mut self, _: &LatencyModelSpec, _: Draw) -> f64 {
        1.0
    }
    fn comm_delay(&mut self, _: &LatencyModelSpec) -> f64 {
        self.comm_delay
    }
}

/// Every component time of one trial; both modes are computed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDraw {
    /// `t_plan^i`.
    pub plans: Vec<f64>,
    /// `t_generate^{ij}` per plan, generator plus executor.
    pub attempts: Vec<Vec<f64>>,
    /// Proposer plus verifier.
    pub t_propose: f64,
    /// Delays for the plan stage and the attempt stage.
    pub comm: [f64; 2],
}

impl TrialDraw {
    pub fn sample(spec: &LatencyModelSpec, s: &mut dyn Sampler) -> Self {
        // Global draws first so that k1 only appends plan streams.
        let t_propose = spec.t_propose_component * s.factor(spec, Draw::Propose)
            + spec.t_verify_component * s.factor(spec, Draw::Verify);
        let comm = [s.comm_delay(spec), s.comm_delay(spec)];
        let mut plans = Vec::with_capacity(spec.k1);
        let mut attempts = Vec::with_capacity(spec.k1);
        for i in 0..spec.k1 {
            let k2 = s.k2(spec, i);
            plans.push(spec.t_plan_component * s.factor(spec, Draw::Plan(i)));
            let row = (0..k2)
                .map(|_| {
                    spec.t_generate_component * s.factor(spec, Draw::Generate(i))
                        + spec.t_exec_component * s.factor(spec, Draw::Exec(i))
                })
                .collect();
            attempts.push(row);
        }
        TrialDraw { plans, attempts, t_propose, comm }
    }

    pub fn sequential(&self) -> f64 {
        let t_plan: f64 = self.plans.iter().sum();
        let t_generate: f64 = self.attempts.iter().flatten().sum();
        t_plan + t_generate + self.t_propose
    }

    pub fn parallel(&self) -> f64 {
        let flat: Vec<f64> = self.attempts.iter().flatten().copied().collect();
        max_stage(&self.plans, self.comm[0]) + max_stage(&flat, self.comm[1]) + self.t_propose
    }
}

/// Slowest branch plus its delay. The delay never exceeds the work the
/// other branches would have added sequentially, so a stage is never slower
/// than its sum.
fn max_stage(xs: &[f64], delay: f64) -> f64 {
    let max = xs.iter().copied().fold(0.0, f64::max);
    let sum: f64 = xs.iter().sum();
    max + (delay * max).min((sum - max).max(0.0))
}

pub fn sequential_time(spec: &LatencyModelSpec, sampler: &mut dyn Sampler) -> Result<f64, LatencyError> {
    spec.validate()?;
    Ok(TrialDraw::sample(spec, sampler).sequential())
}

pub fn parallel_time(spec: &LatencyModelSpec, sampler: &mut dyn Sampler) -> Result<f64, LatencyError> {
    spec.validate()?;
    Ok(TrialDraw::sample(spec, sampler).parallel())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSample {
    pub trial: usize,
    pub sequential: f64,
    pub parallel: f64,
}

/// Paired samples for trials `0..spec.trials`.
pub fn simulate(spec: &LatencyModelSpec) -> Result<Vec<TrialSample>, LatencyError> {
    spec.validate()?;
    Ok(par::map_range(spec.trials, |t| trial(spec, t)))
}

/// [`simulate`] on the calling thread only.
pub fn simulate_sequential(spec: &LatencyModelSpec) -> Result<Vec<TrialSample>, LatencyError> {
    spec.validate()?;
    Ok(par::map_range_sequential(spec.trials, |t| trial(spec, t)))
}

fn trial(spec: &LatencyModelSpec, t: usize) -> TrialSample {
    let draw = TrialDraw::sample(spec, &mut RandomSampler::new(spec.seed, t));
    TrialSample { trial: t, sequential: draw.sequential(), parallel: draw.parallel() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub trials: usize,
    pub seq_mean: f64,
    pub par_mean: f64,
    pub ratio: f64,
    pub seq_ci95: Interval,
    pub par_ci95: Interval,
}

fn mean_ci(xs: impl Iterator<Item = f64> + Clone) -> (f64, Interval) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, Interval { lo: mean, hi: mean });
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, Interval { lo: mean - half, hi: mean + half })
}

/// Means and normal-approximation 95% intervals over `samples`.
pub fn summarize(samples: &[TrialSample]) -> Result<LatencyEstimate, LatencyError> {
    if samples.is_empty() {
        return Err(LatencyError::InvalidSpec("no samples".into()));
    }
    let (seq_mean, seq_ci95) = mean_ci(samples.iter().map(|s| s.sequential));
    let (par_mean, par_ci95) = mean_ci(samples.iter().map(|s| s.parallel));
    Ok(LatencyEstimate { trials: samples.len(), seq_mean, par_mean, ratio: seq_mean / par_mean, seq_ci95, par_ci95 })
}

pub fn estimate(spec: &LatencyModelSpec) -> Result<LatencyEstimate, LatencyError> {
    summarize(&simulate(spec)?)
}

/// CSV of `mode,trial,seconds` rows followed by summary rows with an empty
/// trial column.
pub fn write_csv<W: Write>(out: W, samples: &[TrialSample], est: &LatencyEstimate) -> Result<(), LatencyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "trial", "seconds"])?;
    for s in samples {
        w.write_record(["sequential", &s.trial.to_string(), &format!("{:.6}", s.sequential)])?;
        w.write_record(["parallel", &s.trial.to_string(), &format!("{:.6}", s.parallel)])?;
    }
    for (mode, v) in [("sequential_mean", est.seq_mean), ("parallel_mean", est.par_mean), ("ratio", est.ratio)] {
        w.write_record([mode, "", &format!("{v:.6}")])?;
    }
    w.flush()?;
    Ok(())
}
