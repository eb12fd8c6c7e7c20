//! Policy-gradient training against a foresight target.
//!
//! Each stage fills a replay buffer by rolling the current policy through
//! the training market, takes ⌊M/N⌋ plain gradient-ascent steps on sampled
//! minibatches, and then replays the whole market greedily to track the
//! in-sample accumulated return and reward.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use gradnet::{GradError, Graph, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blmodel::{self, BlError};
use crate::convert::{matrix_to_tensor, vector_to_column};
use crate::env::MarketEnv;
use crate::exchange::{portfolio_variance, step_period, target_quantity, ExchangeError, Ledger, PeriodOutcome};
use crate::marketdata::AgentState;
use crate::policy::{Policy, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at stage {stage}: {reason}")]
    DivergenceDetected {
        stage: usize,
        reason: String,
        trace: TrainTrace,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Bl(#[from] BlError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("every transition of a stage ended in bankruptcy")]
    EmptyBuffer,
    #[error("{0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// −(Γ − ρ)², pulls ρ toward the foresight target.
    TargetValue,
    /// ρ itself.
    MaximizeRho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub target_step: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub initial_amount: f64,
    pub buffer_capacity: usize,
    /// Global gradient-norm cap; `inf` disables clipping.
    pub grad_clip: f64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.002,
            lambda3: 1.0,
            learning_rate: 1e-5,
            minibatch: 128,
            target_step: 1080,
            total_steps: 300_000,
            seed: 0,
            initial_amount: 1e8,
            buffer_capacity: 1 << 14,
            grad_clip: 1e3,
            objective: Objective::TargetValue,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.lambda3 > 0.0) {
            return bad("lambda3 must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be a non-negative number");
        }
        if self.minibatch == 0 || self.target_step < self.minibatch {
            return bad("need 0 < minibatch <= target_step");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be positive");
        }
        if !(self.initial_amount > 0.0) {
            return bad("initial amount must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// r = ξ/K − (λ₁/2)V − (λ₂/2)ε.
pub fn env_reward(outcome: &PeriodOutcome, variance: f64, cfg: &TrainConfig) -> f64 {
    reward(outcome.xi, outcome.daily_returns.len(), variance, outcome.txn_scale_ratio, cfg)
}

pub fn reward(xi: f64, days: usize, variance: f64, txn_scale: f64, cfg: &TrainConfig) -> f64 {
    xi / days as f64 - 0.5 * cfg.lambda1 * variance - 0.5 * cfg.lambda2 * txn_scale
}

/// ρ = wᵀμ − (λ₁/2)wᵀΣw − (λ₂/2)‖w − w_prev‖₁.
pub fn evaluation_fn(w: &[f64], w_prev: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>, cfg: &TrainConfig) -> f64 {
    let ret: f64 = w.iter().zip(mean.iter()).map(|(a, b)| a * b).sum();
    let turnover: f64 = w.iter().zip(w_prev).map(|(a, b)| (a - b).abs()).sum();
    ret - 0.5 * cfg.lambda1 * portfolio_variance(w, cov) - 0.5 * cfg.lambda2 * turnover
}

/// Σ⁻¹μ/λ₃.
pub fn target_weights(mean: &DVector<f64>, cov: &DMatrix<f64>, cfg: &TrainConfig) -> Result<Vec<f64>, BlError> {
    Ok(blmodel::spd_solve(cov, mean)?.iter().map(|v| v / cfg.lambda3).collect())
}

/// Γ = ρ(Σ⁻¹μ/λ₃).
pub fn target_value(mean: &DVector<f64>, cov: &DMatrix<f64>, w_prev: &[f64], cfg: &TrainConfig) -> Result<f64, BlError> {
    let w = target_weights(mean, cov, cfg)?;
    Ok(evaluation_fn(&w, w_prev, mean, cov, cfg))
}

/// θ = −(Γ − ρ(w))².
pub fn objective(w: &[f64], w_prev: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>, cfg: &TrainConfig) -> Result<f64, BlError> {
    let gap = target_value(mean, cov, w_prev, cfg)? - evaluation_fn(w, w_prev, mean, cov, cfg);
    Ok(-gap * gap)
}

/// ρ on the tape for weights `w [n,1]`.
pub fn evaluation_node(
    g: &mut Graph,
    w: Var,
    w_prev: &[f64],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<Var, GradError> {
    let mu = g.constant(vector_to_column(mean));
    let sigma = g.constant(matrix_to_tensor(cov));
    let prev = g.constant(Tensor::column(w_prev.to_vec()));
    let ret = g.dot(w, mu)?;
    let sw = g.matmul(sigma, w)?;
    let var = g.dot(w, sw)?;
    let diff = g.sub(w, prev)?;
    let diff = g.abs(diff);
    let turnover = g.sum(diff);
    let var = g.scale(var, -0.5 * cfg.lambda1);
    let turnover = g.scale(turnover, -0.5 * cfg.lambda2);
    let rho = g.add(ret, var)?;
    g.add(rho, turnover)
}

/// θ on the tape, given the precomputed target Γ.
pub fn objective_node(g: &mut Graph, rho: Var, target: f64) -> Var {
    let gap = g.neg(rho);
    let gap = g.add_const(gap, target);
    let sq = g.mul(gap, gap).expect("same shape");
    g.neg(sq)
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: AgentState,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: AgentState,
    pub period: usize,
    /// Γ for this transition's realized moments and previous weights.
    pub target: f64,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Up to `k` distinct indices, uniformly at random.
    pub fn sample(&self, rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
        rand::seq::index::sample(rng, self.items.len(), k.min(self.items.len())).into_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub steps: usize,
    /// Mean θ over the stage's last minibatch.
    pub op: f64,
    /// Mean ρ over the stage's last minibatch.
    pub ef: f64,
    pub ar_tr: f64,
    pub ard_tr: f64,
    pub mean_abs_gap: f64,
    pub gap_var: f64,
    pub target_var: f64,
    pub resets: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StageRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `stage,steps,OP,EF,AR_tr,ARD_tr`, preceded by a `# variant=` comment
    /// line when `variant` is given.
    pub fn write_csv<W: Write>(&self, mut out: W, variant: Option<&str>) -> std::io::Result<()> {
        if let Some(v) = variant {
            writeln!(out, "# variant={v}")?;
        }
        writeln!(out, "stage,steps,OP,EF,AR_tr,ARD_tr")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{},{}", r.stage, r.steps, r.op, r.ef, r.ar_tr, r.ard_tr)?;
        }
        Ok(())
    }
}

/// Realized mean and covariance of every decision period.
#[derive(Debug, Clone)]
pub struct PeriodMoments {
    first: usize,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl PeriodMoments {
    pub fn new(env: &MarketEnv) -> Result<Self, BlError> {
        let periods = env.decision_periods();
        let means = periods.clone().map(|t| env.realized_mean(t)).collect();
        let covs = periods.clone().map(|t| env.realized_cov(t)).collect::<Result<_, _>>()?;
        Ok(Self {
            first: periods.start,
            means,
            covs,
        })
    }

    pub fn mean(&self, period: usize) -> &DVector<f64> {
        &self.means[period - self.first]
    }

    pub fn cov(&self, period: usize) -> &DMatrix<f64> {
        &self.covs[period - self.first]
    }
}

struct Rollout {
    period: usize,
    ledger: Ledger,
    prev: Vec<f64>,
}

impl Rollout {
    fn new(env: &MarketEnv, initial: f64) -> Self {
        Self {
            period: env.decision_periods().start,
            ledger: Ledger::new(initial, env.n_assets()),
            prev: vec![0.0; env.n_assets()],
        }
    }

    fn restart(&mut self, env: &MarketEnv) {
        *self = Rollout::new(env, self.ledger.initial_amount);
    }

    /// One decision period. `None` when the ledger blew up and was reset.
    fn advance<P: Policy + ?Sized>(
        &mut self,
        env: &MarketEnv,
        moments: &PeriodMoments,
        policy: &P,
        params: &ParamStore,
        cfg: &TrainConfig,
    ) -> Result<Option<Transition>, TrainError> {
        let t = self.period;
        let state = env.state(t, &self.prev);
        let w = policy.weights(params, &state)?;
        let exec = env.exec_prices(t);
        let q = target_quantity(&w, self.ledger.invest_amount, &exec);
        let outcome = match step_period(&mut self.ledger, &q, &exec, &env.period_prices(t), env.costs()) {
            Ok(o) => o,
            Err(ExchangeError::Bankrupt { .. } | ExchangeError::LossExceedsInvestment { .. }) => {
                self.restart(env);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let (mean, cov) = (moments.mean(t), moments.cov(t));
        let r = env_reward(&outcome, portfolio_variance(&w, cov), cfg);
        let target = target_value(mean, cov, &state.prev_weights, cfg)?;
        let next_state = env.state(t + 1, &w);
        self.prev = w.clone();
        self.period += 1;
        if self.period >= env.grid().n_periods() {
            self.restart(env);
        }
        Ok(Some(Transition {
            state,
            action: w,
            reward: r,
            next_state,
            period: t,
            target,
        }))
    }
}

struct SampleResult {
    grads: BTreeMap<String, Tensor>,
    theta: f64,
    rho: f64,
    target: f64,
}

fn sample_gradient<P: Policy + ?Sized>(
    policy: &P,
    params: &ParamStore,
    tr: &Transition,
    moments: &PeriodMoments,
    cfg: &TrainConfig,
) -> Result<SampleResult, TrainError> {
    let mut g = Graph::new();
    let w = policy.forward(&mut g, params, &tr.state)?;
    let (mean, cov) = (moments.mean(tr.period), moments.cov(tr.period));
    let rho = evaluation_node(&mut g, w, &tr.state.prev_weights, mean, cov, cfg)?;
    let theta = objective_node(&mut g, rho, tr.target);
    let (rho_v, theta_v) = (g.value(rho).item()?, g.value(theta).item()?);
    let root = match cfg.objective {
        Objective::TargetValue => theta,
        Objective::MaximizeRho => rho,
    };
    let grads = g.backward(root)?.into_params();
    Ok(SampleResult {
        grads,
        theta: theta_v,
        rho: rho_v,
        target: tr.target,
    })
}

/// Averaged minibatch gradient and the sample statistics behind it.
pub struct BatchGradient {
    pub grads: BTreeMap<String, Tensor>,
    pub thetas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Mean of the per-sample gradients, evaluated in parallel and summed in
/// sample order.
pub fn batch_gradient<P: Policy + ?Sized>(
    policy: &P,
    params: &ParamStore,
    batch: &[&Transition],
    moments: &PeriodMoments,
    cfg: &TrainConfig,
) -> Result<BatchGradient, TrainError> {
    let results: Vec<SampleResult> = batch
        .par_iter()
        .map(|tr| sample_gradient(policy, params, tr, moments, cfg))
        .collect::<Result<_, _>>()?;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let scale = 1.0 / batch.len() as f64;
    let (mut thetas, mut rhos, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        for (name, t) in &r.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.axpy(scale, t)?,
                None => {
                    let mut t = t.clone();
                    t.scale(scale);
                    grads.insert(name.clone(), t);
                }
            }
        }
        thetas.push(r.theta);
        rhos.push(r.rho);
        targets.push(r.target);
    }
    Ok(BatchGradient {
        grads,
        thetas,
        rhos,
        targets,
    })
}

/// Greedy pass over every decision period from a fresh ledger. Returns
/// (log2(v_end/v0), accumulated reward); a blow-up ends the pass early.
pub fn evaluate<P: Policy + ?Sized>(
    env: &MarketEnv,
    moments: &PeriodMoments,
    policy: &P,
    params: &ParamStore,
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let mut ledger = Ledger::new(cfg.initial_amount, env.n_assets());
    let mut prev = vec![0.0; env.n_assets()];
    let mut ard = 0.0;
    for t in env.decision_periods() {
        let w = policy.weights(params, &env.state(t, &prev))?;
        let exec = env.exec_prices(t);
        let q = target_quantity(&w, ledger.invest_amount, &exec);
        match step_period(&mut ledger, &q, &exec, &env.period_prices(t), env.costs()) {
            Ok(out) => ard += env_reward(&out, portfolio_variance(&w, moments.cov(t)), cfg),
            Err(ExchangeError::Bankrupt { .. }) => return Ok((f64::NEG_INFINITY, ard)),
            Err(ExchangeError::LossExceedsInvestment { .. }) => break,
            Err(e) => return Err(e.into()),
        }
        prev = w;
    }
    Ok(((ledger.total_value / cfg.initial_amount).log2(), ard))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn train<P: Policy + ?Sized>(
    env: &MarketEnv,
    policy: &P,
    params: ParamStore,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainTrace), TrainError> {
    train_with(env, policy, params, cfg, |_, _| Ok(()))
}

/// Same loop with the objective replaced by ρ.
pub fn maximize_rho_train<P: Policy + ?Sized>(
    env: &MarketEnv,
    policy: &P,
    params: ParamStore,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainTrace), TrainError> {
    let cfg = TrainConfig {
        objective: Objective::MaximizeRho,
        ..cfg.clone()
    };
    train(env, policy, params, &cfg)
}

/// Runs stages until `total_steps` samples have been consumed, calling
/// `on_stage` after each stage's evaluation.
pub fn train_with<P, F>(
    env: &MarketEnv,
    policy: &P,
    mut params: ParamStore,
    cfg: &TrainConfig,
    mut on_stage: F,
) -> Result<(ParamStore, TrainTrace), TrainError>
where
    P: Policy + ?Sized,
    F: FnMut(&StageRecord, &ParamStore) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let mut trace = TrainTrace::default();
    if cfg.total_steps == 0 {
        return Ok((params, trace));
    }
    let moments = PeriodMoments::new(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rollout = Rollout::new(env, cfg.initial_amount);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut steps = 0;

    while steps < cfg.total_steps {
        let stage = trace.len() + 1;
        buffer.clear();
        let mut resets = 0;
        for _ in 0..cfg.target_step {
            match rollout.advance(env, &moments, policy, &params, cfg)? {
                Some(tr) => buffer.push(tr),
                None => resets += 1,
            }
        }
        if buffer.is_empty() {
            return Err(TrainError::EmptyBuffer);
        }

        let mut last = None;
        for _ in 0..cfg.target_step / cfg.minibatch {
            if steps >= cfg.total_steps {
                break;
            }
            let idx = buffer.sample(&mut rng, cfg.minibatch);
            let batch: Vec<&Transition> = idx.iter().filter_map(|&i| buffer.get(i)).collect();
            let mut bg = batch_gradient(policy, &params, &batch, &moments, cfg)?;
            let norm: f64 = bg.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                bg.grads.values_mut().for_each(|t| t.scale(s));
            }
            params.axpy(cfg.learning_rate, &bg.grads)?;
            steps += cfg.minibatch;
            let op = mean(&bg.thetas);
            if !op.is_finite() || !norm.is_finite() || !params.is_finite() {
                return Err(TrainError::DivergenceDetected {
                    stage,
                    reason: format!("non-finite objective {op} or gradient norm {norm}"),
                    trace,
                });
            }
            last = Some(bg);
        }
        let Some(bg) = last else { break };

        let (ar_tr, ard_tr) = evaluate(env, &moments, policy, &params, cfg)?;
        let gaps: Vec<f64> = bg.targets.iter().zip(&bg.rhos).map(|(g, r)| g - r).collect();
        let record = StageRecord {
            stage,
            steps,
            op: mean(&bg.thetas),
            ef: mean(&bg.rhos),
            ar_tr,
            ard_tr,
            mean_abs_gap: gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64,
            gap_var: variance(&gaps),
            target_var: variance(&bg.targets),
            resets,
        };
        on_stage(&record, &params)?;
        trace.records.push(record);
    }
    Ok((params, trace))
}
