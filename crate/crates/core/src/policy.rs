//! The deterministic policy: a Transformer encoder reads the return history
//! and emits return views, a small CNN emits the risk aversion, and the
//! Black-Litterman posterior turns both into target weights. Everything is
//! built on a `gradnet` tape so the map differentiates end to end.

use gradnet::{linalg, GradError, Graph, Init, ParamSpec, ParamStore, Tensor, Var};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blmodel::{self, BlError};
use crate::convert::matrix_to_tensor;
use crate::marketdata::AgentState;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error(transparent)]
    Bl(BlError),
    #[error(transparent)]
    Grad(GradError),
    #[error("state history is {got:?}, policy expects {expected:?}")]
    StateShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("invalid policy config: {0}")]
    Config(String),
}

impl From<GradError> for PolicyError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NotPositiveDefinite { .. } => PolicyError::SingularCovariance,
            e => PolicyError::Grad(e),
        }
    }
}

impl From<BlError> for PolicyError {
    fn from(e: BlError) -> Self {
        match e {
            BlError::SingularCovariance => PolicyError::SingularCovariance,
            e => PolicyError::Bl(e),
        }
    }
}

/// Maps a state to target weights of the investment amount, as an `[n, 1]`
/// node on the caller's tape.
pub trait Policy: Send + Sync {
    fn n_assets(&self) -> usize;

    fn param_specs(&self) -> Vec<ParamSpec>;

    fn forward(&self, g: &mut Graph, params: &ParamStore, state: &AgentState) -> Result<Var, PolicyError>;

    fn init_params(&self, seed: u64) -> Result<ParamStore, PolicyError> {
        Ok(ParamStore::init(&self.param_specs(), seed)?)
    }

    fn weights(&self, params: &ParamStore, state: &AgentState) -> Result<Vec<f64>, PolicyError> {
        let mut g = Graph::new();
        let w = self.forward(&mut g, params, state)?;
        Ok(g.value(w).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub model_dim: usize,
    /// Attention logits are divided by the square root of this.
    pub attn_scale: f64,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub positional_encoding: bool,
}

impl TransformerConfig {
    pub fn new(n_assets: usize) -> Self {
        Self {
            depth: 6,
            model_dim: n_assets,
            attn_scale: 1.0,
            mlp_hidden: 4 * n_assets,
            head_hidden: 3712,
            positional_encoding: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    BlackLitterman,
    /// Long-only weights from a softmax over the view logits.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub transformer: TransformerConfig,
    pub history_rows: usize,
    pub tau: f64,
    pub head: Head,
}

impl PolicyConfig {
    pub fn new(n_assets: usize, history_rows: usize) -> Self {
        Self {
            transformer: TransformerConfig::new(n_assets),
            history_rows,
            tau: 1.0,
            head: Head::BlackLitterman,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let t = &self.transformer;
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if t.depth == 0 {
            return bad("depth must be at least 1");
        }
        if t.model_dim == 0 || t.mlp_hidden == 0 || t.head_hidden == 0 || self.history_rows == 0 {
            return bad("dimensions must be positive");
        }
        if !(t.attn_scale > 0.0) {
            return bad("attention scale must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        Ok(())
    }
}

/// Floor added to the softplus output of the risk-aversion network.
pub const DELTA_FLOOR: f64 = 1e-4;
const CONV1: usize = 8;
const CONV2: usize = 16;
const FC_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutput {
    pub q: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct BdaPolicy {
    cfg: PolicyConfig,
}

impl BdaPolicy {
    pub fn new(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn n(&self) -> usize {
        self.cfg.transformer.model_dim
    }

    fn flat_len(&self) -> usize {
        let h = self.cfg.history_rows.div_ceil(2).div_ceil(2);
        let w = self.n().div_ceil(2).div_ceil(2);
        CONV2 * h * w
    }

    fn check(&self, state: &AgentState) -> Result<(), PolicyError> {
        let got = state.history.shape();
        let expected = (self.cfg.history_rows, self.n());
        if got != expected {
            return Err(PolicyError::StateShape { got, expected });
        }
        Ok(())
    }

    fn transformer_specs(&self) -> Vec<ParamSpec> {
        let (n, t) = (self.n(), &self.cfg.transformer);
        let mut specs = vec![ParamSpec::new("tf.cls", &[1, n], Init::Normal { std: 0.02 })];
        for l in 0..t.depth {
            let p = |s: &str| format!("tf.{l}.{s}");
            specs.extend([
                ParamSpec::new(p("ln1.g"), &[n], Init::Ones),
                ParamSpec::zeros(p("ln1.b"), &[n]),
                ParamSpec::weight(p("wq"), n, n),
                ParamSpec::weight(p("wk"), n, n),
                ParamSpec::weight(p("wv"), n, n),
                ParamSpec::new(p("ln2.g"), &[n], Init::Ones),
                ParamSpec::zeros(p("ln2.b"), &[n]),
                ParamSpec::weight(p("mlp.w1"), n, t.mlp_hidden),
                ParamSpec::zeros(p("mlp.b1"), &[t.mlp_hidden]),
                ParamSpec::weight(p("mlp.w2"), t.mlp_hidden, n),
                ParamSpec::zeros(p("mlp.b2"), &[n]),
            ]);
        }
        specs.push(ParamSpec::weight("head.w1", n, t.head_hidden));
        specs.push(ParamSpec::weight("head.w2", t.head_hidden, n));
        specs
    }

    fn cnn_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                "cnn.conv1.w",
                &[CONV1, 1, 3, 3],
                Init::XavierUniform { fan_in: 9, fan_out: CONV1 * 9 },
            ),
            ParamSpec::zeros("cnn.conv1.b", &[CONV1]),
            ParamSpec::new(
                "cnn.conv2.w",
                &[CONV2, CONV1, 3, 3],
                Init::XavierUniform { fan_in: CONV1 * 9, fan_out: CONV2 * 9 },
            ),
            ParamSpec::zeros("cnn.conv2.b", &[CONV2]),
            ParamSpec::weight("cnn.fc1.w", self.flat_len(), FC_HIDDEN),
            ParamSpec::zeros("cnn.fc1.b", &[FC_HIDDEN]),
            ParamSpec::weight("cnn.fc2.w", FC_HIDDEN, 1),
            ParamSpec::zeros("cnn.fc2.b", &[1]),
        ]
    }

    /// Head output `y` as a `[1, n]` row, before variance calibration.
    pub fn view_logits(&self, g: &mut Graph, params: &ParamStore, history: &DMatrix<f64>) -> Result<Var, PolicyError> {
        let t = &self.cfg.transformer;
        let x = g.constant(matrix_to_tensor(history));
        let cls = g.param(params, "tf.cls")?;
        let mut z = g.concat_rows(&[cls, x])?;
        if t.positional_encoding {
            let pe = g.constant(sinusoidal_encoding(history.nrows() + 1, self.n()));
            z = g.add(z, pe)?;
        }
        let inv_scale = 1.0 / t.attn_scale.sqrt();
        for l in 0..t.depth {
            let mut p = |s: &str| g.param(params, &format!("tf.{l}.{s}"));
            let (g1, b1, wq, wk, wv) = (p("ln1.g")?, p("ln1.b")?, p("wq")?, p("wk")?, p("wv")?);
            let (g2, b2) = (p("ln2.g")?, p("ln2.b")?);
            let (w1, c1, w2, c2) = (p("mlp.w1")?, p("mlp.b1")?, p("mlp.w2")?, p("mlp.b2")?);

            let h = g.layer_norm(z, g1, b1)?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, inv_scale);
            let a = g.softmax_rows(s)?;
            let att = g.matmul(a, v)?;
            z = g.add(z, att)?;

            let h = g.layer_norm(z, g2, b2)?;
            let u = g.matmul(h, w1)?;
            let u = g.add_row(u, c1)?;
            let u = g.gelu(u);
            let u = g.matmul(u, w2)?;
            let u = g.add_row(u, c2)?;
            z = g.add(z, u)?;
        }
        let z0 = g.slice_rows(z, 0, 1)?;
        let hw1 = g.param(params, "head.w1")?;
        let hw2 = g.param(params, "head.w2")?;
        let hid = g.matmul(z0, hw1)?;
        let hid = g.log_sigmoid(hid);
        Ok(g.matmul(hid, hw2)?)
    }

    /// Views Q = diag(Σʰ) ⊙ y as an `[n, 1]` column.
    pub fn transformer_views(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        history: &DMatrix<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<Var, PolicyError> {
        let y = self.view_logits(g, params, history)?;
        let y = g.transpose(y)?;
        let var = g.constant(Tensor::column(cov.diagonal().iter().copied().collect()));
        Ok(g.mul(var, y)?)
    }

    /// Risk aversion δ > 0 as a one-element node.
    pub fn cnn_risk_aversion(&self, g: &mut Graph, params: &ParamStore, history: &DMatrix<f64>) -> Result<Var, PolicyError> {
        let mut p = |s: &str| g.param(params, s);
        let (w1, b1, w2, b2) = (p("cnn.conv1.w")?, p("cnn.conv1.b")?, p("cnn.conv2.w")?, p("cnn.conv2.b")?);
        let (f1, fb1, f2, fb2) = (p("cnn.fc1.w")?, p("cnn.fc1.b")?, p("cnn.fc2.w")?, p("cnn.fc2.b")?);
        let (rows, n) = history.shape();
        let img = g.constant(matrix_to_tensor(history).reshaped(vec![1, rows, n])?);
        let x = g.conv2d(img, w1, b1, 1)?;
        let x = g.gelu(x);
        let x = g.max_pool2d(x, 2)?;
        let x = g.conv2d(x, w2, b2, 1)?;
        let x = g.gelu(x);
        let x = g.max_pool2d(x, 2)?;
        let x = g.reshape(x, &[1, self.flat_len()])?;
        let x = g.matmul(x, f1)?;
        let x = g.add_row(x, fb1)?;
        let x = g.gelu(x);
        let x = g.matmul(x, f2)?;
        let x = g.add_row(x, fb2)?;
        let x = g.softplus(x);
        Ok(g.add_const(x, DELTA_FLOOR))
    }

    /// Black-Litterman weights from views `q [n,1]` and risk aversion
    /// `delta`, with the covariance held constant.
    pub fn bl_weights(&self, g: &mut Graph, cov: &DMatrix<f64>, q: Var, delta: Var) -> Result<Var, PolicyError> {
        bl_weights(g, cov, self.cfg.tau, q, delta)
    }

    /// Numeric views and risk aversion for a state.
    pub fn views(&self, params: &ParamStore, state: &AgentState) -> Result<ViewOutput, PolicyError> {
        self.check(state)?;
        let cov = blmodel::historical_cov(&state.history)?.cov;
        let mut g = Graph::new();
        let q = self.transformer_views(&mut g, params, &state.history, &cov)?;
        let d = self.cnn_risk_aversion(&mut g, params, &state.history)?;
        Ok(ViewOutput {
            q: g.value(q).data().to_vec(),
            delta: g.value(d).item()?,
        })
    }
}

impl Policy for BdaPolicy {
    fn n_assets(&self) -> usize {
        self.n()
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.transformer_specs();
        if self.cfg.head == Head::BlackLitterman {
            specs.extend(self.cnn_specs());
        }
        specs
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, state: &AgentState) -> Result<Var, PolicyError> {
        self.check(state)?;
        match self.cfg.head {
            Head::Softmax => {
                let y = self.view_logits(g, params, &state.history)?;
                let w = g.softmax_rows(y)?;
                Ok(g.transpose(w)?)
            }
            Head::BlackLitterman => {
                let cov = blmodel::historical_cov(&state.history)?.cov;
                let delta = self.cnn_risk_aversion(g, params, &state.history)?;
                let q = self.transformer_views(g, params, &state.history, &cov)?;
                self.bl_weights(g, &cov, q, delta)
            }
        }
    }
}

/// `w = δ (Σᵛ)⁻¹ μᵛ` with `Π = Σe/(nδ)`, `Ω = diag(τΣ)`,
/// `A = (τΣ)⁻¹ + Ω⁻¹`, `μᵛ = A⁻¹[(τΣ)⁻¹Π + Ω⁻¹Q]`, `Σᵛ = Σ + A⁻¹`.
pub fn bl_weights(g: &mut Graph, cov: &DMatrix<f64>, tau: f64, q: Var, delta: Var) -> Result<Var, PolicyError> {
    let n = cov.nrows();
    let sigma = matrix_to_tensor(cov);
    let tau_sigma: Vec<f64> = sigma.data().iter().map(|v| v * tau).collect();
    let omega_inv: Vec<f64> = (0..n).map(|i| 1.0 / tau_sigma[i * n + i]).collect();

    let eye = identity(n);
    let chol = linalg::cholesky(&tau_sigma, n)?;
    let mut ts_inv = eye.clone();
    linalg::cholesky_solve(&chol, n, &mut ts_inv, n);
    let mut a = ts_inv;
    for i in 0..n {
        a[i * n + i] += omega_inv[i];
    }
    let mut a_inv = eye;
    linalg::cholesky_solve(&linalg::cholesky(&a, n)?, n, &mut a_inv, n);
    let post_cov: Vec<f64> = sigma.data().iter().zip(&a_inv).map(|(s, ai)| s + ai).collect();

    let e_over_n = Tensor::column(
        (0..n)
            .map(|i| (0..n).map(|j| sigma.data()[i * n + j]).sum::<f64>() / n as f64)
            .collect(),
    );
    let sigma_e = g.constant(e_over_n);
    let inv_delta = g.recip(delta);
    let prior = g.mul_scalar(sigma_e, inv_delta)?;

    let ts = g.constant(Tensor::matrix(n, n, tau_sigma)?);
    let from_prior = g.spd_solve(ts, prior)?;
    let oi = g.constant(Tensor::column(omega_inv));
    let from_views = g.mul(oi, q)?;
    let rhs = g.add(from_prior, from_views)?;
    let a = g.constant(Tensor::matrix(n, n, a)?);
    let mean = g.spd_solve(a, rhs)?;
    let pc = g.constant(Tensor::matrix(n, n, post_cov)?);
    let z = g.spd_solve(pc, mean)?;
    Ok(g.mul_scalar(z, delta)?)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Fixed sine/cosine position code, `rows x dim`.
pub fn sinusoidal_encoding(rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for pos in 0..rows {
        for j in 0..dim {
            let freq = 10000f64.powf((j - j % 2) as f64 / dim as f64);
            let a = pos as f64 / freq;
            data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::matrix(rows, dim, data).expect("shape matches")
}

/// Learns one weight vector φ and plays it in every state.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    n: usize,
    init: Init,
}

impl ConstantPolicy {
    pub fn new(n: usize) -> Self {
        Self { n, init: Init::Zeros }
    }

    pub fn with_init(n: usize, init: Init) -> Self {
        Self { n, init }
    }
}

impl Policy for ConstantPolicy {
    fn n_assets(&self) -> usize {
        self.n
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::new("phi", &[self.n, 1], self.init)]
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, _state: &AgentState) -> Result<Var, PolicyError> {
        Ok(g.param(params, "phi")?)
    }
}
