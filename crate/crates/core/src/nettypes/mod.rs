//! Plain networks, residual networks, and their forward evaluation.
//!
//! Every layer kind maps `R^d -> R^d`; a [`Network`] is an ordered,
//! non-empty list of layers sharing one dimension. Values are immutable:
//! transformations such as [`Network::embed_to_dimension`] build new networks.

mod json;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actflow::ActivationFlow;
use crate::error::{Error, Result};

pub use json::{load_network, network_from_json, network_to_json, save_network};

/// Componentwise, non-decreasing, Lipschitz activation.
///
/// Adding a kind means extending the four methods below; everything else
/// (flows, jacobians, re-discretization) only goes through them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn validate(self) -> Result<Self> {
        if let ActivationKind::LeakyRelu(slope) = self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::invalid(format!(
                    "leaky_relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(self)
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::LeakyRelu(slope) => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Identity => z,
        }
    }

    /// Derivative; at the ReLU kink the subgradient 0 is used (leaky: `slope`).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn apply_vec(self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.apply(v))
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu(_) => "leaky_relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }
}

fn check_square(context: &str, m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("{context} (columns)"), m.nrows(), m.ncols()));
    }
    Ok(m.nrows())
}

fn check_len(context: &str, v: &DVector<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::dim(context, d, v.len()));
    }
    Ok(())
}

fn check_finite_mat(context: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

fn check_finite_vec(context: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

fn pad_matrix(m: &DMatrix<f64>, d_new: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d_new, d_new);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

fn pad_vector(v: &DVector<f64>, d_new: usize) -> DVector<f64> {
    let mut out = DVector::zeros(d_new);
    out.rows_mut(0, v.len()).copy_from(v);
    out
}

/// `x -> a(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainLayer {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
    activation: ActivationKind,
}

impl PlainLayer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: ActivationKind) -> Result<Self> {
        let d = check_square("plain layer W", &weight)?;
        check_len("plain layer b", &bias, d)?;
        check_finite_mat("plain layer W", &weight)?;
        check_finite_vec("plain layer b", &bias)?;
        Ok(Self {
            weight,
            bias,
            activation: activation.validate()?,
        })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Pre-activation `W x + b`.
    pub fn pre_activation(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("plain layer input", x, self.dim())?;
        Ok(&self.weight * x + &self.bias)
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.activation.apply_vec(&self.pre_activation(x)?))
    }
}

/// Two-layer residual block `x -> x + W2 a(W1 x + b1) + b2`.
///
/// `w2` and `b2` already carry the step size of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock2 {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    activation: ActivationKind,
}

impl ResBlock2 {
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let d = check_square("res2 W1", &w1)?;
        check_len("res2 b1", &b1, d)?;
        if w2.shape() != (d, d) {
            return Err(Error::dim("res2 W2", d, w2.nrows().max(w2.ncols())));
        }
        check_len("res2 b2", &b2, d)?;
        check_finite_mat("res2 W1", &w1)?;
        check_finite_mat("res2 W2", &w2)?;
        check_finite_vec("res2 b1", &b1)?;
        check_finite_vec("res2 b2", &b2)?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation: activation.validate()?,
        })
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }
    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }
    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }
    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }
    pub fn activation(&self) -> ActivationKind {
        self.activation
    }
    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    /// The residual `W2 a(W1 x + b1) + b2` alone.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let inner = self.activation.apply_vec(&(&self.w1 * x + &self.b1));
        &self.w2 * inner + &self.b2
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("res2 input", x, self.dim())?;
        Ok(x + self.residual(x))
    }
}

/// Linear residual block `x -> x + W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock1 {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl ResBlock1 {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let d = check_square("res1 W", &weight)?;
        check_len("res1 b", &bias, d)?;
        check_finite_mat("res1 W", &weight)?;
        check_finite_vec("res1 b", &bias)?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }
    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("res1 input", x, self.dim())?;
        Ok(x + &self.weight * x + &self.bias)
    }
}

/// Non-residual affine map `x -> M x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlock {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearBlock {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let d = check_square("linear M", &matrix)?;
        check_len("linear c", &offset, d)?;
        check_finite_mat("linear M", &matrix)?;
        check_finite_vec("linear c", &offset)?;
        Ok(Self { matrix, offset })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }
    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("linear input", x, self.dim())?;
        Ok(&self.matrix * x + &self.offset)
    }
}

/// One explicit Euler step of an activation flow, `y -> y + step * v_a(tau, y)`.
///
/// This is the general residual block `id + s V` whose residual is the
/// activation-flow velocity itself; for ReLU it coincides with a two-layer
/// block, for other activations it needs the flow inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStep {
    dim: usize,
    tau: f64,
    step: f64,
    flow: ActivationFlow,
}

impl ActivationStep {
    pub fn new(dim: usize, tau: f64, step: f64, flow: ActivationFlow) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("activation step dimension must be positive"));
        }
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::invalid(format!("activation step tau must lie in [0, 1), got {tau}")));
        }
        if !(step.is_finite() && step >= 0.0) {
            return Err(Error::invalid(format!("activation step size must be >= 0, got {step}")));
        }
        flow.activation().validate()?;
        Ok(Self { dim, tau, step, flow })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn flow(&self) -> &ActivationFlow {
        &self.flow
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("activation step input", x, self.dim)?;
        let v = self.flow.velocity(self.tau, x)?;
        Ok(x + v * self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Plain(PlainLayer),
    Res2(ResBlock2),
    Res1(ResBlock1),
    Linear(LinearBlock),
    ActStep(ActivationStep),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Plain(l) => l.dim(),
            Layer::Res2(l) => l.dim(),
            Layer::Res1(l) => l.dim(),
            Layer::Linear(l) => l.dim(),
            Layer::ActStep(l) => l.dim(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Layer::Plain(l) => l.eval(x),
            Layer::Res2(l) => l.eval(x),
            Layer::Res1(l) => l.eval(x),
            Layer::Linear(l) => l.eval(x),
            Layer::ActStep(l) => l.eval(x),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Plain(_) => "plain",
            Layer::Res2(_) => "res2",
            Layer::Res1(_) => "res1",
            Layer::Linear(_) => "linear",
            Layer::ActStep(_) => "act_step",
        }
    }

    fn embed(&self, d_new: usize) -> Result<Layer> {
        Ok(match self {
            Layer::Plain(l) => Layer::Plain(PlainLayer::new(
                pad_matrix(&l.weight, d_new),
                pad_vector(&l.bias, d_new),
                l.activation,
            )?),
            Layer::Res2(l) => Layer::Res2(ResBlock2::new(
                pad_matrix(&l.w1, d_new),
                pad_vector(&l.b1, d_new),
                pad_matrix(&l.w2, d_new),
                pad_vector(&l.b2, d_new),
                l.activation,
            )?),
            Layer::Res1(l) => Layer::Res1(ResBlock1::new(
                pad_matrix(&l.weight, d_new),
                pad_vector(&l.bias, d_new),
            )?),
            Layer::Linear(l) => Layer::Linear(LinearBlock::new(
                pad_matrix(&l.matrix, d_new),
                pad_vector(&l.offset, d_new),
            )?),
            Layer::ActStep(l) => Layer::ActStep(ActivationStep::new(d_new, l.tau, l.step, l.flow)?),
        })
    }
}

impl From<PlainLayer> for Layer {
    fn from(l: PlainLayer) -> Self {
        Layer::Plain(l)
    }
}
impl From<ResBlock2> for Layer {
    fn from(l: ResBlock2) -> Self {
        Layer::Res2(l)
    }
}
impl From<ResBlock1> for Layer {
    fn from(l: ResBlock1) -> Self {
        Layer::Res1(l)
    }
}
impl From<LinearBlock> for Layer {
    fn from(l: LinearBlock) -> Self {
        Layer::Linear(l)
    }
}
impl From<ActivationStep> for Layer {
    fn from(l: ActivationStep) -> Self {
        Layer::ActStep(l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("network must contain at least one layer"))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::invalid("network dimension must be positive"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.dim() != dim {
                return Err(Error::dim(format!("layer {i}"), dim, layer.dim()));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn from_layers<L: Into<Layer>>(layers: impl IntoIterator<Item = L>) -> Result<Self> {
        Self::new(layers.into_iter().map(Into::into).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("network input", x, self.dim)?;
        self.layers.iter().try_fold(x.clone(), |state, layer| layer.eval(&state))
    }

    /// Plain layers in order, or an error naming the first non-plain layer.
    pub fn plain_layers(&self) -> Result<Vec<&PlainLayer>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Plain(p) => Ok(p),
                other => Err(Error::invalid(format!(
                    "expected a plain network, layer {i} is `{}`",
                    other.kind()
                ))),
            })
            .collect()
    }

    /// Two-layer residual blocks in order, or an error naming the first other layer.
    pub fn res2_blocks(&self) -> Result<Vec<&ResBlock2>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Res2(b) => Ok(b),
                other => Err(Error::invalid(format!(
                    "expected a network of res2 blocks, layer {i} is `{}`",
                    other.kind()
                ))),
            })
            .collect()
    }

    /// Zero-pads every matrix and vector to `d_new > dim`.
    ///
    /// Inputs of the form `(x, 0)` produce outputs `(f(x), 0)`. The strict
    /// inequality guarantees every padded weight matrix is rank deficient,
    /// which lets the linear decomposition absorb reflections.
    pub fn embed_to_dimension(&self, d_new: usize) -> Result<Network> {
        if d_new <= self.dim {
            return Err(Error::invalid(format!(
                "embedding dimension must exceed the current dimension {} (got {d_new})",
                self.dim
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| l.embed(d_new))
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }
}

/// Pads a vector with trailing zeros to length `d_new`.
pub fn embed_vector(x: &DVector<f64>, d_new: usize) -> Result<DVector<f64>> {
    if d_new < x.len() {
        return Err(Error::invalid(format!(
            "cannot embed a {}-vector into dimension {d_new}",
            x.len()
        )));
    }
    Ok(pad_vector(x, d_new))
}
