//! Velocity fields for plain networks and ResNets, and terminal value
//! problems of the transport equation solved along characteristics.
//!
//! A plain layer `a(W x + b)` becomes a [`LayerFlow`] of five unit-time
//! segments: rotation by `Psi`, stretch by `Lambda + beta Pi`, rotation by
//! `Phi`, translation by `b`, then the activation flow. A network glues its
//! layer flows on a uniform partition of `[0, T]`; each wall-clock interval of
//! length `s` runs through the five local time units, so the field carries
//! the chain-rule factor `5 / s`. Because every segment's speed has a factor
//! `h'`, the glued field vanishes at every layer boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actflow::{ActivationFlow, DEFAULT_EPS_ACT};
use crate::error::{Error, Result};
use crate::integrate::{integrate, Method, TimeGrid};
use crate::lindecomp::{decompose, expm, LinearDecomposition, DEFAULT_BETA};
use crate::nettypes::{ActivationKind, Network, PlainLayer, ResBlock2};
use crate::timescale::TimeScale;

/// A time-dependent vector field `v(t, x)` on `[0, horizon] x R^dim`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn velocity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn horizon(&self) -> f64 {
        (**self).horizon()
    }
    fn velocity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).velocity(t, x)
    }
}

/// Options shared by every flow built from plain layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub beta: f64,
    pub timescale: TimeScale,
    /// The activation segment stops at local time `1 - eps_act`.
    pub eps_act: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            timescale: TimeScale::default(),
            eps_act: DEFAULT_EPS_ACT,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.eps_act > 0.0 && self.eps_act < 0.5) {
            return Err(Error::invalid(format!("eps_act must lie in (0, 0.5), got {}", self.eps_act)));
        }
        Ok(())
    }
}

/// One unit-time piece of a layer flow.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowSegment {
    /// `z' = h' A z` with `A` skew: `z(1) = exp(A) z(0)`.
    Rotation(DMatrix<f64>),
    /// `z' = h' D z` with `D` diagonal (stored as its diagonal).
    Stretch(DVector<f64>),
    /// `z' = h' b`.
    Translation(DVector<f64>),
    /// `z' = v_a(tau, z)` up to `tau = 1 - eps_act`, then at rest.
    Activation(ActivationFlow),
}

impl FlowSegment {
    pub fn name(&self) -> &'static str {
        match self {
            FlowSegment::Rotation(_) => "rotation",
            FlowSegment::Stretch(_) => "stretch",
            FlowSegment::Translation(_) => "translation",
            FlowSegment::Activation(_) => "activation",
        }
    }

    /// Velocity at local time `tau` in `[0, 1)`.
    pub fn velocity(&self, tau: f64, z: &DVector<f64>, ts: TimeScale, eps_act: f64) -> Result<DVector<f64>> {
        let h_dot = ts.h_dot(tau);
        Ok(match self {
            FlowSegment::Rotation(a) => (a * z) * h_dot,
            FlowSegment::Stretch(d) => d.component_mul(z) * h_dot,
            FlowSegment::Translation(b) => b * h_dot,
            FlowSegment::Activation(af) => {
                if tau < 1.0 - eps_act {
                    af.velocity(tau, z)?
                } else {
                    DVector::zeros(z.len())
                }
            }
        })
    }

    /// The exact time-1 map of the segment (truncated for the activation).
    pub fn end_map(&self, z: &DVector<f64>, eps_act: f64) -> Result<DVector<f64>> {
        Ok(match self {
            FlowSegment::Rotation(a) => expm(a)? * z,
            FlowSegment::Stretch(d) => d.map(f64::exp).component_mul(z),
            FlowSegment::Translation(b) => z + b,
            FlowSegment::Activation(af) => af.phi(1.0 - eps_act, z)?,
        })
    }
}

/// The five-segment flow whose time-5 map realizes one plain layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFlow {
    segments: [FlowSegment; 5],
    decomposition: LinearDecomposition,
    options: FlowOptions,
}

/// Builds `[rotation(Psi), stretch(Lambda + beta Pi), rotation(Phi), translation(b), activation(a)]`.
pub fn build_layer_flow(layer: &PlainLayer, options: &FlowOptions) -> Result<LayerFlow> {
    options.validate()?;
    let dec = decompose(layer.weight(), options.beta)?;
    let segments = [
        FlowSegment::Rotation(dec.psi.clone()),
        FlowSegment::Stretch(dec.stretch_generator()),
        FlowSegment::Rotation(dec.phi.clone()),
        FlowSegment::Translation(layer.bias().clone()),
        FlowSegment::Activation(ActivationFlow::new(layer.activation(), options.timescale)),
    ];
    Ok(LayerFlow {
        segments,
        decomposition: dec,
        options: *options,
    })
}

impl LayerFlow {
    pub const DURATION: f64 = 5.0;

    pub fn segments(&self) -> &[FlowSegment; 5] {
        &self.segments
    }

    pub fn decomposition(&self) -> &LinearDecomposition {
        &self.decomposition
    }

    pub fn options(&self) -> &FlowOptions {
        &self.options
    }

    pub fn dim(&self) -> usize {
        self.decomposition.dim()
    }

    /// Velocity at local time `tau` in `[0, 5)`; zero at every integer time.
    pub fn velocity(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        if !(0.0..Self::DURATION).contains(&tau) {
            return Err(Error::TimeOutOfRange {
                time: tau,
                start: 0.0,
                end: Self::DURATION,
            });
        }
        if z.len() != self.dim() {
            return Err(Error::dim("layer flow state", self.dim(), z.len()));
        }
        let index = (tau.floor() as usize).min(4);
        self.segments[index].velocity(tau - index as f64, z, self.options.timescale, self.options.eps_act)
    }

    /// Composition of the exact segment end maps: the layer flow at local time 5.
    pub fn exact_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.segments
            .iter()
            .try_fold(x.clone(), |z, seg| seg.end_map(&z, self.options.eps_act))
    }
}

/// Glued layer flows of a plain network on a uniform partition of `[0, T]`.
#[derive(Debug, Clone)]
pub struct PlainNetFlow {
    layers: Vec<LayerFlow>,
    grid: TimeGrid,
}

/// Field `v(t, x) = (5 / s_k) v^k((5 / s_k)(t - t_{k-1}), x)` on `[t_{k-1}, t_k)`.
pub fn build_network_flow(net: &Network, horizon: f64, options: &FlowOptions) -> Result<PlainNetFlow> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let layers = net
        .plain_layers()?
        .into_iter()
        .enumerate()
        .map(|(k, l)| build_layer_flow(l, options).map_err(|e| annotate_layer(k, e)))
        .collect::<Result<Vec<_>>>()?;
    let grid = TimeGrid::uniform(0.0, horizon, layers.len())?;
    Ok(PlainNetFlow { layers, grid })
}

fn annotate_layer(k: usize, e: Error) -> Error {
    match e {
        Error::Decomposition(msg) => Error::Decomposition(format!("layer {k}: {msg}")),
        other => other,
    }
}

/// Index `k` with `times[k] <= t < times[k + 1]`, clamped to the last interval.
fn interval_index(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&tk| tk <= t);
    k.saturating_sub(1).min(times.len() - 2)
}

fn check_time(t: f64, horizon: f64) -> Result<()> {
    let slack = 1e-12 * horizon.max(1.0);
    if t.is_finite() && t >= -slack && t <= horizon + slack {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { time: t, start: 0.0, end: horizon })
    }
}

impl PlainNetFlow {
    pub fn layers(&self) -> &[LayerFlow] {
        &self.layers
    }

    /// Layer boundaries `t_0 = 0, ..., t_L = T`.
    pub fn layer_grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Exact time-`T` map: each layer flow's segment maps composed.
    pub fn exact_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.layers.iter().try_fold(x.clone(), |z, l| l.exact_map(&z))
    }
}

impl VelocityField for PlainNetFlow {
    fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    fn horizon(&self) -> f64 {
        self.grid.end()
    }

    fn velocity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_time(t, self.horizon())?;
        if x.len() != self.dim() {
            return Err(Error::dim("network flow state", self.dim(), x.len()));
        }
        if t >= self.horizon() {
            return Ok(DVector::zeros(x.len()));
        }
        let times = self.grid.times();
        let k = interval_index(times, t);
        let s = times[k + 1] - times[k];
        let local = (LayerFlow::DURATION * (t - times[k]) / s).clamp(0.0, LayerFlow::DURATION);
        if local >= LayerFlow::DURATION {
            return Ok(DVector::zeros(x.len()));
        }
        Ok(self.layers[k].velocity(local, x)? * (LayerFlow::DURATION / s))
    }
}

/// How block parameters are extended to a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Block `k` on `[t_{k-1}, t_k)`.
    #[default]
    PiecewiseConstant,
    /// Linear between the left samples of consecutive blocks; the last block is held.
    Linear,
}

#[derive(Debug, Clone)]
struct BlockParams {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

/// `v(t, x) = W2(t) a(W1(t) x + b1(t)) + b2(t)` sampled from a ResNet.
#[derive(Debug, Clone)]
pub struct ResNetFlow {
    blocks: Vec<BlockParams>,
    activation: ActivationKind,
    grid: TimeGrid,
    interpolation: Interpolation,
}

/// Reads the blocks of a two-layer ResNet as samples of a velocity field.
///
/// Block `k` stores `s_k W2` and `s_k b2`, so the field uses `W2 / s_k`, `b2 / s_k`.
pub fn resnet_to_flow(net: &Network, horizon: f64, interpolation: Interpolation) -> Result<ResNetFlow> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let blocks: Vec<&ResBlock2> = net.res2_blocks()?;
    let activation = blocks[0].activation();
    if let Some(k) = blocks.iter().position(|b| b.activation() != activation) {
        return Err(Error::invalid(format!(
            "block {k} uses `{}` but block 0 uses `{}`; a ResNet field needs one activation",
            blocks[k].activation().name(),
            activation.name()
        )));
    }
    let grid = TimeGrid::uniform(0.0, horizon, blocks.len())?;
    let params = blocks
        .iter()
        .zip(grid.steps())
        .map(|(b, s)| {
            if s <= 0.0 {
                return Err(Error::invalid("zero step in block grid"));
            }
            Ok(BlockParams {
                w1: b.w1().clone(),
                b1: b.b1().clone(),
                w2: b.w2() / s,
                b2: b.b2() / s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResNetFlow {
        blocks: params,
        activation,
        grid,
        interpolation,
    })
}

impl ResNetFlow {
    /// The partition with one interval per block.
    pub fn block_grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    fn eval_params(&self, p: &BlockParams, x: &DVector<f64>) -> DVector<f64> {
        let inner = (&p.w1 * x + &p.b1).map(|v| self.activation.apply(v));
        &p.w2 * inner + &p.b2
    }
}

impl VelocityField for ResNetFlow {
    fn dim(&self) -> usize {
        self.blocks[0].b1.len()
    }

    fn horizon(&self) -> f64 {
        self.grid.end()
    }

    fn velocity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_time(t, self.horizon())?;
        if x.len() != self.dim() {
            return Err(Error::dim("resnet flow state", self.dim(), x.len()));
        }
        let times = self.grid.times();
        let k = interval_index(times, t);
        let here = &self.blocks[k];
        match (self.interpolation, self.blocks.get(k + 1)) {
            (Interpolation::PiecewiseConstant, _) | (Interpolation::Linear, None) => Ok(self.eval_params(here, x)),
            (Interpolation::Linear, Some(next)) => {
                let theta = ((t - times[k]) / (times[k + 1] - times[k])).clamp(0.0, 1.0);
                if theta == 0.0 {
                    return Ok(self.eval_params(here, x));
                }
                let mix = BlockParams {
                    w1: &here.w1 * (1.0 - theta) + &next.w1 * theta,
                    b1: &here.b1 * (1.0 - theta) + &next.b1 * theta,
                    w2: &here.w2 * (1.0 - theta) + &next.w2 * theta,
                    b2: &here.b2 * (1.0 - theta) + &next.b2 * theta,
                };
                Ok(self.eval_params(&mix, x))
            }
        }
    }
}

/// Fields with closed-form characteristics, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    /// `v = c`: characteristics are straight lines.
    Constant { velocity: DVector<f64>, horizon: f64 },
    /// `v = -x`: `x(t) = exp(-t) x0`.
    LinearDecay { dim: usize, horizon: f64 },
    /// `v = A x` with `A` skew: `x(t) = exp(t A) x0`.
    Rotation { generator: DMatrix<f64>, horizon: f64 },
}

impl AnalyticField {
    pub const NAMES: [&'static str; 3] = ["constant", "linear-decay", "rotation"];

    pub fn constant(velocity: DVector<f64>, horizon: f64) -> Self {
        AnalyticField::Constant { velocity, horizon }
    }

    pub fn linear_decay(dim: usize, horizon: f64) -> Self {
        AnalyticField::LinearDecay { dim, horizon }
    }

    pub fn rotation(generator: DMatrix<f64>, horizon: f64) -> Result<Self> {
        if !generator.is_square() || (&generator + generator.transpose()).amax() > 0.0 {
            return Err(Error::invalid("rotation generator must be square and skew-symmetric"));
        }
        Ok(AnalyticField::Rotation { generator, horizon })
    }

    /// The built-in fields with their default parameters: constant `(1, 1)`,
    /// decay in one dimension, quarter turn in the plane; all on `[0, 1]`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "constant" => Ok(Self::constant(DVector::from_element(2, 1.0), 1.0)),
            "linear-decay" => Ok(Self::linear_decay(1, 1.0)),
            "rotation" => {
                let q = std::f64::consts::FRAC_PI_2;
                Self::rotation(DMatrix::from_row_slice(2, 2, &[0.0, -q, q, 0.0]), 1.0)
            }
            other => Err(Error::invalid(format!(
                "unknown builtin field `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn with_horizon(mut self, new_horizon: f64) -> Self {
        match &mut self {
            AnalyticField::Constant { horizon, .. }
            | AnalyticField::LinearDecay { horizon, .. }
            | AnalyticField::Rotation { horizon, .. } => *horizon = new_horizon,
        }
        self
    }

    /// A default initial state for the field: all ones.
    pub fn default_start(&self) -> DVector<f64> {
        DVector::from_element(self.dim(), 1.0)
    }

    /// Closed-form `x(t)` from `x(0) = x0`.
    pub fn exact(&self, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        Ok(match self {
            AnalyticField::Constant { velocity, .. } => x0 + velocity * t,
            AnalyticField::LinearDecay { .. } => x0 * (-t).exp(),
            AnalyticField::Rotation { generator, .. } => expm(&(generator * t))? * x0,
        })
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> usize {
        match self {
            AnalyticField::Constant { velocity, .. } => velocity.len(),
            AnalyticField::LinearDecay { dim, .. } => *dim,
            AnalyticField::Rotation { generator, .. } => generator.nrows(),
        }
    }

    fn horizon(&self) -> f64 {
        match self {
            AnalyticField::Constant { horizon, .. }
            | AnalyticField::LinearDecay { horizon, .. }
            | AnalyticField::Rotation { horizon, .. } => *horizon,
        }
    }

    fn velocity(&self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("analytic field state", self.dim(), x.len()));
        }
        Ok(match self {
            AnalyticField::Constant { velocity, .. } => velocity.clone(),
            AnalyticField::LinearDecay { .. } => -x,
            AnalyticField::Rotation { generator, .. } => generator * x,
        })
    }
}

/// A field given by a closure.
pub struct FnField<F> {
    dim: usize,
    horizon: f64,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    pub fn new(dim: usize, horizon: f64, f: F) -> Self {
        Self { dim, horizon, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn velocity(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.f)(t, x)
    }
}

/// A scalar terminal value `f(x) = u(T, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Readout {
    /// `w . x + bias`.
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        bias: f64,
    },
    /// `x[index]`.
    Coordinate { index: usize },
}

impl Readout {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Readout::Linear { weights, bias } => {
                if weights.len() != dim {
                    return Err(Error::dim("readout weights", dim, weights.len()));
                }
                if weights.iter().chain(std::iter::once(bias)).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("readout".into()));
                }
            }
            Readout::Coordinate { index } => {
                if *index >= dim {
                    return Err(Error::invalid(format!("readout coordinate {index} out of range for dimension {dim}")));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Readout::Linear { weights, bias } => weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + bias,
            Readout::Coordinate { index } => x[*index],
        }
    }
}

/// Terminal value problem `u_t + v . grad u = 0`, `u(T, x) = f(x)`.
pub struct TransportProblem<'a> {
    pub velocity: &'a dyn VelocityField,
    pub terminal: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync),
}

impl<'a> TransportProblem<'a> {
    pub fn new(velocity: &'a dyn VelocityField, terminal: &'a (dyn Fn(&DVector<f64>) -> f64 + Sync)) -> Self {
        Self { velocity, terminal }
    }

    pub fn horizon(&self) -> f64 {
        self.velocity.horizon()
    }
}

/// `u(0, x0) = f(q(T))`, with `q` the characteristic through `x0`.
pub fn solve_tvp(problem: &TransportProblem<'_>, x0: &DVector<f64>, grid: &TimeGrid, method: Method) -> Result<f64> {
    let horizon = problem.horizon();
    let slack = 1e-12 * horizon.max(1.0);
    if grid.start().abs() > slack || (grid.end() - horizon).abs() > slack {
        return Err(Error::invalid(format!(
            "grid [{}, {}] must span [0, {horizon}]",
            grid.start(),
            grid.end()
        )));
    }
    let trajectory = integrate(problem.velocity, x0, grid, method)?;
    let value = (problem.terminal)(trajectory.final_state());
    if !value.is_finite() {
        return Err(Error::Diverged { time: horizon, step: grid.len() });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_euler, integrate_rk4};
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn plain(w: DMatrix<f64>, b: DVector<f64>, a: ActivationKind) -> PlainLayer {
        PlainLayer::new(w, b, a).unwrap()
    }

    fn diag_example() -> PlainLayer {
        plain(
            DMatrix::from_diagonal(&dvector![2.0, 0.5, 0.0]),
            dvector![1.0, 0.0, 0.0],
            ActivationKind::Relu,
        )
    }

    #[test]
    fn identity_layer_has_zero_generators() {
        let flow = build_layer_flow(
            &plain(DMatrix::identity(2, 2), dvector![0.0, 0.0], ActivationKind::Identity),
            &FlowOptions::default(),
        )
        .unwrap();
        let x = dvector![0.3, -1.2];
        for i in 0..50 {
            let tau = 5.0 * i as f64 / 50.0;
            assert_eq!(flow.velocity(tau, &x).unwrap(), DVector::zeros(2));
        }
    }

    #[test]
    fn diagonal_layer_segments() {
        let flow = build_layer_flow(&diag_example(), &FlowOptions::default()).unwrap();
        let [r1, st, r2, tr, act] = flow.segments();
        let FlowSegment::Rotation(psi) = r1 else { panic!() };
        let FlowSegment::Rotation(phi) = r2 else { panic!() };
        assert!(psi.norm() < 1e-15 && phi.norm() < 1e-15);
        let FlowSegment::Stretch(d) = st else { panic!() };
        let ln2 = std::f64::consts::LN_2;
        assert!((d - dvector![ln2, -ln2, -30.0]).amax() < 1e-15);
        assert_eq!(tr, &FlowSegment::Translation(dvector![1.0, 0.0, 0.0]));
        assert_eq!(act.name(), "activation");
    }

    #[test]
    fn layer_velocity_vanishes_at_integer_times() {
        let flow = build_layer_flow(&diag_example(), &FlowOptions::default()).unwrap();
        let x = dvector![-1.0, 2.0, 0.5];
        for tau in [0.0, 1.0, 2.0, 3.0, 4.0] {
            assert_eq!(flow.velocity(tau, &x).unwrap(), DVector::zeros(3));
        }
        assert!(flow.velocity(5.0, &x).is_err());
        assert!(flow.velocity(-0.1, &x).is_err());
    }

    #[test]
    fn translation_segment_velocity() {
        let flow = build_layer_flow(&diag_example(), &FlowOptions::default()).unwrap();
        let v = flow.velocity(3.5, &dvector![4.0, 4.0, 4.0]).unwrap();
        assert!((v - dvector![1.875, 0.0, 0.0]).amax() < 1e-15);
    }

    #[test]
    fn rk4_over_layer_flow_reproduces_layer() {
        let layer = diag_example();
        let flow = build_layer_flow(&layer, &FlowOptions::default()).unwrap();
        let field = FnField::new(3, 5.0, |t, z: &DVector<f64>| flow.velocity(t.min(5.0 - 1e-15), z));
        let x = dvector![1.0, 1.0, 1.0];
        let end = integrate_rk4(&field, &x, &TimeGrid::uniform(0.0, 5.0, 10_000).unwrap()).unwrap();
        // relu(W x + b) = (3, 0.5, 0); the null coordinate keeps exp(-30).
        let expected = dvector![3.0, 0.5, (-30f64).exp()];
        assert!((end.final_state() - &expected).amax() <= 1e-6, "{}", end.final_state());
        assert!((flow.exact_map(&x).unwrap() - expected).amax() <= 1e-12);
    }

    fn random_tanh_net(rng: &mut ChaCha8Rng, d: usize, layers: usize) -> Network {
        let ls: Vec<PlainLayer> = (0..layers)
            .map(|_| {
                let w = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
                let b = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
                plain(w, b, ActivationKind::Tanh)
            })
            .collect();
        Network::from_layers(ls).unwrap().embed_to_dimension(d + 1).unwrap()
    }

    #[test]
    fn network_flow_is_still_at_layer_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = random_tanh_net(&mut rng, 3, 4);
        let flow = build_network_flow(&net, 2.0, &FlowOptions::default()).unwrap();
        let times = flow.layer_grid().times().to_vec();
        for _ in 0..100 {
            let k = rng.random_range(0..times.len());
            let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(flow.velocity(times[k], &x).unwrap(), DVector::zeros(4));
        }
    }

    #[test]
    fn single_identity_layer_field_is_zero() {
        let net = Network::from_layers([plain(DMatrix::identity(2, 2), dvector![0.0, 0.0], ActivationKind::Identity)])
            .unwrap();
        let flow = build_network_flow(&net, 1.0, &FlowOptions::default()).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert_eq!(flow.velocity(t, &dvector![1.0, -1.0]).unwrap(), DVector::zeros(2));
        }
        assert!(build_network_flow(&net, 0.0, &FlowOptions::default()).is_err());
    }

    #[test]
    fn network_flow_matches_exact_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = random_tanh_net(&mut rng, 3, 2);
        let flow = build_network_flow(&net, 2.0, &FlowOptions::default()).unwrap();
        let x = DVector::from_fn(4, |i, _| if i < 3 { rng.random_range(-1.0..1.0) } else { 0.0 });
        let end = integrate_rk4(&flow, &x, &TimeGrid::uniform(0.0, 2.0, 20_000).unwrap()).unwrap();
        let exact = flow.exact_map(&x).unwrap();
        let err = (end.final_state() - &exact).amax();
        assert!(err < 1e-6, "{err}");
        let target = net.eval(&x).unwrap();
        assert!((exact - &target).amax() <= 1e-2 * target.amax());
    }

    fn random_resnet(rng: &mut ChaCha8Rng, d: usize, blocks: usize, horizon: f64) -> Network {
        let s = horizon / blocks as f64;
        let layers: Vec<ResBlock2> = (0..blocks)
            .map(|_| {
                let m = |rng: &mut ChaCha8Rng| DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let v = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                ResBlock2::new(m(rng), v(rng), m(rng) * s, v(rng) * s, ActivationKind::Tanh).unwrap()
            })
            .collect();
        Network::from_layers(layers).unwrap()
    }

    #[test]
    fn euler_on_block_grid_is_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = random_resnet(&mut rng, 4, 10, 1.0);
        for interpolation in [Interpolation::PiecewiseConstant, Interpolation::Linear] {
            let flow = resnet_to_flow(&net, 1.0, interpolation).unwrap();
            for _ in 0..20 {
                let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                let forward = net.eval(&x).unwrap();
                let euler = integrate_euler(&flow, &x, flow.block_grid()).unwrap();
                assert!((euler.final_state() - &forward).norm() <= 1e-12 * forward.norm());
            }
        }
    }

    #[test]
    fn single_linear_block_versus_exponential_flow() {
        for s in [0.1, 0.05, 0.025] {
            let block = ResBlock2::new(
                DMatrix::identity(1, 1),
                dvector![0.0],
                DMatrix::identity(1, 1) * s,
                dvector![0.0],
                ActivationKind::Identity,
            )
            .unwrap();
            let net = Network::from_layers([block]).unwrap();
            let flow = resnet_to_flow(&net, s, Interpolation::PiecewiseConstant).unwrap();
            assert!((flow.velocity(0.3 * s, &dvector![2.0]).unwrap()[0] - 2.0).abs() < 1e-14);
            let exact = integrate_rk4(&flow, &dvector![1.0], &TimeGrid::uniform(0.0, s, 100).unwrap()).unwrap();
            let diff = exact.final_state()[0] - net.eval(&dvector![1.0]).unwrap()[0];
            let predicted = s.exp() - (1.0 + s);
            assert!((diff - predicted).abs() <= 1e-10, "{diff} vs {predicted}");
        }
    }

    #[test]
    fn linear_interpolation_is_continuous_at_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = random_resnet(&mut rng, 3, 4, 1.0);
        let flow = resnet_to_flow(&net, 1.0, Interpolation::Linear).unwrap();
        let x = dvector![0.2, -0.4, 0.9];
        for k in 1..4 {
            let tk = flow.block_grid().times()[k];
            let left = flow.velocity(tk - 1e-12, &x).unwrap();
            let at = flow.velocity(tk, &x).unwrap();
            assert!((left - at).amax() < 1e-9);
        }
    }

    #[test]
    fn resnet_flow_rejects_mixed_activations_and_plain_layers() {
        let b = |a| {
            ResBlock2::new(DMatrix::identity(1, 1), dvector![0.0], DMatrix::identity(1, 1), dvector![0.0], a).unwrap()
        };
        let net = Network::from_layers([b(ActivationKind::Relu), b(ActivationKind::Tanh)]).unwrap();
        assert!(resnet_to_flow(&net, 1.0, Interpolation::PiecewiseConstant).is_err());
        let net = Network::from_layers([plain(DMatrix::identity(1, 1), dvector![0.0], ActivationKind::Relu)]).unwrap();
        assert!(resnet_to_flow(&net, 1.0, Interpolation::PiecewiseConstant).is_err());
    }

    #[test]
    fn tvp_constant_velocity_is_exact() {
        let c = dvector![0.5, -1.0];
        let field = AnalyticField::constant(c.clone(), 3.0);
        let w = dvector![2.0, 1.0];
        let f = |x: &DVector<f64>| w.dot(x);
        let problem = TransportProblem::new(&field, &f);
        let x0 = dvector![1.0, 1.0];
        let exact = w.dot(&(&x0 + &c * 3.0));
        for n in [1, 3, 17] {
            let u = solve_tvp(&problem, &x0, &TimeGrid::uniform(0.0, 3.0, n).unwrap(), Method::Euler).unwrap();
            assert!((u - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn tvp_linear_decay() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let f = |x: &DVector<f64>| x[0];
        let problem = TransportProblem::new(&field, &f);
        let u = solve_tvp(&problem, &dvector![1.0], &TimeGrid::uniform(0.0, 1.0, 100).unwrap(), Method::Rk4).unwrap();
        assert!((u - 0.36787944117144233).abs() <= 1e-9);
        let e = |n| {
            let g = TimeGrid::uniform(0.0, 1.0, n).unwrap();
            (solve_tvp(&problem, &dvector![1.0], &g, Method::Euler).unwrap() - (-1f64).exp()).abs()
        };
        let ratio = e(50) / e(100);
        assert!((1.8..=2.2).contains(&ratio));
        assert!(solve_tvp(&problem, &dvector![1.0], &TimeGrid::uniform(0.0, 0.5, 10).unwrap(), Method::Rk4).is_err());
    }

    #[test]
    fn value_is_constant_along_characteristics() {
        // For v = c, u(t, x) = f(x + (T - t) c).
        let c = dvector![1.0, 2.0];
        let field = AnalyticField::constant(c.clone(), 2.0);
        let f = |x: &DVector<f64>| (x[0] - 0.5 * x[1]).sin();
        let grid = TimeGrid::uniform(0.0, 2.0, 8).unwrap();
        let traj = integrate_rk4(&field, &dvector![0.3, -0.2], &grid).unwrap();
        let values: Vec<f64> = traj
            .states
            .iter()
            .zip(grid.times())
            .map(|(x, &t)| f(&(x + &c * (2.0 - t))))
            .collect();
        for v in &values {
            assert!((v - values[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn tvp_on_resnet_field_matches_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let net = random_resnet(&mut rng, 3, 6, 1.0);
        let flow = resnet_to_flow(&net, 1.0, Interpolation::PiecewiseConstant).unwrap();
        let readout = Readout::Coordinate { index: 2 };
        let f = |x: &DVector<f64>| readout.eval(x);
        let problem = TransportProblem::new(&flow, &f);
        let x0 = dvector![0.1, 0.2, 0.3];
        let u = solve_tvp(&problem, &x0, flow.block_grid(), Method::Euler).unwrap();
        let direct = net.eval(&x0).unwrap()[2];
        assert!((u - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn rk4_refinement_is_stable_on_smooth_fields() {
        let field = AnalyticField::rotation(dmatrix![0.0, -1.0; 1.0, 0.0], 1.0).unwrap();
        let g = TimeGrid::uniform(0.0, 1.0, 200).unwrap();
        let a = integrate_rk4(&field, &dvector![1.0, 0.0], &g).unwrap();
        let b = integrate_rk4(&field, &dvector![1.0, 0.0], &g.refine(2).unwrap()).unwrap();
        assert!((a.final_state() - b.final_state()).amax() <= 1e-9);
    }

    #[test]
    fn readout_validation() {
        assert!(Readout::Linear { weights: vec![1.0], bias: 0.0 }.validate(2).is_err());
        assert!(Readout::Coordinate { index: 2 }.validate(2).is_err());
        let r: Readout = serde_json::from_str(r#"{"kind":"linear","weights":[1,2]}"#).unwrap();
        assert_eq!(r.eval(&dvector![1.0, 1.0]), 3.0);
    }
}
