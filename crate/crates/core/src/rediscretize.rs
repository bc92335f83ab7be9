//! Re-discretizing the flow of a plain network into an explicit ResNet.
//!
//! Every segment of a layer flow is cut into `l` explicit Euler steps. The
//! linear segments give linear residual blocks `y + alpha h'(tau_r) G y`, or
//! the whole affine map is kept as a single non-residual block. The
//! activation segment gives one of three block families:
//!
//! * `exact_velocity`: `y + alpha v_a(tau_r, y)` as an [`ActivationStep`];
//! * `relu_closed_form`: `y + relu(alpha h' / (h - 1) y)`, exact for ReLU;
//! * `linearized_2layer`: the velocity with `phi^{-1}` replaced by its
//!   linearization at an anchor `z_k`, a two-layer block followed by a
//!   diagonal linear map.
//!
//! The linearized blocks depend on the anchor, which is the layer's
//! pre-activation at a probe input. Accuracy is best along the probe's own
//! trajectory and degrades with distance from it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actflow::{ActivationFlow, DEFAULT_EPS_ACT};
use crate::error::{Error, Result};
use crate::lindecomp::{decompose, DEFAULT_BETA};
use crate::nettypes::{ActivationKind, ActivationStep, Layer, LinearBlock, Network, ResBlock1, ResBlock2};
use crate::timescale::TimeScale;

pub const DEFAULT_BLOCKS_PER_SEGMENT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMode {
    /// One `LinearBlock` `y -> W y + b` per layer.
    #[default]
    WholeMap,
    /// `l` linear residual blocks for each of `Psi`, the stretch, `Phi` and the translation.
    ResnetBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    ExactVelocity,
    ReluClosedForm,
    Linearized2Layer,
}

impl ActivationMode {
    /// `relu_closed_form` for ReLU, `linearized_2layer` otherwise.
    pub fn default_for(activation: ActivationKind) -> Self {
        match activation {
            ActivationKind::Relu => ActivationMode::ReluClosedForm,
            _ => ActivationMode::Linearized2Layer,
        }
    }

    pub fn needs_probe(self) -> bool {
        self == ActivationMode::Linearized2Layer
    }
}

impl fmt::Display for LinearMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinearMode::WholeMap => "whole",
            LinearMode::ResnetBlocks => "blocks",
        })
    }
}

impl FromStr for LinearMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole" | "whole_map" => Ok(LinearMode::WholeMap),
            "blocks" | "resnet_blocks" => Ok(LinearMode::ResnetBlocks),
            other => Err(format!("unknown linear mode `{other}` (expected whole|blocks)")),
        }
    }
}

impl fmt::Display for ActivationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationMode::ExactVelocity => "exact",
            ActivationMode::ReluClosedForm => "relu",
            ActivationMode::Linearized2Layer => "linearized",
        })
    }
}

impl FromStr for ActivationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" | "exact_velocity" => Ok(ActivationMode::ExactVelocity),
            "relu" | "relu_closed_form" => Ok(ActivationMode::ReluClosedForm),
            "linearized" | "linearized_2layer" => Ok(ActivationMode::Linearized2Layer),
            other => Err(format!("unknown activation mode `{other}` (expected exact|relu|linearized)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RediscretizationOptions {
    /// Blocks per segment, `l >= 1`.
    pub blocks_per_segment: usize,
    pub linear_mode: LinearMode,
    /// `None` picks [`ActivationMode::default_for`] per layer.
    pub activation_mode: Option<ActivationMode>,
    pub eps_act: f64,
    pub beta: f64,
    pub timescale: TimeScale,
    /// Grade the activation grid toward `1 - eps_act`, where ReLU is stiff.
    pub tail_refine: bool,
}

impl Default for RediscretizationOptions {
    fn default() -> Self {
        Self {
            blocks_per_segment: DEFAULT_BLOCKS_PER_SEGMENT,
            linear_mode: LinearMode::default(),
            activation_mode: None,
            eps_act: DEFAULT_EPS_ACT,
            beta: DEFAULT_BETA,
            timescale: TimeScale::default(),
            tail_refine: false,
        }
    }
}

impl RediscretizationOptions {
    pub fn with_blocks(mut self, l: usize) -> Self {
        self.blocks_per_segment = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_blocks(self.blocks_per_segment)?;
        if !(self.eps_act > 0.0 && self.eps_act < 0.5) {
            return Err(Error::invalid(format!("eps_act must lie in (0, 0.5), got {}", self.eps_act)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn mode_for(&self, activation: ActivationKind) -> ActivationMode {
        self.activation_mode.unwrap_or_else(|| ActivationMode::default_for(activation))
    }

    /// `(tau_r, alpha_r)` for the truncated activation segment `[0, 1 - eps_act]`.
    pub fn activation_grid(&self) -> Vec<(f64, f64)> {
        let l = self.blocks_per_segment;
        let tau_max = 1.0 - self.eps_act;
        let node = |r: usize| {
            let u = r as f64 / l as f64;
            if self.tail_refine {
                tau_max * (1.0 - (1.0 - u) * (1.0 - u))
            } else {
                tau_max * u
            }
        };
        (0..l).map(|r| (node(r), node(r + 1) - node(r))).collect()
    }
}

fn check_blocks(l: usize) -> Result<()> {
    if l == 0 {
        Err(Error::invalid("blocks per segment must be at least 1"))
    } else {
        Ok(())
    }
}

fn unit_grid(l: usize) -> impl Iterator<Item = (f64, f64)> {
    let alpha = 1.0 / l as f64;
    (0..l).map(move |r| (r as f64 * alpha, alpha))
}

/// `l` blocks `y -> y + alpha h'(tau_r) G y` for the segment `z' = h' G z`.
pub fn linear_flow_blocks(generator: &DMatrix<f64>, l: usize, ts: TimeScale) -> Result<Vec<ResBlock1>> {
    check_blocks(l)?;
    let d = generator.nrows();
    unit_grid(l)
        .map(|(tau, alpha)| ResBlock1::new(generator * (alpha * ts.h_dot(tau)), DVector::zeros(d)))
        .collect()
}

/// `l` blocks `y -> y + alpha h'(tau_r) b` for the translation segment.
pub fn translation_blocks(b: &DVector<f64>, l: usize, ts: TimeScale) -> Result<Vec<ResBlock1>> {
    check_blocks(l)?;
    let d = b.len();
    unit_grid(l)
        .map(|(tau, alpha)| ResBlock1::new(DMatrix::zeros(d, d), b * (alpha * ts.h_dot(tau))))
        .collect()
}

fn relu_block(d: usize, tau: f64, alpha: f64, ts: TimeScale) -> Result<ResBlock2> {
    let gap = ts.one_minus_h(tau);
    if gap <= 0.0 {
        return Err(Error::Singular(format!("1 - h({tau}) vanishes")));
    }
    let w = -alpha * ts.h_dot(tau) / gap;
    ResBlock2::new(
        DMatrix::identity(d, d) * w,
        DVector::zeros(d),
        DMatrix::identity(d, d),
        DVector::zeros(d),
        ActivationKind::Relu,
    )
}

/// `l` blocks `y -> y + relu(alpha h'(tau_r) / (h(tau_r) - 1) y)` on a uniform grid of `[0, 1 - eps_act]`.
pub fn relu_flow_blocks(d: usize, l: usize, ts: TimeScale, eps_act: f64) -> Result<Vec<ResBlock2>> {
    let opts = RediscretizationOptions {
        blocks_per_segment: l,
        eps_act,
        timescale: ts,
        ..Default::default()
    };
    opts.validate()?;
    relu_blocks_on(d, &opts.activation_grid(), ts)
}

fn relu_blocks_on(d: usize, grid: &[(f64, f64)], ts: TimeScale) -> Result<Vec<ResBlock2>> {
    grid.iter().map(|&(tau, alpha)| relu_block(d, tau, alpha, ts)).collect()
}

/// One Euler step of the activation flow with `phi^{-1}(tau_r, .)` replaced
/// by its linearization `W1 y + b1` at `phi(tau_r, z_k)`.
///
/// All matrices are diagonal and stored as their diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedActivationBlock {
    pub tau: f64,
    pub alpha: f64,
    pub h_dot: f64,
    pub activation: ActivationKind,
    /// `J^{-1}(tau_r, z_k)`.
    pub w1: DVector<f64>,
    /// `z_k - J^{-1} phi(tau_r, z_k)`.
    pub b1: DVector<f64>,
    /// `I - alpha h' W1`.
    pub m: DVector<f64>,
    /// `alpha h' M^{-1}`.
    pub wbar2: DVector<f64>,
    /// `-wbar2 b1`.
    pub bbar2: DVector<f64>,
}

impl LinearizedActivationBlock {
    pub fn new(af: &ActivationFlow, tau: f64, alpha: f64, anchor: &DVector<f64>) -> Result<Self> {
        let h_dot = af.timescale().h_dot(tau);
        let w1 = af.jacobian_inv(tau, anchor)?;
        let b1 = anchor - w1.component_mul(&af.phi(tau, anchor)?);
        let step = alpha * h_dot;
        let m = w1.map(|w| 1.0 - step * w);
        if let Some(i) = m.iter().position(|&v| v == 0.0) {
            return Err(Error::Singular(format!(
                "post-map entry {i} vanishes at tau = {tau}; use more blocks per segment"
            )));
        }
        let wbar2 = m.map(|v| step / v);
        let bbar2 = -wbar2.component_mul(&b1);
        Ok(Self {
            tau,
            alpha,
            h_dot,
            activation: af.activation(),
            w1,
            b1,
            m,
            wbar2,
            bbar2,
        })
    }

    /// `M y + alpha h' a(W1 y + b1) - alpha h' b1`.
    pub fn apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.w1.len() {
            return Err(Error::dim("linearized block input", self.w1.len(), y.len()));
        }
        let step = self.alpha * self.h_dot;
        let inner = self.activation.apply_vec(&(self.w1.component_mul(y) + &self.b1));
        Ok(self.m.component_mul(y) + (inner - &self.b1) * step)
    }

    /// The block as a two-layer residual block followed by the diagonal post-map.
    pub fn to_layers(&self) -> Result<(ResBlock2, LinearBlock)> {
        let d = self.w1.len();
        let res = ResBlock2::new(
            DMatrix::from_diagonal(&self.w1),
            self.b1.clone(),
            DMatrix::from_diagonal(&self.wbar2),
            self.bbar2.clone(),
            self.activation,
        )?;
        let post = LinearBlock::new(DMatrix::from_diagonal(&self.m), DVector::zeros(d))?;
        Ok((res, post))
    }
}

/// The linearized blocks of one activation segment, anchored at `z_k`.
pub fn linearized_activation_blocks(
    anchor: &DVector<f64>,
    af: &ActivationFlow,
    opts: &RediscretizationOptions,
) -> Result<Vec<LinearizedActivationBlock>> {
    opts.validate()?;
    opts.activation_grid()
        .into_iter()
        .map(|(tau, alpha)| LinearizedActivationBlock::new(af, tau, alpha, anchor))
        .collect()
}

fn activation_layers(
    mode: ActivationMode,
    af: &ActivationFlow,
    anchor: Option<&DVector<f64>>,
    d: usize,
    opts: &RediscretizationOptions,
) -> Result<Vec<Layer>> {
    let grid = opts.activation_grid();
    match mode {
        ActivationMode::ExactVelocity => grid
            .iter()
            .map(|&(tau, alpha)| ActivationStep::new(d, tau, alpha, *af).map(Layer::from))
            .collect(),
        ActivationMode::ReluClosedForm => {
            if af.activation() != ActivationKind::Relu {
                return Err(Error::invalid(format!(
                    "relu_closed_form needs a relu layer, found `{}`",
                    af.activation().name()
                )));
            }
            Ok(relu_blocks_on(d, &grid, af.timescale())?.into_iter().map(Layer::from).collect())
        }
        ActivationMode::Linearized2Layer => {
            let anchor = anchor.ok_or_else(|| Error::invalid("linearized_2layer needs a probe input"))?;
            let mut layers = Vec::with_capacity(2 * grid.len());
            for (tau, alpha) in grid {
                let (res, post) = LinearizedActivationBlock::new(af, tau, alpha, anchor)?.to_layers()?;
                layers.push(res.into());
                layers.push(post.into());
            }
            Ok(layers)
        }
    }
}

/// Replaces every plain layer by its re-discretized blocks.
///
/// `probe` supplies the anchors for `linearized_2layer`: the anchor of layer
/// `k` is its pre-activation along the plain network's forward pass of the probe.
pub fn rediscretize_network(net: &Network, opts: &RediscretizationOptions, probe: Option<&DVector<f64>>) -> Result<Network> {
    opts.validate()?;
    let plain = net.plain_layers()?;
    let d = net.dim();
    let l = opts.blocks_per_segment;
    let ts = opts.timescale;
    let needs_probe = plain.iter().any(|p| opts.mode_for(p.activation()).needs_probe());
    let mut state = match (needs_probe, probe) {
        (true, None) => return Err(Error::invalid("linearized_2layer needs a probe input")),
        (true, Some(x)) if x.len() != d => return Err(Error::dim("probe", d, x.len())),
        (_, x) => x.cloned(),
    };

    let mut layers: Vec<Layer> = Vec::new();
    for (k, layer) in plain.iter().enumerate() {
        let annotate = |e: Error| match e {
            Error::InvalidParameter(msg) => Error::InvalidParameter(format!("layer {k}: {msg}")),
            Error::Singular(msg) => Error::Singular(format!("layer {k}: {msg}")),
            Error::Decomposition(msg) => Error::Decomposition(format!("layer {k}: {msg}")),
            other => other,
        };
        match opts.linear_mode {
            LinearMode::WholeMap => {
                layers.push(LinearBlock::new(layer.weight().clone(), layer.bias().clone())?.into());
            }
            LinearMode::ResnetBlocks => {
                let dec = decompose(layer.weight(), opts.beta).map_err(annotate)?;
                let stretch = DMatrix::from_diagonal(&dec.stretch_generator());
                for generator in [&dec.psi, &stretch, &dec.phi] {
                    layers.extend(linear_flow_blocks(generator, l, ts)?.into_iter().map(Layer::from));
                }
                layers.extend(translation_blocks(layer.bias(), l, ts)?.into_iter().map(Layer::from));
            }
        }
        let anchor = match &state {
            Some(x) => Some(layer.pre_activation(x)?),
            None => None,
        };
        let af = ActivationFlow::new(layer.activation(), ts);
        let mode = opts.mode_for(layer.activation());
        layers.extend(activation_layers(mode, &af, anchor.as_ref(), d, opts).map_err(annotate)?);
        if let Some(z) = anchor {
            state = Some(layer.activation().apply_vec(&z));
        }
    }
    Network::new(layers)
}
