//! JSON form of [`Network`]. Matrices are row-major lists of rows.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ActivationKind, ActivationStep, Layer, LinearBlock, Network, PlainLayer, ResBlock1, ResBlock2};
use crate::actflow::ActivationFlow;
use crate::error::{Error, Result};
use crate::timescale::TimeScale;

#[derive(Debug, Serialize, Deserialize)]
struct RawNetwork {
    dimension: usize,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawLayer {
    Plain {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
        activation: ActivationKind,
    },
    Res2 {
        #[serde(rename = "W1")]
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        #[serde(rename = "W2")]
        w2: Vec<Vec<f64>>,
        b2: Vec<f64>,
        activation: ActivationKind,
    },
    Res1 {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    Linear {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    ActStep {
        tau: f64,
        step: f64,
        activation: ActivationKind,
        #[serde(default)]
        timescale: TimeScale,
    },
}

fn schema(layer: usize, field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("layer {layer}, field `{field}`: {msg}"))
}

fn to_matrix(rows: &[Vec<f64>], d: usize, layer: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d {
        return Err(schema(layer, field, format!("has {} rows, expected {d}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(schema(
                layer,
                field,
                format!("row {i} has {} entries, expected {d}", row.len()),
            ));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(schema(layer, field, format!("entry ({i}, {j}) is not finite")));
        }
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn to_vector(values: &[f64], d: usize, layer: usize, field: &str) -> Result<DVector<f64>> {
    if values.len() != d {
        return Err(schema(layer, field, format!("has {} entries, expected {d}", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(schema(layer, field, format!("entry {i} is not finite")));
    }
    Ok(DVector::from_column_slice(values))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn with_layer(layer: usize, e: Error) -> Error {
    Error::Schema(format!("layer {layer}: {e}"))
}

impl RawLayer {
    fn into_layer(self, d: usize, i: usize) -> Result<Layer> {
        let layer = match self {
            RawLayer::Plain { w, b, activation } => PlainLayer::new(
                to_matrix(&w, d, i, "W")?,
                to_vector(&b, d, i, "b")?,
                activation,
            )
            .map(Layer::Plain),
            RawLayer::Res2 { w1, b1, w2, b2, activation } => ResBlock2::new(
                to_matrix(&w1, d, i, "W1")?,
                to_vector(&b1, d, i, "b1")?,
                to_matrix(&w2, d, i, "W2")?,
                to_vector(&b2, d, i, "b2")?,
                activation,
            )
            .map(Layer::Res2),
            RawLayer::Res1 { w, b } => {
                ResBlock1::new(to_matrix(&w, d, i, "W")?, to_vector(&b, d, i, "b")?).map(Layer::Res1)
            }
            RawLayer::Linear { w, b } => {
                LinearBlock::new(to_matrix(&w, d, i, "W")?, to_vector(&b, d, i, "b")?).map(Layer::Linear)
            }
            RawLayer::ActStep { tau, step, activation, timescale } => {
                ActivationStep::new(d, tau, step, ActivationFlow::new(activation, timescale))
                    .map(Layer::ActStep)
            }
        };
        layer.map_err(|e| with_layer(i, e))
    }

    fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Plain(l) => RawLayer::Plain {
                w: from_matrix(l.weight()),
                b: from_vector(l.bias()),
                activation: l.activation(),
            },
            Layer::Res2(l) => RawLayer::Res2 {
                w1: from_matrix(l.w1()),
                b1: from_vector(l.b1()),
                w2: from_matrix(l.w2()),
                b2: from_vector(l.b2()),
                activation: l.activation(),
            },
            Layer::Res1(l) => RawLayer::Res1 {
                w: from_matrix(l.weight()),
                b: from_vector(l.bias()),
            },
            Layer::Linear(l) => RawLayer::Linear {
                w: from_matrix(l.matrix()),
                b: from_vector(l.offset()),
            },
            Layer::ActStep(l) => RawLayer::ActStep {
                tau: l.tau(),
                step: l.step(),
                activation: l.flow().activation(),
                timescale: l.flow().timescale(),
            },
        }
    }
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let raw: RawNetwork = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if raw.dimension == 0 {
        return Err(Error::Schema("`dimension` must be positive".into()));
    }
    if raw.layers.is_empty() {
        return Err(Error::Schema("`layers` must not be empty".into()));
    }
    let d = raw.dimension;
    let layers = raw
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.into_layer(d, i))
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}

pub fn network_to_json(net: &Network) -> String {
    let raw = RawNetwork {
        dimension: net.dim(),
        layers: net.layers().iter().map(RawLayer::from_layer).collect(),
    };
    serde_json::to_string_pretty(&raw).expect("network serialization cannot fail")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    network_from_json(&text)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, network_to_json(net)).map_err(|e| Error::io(path, e))
}
