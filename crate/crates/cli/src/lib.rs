//! The `flownet` command line.
//!
//! Numeric reports are CSV and structured outputs are JSON. Either goes to
//! the file named by `--report`/`--out` (with a short summary on stdout) or,
//! without that flag, straight to stdout. Failures print a single line
//! `error: <category>: <message>` on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use flownet::batch::{eval_network_batch, integrate_batch, map_inputs};
use flownet::flowmodel::{
    build_network_flow, resnet_to_flow, solve_tvp, AnalyticField, FlowOptions, Interpolation, PlainNetFlow, Readout,
    ResNetFlow, TransportProblem, VelocityField,
};
use flownet::integrate::{convergence_study, integrate_rk4, Method, TimeGrid};
use flownet::lindecomp::{decompose, DecompositionRecord};
use flownet::nettypes::{load_network, save_network, Layer, Network};
use flownet::rediscretize::{rediscretize_network, ActivationMode, LinearMode, RediscretizationOptions};
use flownet::timescale::TimeScale;
use flownet::{Error, Result};

pub const SEED_ENV: &str = "FLOWNET_SEED";

#[derive(Debug, Parser)]
#[command(name = "flownet", version, about = "Flow models of plain networks and ResNets")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Weight of the null-space penalty in the stretch generator
    #[arg(long, global = true, default_value_t = 30.0)]
    pub beta: f64,
    /// The activation flow stops at local time 1 - eps_act
    #[arg(long, global = true, default_value_t = 0.05)]
    pub eps_act: f64,
    /// Time reparametrization of every segment: quintic or bump
    #[arg(long, global = true, default_value_t = TimeScale::Quintic)]
    pub timescale: TimeScale,
    /// Seed for random inputs (FLOWNET_SEED overrides it)
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// JSON array of input vectors
    #[arg(long, conflicts_with = "random")]
    pub inputs: Option<PathBuf>,
    /// Number of seeded random inputs in [-1, 1]^d, used when --inputs is absent
    #[arg(long, default_value_t = 100)]
    pub random: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FlowArgs {
    /// Integrator: euler or rk4
    #[arg(long, default_value_t = Method::Rk4)]
    pub method: Method,
    /// Steps per layer (per unit time for builtin fields)
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Final time; defaults to one unit per layer
    #[arg(long)]
    pub horizon: Option<f64>,
    /// ResNet parameters in time: piecewise-constant or linear
    #[arg(long, default_value = "piecewise-constant", value_parser = parse_interpolation)]
    pub interpolation: Interpolation,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose every plain layer's weight into rotation and stretch generators
    Decompose {
        net: PathBuf,
        /// Output JSON (list of per-layer decompositions)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the flow of a network or builtin field from given inputs
    FlowEval {
        /// Network JSON, or builtin:constant|linear-decay|rotation
        source: String,
        /// JSON array holding one input vector
        #[arg(long, conflicts_with = "inputs")]
        input: Option<PathBuf>,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        flow: FlowArgs,
        /// Output JSON (list of terminal states)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the terminal value problem of the transport equation along characteristics
    SolveTvp {
        /// Network JSON, or builtin:constant|linear-decay|rotation
        source: String,
        /// Readout JSON: {"kind":"linear","weights":[..],"bias":b} or {"kind":"coordinate","index":i}
        #[arg(long)]
        terminal: PathBuf,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        flow: FlowArgs,
        /// Output CSV with columns input_index,u
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replace each plain layer by ResNet blocks discretizing its flow
    Rediscretize {
        net: PathBuf,
        /// Blocks per flow segment
        #[arg(long, default_value_t = 32)]
        blocks_per_segment: usize,
        /// Linear part: whole (one affine block) or blocks (residual blocks per segment)
        #[arg(long, default_value_t = LinearMode::WholeMap)]
        linear: LinearMode,
        /// Activation blocks: exact, relu or linearized [default: relu for relu layers, else linearized]
        #[arg(long)]
        activation: Option<ActivationMode>,
        /// JSON array holding the probe input that anchors linearized blocks
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Grade the activation grid toward the truncation time
        #[arg(long)]
        tail_refine: bool,
        /// Output network JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two networks on the same inputs
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        inputs: InputArgs,
        /// Output CSV with columns input_index,abs_err,rel_err
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure the convergence order of an integrator on a sequence of grids
    Converge {
        /// Network JSON, or builtin:constant|linear-decay|rotation
        source: String,
        /// Total step counts, strictly increasing
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        grids: Vec<usize>,
        /// Integrator: euler or rk4
        #[arg(long, default_value_t = Method::Euler)]
        method: Method,
        /// JSON array holding the initial state [default: all ones for builtins, a seeded random input for networks]
        #[arg(long)]
        input: Option<PathBuf>,
        /// Final time; defaults to one unit per layer
        #[arg(long)]
        horizon: Option<f64>,
        /// ResNet parameters in time: piecewise-constant or linear
        #[arg(long, default_value = "piecewise-constant", value_parser = parse_interpolation)]
        interpolation: Interpolation,
        /// Output CSV with columns L,step,max_abs_err,rel_err,fitted_order
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_interpolation(s: &str) -> std::result::Result<Interpolation, String> {
    match s {
        "piecewise-constant" | "piecewise_constant" => Ok(Interpolation::PiecewiseConstant),
        "linear" => Ok(Interpolation::Linear),
        other => Err(format!("unknown interpolation `{other}` (expected piecewise-constant|linear)")),
    }
}

impl CommonArgs {
    fn validate(&self) -> Result<()> {
        self.flow_options().validate()
    }

    fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            beta: self.beta,
            timescale: self.timescale,
            eps_act: self.eps_act,
        }
    }

    /// `FLOWNET_SEED` when set, else `--seed`.
    pub fn effective_seed(&self) -> Result<u64> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(self.seed),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("--{name} must be positive, got {v}")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn check_vector(v: Vec<f64>, dim: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            context: what.to_string(),
            expected: dim,
            actual: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(DVector::from_vec(v))
}

pub fn read_vector(path: &Path, dim: usize) -> Result<DVector<f64>> {
    check_vector(read_json(path)?, dim, &path.display().to_string())
}

pub fn read_vectors(path: &Path, dim: usize) -> Result<Vec<DVector<f64>>> {
    let raw: Vec<Vec<f64>> = read_json(path)?;
    if raw.is_empty() {
        return Err(Error::Schema(format!("{}: no input vectors", path.display())));
    }
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| check_vector(v, dim, &format!("{} entry {i}", path.display())))
        .collect()
}

pub fn random_inputs(seed: u64, dim: usize, count: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0)))
        .collect()
}

fn gather_inputs(args: &InputArgs, common: &CommonArgs, dim: usize) -> Result<Vec<DVector<f64>>> {
    match &args.inputs {
        Some(path) => read_vectors(path, dim),
        None if args.random == 0 => Err(Error::InvalidParameter("--random must be at least 1".into())),
        None => Ok(random_inputs(common.effective_seed()?, dim, args.random)),
    }
}

/// A velocity field named on the command line.
pub enum Source {
    Builtin(AnalyticField),
    Plain { net: Network, flow: PlainNetFlow },
    Resnet { net: Network, flow: ResNetFlow },
}

impl Source {
    pub fn load(source: &str, common: &CommonArgs, horizon: Option<f64>, interpolation: Interpolation) -> Result<Self> {
        if let Some(h) = horizon {
            positive("horizon", h)?;
        }
        if let Some(name) = source.strip_prefix("builtin:") {
            let field = AnalyticField::builtin(name)?;
            return Ok(Source::Builtin(match horizon {
                Some(h) => field.with_horizon(h),
                None => field,
            }));
        }
        let net = load_network(source)?;
        let horizon = horizon.unwrap_or(net.len() as f64);
        if net.layers().iter().all(|l| matches!(l, Layer::Plain(_))) {
            let flow = build_network_flow(&net, horizon, &common.flow_options())?;
            Ok(Source::Plain { net, flow })
        } else if net.layers().iter().all(|l| matches!(l, Layer::Res2(_))) {
            let flow = resnet_to_flow(&net, horizon, interpolation)?;
            Ok(Source::Resnet { net, flow })
        } else {
            Err(Error::InvalidParameter(format!(
                "{source}: a flow needs all plain layers or all res2 blocks"
            )))
        }
    }

    pub fn field(&self) -> &dyn VelocityField {
        match self {
            Source::Builtin(f) => f,
            Source::Plain { flow, .. } => flow,
            Source::Resnet { flow, .. } => flow,
        }
    }

    /// Number of layers or blocks; one for builtin fields.
    pub fn units(&self) -> usize {
        match self {
            Source::Builtin(_) => 1,
            Source::Plain { net, .. } | Source::Resnet { net, .. } => net.len(),
        }
    }

    pub fn network(&self) -> Option<&Network> {
        match self {
            Source::Builtin(_) => None,
            Source::Plain { net, .. } | Source::Resnet { net, .. } => Some(net),
        }
    }

    /// The time-T state of the characteristic through `x`, exact where a closed form exists.
    fn reference(&self, x: &DVector<f64>, finest: usize) -> Result<DVector<f64>> {
        match self {
            Source::Builtin(f) => f.exact(x, f.horizon()),
            Source::Plain { flow, .. } => flow.exact_map(x),
            Source::Resnet { flow, .. } => {
                let grid = TimeGrid::uniform(0.0, flow.horizon(), 16 * finest)?;
                Ok(integrate_rk4(flow, x, &grid)?.final_state().clone())
            }
        }
    }

    fn grid(&self, steps_per_unit: usize) -> Result<TimeGrid> {
        if steps_per_unit == 0 {
            return Err(Error::InvalidParameter("--steps must be at least 1".into()));
        }
        TimeGrid::uniform(0.0, self.field().horizon(), steps_per_unit * self.units())
    }
}

/// Where a command's main output goes.
enum Sink<'a> {
    File(&'a Path),
    Stdout,
}

impl<'a> Sink<'a> {
    fn new(path: Option<&'a PathBuf>) -> Self {
        path.map_or(Sink::Stdout, |p| Sink::File(p.as_path()))
    }

    fn write(&self, bytes: &[u8]) -> Result<()> {
        match self {
            Sink::File(path) => fs::write(path, bytes).map_err(|e| Error::io(path, e)),
            Sink::Stdout => std::io::stdout()
                .write_all(bytes)
                .map_err(|e| Error::io(Path::new("<stdout>"), e)),
        }
    }

    fn summary(&self, line: impl AsRef<str>) {
        if let Sink::File(_) = self {
            println!("{}", line.as_ref());
        }
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv: {e}")))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable output");
    bytes.push(b'\n');
    bytes
}

fn as_rows(vs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.iter().copied().collect()).collect()
}

/// `(max_i |a_i - b_i|, that / max(max_i |b_i|, 1))`.
pub fn errors(a: &DVector<f64>, reference: &DVector<f64>) -> (f64, f64) {
    let abs = (a - reference).amax();
    (abs, abs / reference.amax().max(1.0))
}

#[derive(Serialize)]
struct LayerDecomposition {
    layer: usize,
    reconstruction_error: f64,
    #[serde(flatten)]
    record: DecompositionRecord,
}

pub fn run(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    common.validate()?;
    match &cli.command {
        Command::Decompose { net, out } => {
            let net = load_network(net)?;
            let layers = net.plain_layers()?;
            let mut records = Vec::with_capacity(layers.len());
            for (k, layer) in layers.iter().enumerate() {
                let dec = decompose(layer.weight(), common.beta).map_err(|e| match e {
                    Error::ReflectionNeedsEmbedding { det } => Error::Decomposition(format!(
                        "layer {k}: full-rank weight with det {det} < 0 has no rotation factorization; embed the network one dimension up"
                    )),
                    other => other,
                })?;
                let reconstruction_error = (dec.reconstruct()? - layer.weight()).norm();
                records.push(LayerDecomposition {
                    layer: k,
                    reconstruction_error,
                    record: dec.to_record(),
                });
            }
            let sink = Sink::new(out.as_ref());
            sink.write(&json_bytes(&records))?;
            for r in &records {
                sink.summary(format!(
                    "layer {}: rank {} of {}, reconstruction error {:e}",
                    r.layer, r.record.rank, r.record.dimension, r.reconstruction_error
                ));
            }
        }
        Command::FlowEval { source, input, inputs, flow, out } => {
            let src = Source::load(source, common, flow.horizon, flow.interpolation)?;
            let dim = src.field().dim();
            let xs = match input {
                Some(path) => vec![read_vector(path, dim)?],
                None => gather_inputs(inputs, common, dim)?,
            };
            let grid = src.grid(flow.steps)?;
            let ends = integrate_batch(src.field(), &xs, &grid, flow.method)?;
            let sink = Sink::new(out.as_ref());
            sink.write(&json_bytes(&as_rows(&ends)))?;
            let targets = match src.network() {
                Some(net) => eval_network_batch(net, &xs)?,
                None => xs.iter().map(|x| src.reference(x, 0)).collect::<Result<_>>()?,
            };
            let worst = ends
                .iter()
                .zip(&targets)
                .map(|(e, t)| errors(e, t).0)
                .fold(0.0, f64::max);
            let against = if src.network().is_some() { "network output" } else { "exact solution" };
            sink.summary(format!(
                "{} inputs, {} {} steps: max |flow - {against}| = {worst:e}",
                xs.len(),
                grid.len(),
                flow.method
            ));
        }
        Command::SolveTvp { source, terminal, inputs, flow, report } => {
            let src = Source::load(source, common, flow.horizon, flow.interpolation)?;
            let dim = src.field().dim();
            let readout: Readout = read_json(terminal)?;
            readout.validate(dim)?;
            let xs = gather_inputs(inputs, common, dim)?;
            let grid = src.grid(flow.steps)?;
            let f = |x: &DVector<f64>| readout.eval(x);
            let problem = TransportProblem::new(src.field(), &f);
            let values = map_inputs(&xs, |x| solve_tvp(&problem, x, &grid, flow.method))
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            let rows = values
                .iter()
                .enumerate()
                .map(|(i, u)| vec![i.to_string(), u.to_string()]);
            let sink = Sink::new(report.as_ref());
            sink.write(&csv_bytes(&["input_index", "u"], rows)?)?;
            sink.summary(format!("solved {} terminal value problems on {} steps", values.len(), grid.len()));
        }
        Command::Rediscretize {
            net,
            blocks_per_segment,
            linear,
            activation,
            probe,
            tail_refine,
            out,
        } => {
            let opts = RediscretizationOptions {
                blocks_per_segment: *blocks_per_segment,
                linear_mode: *linear,
                activation_mode: *activation,
                eps_act: common.eps_act,
                beta: common.beta,
                timescale: common.timescale,
                tail_refine: *tail_refine,
            };
            opts.validate()?;
            let plain = load_network(net)?;
            let probe = probe.as_ref().map(|p| read_vector(p, plain.dim())).transpose()?;
            let resnet = rediscretize_network(&plain, &opts, probe.as_ref())?;
            save_network(&resnet, out)?;
            println!(
                "{} plain layers -> {} blocks ({} blocks per segment, linear {})",
                plain.len(),
                resnet.len(),
                opts.blocks_per_segment,
                opts.linear_mode
            );
            if let Some(x) = &probe {
                let (abs, rel) = errors(&resnet.eval(x)?, &plain.eval(x)?);
                println!("error at probe: abs {abs:e}, rel {rel:e}");
            }
        }
        Command::Compare { a, b, inputs, report } => {
            let na = load_network(a)?;
            let nb = load_network(b)?;
            if na.dim() != nb.dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("{} vs {}", a.display(), b.display()),
                    expected: na.dim(),
                    actual: nb.dim(),
                });
            }
            let xs = gather_inputs(inputs, common, na.dim())?;
            let ya = eval_network_batch(&na, &xs)?;
            let yb = eval_network_batch(&nb, &xs)?;
            let errs: Vec<(f64, f64)> = yb.iter().zip(&ya).map(|(y, r)| errors(y, r)).collect();
            let rows = errs
                .iter()
                .enumerate()
                .map(|(i, (abs, rel))| vec![i.to_string(), abs.to_string(), rel.to_string()]);
            let sink = Sink::new(report.as_ref());
            sink.write(&csv_bytes(&["input_index", "abs_err", "rel_err"], rows)?)?;
            let max_abs = errs.iter().map(|e| e.0).fold(0.0, f64::max);
            let max_rel = errs.iter().map(|e| e.1).fold(0.0, f64::max);
            sink.summary(format!("{} inputs: max abs_err {max_abs:e}, max rel_err {max_rel:e}", xs.len()));
        }
        Command::Converge {
            source,
            grids,
            method,
            input,
            horizon,
            interpolation,
            report,
        } => {
            let src = Source::load(source, common, *horizon, *interpolation)?;
            let dim = src.field().dim();
            let x0 = match (input, &src) {
                (Some(path), _) => read_vector(path, dim)?,
                (None, Source::Builtin(f)) => f.default_start(),
                (None, _) => random_inputs(common.effective_seed()?, dim, 1).remove(0),
            };
            let finest = grids.iter().copied().max().unwrap_or(1);
            let reference = src.reference(&x0, finest)?;
            let study = convergence_study(src.field(), &x0, &reference, grids, *method)?;
            let last = study.rows.len() - 1;
            let order = study.fitted_order.map_or_else(|| "NA".to_string(), |p| p.to_string());
            let rows = study.rows.iter().enumerate().map(|(i, r)| {
                vec![
                    r.steps.to_string(),
                    r.step_size.to_string(),
                    r.max_abs_err.to_string(),
                    r.rel_err.to_string(),
                    if i == last { order.clone() } else { String::new() },
                ]
            });
            let sink = Sink::new(report.as_ref());
            sink.write(&csv_bytes(&["L", "step", "max_abs_err", "rel_err", "fitted_order"], rows)?)?;
            sink.summary(format!("{method} on {source}: fitted order {order}"));
        }
    }
    Ok(())
}
