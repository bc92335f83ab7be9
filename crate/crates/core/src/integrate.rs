//! Fixed-grid steppers for characteristic equations `dx/dt = v(t, x)`.
//!
//! Euler samples the field at the left end of each interval, so a single
//! Euler step over `[t_{k-1}, t_k]` is exactly the residual block
//! `x + s_k V_k(x)`. RK4 serves as the reference solution in convergence
//! studies.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::flowmodel::VelocityField;

/// Strictly increasing time points `t_0 < ... < t_L`, `L >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a time grid needs at least two points"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("time grid".into()));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "time grid must be strictly increasing (t_{} = {} >= t_{} = {})",
                k,
                times[k],
                k + 1,
                times[k + 1]
            )));
        }
        Ok(Self { times })
    }

    /// `steps` equal intervals on `[start, end]`; endpoints are stored exactly.
    pub fn uniform(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("a uniform grid needs at least one step"));
        }
        let span = end - start;
        let times = (0..=steps)
            .map(|k| if k == steps { end } else { start + span * k as f64 / steps as f64 })
            .collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of intervals `L`.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.windows(2).map(|w| w[1] - w[0])
    }

    pub fn max_step(&self) -> f64 {
        self.steps().fold(0.0, f64::max)
    }

    /// Splits every interval into `factor` equal parts.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be positive"));
        }
        let mut times = Vec::with_capacity(self.len() * factor + 1);
        for w in self.times.windows(2) {
            for j in 0..factor {
                times.push(w[0] + (w[1] - w[0]) * j as f64 / factor as f64);
            }
        }
        times.push(self.end());
        Self::new(times)
    }
}

/// States `x_0 .. x_L` recorded on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    #[default]
    Euler,
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown method `{other}` (expected euler|rk4)")),
        }
    }
}

fn check_inputs<V: VelocityField + ?Sized>(v: &V, x0: &DVector<f64>, grid: &TimeGrid) -> Result<()> {
    if x0.len() != v.dim() {
        return Err(Error::dim("initial state", v.dim(), x0.len()));
    }
    let horizon = v.horizon();
    let slack = 1e-12 * horizon.abs().max(1.0);
    if grid.start() < -slack || grid.end() > horizon + slack {
        return Err(Error::invalid(format!(
            "grid [{}, {}] leaves the field's time range [0, {horizon}]",
            grid.start(),
            grid.end()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    Ok(())
}

fn check_state(x: &DVector<f64>, time: f64, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { time, step })
    }
}

/// Explicit Euler: `x_k = x_{k-1} + s_k v(t_{k-1}, x_{k-1})`.
pub fn integrate_euler<V: VelocityField + ?Sized>(v: &V, x0: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory> {
    check_inputs(v, x0, grid)?;
    let mut states = Vec::with_capacity(grid.times.len());
    states.push(x0.clone());
    for (k, w) in grid.times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1] - w[0]);
        let x = states.last().unwrap();
        let next = x + v.velocity(t, x)? * s;
        check_state(&next, w[1], k + 1)?;
        states.push(next);
    }
    Ok(Trajectory { grid: grid.clone(), states })
}

/// Classical four-stage Runge-Kutta on each interval.
pub fn integrate_rk4<V: VelocityField + ?Sized>(v: &V, x0: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory> {
    check_inputs(v, x0, grid)?;
    let mut states = Vec::with_capacity(grid.times.len());
    states.push(x0.clone());
    for (k, w) in grid.times.windows(2).enumerate() {
        let (t, s) = (w[0], w[1] - w[0]);
        let half = 0.5 * s;
        let x = states.last().unwrap();
        let k1 = v.velocity(t, x)?;
        let k2 = v.velocity(t + half, &(x + &k1 * half))?;
        let k3 = v.velocity(t + half, &(x + &k2 * half))?;
        let k4 = v.velocity(w[1], &(x + &k3 * s))?;
        let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (s / 6.0);
        check_state(&next, w[1], k + 1)?;
        states.push(next);
    }
    Ok(Trajectory { grid: grid.clone(), states })
}

pub fn integrate<V: VelocityField + ?Sized>(
    v: &V,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
) -> Result<Trajectory> {
    match method {
        Method::Euler => integrate_euler(v, x0, grid),
        Method::Rk4 => integrate_rk4(v, x0, grid),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub step_size: f64,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub method: Method,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln err` against `ln step`; `None` when fewer
    /// than two errors rise above round-off (e.g. a method that is exact).
    pub fitted_order: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Errors of the terminal state on uniform grids of `grid_sizes` intervals
/// over `[0, horizon]` against `reference`, plus the fitted order.
pub fn convergence_study<V: VelocityField + ?Sized>(
    v: &V,
    x0: &DVector<f64>,
    reference: &DVector<f64>,
    grid_sizes: &[usize],
    method: Method,
) -> Result<ConvergenceReport> {
    if grid_sizes.len() < 3 {
        return Err(Error::invalid(format!(
            "a convergence study needs at least 3 grid sizes, got {}",
            grid_sizes.len()
        )));
    }
    if grid_sizes[0] == 0 || grid_sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("grid sizes must be positive and strictly increasing"));
    }
    if reference.len() != v.dim() {
        return Err(Error::dim("reference state", v.dim(), reference.len()));
    }
    let scale = reference.amax();
    let noise = 64.0 * f64::EPSILON * scale.max(1.0);
    let rows = grid_sizes
        .iter()
        .map(|&n| {
            let grid = TimeGrid::uniform(0.0, v.horizon(), n)?;
            let end = integrate(v, x0, &grid, method)?;
            let err = (end.final_state() - reference).amax();
            Ok(ConvergenceRow {
                steps: n,
                step_size: grid.max_step(),
                max_abs_err: err,
                rel_err: if scale > 0.0 { err / scale } else { err },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.max_abs_err > noise)
        .map(|r| (r.step_size, r.max_abs_err))
        .collect();
    Ok(ConvergenceReport {
        method,
        fitted_order: fit_log_slope(&points),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::AnalyticField;
    use nalgebra::{dmatrix, dvector};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, f64::NAN]).is_err());
        assert!(TimeGrid::uniform(0.0, 1.0, 0).is_err());
        let g = TimeGrid::uniform(0.0, 3.0, 3).unwrap();
        assert_eq!(g.times(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.refine(2).unwrap().len(), 6);
    }

    #[test]
    fn constant_field_is_exact_for_both_methods() {
        let field = AnalyticField::constant(dvector![1.5, -2.0], 2.0);
        let x0 = dvector![0.25, 1.0];
        for method in [Method::Euler, Method::Rk4] {
            for grid in [
                TimeGrid::uniform(0.0, 2.0, 1).unwrap(),
                TimeGrid::new(vec![0.0, 0.1, 0.7, 2.0]).unwrap(),
            ] {
                let end = integrate(&field, &x0, &grid, method).unwrap();
                assert!((end.final_state() - dvector![3.25, -3.0]).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn single_euler_step_on_decay() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let end = integrate_euler(&field, &dvector![1.0], &TimeGrid::uniform(0.0, 1.0, 1).unwrap()).unwrap();
        assert_eq!(end.final_state()[0], 0.0);
    }

    #[test]
    fn euler_error_halves_with_step() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let exact = (-1f64).exp();
        let err = |n| {
            let g = TimeGrid::uniform(0.0, 1.0, n).unwrap();
            (integrate_euler(&field, &dvector![1.0], &g).unwrap().final_state()[0] - exact).abs()
        };
        let ratio = err(64) / err(128);
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_on_decay_and_rotation() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let g = TimeGrid::uniform(0.0, 1.0, 100).unwrap();
        let end = integrate_rk4(&field, &dvector![1.0], &g).unwrap();
        assert!((end.final_state()[0] - (-1f64).exp()).abs() <= 1e-9);

        let a = dmatrix![0.0, -FRAC_PI_2; FRAC_PI_2, 0.0];
        let field = AnalyticField::rotation(a.clone(), 1.0).unwrap();
        let x0 = dvector![1.0, 0.5];
        let exact = crate::lindecomp::expm(&a).unwrap() * &x0;
        let end = integrate_rk4(&field, &x0, &g).unwrap();
        assert!((end.final_state() - exact).amax() <= 1e-8);
    }

    #[test]
    fn fitted_orders() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let reference = dvector![(-1f64).exp()];
        let sizes = [16, 32, 64, 128, 256];
        let euler = convergence_study(&field, &dvector![1.0], &reference, &sizes, Method::Euler).unwrap();
        let order = euler.fitted_order.unwrap();
        assert!((0.9..=1.1).contains(&order), "{order}");
        for w in euler.rows.windows(2) {
            assert!(w[1].max_abs_err <= w[0].max_abs_err);
        }
        let rk4 = convergence_study(&field, &dvector![1.0], &reference, &[4, 8, 16, 32], Method::Rk4).unwrap();
        let order = rk4.fitted_order.unwrap();
        assert!((3.5..=4.5).contains(&order), "{order}");
    }

    #[test]
    fn constant_field_reports_no_order() {
        let field = AnalyticField::constant(dvector![2.0], 1.0);
        let report = convergence_study(&field, &dvector![0.0], &dvector![2.0], &[2, 4, 8], Method::Euler).unwrap();
        assert!(report.rows.iter().all(|r| r.max_abs_err <= 1e-15));
        assert_eq!(report.fitted_order, None);
    }

    #[test]
    fn study_validates_grid_list() {
        let field = AnalyticField::linear_decay(1, 1.0);
        let r = dvector![0.0];
        assert!(convergence_study(&field, &dvector![1.0], &r, &[8, 16], Method::Euler).is_err());
        assert!(convergence_study(&field, &dvector![1.0], &r, &[8, 4, 16], Method::Euler).is_err());
    }

    #[test]
    fn divergence_reports_time() {
        let field = crate::flowmodel::FnField::new(1, 1.0, |_, x: &DVector<f64>| Ok(x.map(|v| v * v * 1e200)));
        let err = integrate_euler(&field, &dvector![1e200], &TimeGrid::uniform(0.0, 1.0, 4).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn rejects_grid_outside_horizon_and_bad_dimension() {
        let field = AnalyticField::linear_decay(2, 1.0);
        assert!(integrate_euler(&field, &dvector![1.0, 1.0], &TimeGrid::uniform(0.0, 2.0, 4).unwrap()).is_err());
        assert!(integrate_euler(&field, &dvector![1.0], &TimeGrid::uniform(0.0, 1.0, 4).unwrap()).is_err());
    }
}
