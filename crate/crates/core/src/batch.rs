//! Evaluation over batches of inputs.
//!
//! With the `parallel` feature (on by default) inputs are spread over the
//! rayon thread pool; without it, or through the `*_sequential` variants,
//! they run in order on the calling thread. Output order always matches
//! input order.

use nalgebra::DVector;

use crate::error::Result;
use crate::flowmodel::{solve_tvp, TransportProblem, VelocityField};
use crate::integrate::{integrate, Method, TimeGrid};
use crate::nettypes::Network;

#[cfg(feature = "parallel")]
pub fn map_inputs<T, F>(inputs: &[DVector<f64>], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&DVector<f64>) -> T + Sync + Send,
{
    use rayon::prelude::*;
    inputs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_inputs<T, F>(inputs: &[DVector<f64>], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&DVector<f64>) -> T + Sync + Send,
{
    map_inputs_sequential(inputs, f)
}

pub fn map_inputs_sequential<T, F>(inputs: &[DVector<f64>], f: F) -> Vec<T>
where
    F: Fn(&DVector<f64>) -> T,
{
    inputs.iter().map(f).collect()
}

pub fn eval_network_batch(net: &Network, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    map_inputs(inputs, |x| net.eval(x)).into_iter().collect()
}

pub fn eval_network_batch_sequential(net: &Network, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    map_inputs_sequential(inputs, |x| net.eval(x)).into_iter().collect()
}

/// Terminal states of the characteristics through each input.
pub fn integrate_batch<V: VelocityField + ?Sized>(
    v: &V,
    inputs: &[DVector<f64>],
    grid: &TimeGrid,
    method: Method,
) -> Result<Vec<DVector<f64>>> {
    map_inputs(inputs, |x| integrate(v, x, grid, method).map(|t| t.final_state().clone()))
        .into_iter()
        .collect()
}

pub fn integrate_batch_sequential<V: VelocityField + ?Sized>(
    v: &V,
    inputs: &[DVector<f64>],
    grid: &TimeGrid,
    method: Method,
) -> Result<Vec<DVector<f64>>> {
    map_inputs_sequential(inputs, |x| integrate(v, x, grid, method).map(|t| t.final_state().clone()))
        .into_iter()
        .collect()
}

pub fn solve_tvp_batch(
    problem: &TransportProblem<'_>,
    inputs: &[DVector<f64>],
    grid: &TimeGrid,
    method: Method,
) -> Result<Vec<f64>> {
    map_inputs(inputs, |x| solve_tvp(problem, x, grid, method)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::AnalyticField;
    use crate::nettypes::{ActivationKind, PlainLayer};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let net = Network::from_layers([PlainLayer::new(
            dmatrix![0.5, -1.0; 2.0, 0.25],
            dvector![0.1, -0.2],
            ActivationKind::Tanh,
        )
        .unwrap()])
        .unwrap();
        let inputs: Vec<_> = (0..257).map(|i| dvector![i as f64 / 100.0, -(i as f64) / 50.0]).collect();
        assert_eq!(
            eval_network_batch(&net, &inputs).unwrap(),
            eval_network_batch_sequential(&net, &inputs).unwrap()
        );

        let field = AnalyticField::linear_decay(2, 1.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 32).unwrap();
        assert_eq!(
            integrate_batch(&field, &inputs, &grid, Method::Rk4).unwrap(),
            integrate_batch_sequential(&field, &inputs, &grid, Method::Rk4).unwrap()
        );

        let f = |x: &DVector<f64>| x[0] + x[1];
        let problem = TransportProblem::new(&field, &f);
        let u = solve_tvp_batch(&problem, &inputs, &grid, Method::Euler).unwrap();
        assert_eq!(u.len(), inputs.len());
    }

    #[test]
    fn first_error_is_reported() {
        let net = Network::from_layers([PlainLayer::new(dmatrix![1.0], dvector![0.0], ActivationKind::Relu).unwrap()])
            .unwrap();
        let inputs = vec![dvector![1.0], dvector![1.0, 2.0]];
        assert!(eval_network_batch(&net, &inputs).is_err());
    }
}
