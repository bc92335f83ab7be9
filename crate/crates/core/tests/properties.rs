use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use flownet::actflow::ActivationFlow;
use flownet::flowmodel::{build_network_flow, resnet_to_flow, FlowOptions, Interpolation, VelocityField};
use flownet::integrate::integrate_euler;
use flownet::lindecomp::{decompose, expm, rotation_log};
use flownet::nettypes::{network_from_json, network_to_json, ActivationKind, Network, PlainLayer, ResBlock2};
use flownet::rediscretize::{relu_flow_blocks, rediscretize_network, RediscretizationOptions};
use flownet::timescale::TimeScale;

fn matrix(d: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-scale..scale, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn vector(d: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(-scale..scale, d).prop_map(DVector::from_vec)
}

fn activation() -> impl Strategy<Value = ActivationKind> {
    prop_oneof![
        Just(ActivationKind::Relu),
        Just(ActivationKind::Tanh),
        Just(ActivationKind::Identity),
        (0.05f64..0.95).prop_map(ActivationKind::LeakyRelu),
    ]
}

fn resnet(d: usize, blocks: usize) -> impl Strategy<Value = Network> {
    proptest::collection::vec((matrix(d, 1.5), vector(d, 1.0), matrix(d, 0.3), vector(d, 0.3)), blocks).prop_map(
        |bs| {
            Network::from_layers(
                bs.into_iter()
                    .map(|(w1, b1, w2, b2)| ResBlock2::new(w1, b1, w2, b2, ActivationKind::Tanh).unwrap()),
            )
            .unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euler_on_block_grid_equals_forward_pass(net in resnet(3, 6), x in vector(3, 2.0), horizon in 0.5f64..4.0) {
        let flow = resnet_to_flow(&net, horizon, Interpolation::PiecewiseConstant).unwrap();
        let forward = net.eval(&x).unwrap();
        let euler = integrate_euler(&flow, &x, flow.block_grid()).unwrap();
        prop_assert!((euler.final_state() - &forward).norm() <= 1e-12 * forward.norm().max(1.0));
    }

    #[test]
    fn decomposition_reconstructs_rank_deficient_weights(a in matrix(4, 2.0), keep in 1usize..4) {
        // Zeroing trailing columns of a factor forces rank <= keep.
        let mut b = a.clone();
        for j in keep..4 {
            b.column_mut(j).fill(0.0);
        }
        let w = &b * a.transpose();
        let dec = decompose(&w, 30.0).unwrap();
        let err = (dec.reconstruct().unwrap() - &w).norm();
        prop_assert!(err <= 1e-8 * w.norm() + 8.0 * (-30f64).exp(), "{}", err);
        prop_assert!(dec.rank <= keep);
    }

    #[test]
    fn rotation_log_inverts_expm(g in matrix(4, 1.0)) {
        let skew = (&g - g.transpose()) * 0.5;
        let q = expm(&skew).unwrap();
        let back = expm(&rotation_log(&q).unwrap()).unwrap();
        prop_assert!((back - q).amax() <= 1e-10);
    }

    #[test]
    fn activation_flow_inverse_round_trip(a in activation(), z in vector(5, 5.0), tau in 0.0f64..0.99) {
        let af = ActivationFlow::new(a, TimeScale::Quintic);
        let back = af.phi_inv(tau, &af.phi(tau, &z).unwrap()).unwrap();
        prop_assert!((back - &z).amax() <= 1e-9 * z.amax().max(1.0));
    }

    #[test]
    fn plain_flow_is_still_at_layer_boundaries(
        w in matrix(3, 1.0), b in vector(3, 1.0), x in vector(3, 3.0), a in activation(), k in 0usize..3
    ) {
        // Embedding avoids the det < 0 case without restricting W.
        let layer = PlainLayer::new(w, b, a).unwrap();
        let net = Network::from_layers([layer.clone(), layer]).unwrap().embed_to_dimension(4).unwrap();
        let flow = build_network_flow(&net, 2.0, &FlowOptions::default()).unwrap();
        let x = x.push(0.0);
        let t = flow.layer_grid().times()[k];
        prop_assert_eq!(flow.velocity(t, &x).unwrap(), DVector::zeros(4));
    }

    #[test]
    fn relu_blocks_fix_the_nonnegative_orthant(z in vector(4, 3.0), l in 1usize..80) {
        let z = z.abs();
        let out = relu_flow_blocks(4, l, TimeScale::Quintic, 0.05)
            .unwrap()
            .iter()
            .try_fold(z.clone(), |y, b| b.eval(&y))
            .unwrap();
        prop_assert_eq!(out, z);
    }

    #[test]
    fn rediscretized_network_is_valid_json(w in matrix(2, 1.0), b in vector(2, 1.0), x in vector(2, 1.0), l in 1usize..8) {
        let net = Network::from_layers([PlainLayer::new(w, b, ActivationKind::Tanh).unwrap()]).unwrap();
        let res = rediscretize_network(&net, &RediscretizationOptions::default().with_blocks(l), Some(&x)).unwrap();
        let back = network_from_json(&network_to_json(&res)).unwrap();
        prop_assert_eq!(back.eval(&x).unwrap(), res.eval(&x).unwrap());
    }
}
