//! Fixtures shared by the benchmarks.

use dpcn::data::{generate_shapes_video, ShapesSpec, Video};
use dpcn::{build_network, HyperParams, LayerDims, Network, Topology};

/// Untrained two-layer network with the shapes geometry and dimensions.
pub fn shapes_network(seed: u64) -> Network {
    let dims = [LayerDims::new(100, 144, 40, 4).unwrap(), LayerDims::new(60, 40, 3, 4).unwrap()];
    let hyper = HyperParams {
        lambda: 0.1,
        gamma0: 0.1,
        beta: 0.01,
        max_iters: 100,
        tol: 1e-4,
        ..Default::default()
    };
    let mut net = build_network(&Topology::shapes(), &dims, &[hyper, hyper], seed).unwrap();
    net.mark_trained();
    net
}

pub fn shapes_video(frames_per_class: usize, seed: u64) -> Video {
    generate_shapes_video(&ShapesSpec {
        frames_per_class,
        seed,
        ..Default::default()
    })
    .unwrap()
}
