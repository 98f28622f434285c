//! Rough throughput probe for the conv stack (temporary calibration aid).

use echomotion::tensor::Graph;
use ndarray::{ArrayD, IxDyn};
use std::time::Instant;

fn main() {
    for (n, ci, co, hw, k, stride) in [
        (8usize, 16usize, 32usize, 64usize, 3usize, 2usize),
        (8, 32, 64, 32, 3, 2),
        (8, 64, 96, 16, 3, 2),
        (8, 96, 96, 8, 3, 1),
        (8, 1, 24, 64, 7, 1),
    ] {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[n, ci, hw, hw]), 0.5));
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[co, ci, k, k]), 0.01));
        let b = g.leaf(ArrayD::from_elem(IxDyn(&[co]), 0.0));
        let t0 = Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let y = g.conv2d(x, w, b, stride, k / 2);
            let l = g.mean_all(y);
            g.backward(l);
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let ho = (hw + 2 * (k / 2) - k) / stride + 1;
        let macs = (n * co * ci * k * k * ho * ho) as f64;
        println!(
            "conv {ci}->{co} @{hw} k{k} s{stride}: {:.1} ms fwd+bwd, fwd {:.2} GFLOP/s-ish",
            dt * 1e3,
            2.0 * macs / dt / 1e9 * 3.0
        );
    }
}
