//! Rough conv throughput probe used while sizing the default zoo.
use posebench_core::diffnet::{Graph, Tensor};
use std::time::Instant;

fn main() {
    for &c in &[6usize, 8] {
        let x = Tensor::from_vec(&[c, 16, 16], vec![0.5; c * 256]).unwrap();
        let w = Tensor::from_vec(&[c, c, 3, 3], vec![0.01; c * c * 9]).unwrap();
        let b = Tensor::zeros(&[c]);
        let reps = 20000;
        let start = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            let y = g.conv2d(xi, wi, bi, 1, 1).unwrap();
            let y = g.relu(y);
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            sink += g.grad(xi)[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let macs = (c * c * 9 * 256) as f64 * reps as f64 * 2.0; // fwd + dx bwd
        println!(
            "C={c}: {:.2} GMAC/s fwd+bwd ({:.1} us/iter, sink {sink})",
            macs / dt / 1e9,
            dt / reps as f64 * 1e6
        );
    }
}
