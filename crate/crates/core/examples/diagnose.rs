//! Probes the heatmap collapse: is the trunk dead, or just slow?
use posebench_core::diffnet::Graph;
use posebench_core::models::{
    build_model, labels_for_sample, training_loss, LossSurface, ModelConfig, LABEL_SIGMA,
};
use posebench_core::synthpose::{Dataset, SkeletonSpec};
use posebench_core::train::{train_model, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);

    let spec = SkeletonSpec::five_joint();
    let (train, val) = Dataset::generate(&spec, 600, 7, 0.3).split(0.8, 7);
    let mut model = build_model(&ModelConfig::heatmap(5, 6, 1), 7).unwrap();

    for round in 0..epochs / 5 {
        let cfg = TrainConfig {
            epochs: 5,
            lr,
            ..TrainConfig::default()
        };
        let stats = train_model(&mut model, &train.samples, &val.samples, &cfg).unwrap();
        let s = &val.samples[0];
        let out = model.predict(&s.image).unwrap();
        let hm = &out.stack_heatmaps[0];
        let hmax = hm.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let hmin = hm.data().iter().cloned().fold(f64::INFINITY, f64::min);

        // How alive is the trunk? Count positive activations at the
        // last trunk relu via the graph.
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, &s.image, false, false).unwrap();
        let labels = labels_for_sample(model.config(), s, LABEL_SIGMA);
        let loss = training_loss(&mut g, &pass, &labels, LossSurface::All).unwrap();
        let head = g.value(pass.stack_outputs[0]);
        let live = head.data().iter().filter(|v| v.abs() > 1e-6).count();
        println!(
            "round {round}: epochs {:2} loss {:.5} val-pckh {:5.1} hm[{:.4},{:.4}] live-out {live}/1280 loss-now {:.5}",
            (round + 1) * 5,
            stats.last().unwrap().train_loss,
            stats.last().unwrap().val_pckh,
            hmin,
            hmax,
            g.value(loss).item()
        );
    }
}
