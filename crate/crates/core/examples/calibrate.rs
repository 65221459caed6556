//! Hyperparameter probe used while pinning the default training setup.
use posebench_core::models::{build_model, ModelConfig};
use posebench_core::synthpose::{Dataset, SkeletonSpec};
use posebench_core::train::{train_model, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let channels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lrs: Vec<f64> = args
        .get(4)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.1, 0.3, 1.0]);

    let spec = SkeletonSpec::five_joint();
    let (train, val) = Dataset::generate(&spec, n, 7, 0.3).split(0.8, 7);
    println!("train {} val {}", train.samples.len(), val.samples.len());

    for kind in ["direct", "heat1", "heat2", "chained"] {
        for &lr in &lrs {
            let cfg = match kind {
                "direct" => ModelConfig::direct(5, channels),
                "heat1" => ModelConfig::heatmap(5, channels, 1),
                "heat2" => ModelConfig::heatmap(5, channels, 2),
                _ => ModelConfig::chained(5, channels),
            };
            let mut model = build_model(&cfg, 7).unwrap();
            let tc = TrainConfig {
                epochs,
                lr,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            match train_model(&mut model, &train.samples, &val.samples, &tc) {
                Ok(stats) => {
                    let first = &stats[0];
                    let last = stats.last().unwrap();
                    println!(
                        "{kind:8} lr={lr:<5} loss {:.5} -> {:.5}  val-pckh {:.1} -> {:.1}  ({:.1} s)",
                        first.train_loss,
                        last.train_loss,
                        first.val_pckh,
                        last.val_pckh,
                        start.elapsed().as_secs_f64()
                    );
                }
                Err(e) => println!("{kind:8} lr={lr:<5} {e}"),
            }
        }
    }
}
