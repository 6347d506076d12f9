//! Training throughput in f64 and f32 on the linear-Gaussian task.
//!
//! `cargo run --release --example bench_train -- [epochs]`

use std::time::Instant;

use sfml::dataset::linear_gaussian_set;
use sfml::flow::FlowModel;
use sfml::training::{train, TrainConfig};

fn main() {
    let set = linear_gaussian_set(20_000, 1).unwrap();
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let cfg = TrainConfig {
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let m64 = FlowModel::<f64>::for_training_set(&set, false, 0).unwrap();
    let (_, h) = train(m64, &set, &cfg).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!(
        "f64: {:.3} ms/iter, final loss {:.4}",
        dt * 1e3 / (epochs * 20) as f64,
        h.records.last().unwrap().loss
    );
    let t = Instant::now();
    let m32 = FlowModel::<f32>::for_training_set(&set, false, 0).unwrap();
    let (_, h) = train(m32, &set, &cfg).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!(
        "f32: {:.3} ms/iter, final loss {:.4}",
        dt * 1e3 / (epochs * 20) as f64,
        h.records.last().unwrap().loss
    );
}
