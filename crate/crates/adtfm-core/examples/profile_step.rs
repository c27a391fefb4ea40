use adtfm_core::model::{build_model, forward_on_tape, ModelConfig, Variant};
use adtfm_core::tape::Tape;
use adtfm_core::tensor::Tensor;
use adtfm_core::train::cross_entropy_node;
use std::time::Instant;

fn main() {
    let config = ModelConfig {
        variant: Variant::AdTfmAt,
        d: 16, k: 4, j: 4, omega0: 16.0,
        input_dim: 6, num_layers: 2, num_classes: 5,
    };
    let mp = build_model(config, 1).unwrap();
    let x = Tensor::new(vec![100, 6], (0..600).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

    let mut tape = Tape::new();
    // warmup + node count
    let nodes = mp.register(&mut tape).unwrap();
    let fwd = forward_on_tape(&mut tape, &nodes, &config, &x).unwrap();
    let loss = cross_entropy_node(&mut tape, fwd.probs, 2).unwrap();
    println!("nodes per sample: {}", tape.node_count());

    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        tape.clear();
        let nodes = mp.register(&mut tape).unwrap();
        let fwd = forward_on_tape(&mut tape, &nodes, &config, &x).unwrap();
        let _ = cross_entropy_node(&mut tape, fwd.probs, 2).unwrap();
    }
    let fwd_time = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+build: {:.3} ms", fwd_time * 1e3);

    let t0 = Instant::now();
    for _ in 0..n {
        tape.clear();
        let nodes = mp.register(&mut tape).unwrap();
        let fwd = forward_on_tape(&mut tape, &nodes, &config, &x).unwrap();
        let loss = cross_entropy_node(&mut tape, fwd.probs, 2).unwrap();
        let _ = tape.gradient(loss).unwrap();
    }
    let total = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+backward: {:.3} ms (backward {:.3} ms)", total * 1e3, (total - fwd_time) * 1e3);
    let _ = loss;
}
