use std::time::Instant;

use smoa_core::backbone::{BackboneConfig, EncodedPair};
use smoa_core::smoa::SmoaConfig;
use smoa_core::tensor::Graph;
use smoa_core::Model;

fn main() -> smoa_core::Result<()> {
    let cfg = BackboneConfig {
        vocab_size: 200,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        max_len: 20,
        n_classes: 3,
        seed: 1,
    };
    let model = Model::new(cfg)?;
    let pairs: Vec<EncodedPair> = (0..32)
        .map(|i| {
            let a: Vec<u32> = (0..6).map(|j| 3 + ((i * 7 + j * 13) % 190) as u32).collect();
            let b: Vec<u32> = (0..6).map(|j| 3 + ((i * 11 + j * 5) % 190) as u32).collect();
            EncodedPair::new(&a, &b)
        })
        .collect();
    let labels: Vec<usize> = (0..32).map(|i| i % 3).collect();
    let batch = model.encode_batch(&pairs)?;
    for (name, m) in [
        ("full", model.clone()),
        (
            "smoa",
            model.clone().insert_smoa(
                SmoaConfig {
                    n_adapters: 5,
                    top_k: 2,
                    bottleneck: 8,
                },
                3,
            )?,
        ),
    ] {
        let reps = 200;
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let logits = m.forward(&mut g, &batch)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        println!("{name}: {:.2} ms/step (batch 32) => {:.0} examples/s", dt * 1e3, 32.0 / dt);
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::inference();
            m.forward(&mut g, &batch)?;
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        println!("{name} inference: {:.2} ms/batch", dt * 1e3);
    }
    Ok(())
}
