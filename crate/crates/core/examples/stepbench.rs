//! Times training steps at every stage of a run configuration on toy data.
//!
//! `cargo run --release -p twingan --example stepbench -- [config.toml] [steps]`

use std::time::Instant;

use twingan::data::toy::{attributes, render};
use twingan::trainer::pool_to;
use twingan::{autograd::Tensor, DomainId, RunConfig, TrainerState};

fn toy_batch(domain: DomainId, n: usize, size: usize, offset: usize) -> Tensor {
    let imgs: Vec<Tensor> = (0..n)
        .map(|i| {
            let bytes = render(&attributes(0, offset + i), domain, size);
            Tensor::from_fn([1, 3, size, size], |k| {
                let (c, p) = (k / (size * size), k % (size * size));
                bytes[p * 3 + c] as f32 / 127.5 - 1.0
            })
        })
        .collect();
    Tensor::stack(&imgs)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1) {
        Some(p) => RunConfig::load(p.as_ref()).expect("config"),
        None => RunConfig::default(),
    };
    if args.len() == 1 {
        println!("{}", cfg.to_toml());
        return;
    }
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut state = TrainerState::new(&cfg).expect("trainer");
    let len = cfg.plan.stage_length;
    let max = cfg.network.max_resolution;
    while !state.is_finished() {
        let stage = state.stage();
        let n = state.batch_size().unwrap();
        let t = Instant::now();
        for s in 0..steps {
            let a = pool_to(&toy_batch(DomainId::A, n, max, s as usize * n), stage.resolution).unwrap();
            let b = pool_to(&toy_batch(DomainId::B, n, max, s as usize * n), stage.resolution).unwrap();
            let out = state.train_step(&a, &b).unwrap();
            if s == steps - 1 {
                println!(
                    "stage {:2} {:>3} {:<13} {:.3}s/step  total {:.4} cyc {:.4}",
                    stage.index,
                    stage.resolution,
                    stage.phase.as_str(),
                    t.elapsed().as_secs_f64() / steps as f64,
                    out.report.total,
                    out.report.cyc
                );
            }
        }
        state.global_images_seen = (stage.index as u64 + 1) * len;
    }
}
