use std::time::Instant;
use twingan_autograd::{conv2d, conv2d_backward_data, conv2d_backward_weight, Tensor};

fn main() {
    for &(c, hw, n) in &[(16usize, 32usize, 8usize), (32, 16, 8), (64, 8, 8), (128, 4, 8), (256, 8, 2)] {
        let x = Tensor::from_fn([n, c, hw, hw], |i| (i % 7) as f32 * 0.1);
        let w = Tensor::from_fn([c, c, 3, 3], |i| (i % 5) as f32 * 0.01);
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let y = conv2d(&x, &w, 1);
            let _ = conv2d_backward_data(&y, &w, 1, (hw, hw));
            let _ = conv2d_backward_weight(&x, &y, 1, 3);
        }
        let secs = t.elapsed().as_secs_f64() / reps as f64;
        let flops = 3.0 * 2.0 * (n * hw * hw * c * c * 9) as f64;
        println!("c={c} hw={hw} n={n}: {:.2} ms, {:.1} GFLOPS", secs * 1e3, flops / secs / 1e9);
    }
}
