use caap_core::{Arch, Backbone, AdamW, Tensor};
use std::time::Instant;
fn main() {
    for arch in [Arch::MiniFcn, Arch::MiniResnet1d] {
        let mut bb = Backbone::new(arch, 2, 256, 3, 7);
        println!("{:?}: {} params", arch, bb.param_count());
        let n = 32;
        let data: Vec<f64> = (0..n*2*256).map(|i| ((i as f64)*0.37).sin()).collect();
        let x = Tensor::new(vec![n,2,256], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut opt = AdamW::new(&bb.param_sizes(), 1e-2);
        // warmup
        bb.train_step(&x, &labels, &mut opt, 1e-3).unwrap();
        let t0 = Instant::now();
        let iters = 20;
        for _ in 0..iters { bb.train_step(&x, &labels, &mut opt, 1e-3).unwrap(); }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        println!("  train_step batch32: {:.1} ms -> {:.0} samples/s", dt*1e3, n as f64/dt);
        let t0 = Instant::now();
        for _ in 0..iters { bb.features(&x).unwrap(); }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        println!("  features batch32:   {:.1} ms", dt*1e3);
    }
}
