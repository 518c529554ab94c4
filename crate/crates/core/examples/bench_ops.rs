//! Micro-benchmark of the convolution and linear kernels at training shapes.

use std::time::Instant;

use decorre_core::ops::{conv2d_backward_lowered, conv2d_lowered, linear, linear_backward, Padding};
use decorre_core::{LayerParams, Rng, Tensor};

fn main() {
    let mut rng = Rng::new(0);
    let reps = 20;
    for (cin, cout, hw, k) in [(1usize, 6usize, 32usize, 5usize), (6, 16, 14, 5)] {
        let x = Tensor::<f32>::from_fn(&[32, cin, hw, hw], |_| rng.normal() as f32);
        let p = LayerParams::<f32>::init_conv(cout, cin, k, &mut rng);
        let t = Instant::now();
        let mut out = None;
        for _ in 0..reps {
            out = Some(conv2d_lowered(&x, &p, 1, Padding::Valid).unwrap());
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;
        let (y, cols, g) = out.unwrap();
        let t = Instant::now();
        for _ in 0..reps {
            conv2d_backward_lowered(&cols, &g, 32, &p, &y, cin > 1).unwrap();
        }
        let bwd = t.elapsed().as_secs_f64() / reps as f64;
        let macs = (32 * g.output_len() * g.patch_len()) as f64;
        println!(
            "conv {cin}->{cout}: fwd {:.2} ms ({:.2} GMAC/s), bwd {:.2} ms",
            fwd * 1e3,
            macs / fwd / 1e9,
            bwd * 1e3
        );
    }
    let x = Tensor::<f32>::from_fn(&[32, 400], |_| rng.normal() as f32);
    let p = LayerParams::<f32>::init_linear(120, 400, &mut rng);
    let t = Instant::now();
    let mut y = None;
    for _ in 0..reps {
        y = Some(linear(&x, &p).unwrap());
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        linear_backward(&x, &p, y.as_ref().unwrap()).unwrap();
    }
    println!(
        "linear 400->120: fwd {:.2} ms, bwd {:.2} ms",
        fwd * 1e3,
        t.elapsed().as_secs_f64() / reps as f64 * 1e3
    );
}
