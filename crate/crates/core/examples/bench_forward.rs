use std::time::Instant;

use flexidit::backbone::*;
use flexidit::numerics::{SplitRng, Tape};

fn main() {
    for (d, depth) in [(64, 4), (96, 4), (128, 4), (64, 6)] {
        let cfg = ModelConfig { d, depth, ..ModelConfig::default() };
        let params = ModelParams::init(&cfg, 1, InitStyle::Random).unwrap();
        let mut rng = SplitRng::new(2);
        let items: Vec<ForwardItem> = (0..16)
            .map(|k| ForwardItem { x: rng.normal_tensor(&[1, 16, 16]), t: 10, cond: Cond::Class(k % 3), p: 2 })
            .collect();
        let lens = vec![64; 16];
        let t0 = Instant::now();
        let (_, fl) = params.predict_batch(&items, &ExecLayout::independent(&lens)).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &params);
        let tr = forward_packed(&b, &items, &ExecLayout::independent(&lens)).unwrap();
        let mut loss = tr.outputs[0].square().unwrap().sum().unwrap();
        for o in &tr.outputs[1..] {
            loss = loss.add(&o.square().unwrap().sum().unwrap()).unwrap();
        }
        let _g = tape.backward(loss).unwrap();
        let fb = t0.elapsed().as_secs_f64();
        println!(
            "d={d} L={depth} params={} fwd16={fwd:.3}s ({:.2} GF/s) fwd+bwd16={fb:.3}s",
            params.num_params(),
            fl.model_total() as f64 / fwd / 1e9
        );
    }
}
