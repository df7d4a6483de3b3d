// Quick wall-clock probe for the forward/backward hot path. Not a criterion
// benchmark; run with `cargo bench -p indlab` when tuning kernels.

use std::time::Instant;

use indlab::model::backprop::loss_and_grad;
use indlab::model::{forward, ForwardOpts, ModelConfig, ModelParameters};
use indlab::{derive_rng, salts};

fn main() {
    let cfg = ModelConfig::default_2l1h();
    let mut rng = derive_rng(0, salts::INIT, 0);
    let params = ModelParameters::<f32>::init(cfg, &mut rng).unwrap();
    let tokens: Vec<u32> = (0..64).map(|i| ((i * 37 + 11) % 64) as u32).collect();

    let n = 2000;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = forward(&params, &tokens, ForwardOpts::default()).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = loss_and_grad(&params, &tokens, false, None).unwrap();
    }
    let both = t0.elapsed().as_secs_f64() / n as f64;

    println!("forward: {:.1} us, forward+backward: {:.1} us", fwd * 1e6, both * 1e6);
}
