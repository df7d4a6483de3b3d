// Inspect a checkpoint's attention: average mass by relative offset on a
// repeat probe, per head. Usage:
//   cargo run --release -p indlab --example attn_profile -- <ckpt-dir> [block_len]

use indlab::datagen::gen_probe;
use indlab::model::{checkpoint, forward, ForwardOpts};
use indlab::{derive_rng, salts};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: attn_profile <ckpt-dir> [block_len]");
    let block: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(25);
    let params = checkpoint::load(std::path::Path::new(&ckpt)).expect("load checkpoint");
    let t_len = 2 * block;

    let n = 50;
    let heads = params.all_heads();
    // offset histogram: mass at t - t' = delta, averaged over rows in the
    // second block; plus mass on the induction target t - block + 1.
    for &head in &heads {
        let mut by_offset = vec![0.0f64; 12];
        let mut induction = 0.0;
        let mut self_mass = 0.0;
        let mut rows = 0usize;
        for i in 0..n {
            let mut rng = derive_rng(4242, salts::PROBES, i);
            let probe = gen_probe(block, 2, params.config.vocab, &mut rng).unwrap();
            let trace = forward(&params, &probe.tokens, ForwardOpts::capture()).unwrap();
            let a = trace.attention(head).unwrap();
            for t in block..t_len {
                rows += 1;
                for (delta, slot) in by_offset.iter_mut().enumerate() {
                    if t >= delta {
                        *slot += a[t * t_len + (t - delta)] as f64;
                    }
                }
                induction += a[t * t_len + (t + 1 - block)] as f64;
                self_mass += a[t * t_len + t] as f64;
            }
        }
        let k = rows as f64;
        print!("head [{} {}]  ind {:.3}  self {:.3}  |", head.layer, head.head, induction / k, self_mass / k);
        for (delta, v) in by_offset.iter().enumerate() {
            print!(" d{delta}:{:.3}", v / k);
        }
        println!();
    }
}
