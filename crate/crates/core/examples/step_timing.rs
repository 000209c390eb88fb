//! Times one forward/backward pass of the segmentation network.
//!
//! `cargo run --release -p sonoseg --example step_timing -- [desk|default] [size] [batch]`

use std::time::Instant;

use sonoseg::backbone::{Network, NetworkConfig, ParamScope};
use sonoseg::nn::{Ctx, Mode};
use sonoseg::objective::{consistency_loss, supervised_loss};
use sonoseg::params::ParamStore;
use sonoseg::rng::rng_from;
use sonoseg_tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1).map(String::as_str) {
        Some("default") => NetworkConfig::default(),
        _ => NetworkConfig::desk(),
    };
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(&cfg, &mut store, 0).expect("valid config");
    for scope in [
        ParamScope::Baseline,
        ParamScope::Inference,
        ParamScope::Training,
        ParamScope::ConvMixer,
        ParamScope::Msag,
    ] {
        println!("{scope:?}: {}", net.count_parameters(&store, scope));
    }
    let mut rng = rng_from(1);
    let images = Tensor::<f32>::from_fn(&[batch, 1, size, size], |i| ((i * 31) % 97) as f32 / 97.0);
    let masks = Tensor::<f32>::from_fn(&[batch / 2, 1, size, size], |i| {
        (i / size).is_multiple_of(3) as u8 as f32
    });
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.input(images.clone());
        let out = net.forward(&mut ctx, x, &mut rng).unwrap();
        let t1 = Instant::now();
        let half = batch / 2;
        let lab = out.narrow(&mut ctx.tape, 0, half).unwrap();
        let unl = out.narrow(&mut ctx.tape, half, batch - half).unwrap();
        let y = ctx.input(masks.clone());
        let (sup, _) = supervised_loss(&mut ctx.tape, &lab, cfg.num_aux, y).unwrap();
        let unsup = consistency_loss(&mut ctx.tape, unl.main, &unl.aux).unwrap();
        let u = ctx.tape.scale(unsup, 0.1);
        let loss = ctx.tape.add(sup, u).unwrap();
        let grads = ctx.tape.backward(loss).unwrap();
        let t2 = Instant::now();
        println!(
            "forward {:.3}s backward {:.3}s (tape {} nodes, {} grads)",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            ctx.tape.len(),
            grads.param(0).map(|g| g.numel()).unwrap_or(0)
        );
    }
}
