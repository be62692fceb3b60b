//! Top-K routing through one mixture-of-LoRA layer and the load-balancing
//! loss on constructed and observed dispatch statistics.

use moeq::autodiff::Mat;
use moeq::codec::BinSpec;
use moeq::model::lora::LoraInit;
use moeq::model::moe::{moe_forward_values, route, RouterStats};
use moeq::model::{ModelConfig, MoePolicy};
use moeq::seed;
use moeq::train::loss::balance_value;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden: 32,
        heads: 2,
        ffn: 64,
        n_experts: 4,
        top_k: 2,
        rank: 4,
        lora_init: LoraInit::RandomB(0.05),
        ..ModelConfig::default()
    };
    let policy = MoePolicy::new(cfg, BinSpec::full(40))?;
    let layer = policy.moe_layers()[0];

    let mut rng = seed::rng(5, "router-example");
    let x = Mat::from_shape_fn((2048, 32), |_| StandardNormal.sample(&mut rng));
    let (idx, w) = route(x.row(0).as_slice().expect("contiguous"), policy.params.get(layer.router), layer.top_k);
    println!("token 0 -> experts {idx:?} with weights {w:.4?}");

    let (_, probs, evals) = moe_forward_values(&policy.params, layer, &x);
    println!("expert evaluations over {} tokens: {evals:?} (sum {} = K x tokens)", x.nrows(), evals.iter().sum::<usize>());
    let stats = RouterStats::from_probs(&probs);
    println!("dispatch f = {:.3?}, mean prob P = {:.3?}", stats.f, stats.p);
    let max_f = stats.max_f();
    println!("balance loss {:.5}, max f {max_f:.3}", balance_value(&[stats])?);

    let n = 4;
    let uniform = RouterStats { f: vec![1.0 / n as f64; n], p: vec![1.0 / n as f64; n], token_count: 1 };
    let collapsed = RouterStats { f: vec![1.0, 0.0, 0.0, 0.0], p: vec![1.0, 0.0, 0.0, 0.0], token_count: 1 };
    println!("uniform routing -> {:.6} (1/N^2 = {:.6})", balance_value(&[uniform])?, 1.0 / (n * n) as f64);
    println!("collapsed routing -> {:.6} (1/N = {:.6})", balance_value(&[collapsed])?, 1.0 / n as f64);
    Ok(())
}
