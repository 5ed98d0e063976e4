// Noise-averaging simulation: error of a single noisy attention layer
// against one averaged with an equally noisy previous layer.
//
//   cargo run --release --example theory_sim -- [N] [sigma0] [trials] [seed]

use std::time::Instant;

use attnlink::theory::{simulate_robustness, RobustnessReport, SimConfig};

pub fn run(args: &[String]) -> attnlink::Result<RobustnessReport> {
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let n: usize = arg(0, "64").parse().map_err(|_| attnlink::Error::invalid("N"))?;
    let sigma0: f64 = arg(1, "0.05").parse().map_err(|_| attnlink::Error::invalid("sigma0"))?;
    let trials: usize = arg(2, "100000").parse().map_err(|_| attnlink::Error::invalid("trials"))?;
    let seed: u64 = arg(3, "0").parse().map_err(|_| attnlink::Error::invalid("seed"))?;

    let start = Instant::now();
    let r = simulate_robustness(&SimConfig::new(n, sigma0, trials, seed))?;
    println!("N={n} sigma0={sigma0} trials={trials} ({:.1?})", start.elapsed());
    println!("mse vanilla   {:.6e}", r.mse_vanilla);
    println!("mse linked    {:.6e}", r.mse_linked);
    println!("ratio         {:.4}", r.ratio.unwrap_or(f64::NAN));
    println!("noise energy  {:.6} (expected {:.6})", r.eq16_estimate, r.eq16_expected);
    println!("averaged      {:.6} (expected {:.6})", r.eq17_estimate, r.eq17_expected);
    println!("bound violations: {} / {}", r.eq10_violations, r.eq15_violations);
    Ok(r)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
