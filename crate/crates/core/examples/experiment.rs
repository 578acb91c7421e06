//! Runs the default synthetic experiment and prints per-system WER tables.

use ssl_hybrid::config::Config;
use ssl_hybrid::pipeline::run_experiment;

fn main() -> ssl_hybrid::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(2) {
        Some(path) => Config::load(std::path::Path::new(path))?,
        None => Config::default(),
    };
    if let Some(seed) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.apply_seed(seed);
    }
    let exp = run_experiment(&cfg)?;
    print!("{}", exp.report.to_table());
    for (stage, s) in &exp.report.timings {
        println!("{stage}: {s:.1}s");
    }
    for (name, r) in &exp.report.training {
        println!("{name}: {:.4} -> {:.4}", r.initial_loss, r.final_loss);
    }
    Ok(())
}
