//! Per-epoch training time of node-to-token versus node-to-node attention.

use vecformer::evalbench::{bench_scaling, mechanism_slope, BenchConfig, Mechanism};

fn main() -> vecformer::Result<()> {
    let ns = [500, 1000, 2000, 4000];
    let mechs = [Mechanism::GraphToken, Mechanism::DenseNode];
    let cfg = BenchConfig {
        trials: 1,
        ..BenchConfig::default()
    };
    let records = bench_scaling(&ns, &mechs, &cfg, 0)?;
    for r in &records {
        println!(
            "n={:>5} {:<11} m={:>5} {:.4}s {:.1} MiB",
            r.n,
            r.mechanism.as_str(),
            r.m,
            r.seconds,
            r.bytes as f64 / (1 << 20) as f64
        );
    }
    for m in mechs {
        println!("{} log-log slope {:.2}", m.as_str(), mechanism_slope(&records, m)?);
    }
    Ok(())
}
