//! Every loss against its plain-loop oracle, finite differences and the
//! boundary cases.
//!
//! cargo run --release --example losscheck -- [seed] [cases]

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cases: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(25);
    let report = adfseg::losscheck::run_all(seed, cases)?;
    print!("{}", report.table());
    println!("{}", if report.all_pass() { "all checks pass" } else { "SOME CHECKS FAILED" });
    Ok(())
}
