//! Clamp a question's missing concept and watch the answer entropy rise.
//!
//!     cargo run --release --example clamp_entropy

use concept_kernel::bench::{run_clamp, ClampRunConfig};

fn main() -> concept_kernel::Result<()> {
    let r = run_clamp(&ClampRunConfig::default())?;
    println!("{:>4} {:>8} {:>8} {:>8}", "q", "none", "random", "targeted");
    for (i, row) in r.per_question.iter().enumerate() {
        println!("{i:>4} {:>8.3} {:>8.3} {:>8.3}", row[0], row[1], row[2]);
    }
    println!(
        "mean {:>8.3} {:>8.3} {:>8.3}",
        r.mean_none, r.mean_random, r.mean_targeted
    );
    Ok(())
}
