//! Calibrate an ambiguity threshold on synthetic triplets and classify a
//! held-out half. Prints a text histogram of the held-out scores.
//!
//!     cargo run --release --example ambiguity

use concept_kernel::bench::{run_ambiguity, AmbiguityRunConfig};

fn main() -> concept_kernel::Result<()> {
    let r = run_ambiguity(&AmbiguityRunConfig::default())?;
    println!(
        "threshold {:.4} (fallback: {}), calibrated on {} triplets",
        r.model.threshold, r.model.fallback_midpoint, r.n_calibration
    );
    println!(
        "held-out accuracy {:.3}, overlap {:.3}; cosine baseline accuracy {:.3}",
        r.test.accuracy, r.test.overlap_fraction, r.baseline_test.accuracy
    );

    let edges = &r.test.bins.edges;
    let [amb, unamb] = &r.test.counts;
    println!("\n{:>8}  ambiguous / unambiguous", "mean D1");
    for b in 0..amb.len() {
        if amb[b] + unamb[b] == 0 {
            continue;
        }
        println!(
            "{:>8.4}  {:<20} {}",
            edges[b],
            "#".repeat(amb[b]),
            "o".repeat(unamb[b])
        );
    }
    Ok(())
}
