//! Group matching with per-dataset supervision against one matching over the
//! naive union of taxonomies, where aliased names compete as separate classes.

use taxodet::harness::{compare_modes, BenchConfig};

fn main() -> taxodet::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(30), |s| s.parse()).expect("epochs must be an integer");
    let cfg = BenchConfig { epochs, ..BenchConfig::default() };
    let c = compare_modes(&cfg)?;
    println!("mean AP: group {:.3}, standard {:.3}", c.group.mean_ap, c.standard_merged.mean_ap);
    println!(
        "aliased classes: group {:.3}, standard {:.3}",
        c.group.aliased_mean_ap, c.standard_merged.aliased_mean_ap
    );
    for d in c.per_class.iter().filter(|d| d.aliased) {
        println!("  {:<12} {:+.3}", d.name, d.delta);
    }
    Ok(())
}
