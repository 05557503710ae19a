//! Minimum-cost assignment of ground truths (rows) to predictions (columns).

use taxodet::matching::{hungarian, CostMatrix};

fn main() -> taxodet::Result<()> {
    let cost = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0, 2.5], vec![2.0, 0.0, 5.0, 3.0], vec![3.0, 2.0, 2.0, 0.5]])?;
    let a = hungarian(&cost)?;
    for (gt, pred) in &a.pairs {
        println!("ground truth {gt} -> prediction {pred} (cost {})", cost.get(*gt, *pred));
    }
    println!("total cost {}", a.total_cost);
    Ok(())
}
