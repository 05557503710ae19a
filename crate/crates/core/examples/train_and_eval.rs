//! Trains on the synthetic two-dataset benchmark and evaluates with the
//! extractor's category sets, then with every category.
//!
//! `cargo run --release --example train_and_eval -- 105` runs the full
//! default schedule; the default here is shorter.

use taxodet::harness::{evaluate, generate_datasets, run_train, BenchConfig, CategorySource};

fn main() -> taxodet::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(30), |s| s.parse()).expect("epochs must be an integer");
    let cfg = BenchConfig { epochs, ..BenchConfig::default() };
    let data = generate_datasets(&cfg)?;
    println!(
        "{} training scenes, {} evaluation scenes, {} categories",
        data.train.len(),
        data.eval.len(),
        data.world.k()
    );

    let run = run_train(&cfg, &data)?;
    let r = &run.report;
    println!("{} steps in {:.1}s", r.steps, r.wall_clock_secs);
    println!("loss {:.3} -> {:.3}", r.loss_curve[0], r.loss_curve.last().unwrap());
    println!("category-set recall {:.3}, precision {:.3}", r.multilabel_recall, r.multilabel_precision);
    println!("mAP@0.5 {:.3} (aliased classes {:.3})", r.mean_ap, r.aliased_mean_ap);

    let all = evaluate(&run.model, &data, CategorySource::All)?;
    println!("mAP@0.5 querying all {} categories: {:.3}", data.world.k(), all.detection.mean_ap);
    for k in [2, 4, 6, 8] {
        let s = evaluate(&run.model, &data, CategorySource::Extractor { top_k: k })?;
        println!("top_k {k}: recall {:.3}, mAP {:.3}", s.multilabel.recall, s.detection.mean_ap);
    }
    Ok(())
}
