//! Saving a detector, loading it back and checking that nothing moved.

use taxodet::checkpoint;
use taxodet::harness::train::init_model;
use taxodet::harness::{generate_datasets, synthesize_features, BenchConfig};

fn main() -> taxodet::Result<()> {
    let cfg = BenchConfig { images_per_dataset: 10, eval_images_per_dataset: 2, ..BenchConfig::default() };
    let data = generate_datasets(&cfg)?;
    let model = init_model(&cfg, &data.world)?;

    let path = std::env::temp_dir().join("taxodet-example.ckpt");
    checkpoint::save(&path, &model, &serde_json::json!({ "seed": cfg.seed }))?;
    let (loaded, meta) = checkpoint::load(&path)?;
    println!("{} bytes, metadata {meta}", std::fs::metadata(&path)?.len());

    let f = synthesize_features(&data.eval[0], &data.world.appearance);
    println!("parameters equal: {}", loaded == model);
    println!("detections equal: {}", loaded.detect(&f, 0.0)? == model.detect(&f, 0.0)?);
    std::fs::remove_file(path)?;
    Ok(())
}
