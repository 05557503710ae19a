//! The category extractor on its own: per-category presence scores for a
//! scene, and the top-k set handed to the detection head.

use taxodet::cem::topk_select;
use taxodet::harness::{generate_datasets, run_train, synthesize_features, BenchConfig};

fn main() -> taxodet::Result<()> {
    let cfg = BenchConfig { epochs: 20, ..BenchConfig::default() };
    let data = generate_datasets(&cfg)?;
    let model = run_train(&cfg, &data)?.model;
    let names = &data.world.label_space;

    for scene in data.eval.iter().take(3) {
        let f = synthesize_features(scene, &data.world.appearance);
        let scores = model.category_scores(&f)?;
        let present: Vec<&str> = scene.objects.iter().map(|o| names.name(o.category)).collect();
        println!("scene {} (dataset {}), annotated: {}", scene.image, scene.dataset, present.join(", "));
        for id in topk_select(&scores, cfg.top_k) {
            println!("  {:<12} {:.3}", names.name(id), scores[id]);
        }
    }
    Ok(())
}
