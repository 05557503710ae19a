//! Detection driven by the category list: the same image yields different
//! detections depending on which categories are asked for.

use taxodet::harness::{generate_datasets, run_train, synthesize_features, BenchConfig};
use taxodet::model::Detection;

fn show(label: &str, dets: &[Detection], names: &taxodet::labelspace::LabelSpace) {
    println!("{label}:");
    for d in dets {
        let b = d.bbox;
        println!(
            "  {:<12} {:.2} at ({:.2}, {:.2}) size {:.2}x{:.2}",
            names.name(d.category_id),
            d.score,
            b.cx,
            b.cy,
            b.w,
            b.h
        );
    }
}

fn main() -> taxodet::Result<()> {
    let cfg = BenchConfig { epochs: 40, ..BenchConfig::default() };
    let data = generate_datasets(&cfg)?;
    let model = run_train(&cfg, &data)?.model;
    let names = &data.world.label_space;

    let scene = data.eval.iter().find(|s| s.objects.len() >= 2).expect("a multi-object scene");
    for o in &scene.objects {
        let b = o.bbox;
        println!("annotated {:<12} at ({:.2}, {:.2}) size {:.2}x{:.2}", names.name(o.category), b.cx, b.cy, b.w, b.h);
    }
    let f = synthesize_features(scene, &data.world.appearance);
    show("extracted categories", &model.detect(&f, 0.3)?, names);
    let one = scene.objects[0].category;
    show(&format!("only [{}]", names.name(one)), &model.detect_with_categories(&f, &[one], 0.3)?, names);
    Ok(())
}
