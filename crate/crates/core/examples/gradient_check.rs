//! Compares the hand-written gradient of the full training loss with
//! central finite differences on a tiny detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taxodet::cem::Features;
use taxodet::geometry::Bbox;
use taxodet::head::Classification;
use taxodet::labelspace::EmbeddingTable;
use taxodet::matching::GroundTruth;
use taxodet::model::{Detector, ModelConfig, Objective, TrainSample};
use taxodet::nn::{init_matrix, Parameters};

fn main() -> taxodet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (k, d) = (4, 8);
    let table = EmbeddingTable::new(init_matrix(&mut rng, k, d) * 2.0)?;
    let cfg = ModelConfig { d, d_ff: 16, top_k: 2, n_per_class: 2, classification: Classification::Matchability };
    let mut model = Detector::init(&mut rng, cfg, table)?;
    model.head.box_b1 = init_matrix(&mut rng, 1, d).row(0).to_owned();
    model.head.box_b2 = init_matrix(&mut rng, 1, d).row(0).to_owned();
    let f = Features::new(2, 2, init_matrix(&mut rng, 4, d) * 2.0)?;
    let gts = [GroundTruth { class_id: 2, bbox: Bbox::new(0.4, 0.5, 0.3, 0.2)? }];
    let scope = [true, true, true, false];
    let sample = TrainSample { features: &f, gts: &gts, scope: &scope };
    let obj = Objective::default();

    let (loss, grad) = model.loss_and_grad(&sample, &obj)?;
    println!("loss {:.6} (set {:.6}, asl {:.6})", loss.total(), loss.set, loss.asl);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.tensors().iter().map(|t| t.name.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let (mut num, mut ana) = (0.0f64, 0.0f64);
        for i in 0..grad.tensors()[ti].data.len() {
            let mut m = model.clone();
            let orig = m.tensors()[ti].data[i];
            m.tensors_mut()[ti].data[i] = orig + h;
            let up = m.loss_and_grad(&sample, &obj)?.0.total();
            m.tensors_mut()[ti].data[i] = orig - h;
            let down = m.loss_and_grad(&sample, &obj)?.0.total();
            let n = (up - down) / (2.0 * h);
            let a = grad.tensors()[ti].data[i];
            num += (n - a).powi(2);
            ana += a.powi(2).max(n.powi(2));
        }
        let rel = if ana == 0.0 { 0.0 } else { (num / ana).sqrt() };
        worst = worst.max(rel);
        println!("{name:<24} relative error {rel:.2e}");
    }
    println!("worst {worst:.2e}");
    Ok(())
}
