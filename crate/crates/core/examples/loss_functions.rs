//! Focal loss for matchability scores and the asymmetric loss used on the
//! category extractor.

use taxodet::losses::{asymmetric_loss, binary_focal, AslConfig, FocalConfig};

fn main() -> taxodet::Result<()> {
    let focal = FocalConfig::default();
    for p in [0.1, 0.5, 0.9] {
        let pos = binary_focal(p, true, &focal)?;
        let neg = binary_focal(p, false, &focal)?;
        println!(
            "p = {p}: positive {:.4} (dL/dp {:+.4}), negative {:.4} (dL/dp {:+.4})",
            pos.value, pos.grad[0], neg.value, neg.grad[0]
        );
    }

    let scores = [0.95, 0.7, 0.3, 0.04, 0.6];
    let present = [true, true, false, false, false];
    let asl = asymmetric_loss(&scores, &present, &AslConfig::default(), 1.0)?;
    println!("asymmetric loss {:.4}", asl.value);
    for ((s, t), g) in scores.iter().zip(present).zip(&asl.grad) {
        println!("  score {s:.2} present {t:<5} gradient {g:+.4}");
    }
    Ok(())
}
