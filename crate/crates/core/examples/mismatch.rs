use std::time::Instant;

use sincadapt::experiment::{run_mismatch, MismatchSetup};

fn main() {
    let mut setup = MismatchSetup::default();
    if let Some(path) = std::env::args().nth(1) {
        let text = std::fs::read_to_string(path).unwrap();
        setup = serde_json::from_str(&text).unwrap();
    }
    let t = Instant::now();
    let out = run_mismatch(&setup).unwrap();
    for m in &out.train_metrics {
        println!("train {} {} loss {:.4} acc {:.3}", m.epoch, m.split, m.loss, m.frame_accuracy);
    }
    for m in &out.report.epochs {
        println!("adapt {} {} loss {:.4} acc {:.3}", m.epoch, m.split, m.loss, m.frame_accuracy);
    }
    println!(
        "dev {:.3} target before {:.3} after {:.3} recovery {:.3} alpha {:.3}",
        out.base_dev_accuracy,
        out.target_accuracy_before,
        out.target_accuracy_after,
        out.recovery(),
        out.fitted_alpha
    );
    for (r, a) in &out.scaling.pairs {
        println!("{r:.1} -> {a:.1} ({:.3})", a / r);
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
