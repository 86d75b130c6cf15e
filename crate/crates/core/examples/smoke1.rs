// quick calibration probe (not part of the repo)
use pps::config::RunConfig;
use pps::harness::{evaluate_model, split_samples, train};
use pps::model::Model;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.optim.steps = 2000;
    let tax = cfg.resolve_taxonomy(std::path::Path::new(".")).unwrap();
    let dir = std::env::temp_dir().join("pps_smoke2");
    let t0 = Instant::now();
    let result = train(&cfg, &tax, &dir, None).unwrap();
    println!("2000 steps in {:.1}s", t0.elapsed().as_secs_f64());
    println!("loss: first {:.4} last {:.4}", result.trace[0].total, result.final_loss);
    let mut model = Model::new(&cfg.model, &tax, cfg.seed).unwrap();
    pps::model::load_checkpoint(&result.checkpoint, &mut model.store, &cfg.hash(), false).unwrap();
    for split in ["train", "val"] {
        let s = split_samples(&cfg, &tax, split).unwrap();
        let (rep, _) = evaluate_model(&model, &tax, &cfg.merge, &s, None).unwrap();
        println!("{split}: PartPQ {:?} PQ {:?} (P {:?} NP {:?})",
            rep.partpq.overall, rep.pq.overall, rep.partpq.with_parts, rep.partpq.without_parts);
    }
}
