//! Scratch calibration for acceptance sizing (not part of the build).
use sar_core::synth::{synth_generate, SynthProfile};
use sar_core::train::{train, evaluate_chunks, OptimizerKind, Pools, Regime, TrainConfig};
use sar_core::model::prepare_chunks;
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).unwrap_or("15".into()).parse().unwrap();
    let adam_adapt: bool = std::env::args().nth(2).unwrap_or("true".into()).parse().unwrap();
    let profile = SynthProfile::ta_like(0.5);
    let (source_all, target_all) = synth_generate(&profile, 300, 42).unwrap();
    let source = source_all[..200].to_vec();
    let target_train = target_all[..50].to_vec();
    let target_dev = target_all[50..62].to_vec();
    let target_test = target_all[62..112].to_vec();

    let base = |regime, seed| {
        let mut cfg = TrainConfig::defaults_for(regime, seed);
        cfg.embed_dim = 24;
        cfg.word_hidden = 16;
        cfg.conv_hidden = 16;
        cfg.disc_hidden = 16;
        cfg.epochs = epochs;
        cfg.batch_size = 4;
        cfg.dropout_rate = 0.3;
        if adam_adapt && regime != Regime::Merge {
            cfg.optimizer = Some(OptimizerKind::Adam);
        }
        cfg
    };
    let t0 = Instant::now();
    let mut sums = [0.0f64; 4];
    for seed in [1u64, 2, 3, 4, 5] {
        let test_f1 = |cfg: &TrainConfig, pools: &Pools| {
            let out = train(cfg, pools).unwrap();
            let chunks = prepare_chunks(&target_test, &out.model.vocab, 100);
            let (report, _) = evaluate_chunks(&out.model, &chunks).unwrap();
            report.macro_f1
        };
        let merge_pools = Pools {
            source: source.clone(),
            target_labeled: target_train.clone(),
            dev: target_dev.clone(),
            ..Default::default()
        };
        let m100 = test_f1(&base(Regime::Merge, seed), &merge_pools);
        let mut m50cfg = base(Regime::Merge, seed);
        m50cfg.target_label_fraction = 0.5;
        let m50 = test_f1(&m50cfg, &merge_pools);
        let sup = test_f1(&base(Regime::AdaptSup, seed), &merge_pools);
        let mut semi_cfg = base(Regime::AdaptSemisup, seed);
        semi_cfg.target_label_fraction = 0.5;
        let semi = test_f1(&semi_cfg, &merge_pools);
        println!("seed {seed}: merge100 {m100:.4} sup {sup:.4} | merge50 {m50:.4} semi50 {semi:.4}");
        sums[0] += m100; sums[1] += sup; sums[2] += m50; sums[3] += semi;
    }
    println!("means: merge100 {:.4} sup {:.4} | merge50 {:.4} semi50 {:.4}",
        sums[0]/5.0, sums[1]/5.0, sums[2]/5.0, sums[3]/5.0);
    println!("elapsed {:?}", t0.elapsed());
}
