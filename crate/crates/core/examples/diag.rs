use caap_core::data::{generate_synthetic, SyntheticParams};
use caap_core::metrics;
use caap_core::pipeline::{self, PolicySource, RunConfig, TrainOptions};
use caap_core::policy::SearchConfig;

fn main() {
    for seed in [101u64, 202] {
        let cfg = RunConfig {
            arch: "mini_fcn".into(),
            epochs: 10,
            batch_size: 32,
            folds: 3,
            enable_scaling_transform: true,
            search: SearchConfig { freq_sea: 3, n_ops: 2, delta: 0.3, policy_lr: 1e-3, temperature: 3.0 },
            ..RunConfig::desk(seed)
        };
        let ds = generate_synthetic(&SyntheticParams { per_class: vec![100, 100, 100] }, seed).unwrap();
        let (train, test) = pipeline::fold_split(&cfg, &ds).unwrap();
        let noaug = pipeline::train_phase(&cfg, &train, &TrainOptions::noaug()).unwrap();
        let noaug_preds = pipeline::evaluate(&noaug.model, &test).unwrap();
        let uni = pipeline::train_phase(&cfg, &train, &TrainOptions {
            source: PolicySource::UniformRandom, regulation: None, global_noaug_q: None, collect_policies: false,
        }).unwrap();
        let uni_preds = pipeline::evaluate(&uni.model, &test).unwrap();
        let acc_n = metrics::accuracy(&noaug_preds).unwrap();
        let acc_u = metrics::accuracy(&uni_preds).unwrap();
        let rc_n = metrics::class_recall(&noaug_preds, 3);
        let rc_u = metrics::class_recall(&uni_preds, 3);
        let bc = metrics::bias_confusion(&noaug_preds, &uni_preds, 3).unwrap();
        let sw = metrics::swise_per_class(&bc);
        println!("seed {seed}: noaug acc {acc_n:.3} recalls {:?}", rc_n.iter().map(|r| r.unwrap()).collect::<Vec<_>>());
        println!("          uniform acc {acc_u:.3} recalls {:?}", rc_u.iter().map(|r| r.unwrap()).collect::<Vec<_>>());
        for c in 0..3 {
            let s = sw[c].unwrap();
            println!("          class {c}: improve {:.3} bias {:.3}", s.improve, s.bias);
        }
    }
}
