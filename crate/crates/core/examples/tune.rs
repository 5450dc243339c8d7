// Scratch harness for tuning acceptance-task hyperparameters. Deleted
// before ship.

use cpur::conformal::{self, mix_seed};
use cpur::data::gen_synthetic;
use cpur::experiment::{run_paired, DataSource, ExperimentConfig};
use cpur::model::{attack_batch, train, Arch, AttackConfig, TrainConfig};
use cpur::theory;
use cpur::weighting::{BetaParams, LossSpec};
use cpur::LabeledSet;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "acc".into());
    match mode.as_str() {
        "acc" => scan_accuracy(),
        "bound" => bound_check(),
        "paired" => paired(),
        "em" => em_direction(),
        _ => eprintln!("unknown mode"),
    }
}

fn at_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Arch::Linear, LossSpec::ce());
    cfg.epochs = 10;
    cfg.batch = 128;
    cfg.lr = 0.3;
    cfg.lr_drops = vec![(6, 0.1)];
    cfg.seed = seed;
    cfg.attack = Some(AttackConfig {
        epsilon: 8.0 / 255.0,
        stepsize: 2.0 / 255.0,
        steps: 5,
        ..AttackConfig::pgd10()
    });
    cfg
}

fn scan_accuracy() {
    for dim in [20usize, 30] {
        for spread in [0.3, 0.4, 0.5, 0.6, 0.7] {
            let data = gen_synthetic(100, dim, 60, spread, 1).unwrap();
            let n = data.len();
            let idx: Vec<usize> = (0..n).collect();
            let train_set = data.subset(&idx[..n / 2]);
            let eval_set = data.subset(&idx[n / 2..]);
            let model = train(&train_set, &at_config(7)).unwrap();
            let clean = model.accuracy(&eval_set).unwrap();
            let adv = attack_batch(
                &model,
                &eval_set.features,
                &eval_set.labels,
                &AttackConfig {
                    steps: 20,
                    ..AttackConfig::pgd10()
                },
                3,
            )
            .unwrap();
            let adv_set = LabeledSet::new(adv, eval_set.labels.clone(), 100).unwrap();
            let rob = model.accuracy(&adv_set).unwrap();
            println!("dim {dim} spread {spread}: clean {clean:.3} rob {rob:.3}");
        }
    }
}

fn bound_check() {
    for spread in [1.0, 1.3, 1.6, 2.0] {
        let data = gen_synthetic(10, 20, 850, spread, 2).unwrap();
        let n = data.len(); // 8500
        let idx: Vec<usize> = (0..n).collect();
        let train_set = data.subset(&idx[..1500]);
        let cal_set = data.subset(&idx[1500..3500]); // 2000
        let eval_set = data.subset(&idx[3500..]); // 5000
        let mut cfg = at_config(5);
        cfg.epochs = 8;
        let model = train(&train_set, &cfg).unwrap();
        let acc = model.accuracy(&eval_set).unwrap();

        let cal_dists = model.predict_dists(&cal_set.features).unwrap();
        let eval_dists = model.predict_dists(&eval_set.features).unwrap();
        let cal = conformal::calibrate(&cal_dists, &cal_set.labels, 0.1, mix_seed(9, 1)).unwrap();
        let losses = theory::ce_losses(&eval_dists, &eval_set.labels).unwrap();
        let report = theory::check_bound(
            &eval_dists,
            &eval_set.labels,
            &losses,
            &cal,
            &BetaParams::default_shifted(),
        )
        .unwrap();
        println!(
            "spread {spread}: acc {acc:.3} tau {:.4} K* {} monotone {} assumptions {} bound {:?} pss {:.3} partial {:.3} no_const {:.4} L {:.4}",
            report.tau,
            report.k_star,
            report.monotone_h,
            report.assumptions_hold,
            report.bound_holds,
            report.expected_pss,
            report.partial_rank_sum,
            report.partial_rank_sum_no_const,
            report.l_beta,
        );
        let h: Vec<String> = report
            .h_k
            .iter()
            .take(6)
            .map(|v| v.map_or("-".into(), |x| format!("{x:.3}")))
            .collect();
        println!("   H head: {h:?}");
    }
}

fn em_direction() {
    use cpur::simplex::ProbDist;
    let train_data = gen_synthetic(10, 12, 300, 1.2, 40).unwrap();
    let held_out = gen_synthetic(10, 12, 120, 1.2, 41).unwrap();
    let mean_entropy = |m: &cpur::Classifier| {
        let dists = m.predict_dists(&held_out.features).unwrap();
        dists.iter().map(ProbDist::entropy).sum::<f64>() / dists.len() as f64
    };
    let mut wins = 0;
    for seed in 0..5u64 {
        let mut base = TrainConfig::new(Arch::Linear, LossSpec::ce());
        base.epochs = 20;
        base.batch = 64;
        base.lr = 0.3;
        base.seed = seed;
        base.attack = Some(AttackConfig {
            epsilon: 8.0 / 255.0,
            stepsize: 2.0 / 255.0,
            steps: 5,
            ..AttackConfig::pgd10()
        });
        let mut em = base.clone();
        em.loss = LossSpec::em_ce(0.3);
        let h_ce = mean_entropy(&train(&train_data, &base).unwrap());
        let h_em = mean_entropy(&train(&train_data, &em).unwrap());
        let lower = h_em < h_ce;
        wins += lower as usize;
        println!("seed {seed}: ce {h_ce:.4} em {h_em:.4} lower {lower}");
    }
    println!("wins {wins}/5");
}

fn paired() {
    let args: Vec<String> = std::env::args().collect();
    let spread: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.2);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut train_cfg = at_config(0);
    train_cfg.epochs = 10;
    let cfg = ExperimentConfig {
        data: DataSource::Synthetic {
            num_classes: 100,
            dim,
            per_class: 60,
            spread,
            seed: 1,
        },
        cal_fraction: 0.1,
        test_fraction: 0.4,
        alpha: 0.1,
        train: train_cfg,
        eval_attack: Some(AttackConfig {
            steps: 20,
            ..AttackConfig::pgd10()
        }),
        train_seeds: 5,
        split_repeats: 2,
        beta: None,
        emit_curve: false,
        emit_bound: false,
        master_seed: 33,
        output: None,
    };
    let report = run_paired(&cfg, LossSpec::beta_ce(BetaParams::default_shifted())).unwrap();
    println!(
        "A {} pss {:.3} | B {} pss {:.3} | wins_b {}/5",
        report.method_a, report.mean_pss_a, report.method_b, report.mean_pss_b, report.wins_b
    );
    for row in &report.rows {
        println!(
            "  seed {}: pss {:.3} vs {:.3} cov {:.3}/{:.3}",
            row.seed, row.pss_a, row.pss_b, row.coverage_a, row.coverage_b
        );
    }
}
