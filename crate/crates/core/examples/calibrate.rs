//! Scratch calibration harness for the direction-of-effect experiment.
//! Usage: calibrate <data_dir> <epochs> <warmup> <lr> <n_seeds> [ext_ch] [base_ch]

use mvcount_core::dataset::{Dataset, Split};
use mvcount_core::losses::TrainMode;
use mvcount_core::metrics::evaluate;
use mvcount_core::model::{forward_all, ModelConfig};
use mvcount_core::tape::Tape;
use mvcount_core::trainer::{train, TrainConfig, TrainSeeds};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data_dir = &args[1];
    let epochs: usize = args[2].parse().unwrap();
    let warmup: usize = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let n_seeds: u64 = args[5].parse().unwrap();
    let base: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(16);
    let gamma: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let beta: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mode_filter = args.get(9).cloned().unwrap_or_else(|| "b2,mvpr,mvur".to_string());

    let ds = Dataset::open(data_dir).unwrap();
    let model = ModelConfig {
        extractor_channels: vec![base / 2, base / 2, base],
        base_channels: base,
        ..Default::default()
    };

    let all = [TrainMode::Baseline2, TrainMode::Mvpr, TrainMode::Mvur];
    let modes: Vec<TrainMode> = all
        .into_iter()
        .filter(|m| match m {
            TrainMode::Baseline2 => mode_filter.contains("b2"),
            TrainMode::Mvpr => mode_filter.contains("mvpr"),
            TrainMode::Mvur => mode_filter.contains("mvur"),
            _ => false,
        })
        .collect();
    let mut maes: Vec<Vec<f64>> = vec![vec![]; modes.len()];
    let mut corr_all = vec![];
    for seed in 0..n_seeds {
        print!("seed {seed}: ");
        for (mi, &mode) in modes.iter().enumerate() {
            let cfg = TrainConfig {
                mode,
                epochs,
                warmup_epochs: warmup,
                lr,
                label_rate: 10.0,
                weights: mvcount_core::losses::LossWeights {
                    gamma,
                    beta,
                    ..mvcount_core::losses::LossWeights::for_k(3)
                },
                seeds: TrainSeeds { split: 100 + seed, init: 200 + seed, schedule: 300 + seed },
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let out = train(&model, &cfg, &ds, None, "cal").unwrap();
            let m = evaluate(&out.params, &ds, Split::Test).unwrap();
            maes[mi].push(m.mae);
            print!("{} {:.3} ({:.0}s) ", mode.name(), m.mae, t0.elapsed().as_secs_f64());

            if mode == TrainMode::Mvur {
                // per-sample corr(U_k, |S_k - gt|) on test
                let grids = ds.sampling_grids(model.feature_stride()).unwrap();
                let test = ds.load_split(Split::Test).unwrap();
                let identity: Vec<usize> = (0..model.k).collect();
                let mut cs = vec![];
                let (mut u_std, mut e_std, mut ref_c) = (0.0, 0.0, 0.0);
                for f in &test {
                    let tape = Tape::new();
                    let cache = forward_all(&tape, &out.params, &f.sample.views, &grids[f.id.scene], &identity, true).unwrap();
                    let err: Vec<f64> = cache.density[2]
                        .data()
                        .iter()
                        .zip(f.sample.gt_density.data())
                        .map(|(s, g)| (s - g).abs())
                        .collect();
                    let u = cache.uncertainty[2].data();
                    cs.push(pearson(u, &err));
                    let std = |v: &[f64]| {
                        let m = v.iter().sum::<f64>() / v.len() as f64;
                        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
                    };
                    u_std += std(u);
                    e_std += std(&err);
                    ref_c += pearson(f.sample.gt_density.data(), &err);
                }
                let n = test.len() as f64;
                let mean_c = cs.iter().sum::<f64>() / n;
                corr_all.push(mean_c);
                print!(
                    "corr {:.3} (u_std {:.4} e_std {:.4} gt-err corr {:.3}) ",
                    mean_c,
                    u_std / n,
                    e_std / n,
                    ref_c / n
                );
            }

            // violation rates warmup-end vs final
            if mode != TrainMode::Baseline2 {
                let we = &out.log.epochs[warmup.saturating_sub(1)];
                let fi = out.log.epochs.last().unwrap();
                let (w_v, f_v) = match mode {
                    TrainMode::Mvpr => (&we.pred_violations, &fi.pred_violations),
                    _ => (&we.unc_violations, &fi.unc_violations),
                };
                print!(
                    "viol {:.3}/{:.3}->{:.3}/{:.3} ",
                    w_v[0], w_v[1], f_v[0], f_v[1]
                );
            }
        }
        println!();
    }
    println!("---");
    for (mi, &mode) in modes.iter().enumerate() {
        let mut xs = maes[mi].clone();
        println!("{}: median MAE {:.3}  all {:?}", mode.name(), median(&mut xs), maes[mi].iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
    let mvur_wins = maes[2].iter().zip(&maes[1]).filter(|(u, p)| u <= p).count();
    println!("MVUR <= MVPR in {}/{} seeds", mvur_wins, n_seeds);
    if !corr_all.is_empty() {
        let mut c = corr_all.clone();
        println!("median corr {:.3}", median(&mut c));
    }
}
