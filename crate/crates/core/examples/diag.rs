use ldp_core::dataset::generate_multi_shapes;
use ldp_core::em::*;
use ldp_core::metrics::evaluate_dataset;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let preset = if args.get(3).map(|s| s == "conv").unwrap_or(false) { ArchPreset::Conv } else { ArchPreset::Fc };
    let workers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mode = if args.get(5).map(|s| s == "gradient").unwrap_or(false) { UpdateMode::Gradient } else { UpdateMode::Rnn };
    let eta_s_over: Option<f64> = args.get(6).and_then(|s| s.parse().ok());
    let data = generate_multi_shapes(n, 20, 2, 11, 0).unwrap();
    let val = generate_multi_shapes(64, 20, 2, 12, 1_000_000).unwrap();
    let arch = ArchConfig {
        preset, height: 20, width: 20, latent_dim: 64,
        feature_dim: 64, hidden: 250, appearance_dim: 1, conv_channels: (16, 32), kernel: 4,
    };
    let (eta_s, eta_theta) = default_eta_inits(None, 400);
    let eta_s = eta_s_over.unwrap_or(eta_s);
    let (mut store, nets) = Networks::init_with_stick_bias(7, arch, true, true, eta_s, eta_theta, -2.0).unwrap();
    let config = EmConfig {
        k: 3, t: 10, mode,
        model: ComponentModel::Bernoulli,
        prior: PriorSpec { dist: PriorDist::Bernoulli { theta: 0.01 }, lambda: 0.1 },
        sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(10),
        detach_gamma: false,
    };
    let tc = TrainConfig { epochs: 1, workers, seed: 7, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    for e in 0..epochs {
        let hist = train_bptt(&data, None, &mut store, &nets, Method::Ldp, &config, &tc, e, |_, _| Ok(())).unwrap();
        if e % 5 == 0 || e == epochs - 1 {
            let rep = evaluate_dataset(&val, &store, &nets, Method::Ldp, &config, 999).unwrap();
            println!(
                "epoch {:>3}: loss {:>9.2}  val AMI {:.3}  MSE {:.4}  [{:.0}s]",
                e, hist[0].mean_loss, rep.ami_mean, rep.mse_mean, t0.elapsed().as_secs_f64()
            );
        } else {
            println!("epoch {:>3}: loss {:>9.2}", e, hist[0].mean_loss);
        }
    }
}
