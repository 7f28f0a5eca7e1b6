use ldp_core::dataset::generate_multi_shapes;
use ldp_core::em::*;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::rng::Rng;
use ldp_core::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let data = generate_multi_shapes(500, 20, 2, 11, 0).unwrap();
    let val = generate_multi_shapes(8, 20, 2, 12, 1_000_000).unwrap();
    let arch = ArchConfig {
        preset: ArchPreset::Fc, height: 20, width: 20, latent_dim: 64,
        feature_dim: 64, hidden: 250, appearance_dim: 1, conv_channels: (16, 32), kernel: 4,
    };
    let (eta_s, eta_theta) = default_eta_inits(None, 400);
    let (mut store, nets) = Networks::init_with_stick_bias(7, arch, true, true, eta_s, eta_theta, -2.0).unwrap();
    let config = EmConfig {
        k: 3, t: 10, mode: UpdateMode::Rnn,
        model: ComponentModel::Bernoulli,
        prior: PriorSpec { dist: PriorDist::Bernoulli { theta: 0.01 }, lambda: 0.1 },
        sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(10),
        detach_gamma: false,
    };
    let tc = TrainConfig { epochs, workers: 2, seed: 7, ..TrainConfig::default() };
    train_bptt(&data, None, &mut store, &nets, Method::Ldp, &config, &tc, 0, |_, _| Ok(())).unwrap();

    for (i, sample) in val.samples.iter().take(3).enumerate() {
        let mut rng = Rng::seeded(999, i as u64);
        let trace = run_em(&sample.intensities(), &store, &nets, Method::Ldp, &config, &mut rng).unwrap();
        let last = trace.final_step();
        let labels = trace.labels();
        let mut counts = [0usize; 3];
        for &l in &labels { counts[l as usize] += 1; }
        // truth: count fg pixels
        let fg = sample.labels.iter().filter(|&&l| l != 0).count();
        let mut pi_mass = [0.0; 3];
        for px in 0..400 { for k in 0..3 { pi_mass[k] += last.mixture.pi.at(px, k) / 400.0; } }
        println!(
            "scene {}: argmax counts {:?} (true fg {}), mean pi {:?}, means {:?}, losses {:?}",
            i, counts, fg,
            pi_mass.map(|v| (v * 100.0).round() / 100.0),
            last.appearances.data().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            trace.steps.iter().map(|s| s.loss.round() as i64).collect::<Vec<_>>(),
        );
        // ascii argmax map
        for row in 0..20 {
            let line: String = (0..20).map(|col| {
                let l = labels[row * 20 + col];
                let t = sample.labels[row * 20 + col];
                let c = match l { 0 => '1', 1 => '2', _ => '.' };
                if t != 0 { c } else if c == '.' { ' ' } else { c.to_ascii_uppercase() }
            }).collect();
            println!("  {}", line);
        }
    }
}
