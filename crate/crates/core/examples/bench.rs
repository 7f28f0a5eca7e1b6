// rough per-image timing of the training step
use ldp_core::dataset::generate_multi_shapes;
use ldp_core::em::*;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::params::*;
use ldp_core::rng::Rng;
use ldp_core::tensor::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let preset = if args.get(1).map(|s| s == "conv").unwrap_or(false) { ArchPreset::Conv } else { ArchPreset::Fc };
    let mode = if args.get(2).map(|s| s == "rnn").unwrap_or(false) { UpdateMode::Rnn } else { UpdateMode::Gradient };
    let data = generate_multi_shapes(16, 20, 2, 11, 0).unwrap();
    let arch = ArchConfig {
        preset, height: 20, width: 20, latent_dim: 64,
        feature_dim: 64, hidden: 250, appearance_dim: 1, conv_channels: (16, 32), kernel: 4,
    };
    let (eta_s, eta_theta) = default_eta_inits(None, 400);
    let (store, nets) = Networks::init_with_stick_bias(7, arch, true, true, eta_s, eta_theta, -2.0).unwrap();
    let config = EmConfig {
        k: 3, t: 10, mode,
        model: ComponentModel::Bernoulli,
        prior: PriorSpec { dist: PriorDist::Bernoulli { theta: 0.01 }, lambda: 0.1 },
        sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(10),
        detach_gamma: false,
    };
    let t0 = std::time::Instant::now();
    let reps = 40;
    for r in 0..reps {
        let image = data.samples[r % 16].intensities();
        let mut rng = Rng::seeded(7, r as u64);
        let init = init_latents(Method::Ldp, 64, &config, &mut rng);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let (_, l) = unroll_em(&mut tape, &binds, &nets, Method::Ldp, &config, &image, None, &init).unwrap();
        let grads = tape.param_gradients(l);
        std::hint::black_box(&grads);
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64 * 1000.0;
    println!("{:?} {:?}: {:.1} ms/image (fwd+bwd)", preset, mode, per);
}
