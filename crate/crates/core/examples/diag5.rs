// untrained inference probe: does the inner loop alone partition scenes?
use ldp_core::dataset::generate_multi_shapes;
use ldp_core::em::*;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::rng::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let preset = if args.get(1).map(|s| s == "conv").unwrap_or(false) { ArchPreset::Conv } else { ArchPreset::Fc };
    let eta_s: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let t_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let data = generate_multi_shapes(4, 20, 2, 42, 0).unwrap();
    let arch = ArchConfig {
        preset, height: 20, width: 20, latent_dim: 64,
        feature_dim: 64, hidden: 250, appearance_dim: 1, conv_channels: (16, 32), kernel: 4,
    };
    let bias0: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let (mut store, nets) = Networks::init(7, arch, true, true, eta_s, 0.1 / 400.0).unwrap();
    if bias0 != 0.0 {
        let b = store.find(if preset == ArchPreset::Conv { "dec.convt2.b" } else { "dec.fc3.b" }).unwrap();
        let shape = store.value(b).shape().to_vec();
        let n: usize = shape.iter().product();
        store.set_value(b, ldp_core::tensor::Tensor::new(shape, vec![bias0; n]));
    }
    let config = EmConfig {
        k: 3, t: t_steps, mode: UpdateMode::Gradient,
        model: ComponentModel::Bernoulli,
        prior: PriorSpec { dist: PriorDist::Bernoulli { theta: 0.01 }, lambda: 0.1 },
        sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(t_steps),
        detach_gamma: false,
    };
    for (i, sample) in data.samples.iter().enumerate() {
        let mut rng = Rng::seeded(5, i as u64);
        let trace = run_em(&sample.intensities(), &store, &nets, Method::Ldp, &config, &mut rng).unwrap();
        let labels = trace.labels();
        let mut counts = [0usize; 3];
        for &l in &labels { counts[l as usize] += 1; }
        println!("scene {}: argmax counts {:?}, losses {} -> {}", i, counts,
                 trace.steps[0].loss.round(), trace.steps.last().unwrap().loss.round());
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
