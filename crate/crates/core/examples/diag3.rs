// finite-difference check of d(L_sum)/d(param) through a T=3 unrolled run
use ldp_core::em::*;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::params::*;
use ldp_core::rng::Rng;
use ldp_core::tensor::{Tape, Tensor};

fn main() {
    for mode in [UpdateMode::Rnn, UpdateMode::Gradient] {
        let arch = ArchConfig {
            preset: ArchPreset::Fc, height: 10, width: 10, latent_dim: 6,
            feature_dim: 7, hidden: 12, appearance_dim: 1, conv_channels: (2, 3), kernel: 4,
        };
        let (eta_s, eta_theta) = default_eta_inits(Some(4.0), 100);
        let (store, nets) = Networks::init(5, arch, true, true, eta_s, eta_theta).unwrap();
        let config = EmConfig {
            k: 3, t: 3, mode,
            model: ComponentModel::Gaussian { alpha: 4.0 },
            prior: PriorSpec { dist: PriorDist::Gaussian { mean: 0.0 }, lambda: 0.1 },
            sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(3),
            detach_gamma: false,
        };
        let mut img_rng = Rng::seeded(31, 0);
        let image = Tensor::vector((0..100).map(|_| if img_rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect());
        let mut rng = Rng::seeded(77, 0);
        let init = init_latents(Method::Ldp, 6, &config, &mut rng);

        let eval_lsum = |st: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let binds = bind_params(&mut tape, st);
            let (_, l) = unroll_em(&mut tape, &binds, &nets, Method::Ldp, &config, &image, None, &init).unwrap();
            tape.value(l).item()
        };

        // analytic grads
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let (_, l) = unroll_em(&mut tape, &binds, &nets, Method::Ldp, &config, &image, None, &init).unwrap();
        let grads = tape.param_gradients(l);

        // probe 10 scattered parameters
        let mut worst: f64 = 0.0;
        let mut worst_name = String::new();
        let mut probe_rng = Rng::seeded(3, 0);
        for _ in 0..10 {
            let pidx = probe_rng.below(store.len());
            let p = store.get(ParamId(pidx));
            if p.value.numel() == 0 { continue; }
            let eidx = probe_rng.below(p.value.numel());
            let h = 1e-5;
            let perturb = |delta: f64| -> ParamStore {
                let mut s2 = ParamStore::new();
                for (_, q) in store.iter() {
                    s2.add(q.name.clone(), q.value.clone());
                }
                let mut data = p.value.data().to_vec();
                data[eidx] += delta;
                s2.set_value(ParamId(pidx), Tensor::new(p.value.shape().to_vec(), data));
                s2
            };
            let fd = (eval_lsum(&perturb(h)) - eval_lsum(&perturb(-h))) / (2.0 * h);
            let ad = grads.iter().find(|(k, _)| *k == pidx).unwrap().1.data()[eidx];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{}] ad={:.6e} fd={:.6e}", p.name, eidx, ad, fd);
            }
        }
        println!("{:?}: worst rel err {:.3e} at {}", mode, worst, worst_name);
    }
}
