// per-parameter FD check at T = 1, 2, 3 to localize the broken VJP
use ldp_core::em::*;
use ldp_core::mixture::*;
use ldp_core::nets::*;
use ldp_core::params::*;
use ldp_core::rng::Rng;
use ldp_core::tensor::{Tape, Tensor};

fn main() {
    for t_steps in [1usize, 2, 3] {
        for mode in [UpdateMode::Rnn] {
            let arch = ArchConfig {
                preset: ArchPreset::Fc, height: 4, width: 4, latent_dim: 3,
                feature_dim: 5, hidden: 6, appearance_dim: 1, conv_channels: (2, 3), kernel: 4,
            };
            let (eta_s, eta_theta) = default_eta_inits(Some(4.0), 16);
            let (store, nets) = Networks::init(5, arch, true, true, eta_s, eta_theta).unwrap();
            let config = EmConfig {
                k: 3, t: t_steps, mode,
                model: ComponentModel::Gaussian { alpha: 4.0 },
                prior: PriorSpec { dist: PriorDist::Gaussian { mean: 0.0 }, lambda: 0.1 },
                sigma_init: 1.0, loss_weights: EmConfig::linear_loss_weights(t_steps),
                detach_gamma: false,
            };
            let mut img_rng = Rng::seeded(31, 0);
            let image = Tensor::vector((0..16).map(|_| if img_rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect());
            let mut rng = Rng::seeded(77, 0);
            let init = init_latents(Method::Ldp, 3, &config, &mut rng);

            let eval_lsum = |st: &ParamStore| -> f64 {
                let mut tape = Tape::new();
                let binds = bind_params(&mut tape, st);
                let (_, l) = unroll_em(&mut tape, &binds, &nets, Method::Ldp, &config, &image, None, &init).unwrap();
                tape.value(l).item()
            };

            let mut tape = Tape::new();
            let binds = bind_params(&mut tape, &store);
            let (_, l) = unroll_em(&mut tape, &binds, &nets, Method::Ldp, &config, &image, None, &init).unwrap();
            let grads = tape.param_gradients(l);

            println!("== T = {}, {:?}", t_steps, mode);
            for (pidx, grad) in &grads {
                let p = store.get(ParamId(*pidx));
                let mut worst = 0.0f64;
                for eidx in 0..p.value.numel() {
                    let h = 1e-6;
                    let perturb = |delta: f64| -> ParamStore {
                        let mut s2 = ParamStore::new();
                        for (_, q) in store.iter() {
                            s2.add(q.name.clone(), q.value.clone());
                        }
                        let mut data = p.value.data().to_vec();
                        data[eidx] += delta;
                        s2.set_value(ParamId(*pidx), Tensor::new(p.value.shape().to_vec(), data));
                        s2
                    };
                    let fd = (eval_lsum(&perturb(h)) - eval_lsum(&perturb(-h))) / (2.0 * h);
                    let ad = grad.data()[eidx];
                    let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
                if worst > 1e-3 {
                    println!("  BAD {:>14}: worst rel {:.3e}", p.name, worst);
                }
            }
        }
    }
    println!("done");
}
