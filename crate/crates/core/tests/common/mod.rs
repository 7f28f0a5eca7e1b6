//! Shared helpers for the integration suites.

use ldp_core::config::RunConfig;
use ldp_core::dataset::{generate_multi_shapes, Dataset};
use ldp_core::em::Method;
use ldp_core::metrics::{evaluate_dataset, MetricsReport};
use ldp_core::nets::Networks;
use ldp_core::params::ParamStore;
use ldp_core::train::train_bptt;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub struct TrainedRun {
    pub store: ParamStore,
    pub nets: Networks,
    pub config: RunConfig,
    pub test_report: MetricsReport,
    pub test_data: Dataset,
}

/// Desk-scale training-run cache shared across criteria (several criteria
/// score the same trained models).
fn cache() -> &'static Mutex<HashMap<String, Arc<TrainedRun>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<TrainedRun>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// The desk-scale base configuration: Multi-Shapes 20x20, 2 objects,
/// 5,000 train / 1,000 test, K=3, T=10, fc preset, 50 epochs.
pub fn desk_config(method: Method, model: &str, seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.apply("method", method.name()).unwrap();
    config.apply("model", model).unwrap();
    config.apply("k", "3").unwrap();
    config.apply("t-steps", "10").unwrap();
    config.apply("preset", "fc").unwrap();
    config.apply("epochs", "50").unwrap();
    config.apply("workers", "2").unwrap();
    config.seed = seed;
    config
}

pub fn desk_train_data(objects: usize) -> Dataset {
    generate_multi_shapes(5_000, 20, objects, 1_000 + objects as u64, 0).unwrap()
}

pub fn desk_test_data(objects: usize) -> Dataset {
    generate_multi_shapes(1_000, 20, objects, 2_000 + objects as u64, 100_000).unwrap()
}

/// Train (or fetch from the cache) one desk-scale run and score it on the
/// matching held-out set.
pub fn trained(method: Method, model: &str, seed: u64, objects: usize) -> Arc<TrainedRun> {
    let key = format!("{}-{}-{}-{}", method.name(), model, seed, objects);
    if let Some(hit) = cache().lock().unwrap().get(&key) {
        return hit.clone();
    }
    let config = desk_config(method, model, seed);
    let data = desk_train_data(objects);
    let test_data = desk_test_data(objects);
    let em = config.em_config().unwrap();
    let arch = config.arch(20, 20);
    let (eta_s, eta_theta) = config.eta_inits(arch.pixels());
    let stick_bias = if method == Method::Nem { 0.0 } else { config.stick_bias_init };
    let (mut store, nets) = Networks::init_with_stick_bias(
        config.seed,
        arch,
        method.with_appearance(),
        method.has_background(),
        eta_s,
        eta_theta,
        stick_bias,
    )
    .unwrap();
    let tc = config.train_config();
    train_bptt(&data, None, &mut store, &nets, method, &em, &tc, 0, |record, _| {
        if record.epoch % 10 == 9 {
            eprintln!("[{}] epoch {} loss {:.2}", key, record.epoch, record.mean_loss);
        }
        Ok(())
    })
    .unwrap();
    let test_report = evaluate_dataset(&test_data, &store, &nets, method, &em, 424_242).unwrap();
    let run = Arc::new(TrainedRun { store, nets, config, test_report, test_data });
    cache().lock().unwrap().insert(key, run.clone());
    run
}

/// Mean AMI across the three fixed desk seeds.
pub fn three_seed_mean_ami(method: Method, model: &str) -> f64 {
    let amis: Vec<f64> = [1u64, 2, 3]
        .iter()
        .map(|&s| trained(method, model, s, 2).test_report.ami_mean)
        .collect();
    amis.iter().sum::<f64>() / amis.len() as f64
}
