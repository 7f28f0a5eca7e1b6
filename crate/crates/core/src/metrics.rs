//! Grouping metrics: adjusted mutual information with background/overlap
//! exclusion, and permutation-minimal reconstruction error via the
//! assignment problem.

use crate::dataset::{Dataset, SceneSample};
use crate::em::{run_em, EmConfig, EmTrace, Method};
use crate::error::LdpError;
use crate::nets::Networks;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pixels excluded from AMI: background (no owner) and overlaps (2+ owners).
#[derive(Clone, Debug)]
pub struct ExclusionMask {
    excluded: Vec<bool>,
}

impl ExclusionMask {
    pub fn from_sample(sample: &SceneSample) -> Self {
        ExclusionMask {
            excluded: sample.labels.iter().map(|&l| l.count_ones() != 1).collect(),
        }
    }

    pub fn excluded(&self, pixel: usize) -> bool {
        self.excluded[pixel]
    }

    pub fn len(&self) -> usize {
        self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }

    pub fn included_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| !e).count()
    }
}

/// Contingency table of two labelings over the same items, with compact
/// cluster indices.
struct Contingency {
    counts: Vec<Vec<usize>>,
    a: Vec<usize>,
    b: Vec<usize>,
    n: usize,
}

fn contingency(pred: &[u8], truth: &[u8]) -> Contingency {
    let mut pred_ids: Vec<u8> = pred.to_vec();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    let mut truth_ids: Vec<u8> = truth.to_vec();
    truth_ids.sort_unstable();
    truth_ids.dedup();
    let (r, c) = (pred_ids.len(), truth_ids.len());
    let mut counts = vec![vec![0usize; c]; r];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let i = pred_ids.binary_search(&p).unwrap();
        let j = truth_ids.binary_search(&t).unwrap();
        counts[i][j] += 1;
    }
    let a: Vec<usize> = counts.iter().map(|row| row.iter().sum()).collect();
    let b: Vec<usize> = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
    Contingency { counts, a, b, n: pred.len() }
}

fn entropy(sizes: &[usize], n: usize) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(t: &Contingency) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += (nij / n) * ((n * nij) / (t.a[i] as f64 * t.b[j] as f64)).ln();
            }
        }
    }
    mi
}

/// Expected mutual information under the hypergeometric (permutation) model,
/// using a precomputed log-factorial prefix table.
fn expected_mutual_information(t: &Contingency) -> f64 {
    let n = t.n;
    let mut lfac = vec![0.0f64; n + 1];
    for k in 1..=n {
        lfac[k] = lfac[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in &t.a {
        for &bj in &t.b {
            let lo = 1.max((ai + bj).saturating_sub(n));
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let log_term = lfac[ai] + lfac[bj] + lfac[n - ai] + lfac[n - bj]
                    - lfac[n]
                    - lfac[nij]
                    - lfac[ai - nij]
                    - lfac[bj - nij]
                    - lfac[n + nij - ai - bj];
                let nij_f = nij as f64;
                emi += (nij_f / nf) * ((nf * nij_f) / (ai as f64 * bj as f64)).ln() * log_term.exp();
            }
        }
    }
    emi
}

/// Whether two labelings induce the same partition of the items.
fn same_partition(pred: &[u8], truth: &[u8]) -> bool {
    let t = contingency(pred, truth);
    if t.counts.len() != t.counts[0].len() {
        return false;
    }
    t.counts
        .iter()
        .all(|row| row.iter().filter(|&&v| v > 0).count() == 1)
        && (0..t.counts[0].len())
            .all(|j| t.counts.iter().filter(|row| row[j] > 0).count() == 1)
}

/// Adjusted mutual information over the non-excluded pixels:
/// `(MI - E[MI]) / (mean(H_pred, H_truth) - E[MI])`, conventionally 0 when
/// either labeling has a single cluster, and exactly 1 for identical
/// partitions.
pub fn ami(pred: &[u8], truth: &[u8], mask: &ExclusionMask) -> Result<f64, LdpError> {
    assert_eq!(pred.len(), truth.len(), "label lengths differ");
    assert_eq!(pred.len(), mask.len(), "mask length differs");
    let mut p = Vec::new();
    let mut t = Vec::new();
    for i in 0..pred.len() {
        if !mask.excluded(i) {
            p.push(pred[i]);
            t.push(truth[i]);
        }
    }
    if p.is_empty() {
        return Err(LdpError::UndefinedMetric {
            sample: 0,
            message: "every pixel excluded from AMI".into(),
        });
    }
    let table = contingency(&p, &t);
    if table.a.len() <= 1 || table.b.len() <= 1 {
        return Ok(0.0);
    }
    if same_partition(&p, &t) {
        return Ok(1.0);
    }
    let mi = mutual_information(&table);
    let emi = expected_mutual_information(&table);
    let h = 0.5 * (entropy(&table.a, table.n) + entropy(&table.b, table.n));
    let denom = h - emi;
    if denom.abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// Optimal assignment for a square cost matrix (shortest augmenting paths
/// with potentials, O(n^3)). Rectangular inputs are padded to square with a
/// sentinel larger than any real cost; padded columns show up as assignments
/// to column indices >= the real width.
pub fn hungarian_assign(cost: &Tensor) -> Result<Vec<usize>, LdpError> {
    let (r, c) = (cost.rows(), cost.cols());
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(LdpError::Domain("assignment costs must be finite".into()));
    }
    let n = r.max(c);
    let sentinel = cost.data().iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())) * n as f64 + 1.0;
    let at = |i: usize, j: usize| -> f64 {
        if i < r && j < c {
            cost.at(i, j)
        } else {
            sentinel
        }
    };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to each column; 0 = none
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; r];
    for j in 1..=n {
        if p[j] != 0 && p[j] - 1 < r {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    Ok(row_to_col)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.numel(), b.numel(), "image sizes differ in mse");
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Smallest mean squared error between reconstructed object images and
/// ground-truth object images over all pairings, evaluated at all pixels.
/// Surplus slots on either side pair with the all-background image.
pub fn hungarian_mse(recons: &[Tensor], truths: &[Tensor], background: &Tensor) -> Result<f64, LdpError> {
    let d = recons.len().max(truths.len());
    if d == 0 {
        return Ok(0.0);
    }
    let pick = |set: &[Tensor], i: usize| -> Tensor {
        if i < set.len() {
            set[i].clone()
        } else {
            background.clone()
        }
    };
    let mut cost = vec![0.0; d * d];
    for i in 0..d {
        let ri = pick(recons, i);
        for j in 0..d {
            cost[i * d + j] = mse(&ri, &pick(truths, j));
        }
    }
    let cost = Tensor::matrix(d, d, cost);
    let assign = hungarian_assign(&cost)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
    Ok(total / d as f64)
}

/// Aggregate evaluation over a dataset.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub ami_mean: f64,
    pub mse_mean: f64,
    pub per_sample_ami: Vec<Option<f64>>,
    pub per_sample_mse: Vec<f64>,
    pub evaluated: usize,
    pub ami_skipped: usize,
}

/// Per-component reconstruction images for one finished run: the component's
/// weight map times its appearance, composited over the prior background.
pub fn component_reconstructions(
    trace: &EmTrace,
    method: Method,
    config: &EmConfig,
    background_level: f64,
) -> Vec<Tensor> {
    let last = trace.final_step();
    let k = config.k;
    let m = last.mixture.gamma.rows();
    let slots: usize = match method {
        Method::Ldp | Method::LdpSoftmax => k - 1,
        Method::Nem => k,
    };
    (0..slots)
        .map(|slot| {
            let mut img = vec![0.0; m];
            for px in 0..m {
                let (w, appearance) = match method {
                    // shape-weighted appearance over the prior background
                    Method::Ldp | Method::LdpSoftmax => {
                        (last.mixture.pi.at(px, slot), last.appearances.data()[slot])
                    }
                    Method::Nem => {
                        (last.mixture.gamma.at(px, slot), last.appearances.at(px, slot))
                    }
                };
                img[px] = w * appearance + (1.0 - w) * background_level;
            }
            Tensor::vector(img)
        })
        .collect()
}

/// Mass statistics over true-background pixels: mean posterior on the last
/// component and mean largest posterior on any component.
pub fn background_concentration(trace: &EmTrace, sample: &SceneSample) -> Option<(f64, f64)> {
    let gamma = &trace.final_step().mixture.gamma;
    let k = gamma.cols();
    let mut count = 0usize;
    let (mut last_sum, mut max_sum) = (0.0, 0.0);
    for (px, &l) in sample.labels.iter().enumerate() {
        if l == 0 {
            count += 1;
            last_sum += gamma.at(px, k - 1);
            max_sum += (0..k).map(|j| gamma.at(px, j)).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    if count == 0 {
        None
    } else {
        Some((last_sum / count as f64, max_sum / count as f64))
    }
}

/// Run the inner loop over every sample and score the groupings. Sample `i`
/// initializes its latents from ChaCha stream `i` under `seed`.
pub fn evaluate_dataset(
    dataset: &Dataset,
    store: &ParamStore,
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    seed: u64,
) -> Result<MetricsReport, LdpError> {
    let mut report = MetricsReport::default();
    let background_level = match config.prior.dist {
        crate::mixture::PriorDist::Gaussian { mean } => mean,
        crate::mixture::PriorDist::Bernoulli { theta } => theta,
    };
    let (mut ami_total, mut mse_total) = (0.0, 0.0);
    for (i, sample) in dataset.samples.iter().enumerate() {
        let mut rng = Rng::seeded(seed, i as u64);
        let trace = run_em(&sample.intensities(), store, nets, method, config, &mut rng)?;
        let pred = trace.labels();
        let truth: Vec<u8> = sample.labels.iter().map(|&l| l.trailing_zeros() as u8).collect();
        let mask = ExclusionMask::from_sample(sample);
        match ami(&pred, &truth, &mask) {
            Ok(score) => {
                report.per_sample_ami.push(Some(score));
                ami_total += score;
            }
            Err(LdpError::UndefinedMetric { .. }) => {
                report.per_sample_ami.push(None);
                report.ami_skipped += 1;
            }
            Err(e) => return Err(e),
        }
        let recons = component_reconstructions(&trace, method, config, background_level);
        let truths: Vec<Tensor> = sample.present_objects().iter().map(|&b| sample.object_image(b)).collect();
        let background = Tensor::filled(vec![dataset.pixel_count()], background_level);
        let sample_mse = hungarian_mse(&recons, &truths, &background)?;
        report.per_sample_mse.push(sample_mse);
        mse_total += sample_mse;
        report.evaluated += 1;
    }
    let scored = report.evaluated - report.ami_skipped;
    report.ami_mean = if scored > 0 { ami_total / scored as f64 } else { 0.0 };
    report.mse_mean = if report.evaluated > 0 { mse_total / report.evaluated as f64 } else { 0.0 };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_mask(n: usize) -> ExclusionMask {
        ExclusionMask { excluded: vec![false; n] }
    }

    #[test]
    fn ami_identical_labelings_is_exactly_one() {
        let labels = vec![0u8, 0, 1, 1, 2, 2, 2];
        let score = ami(&labels, &labels, &no_mask(7)).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn ami_permutation_invariance() {
        let truth = vec![0u8, 0, 1, 1, 2, 2];
        let pred = vec![5u8, 5, 3, 3, 0, 0];
        assert_eq!(ami(&pred, &truth, &no_mask(6)).unwrap(), 1.0);
    }

    #[test]
    fn ami_single_cluster_convention() {
        let truth = vec![0u8, 0, 1, 1];
        let pred = vec![7u8, 7, 7, 7];
        assert_eq!(ami(&pred, &truth, &no_mask(4)).unwrap(), 0.0);
        assert_eq!(ami(&truth, &pred, &no_mask(4)).unwrap(), 0.0);
    }

    #[test]
    fn ami_symmetry_and_relabeling() {
        let a = vec![0u8, 0, 1, 1, 2, 0, 1];
        let b = vec![1u8, 1, 1, 0, 0, 2, 2];
        let ab = ami(&a, &b, &no_mask(7)).unwrap();
        let ba = ami(&b, &a, &no_mask(7)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // bijective relabeling of one side leaves the score unchanged
        let b2: Vec<u8> = b.iter().map(|&v| v * 3 + 1).collect();
        let ab2 = ami(&a, &b2, &no_mask(7)).unwrap();
        assert!((ab - ab2).abs() < 1e-12);
    }

    #[test]
    fn ami_fully_excluded_sample_is_undefined() {
        let s = SceneSample { pixels: vec![0, 0], labels: vec![0, 3] };
        let mask = ExclusionMask::from_sample(&s);
        assert!(matches!(
            ami(&[0, 1], &[0, 1], &mask),
            Err(LdpError::UndefinedMetric { .. })
        ));
    }

    #[test]
    fn exclusion_mask_partitions_pixels() {
        let s = SceneSample {
            pixels: vec![0; 6],
            labels: vec![0, 2, 4, 6, 2, 0],
        };
        let mask = ExclusionMask::from_sample(&s);
        for (px, &l) in s.labels.iter().enumerate() {
            let background = l == 0;
            let overlap = l.count_ones() >= 2;
            let single = l.count_ones() == 1;
            assert_eq!(background as u8 + overlap as u8 + single as u8, 1);
            assert_eq!(mask.excluded(px), background || overlap);
        }
        assert_eq!(mask.included_count(), 3);
    }

    /// Direct-formula oracle: every factorial term recomputed from scratch.
    fn emi_oracle(pred: &[u8], truth: &[u8]) -> f64 {
        let t = contingency(pred, truth);
        let lfac = |k: usize| -> f64 { (1..=k).map(|v| (v as f64).ln()).sum() };
        let n = t.n as f64;
        let mut emi = 0.0;
        for &ai in &t.a {
            for &bj in &t.b {
                let lo = 1.max((ai + bj).saturating_sub(t.n));
                for nij in lo..=ai.min(bj) {
                    let log_term = lfac(ai) + lfac(bj) + lfac(t.n - ai) + lfac(t.n - bj)
                        - lfac(t.n)
                        - lfac(nij)
                        - lfac(ai - nij)
                        - lfac(bj - nij)
                        - lfac(t.n + nij - ai - bj);
                    emi += (nij as f64 / n) * ((n * nij as f64) / (ai as f64 * bj as f64)).ln()
                        * log_term.exp();
                }
            }
        }
        emi
    }

    fn ami_oracle(pred: &[u8], truth: &[u8]) -> f64 {
        let t = contingency(pred, truth);
        if t.a.len() <= 1 || t.b.len() <= 1 {
            return 0.0;
        }
        let mi = mutual_information(&t);
        let emi = emi_oracle(pred, truth);
        let h = 0.5 * (entropy(&t.a, t.n) + entropy(&t.b, t.n));
        (mi - emi) / (h - emi)
    }

    #[test]
    fn ami_matches_direct_formula_oracle() {
        // spec example shape: truth [a,a,b,b], pred [x,x,x,y]
        let truth = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 0, 0, 1];
        let fast = ami(&pred, &truth, &no_mask(4)).unwrap();
        let oracle = ami_oracle(&pred, &truth);
        assert!((fast - oracle).abs() < 1e-12, "{} vs {}", fast, oracle);

        // random pairs
        let mut rng = Rng::seeded(77, 0);
        for _ in 0..200 {
            let n = 20 + rng.below(40);
            let kp = 2 + rng.below(4) as u8;
            let kt = 2 + rng.below(4) as u8;
            let pred: Vec<u8> = (0..n).map(|_| rng.below(kp as usize) as u8).collect();
            let truth: Vec<u8> = (0..n).map(|_| rng.below(kt as usize) as u8).collect();
            let fast = ami(&pred, &truth, &no_mask(n)).unwrap();
            let oracle = ami_oracle(&pred, &truth);
            assert!(
                (fast - oracle).abs() < 1e-10,
                "fast {} vs oracle {} on n={}",
                fast,
                oracle,
                n
            );
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for rest in permutations(n - 1) {
            for i in 0..n {
                let mut p = rest.clone();
                p.insert(i, n - 1);
                out.push(p);
            }
        }
        out
    }

    fn brute_force_min(cost: &Tensor) -> f64 {
        let n = cost.rows();
        permutations(n)
            .into_iter()
            .map(|p| (0..n).map(|i| cost.at(i, p[i])).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn hungarian_identity_and_reversal() {
        let mut ident = vec![1.0; 9];
        for i in 0..3 {
            ident[i * 3 + i] = 0.0;
        }
        let assign = hungarian_assign(&Tensor::matrix(3, 3, ident)).unwrap();
        assert_eq!(assign, vec![0, 1, 2]);

        let mut rev = vec![1.0; 9];
        for i in 0..3 {
            rev[i * 3 + (2 - i)] = 0.0;
        }
        let assign = hungarian_assign(&Tensor::matrix(3, 3, rev)).unwrap();
        assert_eq!(assign, vec![2, 1, 0]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_5x5() {
        let mut rng = Rng::seeded(101, 0);
        for trial in 0..1000 {
            let cost: Vec<f64> = (0..25).map(|_| rng.below(100) as f64).collect();
            let cost = Tensor::matrix(5, 5, cost);
            let assign = hungarian_assign(&cost).unwrap();
            // valid permutation
            let mut seen = [false; 5];
            for &j in &assign {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
            let best = brute_force_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {}: hungarian {} vs brute force {}",
                trial,
                total,
                best
            );
        }
    }

    #[test]
    fn hungarian_rejects_non_finite() {
        let cost = Tensor::matrix(2, 2, vec![0.0, 1.0, f64::INFINITY, 0.0]);
        assert!(matches!(hungarian_assign(&cost), Err(LdpError::Domain(_))));
    }

    #[test]
    fn hungarian_mse_examples() {
        let imgs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::vector((0..6).map(|j| ((i * 7 + j) % 5) as f64 / 4.0).collect()))
            .collect();
        let bg = Tensor::zeros(vec![6]);
        // in order
        assert!(hungarian_mse(&imgs, &imgs, &bg).unwrap() < 1e-15);
        // shuffled truths: assignment recovers the order
        let shuffled = vec![imgs[2].clone(), imgs[0].clone(), imgs[1].clone()];
        assert!(hungarian_mse(&imgs, &shuffled, &bg).unwrap() < 1e-15);
    }

    #[test]
    fn hungarian_mse_matches_exhaustive_minimum() {
        let mut rng = Rng::seeded(55, 0);
        for _ in 0..50 {
            let recons: Vec<Tensor> =
                (0..3).map(|_| Tensor::vector((0..8).map(|_| rng.uniform()).collect())).collect();
            let truths: Vec<Tensor> =
                (0..3).map(|_| Tensor::vector((0..8).map(|_| rng.uniform()).collect())).collect();
            let bg = Tensor::zeros(vec![8]);
            let fast = hungarian_mse(&recons, &truths, &bg).unwrap();
            let best = permutations(3)
                .into_iter()
                .map(|p| {
                    (0..3).map(|i| mse(&recons[i], &truths[p[i]])).sum::<f64>() / 3.0
                })
                .fold(f64::INFINITY, f64::min);
            assert!((fast - best).abs() < 1e-12, "{} vs {}", fast, best);
        }
    }

    #[test]
    fn hungarian_mse_order_invariance() {
        let mut rng = Rng::seeded(56, 0);
        let recons: Vec<Tensor> =
            (0..3).map(|_| Tensor::vector((0..8).map(|_| rng.uniform()).collect())).collect();
        let truths: Vec<Tensor> =
            (0..2).map(|_| Tensor::vector((0..8).map(|_| rng.uniform()).collect())).collect();
        let bg = Tensor::filled(vec![8], 0.1);
        let a = hungarian_mse(&recons, &truths, &bg).unwrap();
        let recons_rev: Vec<Tensor> = recons.iter().rev().cloned().collect();
        let truths_rev: Vec<Tensor> = truths.iter().rev().cloned().collect();
        let b = hungarian_mse(&recons_rev, &truths_rev, &bg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
