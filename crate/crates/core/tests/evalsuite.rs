use std::collections::{BTreeMap, HashSet};

use cochstream_core::evalsuite::{
    accuracy, average_ranks, phoneme_purity, spearman, train_linear_probe, weighted_accuracy, ProbeConfig,
};
use cochstream_core::wavcoch::{codebook_stats, CochlearTokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank of each value by counting: smaller values plus the midpoint of its tie group.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let tied = x.iter().filter(|&&u| u == v).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

/// Tie-corrected rank formula:
/// rho = (Sx + Sy - sum d^2) / (2 sqrt(Sx Sy)), Sx = (n^3 - n - sum(t^3 - t)) / 12.
fn rank_formula(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let tie_term = |v: &[f64]| {
        let mut groups: BTreeMap<u64, f64> = BTreeMap::new();
        for &a in v {
            *groups.entry(a.to_bits()).or_default() += 1.0;
        }
        groups.values().map(|t| t * t * t - t).sum::<f64>()
    };
    let sx = (n * n * n - n - tie_term(x)) / 12.0;
    let sy = (n * n * n - n - tie_term(y)) / 12.0;
    let (rx, ry) = (brute_ranks(x), brute_ranks(y));
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    (sx + sy - d2) / (2.0 * (sx * sy).sqrt())
}

#[test]
fn spearman_matches_the_rank_formula() {
    assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - rank_formula(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0])).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..12);
        // Few distinct values so that ties are common.
        let levels = rng.random_range(2..8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        assert_eq!(average_ranks(&x), brute_ranks(&x));
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if constant(&x) || constant(&y) {
            assert!(spearman(&x, &y).is_err());
            continue;
        }
        let got = spearman(&x, &y).unwrap();
        let want = rank_formula(&x, &y);
        assert!((got - want).abs() < 1e-12, "{x:?} {y:?}: {got} vs {want}");
        checked += 1;
    }
}

#[test]
fn purity_and_usage_match_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels = ["aa", "b", "ch", "d", "eh"];
    for _ in 0..50 {
        let pairs: Vec<(u32, &str)> =
            (0..rng.random_range(1..300)).map(|_| (rng.random_range(0..20), labels[rng.random_range(0..5)])).collect();
        let report = phoneme_purity(pairs.iter().copied()).unwrap();
        let tokens: HashSet<u32> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(report.per_token.len(), tokens.len());
        let mut top_total = 0usize;
        for t in &report.per_token {
            let mine: Vec<&str> = pairs.iter().filter(|p| p.0 == t.token).map(|p| p.1).collect();
            let best = labels.iter().map(|l| mine.iter().filter(|m| *m == l).count()).max().unwrap();
            assert_eq!(t.count as usize, mine.len());
            assert_eq!(t.purity, best as f64 / mine.len() as f64);
            top_total += best;
        }
        assert!((report.mean - top_total as f64 / pairs.len() as f64).abs() < 1e-15);

        let seqs: Vec<CochlearTokenSeq> = (0..3)
            .map(|_| CochlearTokenSeq::new((0..rng.random_range(0..200)).map(|_| rng.random_range(0..4096)).collect(), 12).unwrap())
            .collect();
        let stats = codebook_stats(&seqs, 12).unwrap();
        let distinct: HashSet<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        assert_eq!(stats.usage(), distinct.len());
        assert_eq!(stats.total as usize, seqs.iter().map(|s| s.ids.len()).sum::<usize>());
        for id in [0u32, 17, 4095] {
            let n = seqs.iter().flat_map(|s| &s.ids).filter(|&&v| v == id).count();
            assert_eq!(stats.counts[id as usize] as usize, n);
        }
    }
}

/// Regularized mean cross-entropy and its gradient for `logits = x W + b`.
fn oracle_objective(p: &[f64], x: &[Vec<f64>], y: &[usize], k: usize, l2: f64) -> (f64, Vec<f64>) {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut g = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z: Vec<f64> = (0..k).map(|c| p[dim * k + c] + (0..dim).map(|i| row[i] * p[i * k + c]).sum::<f64>()).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        loss += (lse - z[label]) / n;
        for c in 0..k {
            let d = ((z[c] - lse).exp() - if c == label { 1.0 } else { 0.0 }) / n;
            for i in 0..dim {
                g[i * k + c] += row[i] * d;
            }
            g[dim * k + c] += d;
        }
    }
    for i in 0..dim * k {
        loss += 0.5 * l2 * p[i] * p[i];
        g[i] += l2 * p[i];
    }
    (loss, g)
}

#[test]
fn probe_reaches_the_convex_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, dim, k, l2) = (100, 3, 5, 1e-3);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let x: Vec<Vec<f64>> = y.iter().map(|&c| centres[c].iter().map(|m| m + rng.random_range(-1.0..1.0)).collect()).collect();

    // Oracle: small fixed-step gradient descent run far past convergence.
    let mut p = vec![0.0; (dim + 1) * k];
    let mut best = f64::INFINITY;
    for _ in 0..100_000 {
        let (loss, g) = oracle_objective(&p, &x, &y, k, l2);
        best = best.min(loss);
        p.iter_mut().zip(&g).for_each(|(w, d)| *w -= 0.5 * d);
    }
    let flat: Vec<f64> = x.concat();
    let model = train_linear_probe(&flat, &y, k, &ProbeConfig { l2_strength: l2, ..Default::default() }).unwrap();
    let mut params = model.weights.clone();
    params.extend(&model.bias);
    let (at_model, _) = oracle_objective(&params, &x, &y, k, l2);
    assert!((at_model - best).abs() < 1e-3, "probe objective {at_model} vs oracle {best}");
    assert!((model.objective - at_model).abs() < 1e-9);
}

#[test]
fn weighted_accuracy_equals_plain_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let k = rng.random_range(1..9);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (w, a) = (weighted_accuracy(&preds, &labels).unwrap(), accuracy(&preds, &labels).unwrap());
        assert!((w - a).abs() < 1e-12, "{w} vs {a}");
    }
}
