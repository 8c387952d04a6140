//! Separation oracle for the context-coupled generator: a domain-blind
//! linear probe must fail on an unseen domain while the rule that uses the
//! domain mean is near perfect. Both bounds are checked on a 10-seed suite.

use casa_core::datasets::{
    context_coupled_truth, generate, DomainDataset, ShiftMode, SyntheticSpec,
};

/// Least-squares linear probe with a bias column: an independent,
/// closed-form stand-in for "any linear classifier".
struct LinearProbe {
    weights: Vec<f64>, // length F+1, last entry is the bias
}

impl LinearProbe {
    fn fit(domains: &[&DomainDataset]) -> LinearProbe {
        let f = domains[0].feature_dim();
        let dim = f + 1;
        // Normal equations (Xᵀ X + ridge·I) w = Xᵀ y with y ∈ {-1, +1}.
        let mut xtx = vec![0.0; dim * dim];
        let mut xty = vec![0.0; dim];
        for ds in domains {
            for i in 0..ds.len() {
                let mut row = ds.row(i).to_vec();
                row.push(1.0);
                let y = if ds.labels[i] == 1 { 1.0 } else { -1.0 };
                for a in 0..dim {
                    xty[a] += row[a] * y;
                    for b in 0..dim {
                        xtx[a * dim + b] += row[a] * row[b];
                    }
                }
            }
        }
        for a in 0..dim {
            xtx[a * dim + a] += 1e-8;
        }
        let weights = solve_dense(&mut xtx, &mut xty, dim);
        LinearProbe { weights }
    }

    fn accuracy(&self, ds: &DomainDataset) -> f64 {
        let f = ds.feature_dim();
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let mut score = self.weights[f];
            for (w, x) in self.weights[..f].iter().zip(ds.row(i)) {
                score += w * x;
            }
            let pred = if score > 0.0 { 1 } else { 0 };
            if pred == ds.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.len() as f64
    }
}

/// Gaussian elimination with partial pivoting; solves in place.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    x
}

fn oracle_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_domains: 4,
        classes: 2,
        feature_dim: 6,
        samples_per_domain: 200,
        shift_mode: ShiftMode::ContextCoupled,
        shift_magnitude: 8.0,
        noise_std: 0.5,
        seed,
    }
}

#[test]
fn pooled_probe_fails_on_unseen_domain_while_bayes_rule_succeeds() {
    for seed in 0..10u64 {
        let spec = oracle_spec(seed);
        let domains = generate(&spec).unwrap();
        let truth = context_coupled_truth(&spec).unwrap();
        let held_out = &domains[3];

        let probe = LinearProbe::fit(&[&domains[0], &domains[1], &domains[2]]);
        let probe_acc = probe.accuracy(held_out);
        assert!(
            probe_acc <= 0.60,
            "seed {seed}: pooled linear probe scored {probe_acc:.3} on the unseen domain"
        );

        let mut correct = 0usize;
        for i in 0..held_out.len() {
            let pred = truth.bayes_label(
                held_out.row(i),
                &truth.domain_means[3],
                spec.noise_std,
                spec.classes,
            );
            if pred == held_out.labels[i] {
                correct += 1;
            }
        }
        let bayes_acc = correct as f64 / held_out.len() as f64;
        assert!(
            bayes_acc >= 0.95,
            "seed {seed}: domain-mean rule scored only {bayes_acc:.3}"
        );
    }
}

#[test]
fn pooled_probe_is_informative_within_training_domains() {
    // Sanity check on the oracle itself: the probe is not degenerate; it
    // beats chance on the domains it was fit on.
    let spec = oracle_spec(3);
    let domains = generate(&spec).unwrap();
    let probe = LinearProbe::fit(&[&domains[0], &domains[1], &domains[2]]);
    let mut acc = 0.0;
    for ds in &domains[..3] {
        acc += probe.accuracy(ds);
    }
    acc /= 3.0;
    assert!(acc > 0.65, "probe should fit its own domains, got {acc:.3}");
}
