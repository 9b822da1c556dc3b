use std::sync::Arc;

use dfm::data::{families, TabularDistribution};
use dfm::denoise::{exact_posterior, Denoiser, DenoiserOutput};
use dfm::rates::{
    conditional_rate_row, db_residual, expected_rate_row, r_db_row, r_star_row, DbKind, RatePlan,
};
use dfm::rng::root_rng;
use dfm::schedule::{marginal_pt, sample_categorical, ConditionalFlow, GeneralSchedule};
use dfm::tokens::{state_from_index, Alphabet, Token};
use proptest::prelude::*;
use rand::Rng;

// p = t²·δ{x1} + (1 − t²)/S, written out independently of the library.
fn quadratic_probs(s: usize) -> impl Fn(f64, Token) -> Vec<f64> + Send + Sync + Clone {
    move |t, x1| {
        let k = t * t;
        (0..s).map(|j| k * f64::from(j as Token == x1) + (1.0 - k) / s as f64).collect()
    }
}

fn quadratic_flow(s: usize, analytic: bool) -> ConditionalFlow {
    let probs = quadratic_probs(s);
    let deriv = move |t: f64, x1: Token| -> Vec<f64> {
        (0..s).map(|j| 2.0 * t * (f64::from(j as Token == x1) - 1.0 / s as f64)).collect()
    };
    let sched = GeneralSchedule::new(Arc::new(probs), analytic.then(|| Arc::new(deriv) as _));
    ConditionalFlow::general(Alphabet::new(s, false).unwrap(), sched).unwrap()
}

fn flows(s: usize) -> Vec<ConditionalFlow> {
    vec![
        ConditionalFlow::masking(s).unwrap(),
        ConditionalFlow::uniform(s).unwrap(),
        quadratic_flow(s, true),
        quadratic_flow(s, false),
    ]
}

fn any_flow() -> impl Strategy<Value = ConditionalFlow> {
    (2usize..=5, 0usize..4).prop_map(|(s, k)| flows(s).swap_remove(k))
}

// Closed-form oracle for the two named flows.
fn oracle_prob(flow: &ConditionalFlow, t: f64, x1: Token, xt: Token) -> f64 {
    let s = flow.alphabet().size();
    let hit = f64::from(xt == x1);
    if flow.is_masking() {
        t * hit + (1.0 - t) * f64::from(xt as usize == s)
    } else {
        t * hit + (1.0 - t) / s as f64
    }
}

#[test]
fn normalization_over_random_inputs() {
    let mut rng = root_rng(11);
    for _ in 0..1000 {
        let s = rng.random_range(2..=6);
        for flow in flows(s) {
            let t: f64 = rng.random();
            let x1 = rng.random_range(0..s as Token);
            let total: f64 = (0..flow.alphabet().num_states() as Token).map(|j| flow.cond_prob(t, x1, j).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
    }
}

#[test]
fn boundary_interpolation() {
    let mut rng = root_rng(12);
    for s in 2..=5 {
        for flow in flows(s) {
            for x1 in 0..s as Token {
                assert!(flow.cond_prob(1.0 - 1e-9, x1, x1).unwrap() >= 1.0 - 1e-8);
                let prior = flow.prior_row();
                let near = flow.probs_row(1e-9, x1).unwrap();
                for (a, b) in near.iter().zip(&prior) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
            // sample_prior draws from prior_row
            let n = 40_000;
            let mut counts = vec![0usize; flow.alphabet().num_states()];
            for k in flow.sample_prior(n, &mut rng).unwrap().0 {
                counts[k as usize] += 1;
            }
            for (c, p) in counts.iter().zip(flow.prior_row()) {
                let f = *c as f64 / n as f64;
                assert!((f - p).abs() <= 5.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-12);
            }
        }
    }
}

#[test]
fn closed_forms_match_oracle() {
    let mut rng = root_rng(13);
    for _ in 0..500 {
        let s = rng.random_range(2..=5);
        for flow in flows(s).into_iter().take(2) {
            let t: f64 = rng.random();
            let x1 = rng.random_range(0..s as Token);
            for j in 0..flow.alphabet().num_states() as Token {
                assert!((flow.cond_prob(t, x1, j).unwrap() - oracle_prob(&flow, t, x1, j)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn marginal_conserves_mass() {
    let dist = families::structured_toy();
    for flow in [ConditionalFlow::masking(4).unwrap(), ConditionalFlow::uniform(4).unwrap()] {
        for k in 0..=10 {
            let m = marginal_pt(&dist, &flow, k as f64 / 10.0).unwrap();
            assert!((m.total() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn rows_have_nonnegative_off_diagonals() {
    let mut rng = root_rng(14);
    for _ in 0..10_000 {
        let s = rng.random_range(2..=5);
        let flow = flows(s).swap_remove(rng.random_range(0..3));
        let eta = rng.random_range(0.0..20.0);
        let plan = RatePlan::with_eta(flow.clone(), eta).unwrap();
        let t = rng.random_range(0.0..1.0);
        let x1 = rng.random_range(0..s as Token);
        let xt = rng.random_range(0..flow.alphabet().num_states() as Token);
        let row = conditional_rate_row(&plan, t, xt, x1).unwrap();
        assert!(row.min_off_diagonal() >= 0.0);
        assert!(row.as_slice().iter().sum::<f64>().abs() < 1e-9 * (1.0 + row.exit_rate()));
        let mut probs: Vec<f64> = (0..s).map(|_| rng.random::<f64>() + 1e-3).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let expected = expected_rate_row(&plan, t, xt, &probs).unwrap();
        assert!(expected.min_off_diagonal() >= 0.0);
    }
}

#[test]
fn detailed_balance_random() {
    let mut rng = root_rng(15);
    for _ in 0..1000 {
        let s = rng.random_range(2..=5);
        let t = rng.random_range(0.01..0.99);
        for flow in flows(s).into_iter().take(3) {
            let x1 = rng.random_range(0..s as Token);
            let r = db_residual(&flow, t, x1, |i| r_db_row(&flow, t, i, x1, DbKind::Canonical)).unwrap();
            assert!(r < 1e-10, "{r}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn derivative_matches_finite_difference(s in 2usize..=6, x1 in 0u32..6, t in 0.01f64..0.99) {
        let x1 = x1 % s as u32;
        for flow in flows(s).into_iter().take(3) {
            let h = 1e-5;
            for j in 0..flow.alphabet().num_states() as Token {
                let fd = (flow.cond_prob(t + h, x1, j).unwrap() - flow.cond_prob(t - h, x1, j).unwrap()) / (2.0 * h);
                prop_assert!((fd - flow.cond_prob_dt(t, x1, j).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eta_linearity(flow in any_flow(), a in 0.0f64..10.0, b in 0.0f64..10.0, t in 0.01f64..0.99, x1 in 0u32..5, xt in 0u32..6) {
        let s = flow.alphabet().size() as u32;
        let x1 = x1 % s;
        let xt = xt % flow.alphabet().num_states() as u32;
        let lhs = conditional_rate_row(&RatePlan::with_eta(flow.clone(), a + b).unwrap(), t, xt, x1).unwrap();
        let ra = conditional_rate_row(&RatePlan::with_eta(flow.clone(), a).unwrap(), t, xt, x1).unwrap();
        let db = r_db_row(&flow, t, xt, x1, DbKind::Canonical).unwrap();
        let rhs = ra.add_scaled(&db, b);
        for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn r_star_generates_flow(flow in any_flow(), t in 0.05f64..0.95, x1 in 0u32..5) {
        let x1 = x1 % flow.alphabet().size() as u32;
        let p = flow.probs_row(t, x1).unwrap();
        let dp = flow.dt_row(t, x1).unwrap();
        let n = p.len();
        let mut flux = vec![0.0; n];
        for i in 0..n {
            if p[i] > 0.0 {
                let row = r_star_row(&flow, t, i as Token, x1).unwrap();
                for j in 0..n {
                    flux[j] += p[i] * row.as_slice()[j];
                }
            }
        }
        for j in 0..n {
            prop_assert!((flux[j] - dp[j]).abs() < 1e-6, "{} vs {}", flux[j], dp[j]);
        }
    }
}

// Bayes by brute force over the support.
fn oracle_posterior(dist: &TabularDistribution, flow: &ConditionalFlow, t: f64, xt: &[Token]) -> Option<Vec<Vec<f64>>> {
    let s = dist.size();
    let mut rows = vec![vec![0.0; s]; xt.len()];
    let mut z = 0.0;
    for (x1, w) in dist.entries() {
        let lik: f64 = x1.iter().zip(xt).map(|(&a, &b)| oracle_prob(flow, t, a, b)).product();
        z += w * lik;
        for (d, &k) in x1.iter().enumerate() {
            rows[d][k as usize] += w * lik;
        }
    }
    (z > 0.0).then(|| rows.into_iter().map(|r| r.into_iter().map(|v| v / z).collect()).collect())
}

#[test]
fn posterior_rows_normalized_and_match_bayes() {
    let mut rng = root_rng(16);
    let dists = [families::structured_toy(), families::correlated_pair(), families::parity(3, 3).unwrap()];
    let mut checked = 0;
    while checked < 10_000 {
        let dist = &dists[checked % dists.len()];
        let s = dist.size();
        let flow = if rng.random::<bool>() { ConditionalFlow::masking(s) } else { ConditionalFlow::uniform(s) }.unwrap();
        let t: f64 = rng.random_range(0.0..1.0);
        let x1 = dist.sample(&mut rng);
        let xt = flow.sample_corrupted(t, &x1.0, &mut rng).unwrap();
        let out = exact_posterior(dist, &flow, t, &xt.0).unwrap();
        let oracle = oracle_posterior(dist, &flow, t, &xt.0).unwrap();
        for (row, o) in out.rows().zip(&oracle) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in row.iter().zip(o) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        if flow.is_masking() {
            for (d, &k) in xt.0.iter().enumerate() {
                if (k as usize) < s {
                    assert_eq!(out.row(d)[k as usize], 1.0);
                }
            }
        }
        checked += 1;
    }
}

#[test]
fn law_of_total_probability() {
    for dist in [families::structured_toy(), families::correlated_pair()] {
        let s = dist.size();
        let marg = dist.dim_marginals();
        for flow in [ConditionalFlow::masking(s).unwrap(), ConditionalFlow::uniform(s).unwrap()] {
            for t in [0.1, 0.5, 0.9] {
                let table = marginal_pt(&dist, &flow, t).unwrap();
                let mut acc = vec![vec![0.0; s]; dist.dims()];
                for (i, &w) in table.probs.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let xt = state_from_index(i as u64, table.base, table.dims);
                    let out = exact_posterior(&dist, &flow, t, &xt).unwrap();
                    for (d, row) in out.rows().enumerate() {
                        for k in 0..s {
                            acc[d][k] += w * row[k];
                        }
                    }
                }
                for d in 0..dist.dims() {
                    for k in 0..s {
                        assert!((acc[d][k] - marg[d][k]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn exact_posterior_minimizes_cross_entropy() {
    let dist = families::structured_toy();
    let flow = ConditionalFlow::masking(4).unwrap();
    let mut rng = root_rng(17);
    let outputs: Vec<DenoiserOutput> = (0..5000)
        .map(|_| {
            let x1 = dist.sample(&mut rng).0;
            let t = rng.random_range(1e-3..1.0 - 1e-3);
            let xt = flow.sample_corrupted(t, &x1, &mut rng).unwrap().0;
            exact_posterior(&dist, &flow, t, &xt).unwrap()
        })
        .collect();
    // Each frozen (t, xt) is scored in expectation under its true posterior, so
    // the comparison holds triple by triple rather than only in the limit.
    let ce = |outs: &[DenoiserOutput]| -> f64 {
        outs.iter()
            .zip(&outputs)
            .map(|(q, p)| {
                p.rows().zip(q.rows()).map(|(pr, qr)| pr.iter().zip(qr).map(|(a, b)| if *a > 0.0 { -a * b.ln() } else { 0.0 }).sum::<f64>()).sum::<f64>()
            })
            .sum::<f64>()
    };
    let best = ce(&outputs);
    for trial in 0..50 {
        let scale = 0.05 + trial as f64 * 0.02;
        let perturbed: Vec<DenoiserOutput> = outputs
            .iter()
            .map(|o| {
                let rows = o
                    .rows()
                    .map(|r| {
                        let v: Vec<f64> = r.iter().map(|p| (p + 1e-9) * (scale * (rng.random::<f64>() - 0.5)).exp()).collect();
                        let z: f64 = v.iter().sum();
                        v.into_iter().map(|x| x / z).collect()
                    })
                    .collect();
                DenoiserOutput::new(rows, 4).unwrap()
            })
            .collect();
        assert!(best <= ce(&perturbed) + 1e-9);
    }
}

#[test]
fn sample_categorical_frequencies() {
    let mut rng = root_rng(18);
    let w = [0.1, 0.0, 0.6, 0.3];
    let n = 50_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_categorical(&w, &mut rng)] += 1;
    }
    assert_eq!(counts[1], 0);
    for (c, p) in counts.iter().zip(w) {
        assert!((*c as f64 / n as f64 - p).abs() < 0.01);
    }
}

#[test]
fn denoiser_trait_objects_agree() {
    let dist = families::correlated_pair();
    let flow = ConditionalFlow::uniform(2).unwrap();
    let den = dfm::denoise::ExactPosterior::new(dist.clone(), flow.clone()).unwrap();
    let boxed: Box<dyn Denoiser> = Box::new(den.clone());
    assert_eq!(boxed.predict(0.3, &[0, 1]).unwrap(), den.predict(0.3, &[0, 1]).unwrap());
}
