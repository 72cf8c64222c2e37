use proptest::prelude::*;

use relaynet::dataset::{input_rows, label_to_matrix, matrix_to_label};
use relaynet::distill::{seq_psa, NodeSpace};
use relaynet::model::{harvest_rate, sample_instance, Assignment, EhParams, GeometryConfig, SystemParams};
use relaynet::neural::{kld_loss, softmax_columns, LogitShape};
use relaynet::scheduler::{expand_assignment, lambert_w0, nl_powmu, schedule_length_at, verify_schedule, DEFAULT_EPS};
use relaynet::selection::{bba, enumerate_optimal, node_lower_bound, or_select, SearchOpts};

fn assignment(n: usize, k: usize) -> impl Strategy<Value = Assignment> {
    prop::collection::vec(0..=k, n).prop_map(Assignment::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_roundtrip((n, k) in (1usize..6, 0usize..4), seed in any::<u64>()) {
        let total = (k as u64 + 1).pow(n as u32);
        let idx = seed % total;
        let a = Assignment::from_index(idx, n, k);
        prop_assert_eq!(a.to_index(k), idx);
        prop_assert!(a.validate(n, k).is_ok());
    }

    #[test]
    fn label_matrix_roundtrip(a in (1usize..6, 0usize..4).prop_flat_map(|(n, k)| assignment(n, k).prop_map(move |a| (a, n, k)))) {
        let (a, n, k) = a;
        let m = label_to_matrix(&a, n, k).unwrap();
        prop_assert_eq!(m.len(), k + 1);
        prop_assert_eq!(matrix_to_label(&m).unwrap(), a);
    }

    #[test]
    fn harvest_is_monotone_and_bounded(p in 0.0f64..0.2, dp in 1e-6f64..0.05) {
        let eh = EhParams::default();
        let (h0, h1) = (harvest_rate(&eh, p), harvest_rate(&eh, p + dp));
        prop_assert!(h0 >= 0.0 && h1 <= eh.m_sat);
        prop_assert!(h1 >= h0);
    }

    #[test]
    fn lambert_identity(x in -0.36787944117144233f64..1e6) {
        let w = lambert_w0(x).unwrap();
        prop_assert!((w * w.exp() - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn softmax_columns_normalized(z in prop::collection::vec(-50.0f64..50.0, 12)) {
        let s = LogitShape { classes: 3, cols: 4 };
        let p = softmax_columns(&z, s, 1.0);
        for i in 0..4 {
            let sum: f64 = (0..3).map(|j| p[j * 4 + i]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kld_gibbs(a in prop::collection::vec(-8.0f64..8.0, 6), b in prop::collection::vec(-8.0f64..8.0, 6), t in 0.5f64..4.0) {
        let s = LogitShape { classes: 3, cols: 2 };
        prop_assert!(kld_loss(&a, &b, s, t).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedules_are_feasible_and_stationary(seed in any::<u64>(), n in 1usize..4, k in 0usize..3, idx in any::<u64>()) {
        let inst = sample_instance(n, k, &GeometryConfig::default(), &EhParams::default(), &SystemParams::default(), seed).unwrap();
        let a = Assignment::from_index(idx % (k as u64 + 1).pow(n as u32), n, k);
        let srcs = expand_assignment(&inst, &a).unwrap();
        let s = nl_powmu(&srcs, &inst.sys, DEFAULT_EPS).unwrap();
        prop_assert!(verify_schedule(&inst, &a, &s).unwrap().feasible);
        // no better point nearby
        for f in [0.99, 1.01] {
            if let Ok(v) = schedule_length_at(&srcs, &inst.sys, s.tau0 * f) {
                prop_assert!(v >= s.total * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn bba_is_exact_and_bounds_admissible(seed in any::<u64>(), n in 1usize..4, k in 1usize..3) {
        let inst = sample_instance(n, k, &GeometryConfig::default(), &EhParams::default(), &SystemParams::default(), seed).unwrap();
        let opts = SearchOpts::default();
        let e = enumerate_optimal(&inst, &opts).unwrap();
        let b = bba(&inst, &opts).unwrap();
        prop_assert_eq!(&b.assignment, &e.assignment);
        prop_assert!((b.schedule.total - e.schedule.total).abs() <= 1e-9 * e.schedule.total);
        prop_assert!(e.schedule.total <= relaynet::selection::evaluate_assignment(&inst, or_select(&inst), DEFAULT_EPS).unwrap().schedule.total * (1.0 + 1e-12));
        for j in 0..=k {
            let lb = node_lower_bound(&inst, &[j], DEFAULT_EPS).unwrap();
            let best = (0..(k as u64 + 1).pow(n as u32))
                .map(|i| Assignment::from_index(i, n, k))
                .filter(|a| a.choice[0] == j)
                .map(|a| relaynet::scheduler::schedule_assignment(&inst, &a, DEFAULT_EPS).unwrap().total)
                .fold(f64::INFINITY, f64::min);
            prop_assert!(lb <= best * (1.0 + 1e-9));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Toy(Vec<usize>);

impl NodeSpace for Toy {
    fn nodes(&self) -> Vec<usize> {
        self.0.clone()
    }
    fn with_nodes(&self, nodes: &[usize]) -> relaynet::Result<Self> {
        Ok(Toy(nodes.to_vec()))
    }
    fn removable(&self, _: usize) -> bool {
        true
    }
    fn param_count(&self) -> relaynet::Result<usize> {
        Ok(toy_params(self.0[0], self.0[1]))
    }
}

fn toy_params(h1: usize, h2: usize) -> usize {
    let mut widths = vec![4];
    widths.extend([h1, h2].into_iter().filter(|&w| w > 0));
    widths.push(3);
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Hand-rolled last-to-first menu sweep over the parameter table.
fn toy_oracle(start: [usize; 2], target: usize, menu: &[usize], delta: f64) -> [usize; 2] {
    let d = |a: [usize; 2]| (target as f64 - toy_params(a[0], a[1]) as f64).abs();
    let mut cur = start;
    if d(cur) < delta {
        return cur;
    }
    for layer in [1, 0] {
        let mut best = cur;
        for &m in menu {
            let mut c = cur;
            c[layer] = m;
            if d(c) < d(best) {
                best = c;
            }
        }
        cur = best;
        if d(cur) < delta {
            break;
        }
    }
    cur
}

proptest! {
    #[test]
    fn seq_psa_matches_toy_oracle(h1 in prop::sample::select(vec![0usize, 2, 8]), h2 in prop::sample::select(vec![0usize, 2, 8]), target in 0usize..120, frac in prop::sample::select(vec![0.0, 0.02, 0.1])) {
        let menu = [0, 2, 8];
        let delta = frac * target as f64;
        let got = seq_psa(&Toy(vec![h1, h2]), target, &menu, delta).unwrap();
        let want = toy_oracle([h1, h2], target, &menu, delta);
        prop_assert_eq!(got.spec.0.clone(), want.to_vec());
        prop_assert_eq!(got.params, toy_params(want[0], want[1]));
    }

    #[test]
    fn input_rows_cover_features(n in 1usize..8, k in 0usize..5) {
        let r = input_rows(n, k);
        let f = relaynet::dataset::feature_count(n, k);
        prop_assert!(r * 4 >= f && (r - 1) * 4 < f);
    }
}
