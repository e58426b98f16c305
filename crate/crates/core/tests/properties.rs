use fastemit::decoder::{Emission, EmissionTrace};
use fastemit::fastemit::{
    log_predict_label_mass, regularized_loss_diagnostic, DiagonalSelection, FastEmitConfig,
};
use fastemit::loss::{diagonal_log_likelihoods, diagonal_nodes, gradients, loss, node_posterior};
use fastemit::metrics::{edit_counts, percentile, pr_latency};
use fastemit::oracle::{brute_force_likelihood, path_count};
use fastemit::selftest::decomposition_error;
use fastemit::{JointLattice, LabelSequence, Tensor3, TokenId};
use proptest::prelude::*;

fn lattice_parts() -> impl Strategy<Value = (Tensor3, LabelSequence)> {
    (1usize..=5, 0usize..=4, 1usize..=5).prop_flat_map(|(t, u, v)| {
        (
            prop::collection::vec(-4.0f64..4.0, t * (u + 1) * (v + 1)),
            prop::collection::vec(1usize..=v, u),
        )
            .prop_map(move |(logits, ids)| {
                (
                    Tensor3::from_vec([t, u + 1, v + 1], logits).unwrap(),
                    LabelSequence::from_ids(&ids).unwrap(),
                )
            })
    })
}

fn lattice() -> impl Strategy<Value = JointLattice> {
    lattice_parts().prop_map(|(logits, labels)| JointLattice::from_logits(&logits, labels).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn per_node_logit_shift_leaves_loss_unchanged((logits, labels) in lattice_parts(), shift in -50.0f64..50.0) {
        let [t, u, v] = logits.dims();
        let shifted = Tensor3::from_fn([t, u, v], |i, j, k| logits.get(i, j, k) + shift * (1.0 + (i + 2 * j) as f64));
        let a = loss(&JointLattice::from_logits(&logits, labels.clone()).unwrap()).nll();
        let b = loss(&JointLattice::from_logits(&shifted, labels).unwrap()).nll();
        prop_assert!(close(a, b, 1e-9 * a.abs().max(1.0)), "{a} vs {b}");
    }

    #[test]
    fn uniform_lattice_likelihood_counts_paths(t in 1usize..=6, ids in prop::collection::vec(1usize..=3, 0..=4)) {
        let u = ids.len();
        let lat = JointLattice::from_logits(&Tensor3::zeros([t, u + 1, 4]), LabelSequence::from_ids(&ids).unwrap()).unwrap();
        let expected = (path_count(t, u) as f64).ln() - ((t + u) as f64) * 4f64.ln();
        prop_assert!(close(loss(&lat).log_likelihood, expected, 1e-12));
    }

    #[test]
    fn forward_matches_enumeration(lat in lattice()) {
        let exact = brute_force_likelihood(&lat).unwrap();
        prop_assert!(close(loss(&lat).log_likelihood, exact, 1e-10));
    }

    #[test]
    fn every_diagonal_carries_the_likelihood(lat in lattice()) {
        let tables = loss(&lat);
        let diags = diagonal_log_likelihoods(&tables);
        prop_assert_eq!(diags.len(), lat.frames() + lat.label_len());
        for d in diags {
            prop_assert!(close(d, tables.log_likelihood, 1e-9));
        }
    }

    #[test]
    fn node_mass_splits_into_blank_and_label(lat in lattice()) {
        let tables = loss(&lat);
        prop_assert!(decomposition_error(&lat, &tables) <= 1e-9);
    }

    #[test]
    fn posteriors_telescope_to_one_per_diagonal(lat in lattice()) {
        let tables = loss(&lat);
        let (frames, labels) = (lat.frames(), lat.label_len());
        for n in 1..=frames + labels {
            let total: f64 = diagonal_nodes(frames, labels, n)
                .map(|(t, u)| node_posterior(&tables, t, u).unwrap())
                .sum();
            prop_assert!(close(total, 1.0, 1e-9), "diagonal {n}: {total}");
        }
        prop_assert!(close(node_posterior(&tables, 0, 0).unwrap(), 1.0, 1e-12));
        prop_assert!(close(node_posterior(&tables, frames - 1, labels).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn gradient_signs_and_softmax_row_sums(lat in lattice(), lambda in 0.0f64..0.1) {
        let tables = loss(&lat);
        let g = gradients(&lat, &tables, lambda).unwrap();
        prop_assert!(g.d_log_label.as_slice().iter().all(|&x| x <= 0.0));
        prop_assert!(g.d_log_blank.as_slice().iter().all(|&x| x <= 0.0));
        let [t, u, _] = lat.log_probs().dims();
        for i in 0..t {
            for j in 0..u {
                let row = g.d_logits.row(i, j);
                let scale: f64 = row.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
                prop_assert!(row.iter().sum::<f64>().abs() <= 1e-12 * scale);
            }
        }
        // At λ = 0 the per-node branch gradients sum to minus the posterior,
        // which sums to one along each diagonal.
        if lambda == 0.0 {
            let (frames, labels) = (lat.frames(), lat.label_len());
            for n in 1..=frames + labels {
                let total: f64 = diagonal_nodes(frames, labels, n)
                    .map(|(t, u)| g.d_log_label.get(t, u) + g.d_log_blank.get(t, u))
                    .sum();
                prop_assert!(close(total, -1.0, 1e-9));
            }
        }
    }

    #[test]
    fn label_mass_never_exceeds_likelihood(lat in lattice()) {
        let tables = loss(&lat);
        for t in 0..lat.frames() {
            for u in 0..=lat.label_len() {
                let m = log_predict_label_mass(&tables, &lat, t, u).unwrap();
                prop_assert!(m <= tables.log_alpha.get(t, u) + tables.log_beta.get(t, u) + 1e-12);
                prop_assert!(m <= tables.log_likelihood + 1e-12);
            }
        }
    }

    #[test]
    fn regularized_diagnostic_at_zero_is_the_nll(lat in lattice()) {
        let tables = loss(&lat);
        let values = regularized_loss_diagnostic(&tables, &lat, &FastEmitConfig::new(0.0).unwrap()).unwrap();
        for (_, v) in values {
            prop_assert!(close(v, tables.nll(), 1e-9));
        }
        let single = FastEmitConfig { lambda: 0.0, diagonal: DiagonalSelection::Single(1) };
        prop_assert_eq!(regularized_loss_diagnostic(&tables, &lat, &single).unwrap().len(), 1);
    }

    #[test]
    fn regularized_diagnostic_decreases_with_lambda(lat in lattice(), lambda in 0.0f64..1.0) {
        let tables = loss(&lat);
        let base = regularized_loss_diagnostic(&tables, &lat, &FastEmitConfig::new(0.0).unwrap()).unwrap();
        let reg = regularized_loss_diagnostic(&tables, &lat, &FastEmitConfig::new(lambda).unwrap()).unwrap();
        for ((_, b), (_, r)) in base.iter().zip(&reg) {
            prop_assert!(*r <= *b + 1e-12);
        }
    }

    #[test]
    fn percentiles_are_monotone(values in prop::collection::vec(-1e3f64..1e3, 1..50), p in 0.0f64..=100.0, q in 0.0f64..=100.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = percentile(&values, lo).unwrap();
        let b = percentile(&values, hi).unwrap();
        prop_assert!(a <= b);
        prop_assert!(values.contains(&a));
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(percentile(&values, 0.0).unwrap(), min);
        prop_assert_eq!(percentile(&values, 100.0).unwrap(), max);
    }

    #[test]
    fn edit_distance_is_symmetric(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12)) {
        let ab = edit_counts(&a, &b);
        let ba = edit_counts(&b, &a);
        prop_assert_eq!(ab.errors(), ba.errors());
        prop_assert_eq!(ab.substitutions + ab.insertions + ab.deletions, ab.errors());
        prop_assert!(ab.errors() >= a.len().abs_diff(b.len()));
        prop_assert!(ab.errors() <= a.len().max(b.len()));
        prop_assert_eq!(edit_counts(&a, &a).errors(), 0);
    }

    #[test]
    fn pr_ignores_what_follows_the_last_content_token(
        frames in prop::collection::vec(1usize..40, 1..8),
        eos in 1usize..40,
        extra in 0usize..10,
    ) {
        let mut frames = frames;
        frames.sort();
        let eoq = Some(TokenId(9));
        let trace = EmissionTrace {
            emissions: frames.iter().map(|&f| Emission { token: TokenId(1), frame: f }).collect(),
        };
        let pr = pr_latency(&trace, eos, 10.0, eoq);
        let mut longer = trace.clone();
        longer.emissions.push(Emission { token: TokenId(9), frame: frames.last().unwrap() + extra });
        prop_assert_eq!(pr_latency(&longer, eos, 10.0, eoq), pr);
        prop_assert_eq!(pr, Some((*frames.last().unwrap() as f64 - eos as f64) * 10.0));
    }
}
