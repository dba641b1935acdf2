use proptest::prelude::*;

use mcif_core::cif::{cif_forward, compose_traces, integrate, scale_to_length};
use mcif_core::ctc::{ctc_loss_from_logits, min_frames};
use mcif_core::metrics::{levenshtein, nld, word_align};
use mcif_core::oracle::{brute_force_ctc, recursive_levenshtein, simulate_cif};
use mcif_core::text::bpe_train;
use mcif_core::{CifConfig, CifMode, Tensor2};

fn frames_and_alpha(max_t: usize, max_d: usize) -> impl Strategy<Value = (Tensor2, Vec<f64>)> {
    (1..=max_t, 1..=max_d).prop_flat_map(|(t, d)| {
        (
            prop::collection::vec(-1.0f64..1.0, t * d),
            prop::collection::vec(0.0f64..1.0, t),
        )
            .prop_map(move |(x, a)| (Tensor2::from_vec(t, d, x).unwrap(), a))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cif_conserves_weight((x, alpha) in frames_and_alpha(30, 4)) {
        let (emb, trace) = cif_forward(&x, &alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        prop_assert_eq!(emb.rows(), trace.len());
        let fired: f64 = trace.events.iter().filter(|e| !e.is_tail()).map(|e| e.weight()).sum();
        let tail: f64 = trace.events.iter().filter(|e| e.is_tail()).map(|e| e.weight()).sum();
        let total: f64 = alpha.iter().sum();
        prop_assert!((fired + tail + trace.residual - total).abs() < 1e-9);
        for e in trace.events.iter().filter(|e| !e.is_tail()) {
            prop_assert!((e.weight() - 1.0).abs() < 1e-9);
        }
        prop_assert!(trace.residual < 1.0);
        prop_assert!(integrate(&x, &trace).max_abs_diff(&emb) < 1e-12);
    }

    #[test]
    fn cif_agrees_with_simulator((x, alpha) in frames_and_alpha(20, 3)) {
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        let sim = simulate_cif(&rows, &alpha, 1.0, 0.45, false);
        let (emb, trace) = cif_forward(&x, &alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        prop_assert_eq!(sim.events.len(), trace.len());
        prop_assert!((sim.residual - trace.residual).abs() < 1e-12);
        for (n, ev) in sim.events.iter().enumerate() {
            for (c, v) in ev.embedding.iter().enumerate() {
                prop_assert!((v - emb.get(n, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_weights_fire_exactly_target_times((x, alpha) in frames_and_alpha(40, 2), u in 1usize..12) {
        prop_assume!(alpha.iter().sum::<f64>() > 1e-3);
        let scaled = scale_to_length(&alpha, u).unwrap();
        prop_assert!((scaled.iter().sum::<f64>() - u as f64).abs() < 1e-9);
        let (emb, trace) = cif_forward(&x, &scaled, &CifConfig::default(), CifMode::Train).unwrap();
        prop_assert_eq!(trace.len(), u);
        prop_assert_eq!(emb.rows(), u);
    }

    #[test]
    fn composed_trace_keeps_lower_frames((x, alpha) in frames_and_alpha(30, 2), beta in prop::collection::vec(0.0f64..1.0, 30)) {
        let (lower_emb, lower) = cif_forward(&x, &alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        prop_assume!(lower.len() > 0);
        let upper_alpha = beta[..lower.len()].to_vec();
        let (_, upper) = cif_forward(&lower_emb, &upper_alpha, &CifConfig::default(), CifMode::Infer).unwrap();
        let composed = compose_traces(&lower, &upper).unwrap();
        prop_assert_eq!(composed.len(), upper.len());
        prop_assert_eq!(composed.frames, x.rows());
        for e in &composed.events {
            prop_assert!(e.splits.windows(2).all(|w| w[0].0 < w[1].0));
        }
    }

    #[test]
    fn ctc_loss_is_a_negative_log_probability(
        logits in prop::collection::vec(-3.0f64..3.0, 24),
        labels in prop::collection::vec(1usize..4, 1..=3),
    ) {
        let lp = Tensor2::from_vec(6, 4, logits).unwrap();
        prop_assume!(min_frames(&labels) <= 6);
        let (loss, grad) = ctc_loss_from_logits(&lp, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for r in 0..grad.rows() {
            prop_assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-9);
        }
        let probs: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                let row = lp.row(t);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                row.iter().map(|v| (v - m).exp() / z).collect()
            })
            .collect();
        prop_assert!((loss - brute_force_ctc(&probs, &labels)).abs() < 1e-9);
    }

    #[test]
    fn levenshtein_matches_recursion(a in prop::collection::vec(0u8..3, 0..6), b in prop::collection::vec(0u8..3, 0..6)) {
        prop_assert_eq!(levenshtein(&a, &b), recursive_levenshtein(&a, &b));
        let n = nld(&a, &b);
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn alignment_replays_hypothesis(
        r in prop::collection::vec("[abc]", 0..7),
        h in prop::collection::vec("[abc]", 0..7),
    ) {
        let script = word_align(&r, &h);
        prop_assert_eq!(script.replay(), h.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(script.reference(), r.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(script.cost(), levenshtein(&r, &h));
    }

    #[test]
    fn bpe_round_trips(words in prop::collection::vec("[a-e]{1,6}", 1..20), vocab in 5usize..40) {
        let lines: Vec<String> = words.chunks(3).map(|c| c.join(" ")).collect();
        let bpe = bpe_train(&lines, vocab).unwrap();
        for line in &lines {
            let ids = bpe.encode(line).unwrap();
            prop_assert!(ids.iter().all(|&i| i >= 1 && i <= bpe.num_ids()));
            prop_assert_eq!(&bpe.decode(&ids).unwrap(), line);
        }
        prop_assert_eq!(bpe_train(&lines, vocab).unwrap(), bpe);
    }
}
