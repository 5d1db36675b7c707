use proptest::prelude::*;

use otce::blocks::{parse_layout, FfnKind, LayoutSpec, Mixer, OtceConfig, OtceModel};
use otce::experts::route_topk;
use otce::harness::{noam_lr, TrainConfig};
use otce::positional::{apply_rope, RopeTable, DEFAULT_BASE};
use otce::tasks::{gen_batch, oracle_accuracy, Split, TaskKind, TaskSpec, PAD};
use otce::tensor::Tensor;

fn pair() -> impl Strategy<Value = (Mixer, FfnKind)> {
    (any::<bool>(), any::<bool>()).prop_map(|(s, m)| {
        (
            if s { Mixer::Ssm } else { Mixer::Attn },
            if m { FfnKind::Mlp } else { FfnKind::Moe },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_render_parse_identity(pairs in prop::collection::vec(pair(), 1..40)) {
        let l = LayoutSpec { pairs };
        prop_assert_eq!(parse_layout(&l.render()).unwrap(), l.clone());
        let json = serde_json::to_string(&l).unwrap();
        prop_assert_eq!(serde_json::from_str::<LayoutSpec>(&json).unwrap(), l);
    }

    #[test]
    fn segmented_layout_expands_repeats(segs in prop::collection::vec((pair(), 1usize..6), 1..6)) {
        let text: Vec<String> = segs
            .iter()
            .map(|(p, k)| {
                let one = LayoutSpec { pairs: vec![*p] }.render();
                format!("{one}×{k}")
            })
            .collect();
        let want: Vec<_> = segs.iter().flat_map(|(p, k)| std::iter::repeat_n(*p, *k)).collect();
        prop_assert_eq!(parse_layout(&text.join(" + ")).unwrap().pairs, want);
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        q in prop::collection::vec(-2.0f64..2.0, 8),
        k in prop::collection::vec(-2.0f64..2.0, 8),
        i in 0i64..200,
        j in 0i64..200,
        shift in 0i64..200,
    ) {
        let table = RopeTable::new(8, 512, DEFAULT_BASE).unwrap();
        let score = |pq: i64, pk: i64| {
            let rq = apply_rope(&Tensor::new([1, 8], q.clone()).unwrap(), &[pq], &table).unwrap();
            let rk = apply_rope(&Tensor::new([1, 8], k.clone()).unwrap(), &[pk], &table).unwrap();
            rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        prop_assert!((score(i, j) - score(i + shift, j + shift)).abs() < 1e-10);
    }

    #[test]
    fn topk_gates_are_sparse_and_subnormalised(
        tok in prop::collection::vec(-3.0f64..3.0, 6),
        cent in prop::collection::vec(-3.0f64..3.0, 30),
        k in 1usize..=5,
    ) {
        let g = route_topk(&tok, &Tensor::new([5, 6], cent).unwrap(), k).unwrap();
        prop_assert_eq!(g.len(), 5);
        prop_assert!(g.iter().filter(|&&v| v > 0.0).count() <= k);
        prop_assert!(g.iter().all(|&v| v >= 0.0));
        prop_assert!(g.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn noam_peaks_at_warmup(warmup in 1u64..500, d in 8usize..2048) {
        let lr = |s| noam_lr(s, d, warmup).unwrap();
        for s in 1..warmup {
            prop_assert!(lr(s) <= lr(s + 1));
        }
        prop_assert!(lr(warmup + 1) <= lr(warmup));
        prop_assert!(lr(10 * warmup) < lr(warmup));
    }

    #[test]
    fn batches_are_valid_and_reproducible(
        kind in prop::sample::select(TaskKind::ALL.to_vec()),
        seq_len in 16usize..80,
        index in 0u64..1000,
        seed in 0u64..50,
    ) {
        let mut spec = TaskSpec { seq_len, seed, ..TaskSpec::new(kind) };
        if kind == TaskKind::Mqar {
            spec.n_pairs = 2 + (seq_len / 8).min(6);
            spec.n_queries = 2;
        }
        let b = gen_batch(&spec, 3, index).unwrap();
        prop_assert_eq!(&b, &gen_batch(&spec, 3, index).unwrap());
        prop_assert_eq!(b.tokens.len(), 3 * seq_len);
        prop_assert!(b.masked() > 0);
        let vocab = spec.vocab_size;
        prop_assert!(b.tokens.iter().all(|&t| t < vocab));
        // Character id 0 is a real symbol (newline); elsewhere 0 is padding.
        let padded = kind != TaskKind::CharLm;
        prop_assert!(b.targets.iter().zip(&b.mask).all(|(&t, &m)| !m || (t < vocab && !(padded && t == PAD))));
        prop_assert_eq!(oracle_accuracy(&spec, &b), 1.0);
        let eval = gen_batch(&spec.with_split(Split::Eval), 3, index).unwrap();
        prop_assert_ne!(eval.tokens, b.tokens);
    }

    #[test]
    fn config_render_then_apply_is_identity(steps in 1u64..10_000, lr in 0.01f64..4.0, seed in any::<u32>()) {
        let cfg = TrainConfig::default()
            .apply(&format!("steps = {steps}\nlr_scale = {lr}\nseed = {seed}\nmodel.rope_mode = ssm"))
            .unwrap();
        prop_assert_eq!(TrainConfig::default().apply(&cfg.render().unwrap()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_logits_are_causal(
        tokens in prop::collection::vec(1usize..17, 12),
        edit in 0usize..12,
        new in 1usize..17,
        layout in prop::sample::select(vec!["SMAM", "AMSE", "SESMAM", "AESM"]),
    ) {
        let mut cfg = OtceConfig::small(layout, 8, 17).unwrap();
        cfg.ffn_hidden = 16;
        cfg.moe_hidden = 8;
        let m = OtceModel::<f64>::build(&cfg, 4).unwrap();
        let a = m.logits(&tokens, 1, 12).unwrap();
        let mut changed = tokens.clone();
        changed[edit] = new;
        let b = m.logits(&changed, 1, 12).unwrap();
        let before = edit * 17;
        prop_assert!(a.data()[..before].iter().zip(&b.data()[..before]).all(|(x, y)| x == y));
    }
}
