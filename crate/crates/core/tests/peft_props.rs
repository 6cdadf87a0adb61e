use fedpeft::model::{init_model, LayerWeights, ModelConfig};
use fedpeft::numerics::Tensor;
use fedpeft::peft::{attach, trainable_count, AdapterKind, FlatUpdate, LoraTarget};
use proptest::prelude::*;

fn toy_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for (d_model, n_heads) in [(8, 1), (8, 2), (16, 4), (32, 2)] {
        for n_layers in 1..=3 {
            for d_ffn in [16, 64] {
                out.push(ModelConfig {
                    d_model,
                    n_heads,
                    n_layers,
                    d_ffn,
                    max_seq_len: 24,
                    ..ModelConfig::default()
                });
            }
        }
    }
    out
}

fn kinds() -> Vec<AdapterKind> {
    let mut out = vec![AdapterKind::Ia3, AdapterKind::LayerNorm];
    for rank in [1, 2, 4] {
        out.push(AdapterKind::Lora {
            rank,
            targets: LoraTarget::ALL.to_vec(),
        });
        out.push(AdapterKind::Lora {
            rank,
            targets: vec![LoraTarget::Wq, LoraTarget::Wv],
        });
    }
    out
}

fn stored(l: &LayerWeights, t: LoraTarget) -> &Tensor {
    match t {
        LoraTarget::Wq => &l.wq,
        LoraTarget::Wk => &l.wk,
        LoraTarget::Wv => &l.wv,
        LoraTarget::Wo => &l.wo,
        LoraTarget::FfnUp => &l.w_up,
        LoraTarget::FfnDown => &l.w_down,
    }
}

#[test]
fn closed_form_counts_match_enumeration() {
    for cfg in toy_configs() {
        let w = init_model(&cfg).unwrap();
        let base: usize = w.tensors().iter().map(|t| t.numel()).sum();
        for kind in kinds() {
            let adapter = attach(&w, &kind, 0).unwrap();
            let enumerated: usize = adapter.tensors().iter().map(|t| t.numel()).sum();
            let count = trainable_count(&cfg, &kind);
            assert_eq!(count.trainable, enumerated, "{cfg:?} {kind}");
            let total = match kind {
                AdapterKind::LayerNorm => base,
                _ => base + enumerated,
            };
            assert_eq!(count.total, total, "{cfg:?} {kind}");
            assert_eq!(count.ratio, enumerated as f64 / total as f64);
        }
    }
}

#[test]
fn lora_count_is_rank_times_dimensions_per_target() {
    for cfg in toy_configs() {
        let w = init_model(&cfg).unwrap();
        for target in LoraTarget::ALL {
            // Stored [in×out]: m outputs are the columns, n inputs the rows.
            let (n, m) = (stored(&w.layers[0], target).rows(), stored(&w.layers[0], target).cols());
            for rank in [1, 2, 3] {
                let kind = AdapterKind::Lora {
                    rank,
                    targets: vec![target],
                };
                let adapter = attach(&w, &kind, 1).unwrap();
                let per_layer: usize = adapter.tensors().iter().map(|t| t.numel()).sum::<usize>() / cfg.n_layers;
                assert_eq!(per_layer, rank * (m + n), "{target:?} {cfg:?}");
                assert_eq!(trainable_count(&cfg, &kind).trainable, cfg.n_layers * rank * (m + n));
            }
        }
    }
}

fn kind_strategy() -> impl Strategy<Value = AdapterKind> {
    prop_oneof![
        Just(AdapterKind::Ia3),
        Just(AdapterKind::LayerNorm),
        (1usize..4, proptest::sample::subsequence(LoraTarget::ALL.to_vec(), 1..=6))
            .prop_map(|(rank, targets)| AdapterKind::Lora { rank, targets }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_assign_round_trip(kind in kind_strategy(), seed in any::<u64>(), scale in -3.0f64..3.0) {
        let w = init_model(&ModelConfig::default()).unwrap();
        let mut a = attach(&w, &kind, seed).unwrap();
        let v: Vec<f64> = (0..a.trainable_len()).map(|i| scale * (i as f64 * 0.37).sin()).collect();
        a.assign_flat(&v).unwrap();
        prop_assert_eq!(&a.flatten().0, &v);
        let again = a.unflatten(&a.flatten()).unwrap();
        prop_assert_eq!(again, a);
    }

    #[test]
    fn flatten_is_linear(kind in kind_strategy(), s in -2.0f64..2.0) {
        let w = init_model(&ModelConfig::default()).unwrap();
        let a = attach(&w, &kind, 3).unwrap();
        let n = a.trainable_len();
        let x = FlatUpdate((0..n).map(|i| (i as f64).cos()).collect());
        let y = FlatUpdate((0..n).map(|i| (i as f64 * 0.5).sin()).collect());
        let combo = x.add(&y.scaled(s)).unwrap();
        let via_params = a.unflatten(&combo).unwrap().flatten();
        prop_assert_eq!(via_params, combo);
    }

    #[test]
    fn wire_format_round_trips(values in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
        let u = FlatUpdate(values);
        let back = FlatUpdate::from_bytes(&u.to_bytes()).unwrap();
        prop_assert_eq!(back.0.len(), u.0.len());
        for (a, b) in back.0.iter().zip(&u.0) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
