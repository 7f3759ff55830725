use proptest::prelude::*;
use prosody_core::dsp::stft::{StftConfig, StftEngine};
use prosody_core::eval::{dtw_align, frame_disturbance, mcd};
use prosody_core::numerics::TensorArchive;
use prosody_core::tts::{normalize_text, text_to_ids, CHARSET};
use prosody_core::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn two_sequences() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..12, 1usize..12, 1usize..5).prop_flat_map(|(tx, ty, d)| (matrix(tx, d), matrix(ty, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_is_a_valid_monotone_path((a, b) in two_sequences()) {
        let path = dtw_align(&a, &b).unwrap();
        path.validate(a.rows(), b.rows()).unwrap();
        prop_assert!(path.len() >= a.rows().max(b.rows()));
        prop_assert!(path.len() < a.rows() + b.rows());
        prop_assert!(frame_disturbance(&path) >= 0.0);
        prop_assert!(mcd(&a, &b, &path).unwrap() >= 0.0);
    }

    #[test]
    fn alignment_cost_is_symmetric((a, b) in two_sequences()) {
        let ab = dtw_align(&a, &b).unwrap().cost;
        let ba = dtw_align(&b, &a).unwrap().cost;
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn identical_sequences_score_zero(a in (1usize..10, 1usize..5).prop_flat_map(|(t, d)| matrix(t, d))) {
        let path = dtw_align(&a, &a).unwrap();
        prop_assert_eq!(path.cost, 0.0);
        prop_assert_eq!(mcd(&a, &a, &path).unwrap(), 0.0);
        prop_assert_eq!(frame_disturbance(&path), 0.0);
    }

    #[test]
    fn archive_round_trips_bitwise(
        tensors in prop::collection::vec((1usize..4, 1usize..4).prop_flat_map(|(r, c)| matrix(r, c)), 1..5),
        step in any::<u32>(),
    ) {
        let mut archive = TensorArchive::new(serde_json::json!({ "step": step, "scale": 0.1 }));
        for (i, t) in tensors.iter().enumerate() {
            archive.push(format!("t{i}"), t.clone());
        }
        let bytes = archive.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (i, t) in tensors.iter().enumerate() {
            let r = back.get(&format!("t{i}")).unwrap();
            prop_assert_eq!(r.shape(), t.shape());
            prop_assert!(r.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn normalized_text_is_encodable_and_stable(text in "[A-Za-z0-9 ,.?!']{1,40}") {
        if let Ok(n) = normalize_text(&text) {
            prop_assert_eq!(normalize_text(&n).unwrap(), n.clone());
            prop_assert_eq!(text_to_ids(&n, CHARSET).unwrap().len(), n.chars().count());
        }
    }

    #[test]
    fn stft_inverts_inside_the_covered_region(samples in prop::collection::vec(-1.0f64..1.0, 2000..4000)) {
        let cfg = StftConfig::default();
        let engine = StftEngine::new(cfg).unwrap();
        let spec = engine.stft(&samples).unwrap();
        let back = engine.istft(&spec);
        for i in cfg.hop..back.len().min(samples.len()) - cfg.hop {
            prop_assert!((back[i] - samples[i]).abs() < 1e-9, "sample {}: {} vs {}", i, back[i], samples[i]);
        }
    }
}
