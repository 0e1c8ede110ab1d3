//! Randomized invariants.

use loralab_core::abm::{abm_loss, masks, ActivationCapture, MaskSnapshot, SourceTag};
use loralab_core::geometry::info_loss;
use loralab_core::lora::{init_adapter, load_checkpoint, save_checkpoint, InitScheme};
use loralab_core::tensor::Tensor2;
use loralab_core::Tensor;

use proptest::prelude::*;

fn small_matrix(max_dim: usize) -> impl Strategy<Value = Tensor> {
    ((1usize..max_dim), (1usize..max_dim)).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |data| Tensor2::new(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn mask_sign_symmetry_away_from_zero(m in small_matrix(8)) {
        let cap = ActivationCapture::from_entries(
            SourceTag::Finetuned,
            vec![("l".to_string(), m.clone())],
        );
        let neg = ActivationCapture::from_entries(
            SourceTag::Finetuned,
            vec![("l".to_string(), m.scale(-1.0))],
        );
        let s = masks(&cap);
        let sn = masks(&neg);
        for (a, (b, &v)) in s.get("l").unwrap().iter()
            .zip(sn.get("l").unwrap().iter().zip(m.iter()))
        {
            if v != 0.0 {
                prop_assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn frobenius_equals_gram_trace(m in small_matrix(8)) {
        let gram = m.transpose().matmul(&m).unwrap();
        let trace: f64 = (0..m.cols()).map(|i| gram.get(i, i)).sum();
        prop_assert!((m.frobenius_sq() - trace).abs() <= 1e-12 * trace.abs().max(1.0));
    }

    #[test]
    fn hinge_is_zero_iff_every_margin_is_met(
        z in small_matrix(6),
        margin in 0.01f64..2.0,
        flip_bits in prop::collection::vec(any::<bool>(), 36),
    ) {
        let tau = Tensor2::from_fn(z.rows(), z.cols(), |i, j| {
            if flip_bits[(i * z.cols() + j) % flip_bits.len()] { 1.0 } else { -1.0 }
        });
        let cap = ActivationCapture::from_entries(
            SourceTag::Finetuned, vec![("l".to_string(), z.clone())]);
        let snap = MaskSnapshot::from_entries(vec![("l".to_string(), tau.clone())]);
        let loss = abm_loss(&cap, &snap, margin, &[1.0]).unwrap();

        let mut worst = f64::NEG_INFINITY;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                worst = worst.max(-tau.get(i, j) * z.get(i, j) + margin);
            }
        }
        prop_assert_eq!(loss == 0.0, worst <= 0.0);
    }

    #[test]
    fn checkpoint_round_trip_any_adapter(
        d in 2usize..12, k in 2usize..12, seed in any::<u64>(),
    ) {
        let rank = 1 + (seed as usize) % d.min(k);
        let ad = init_adapter::<f64>(d, k, rank, 7.5, &InitScheme::Gaussian, seed).unwrap();
        let path = std::env::temp_dir().join(format!("loralab-prop-{seed}-{d}-{k}.lora"));
        save_checkpoint(&ad, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert!(back.a().bits_eq(ad.a()));
        prop_assert!(back.b().bits_eq(ad.b()));
        prop_assert_eq!(back.rank(), ad.rank());
    }

    #[test]
    fn info_loss_is_nonnegative_and_zero_for_zero_gradient(
        g in small_matrix(7), r in 1usize..4, seed in any::<u64>(),
    ) {
        let d = g.rows();
        let r = r.min(d);
        let a0 = init_adapter::<f64>(d, d.max(r), r, 1.0, &InitScheme::Orthogonal, seed)
            .unwrap().a().clone();
        let b0 = Tensor::zeros(r, g.cols());
        let loss = info_loss(&g, &a0, &b0).unwrap();
        prop_assert!(loss >= 0.0);
        let zero = Tensor::zeros(g.rows(), g.cols());
        prop_assert_eq!(info_loss(&zero, &a0, &b0).unwrap(), 0.0);
    }
}
