//! Property tests for structural invariants.

use proptest::prelude::*;

use vox4d::backbone::layout::WindowLayout;
use vox4d::harness::{frame_window_indices, FrameMode, LabelCodec};
use vox4d::pretrain::redundancy::{clamp01, OmegaSets, RedundancyContext};
use vox4d::rng::Rng;

mod window_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_reverse_is_identity(
            gt in 1usize..5, gx in 1usize..7, gy in 1usize..7, gz in 1usize..7,
            wt in 1usize..4, wx in 1usize..4, wy in 1usize..4, wz in 1usize..4,
            shifted in any::<bool>(),
        ) {
            let grid = [gt, gx, gy, gz];
            let layout = WindowLayout::new(grid, [wt, wx, wy, wz], shifted);
            let n: usize = grid.iter().product();
            // simulate the gather on token ids
            let part: Vec<isize> = layout.partition_index().to_vec();
            for (tok, &ws) in layout.reverse_index().iter().enumerate() {
                prop_assert_eq!(part[ws as usize], tok as isize);
            }
            // each real token lands in exactly one slot
            let mut seen = vec![0u8; n];
            for &v in &part {
                if v >= 0 {
                    seen[v as usize] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}

mod volume_props {
    use super::*;
    use vox4d::volume::preprocess::{crop_or_pad, resample_trilinear};
    use vox4d::volume::Volume4D;

    fn small_volume(seed: u64, dims: (usize, usize, usize, usize)) -> Volume4D {
        let mut rng = Rng::new(seed, 0);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        Volume4D::new(dims, (2.0, 2.0, 2.0), 1.0, data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pad_then_crop_roundtrips(
            seed in 0u64..1000,
            x in 1usize..6, y in 1usize..6, z in 1usize..6,
            px in 0usize..4, py in 0usize..4, pz in 0usize..4,
        ) {
            let v = small_volume(seed, (2, x, y, z));
            let big = crop_or_pad(&v, (x + px, y + py, z + pz)).unwrap();
            let back = crop_or_pad(&big, (x, y, z)).unwrap();
            prop_assert_eq!(back.data, v.data);
        }

        #[test]
        fn resample_identity_value_preserving(
            seed in 0u64..1000,
            t in 1usize..4, x in 2usize..5, y in 2usize..5, z in 2usize..5,
        ) {
            let v = small_volume(seed, (t, x, y, z));
            let out = resample_trilinear(&v, v.spacing_mm, v.tr_seconds).unwrap();
            prop_assert_eq!(out.dims, v.dims);
            for (a, b) in out.data.iter().zip(&v.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

mod softmax_props {
    use super::*;
    use vox4d::tensor::{Tape, Tensor};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rows_are_distributions(vals in proptest::collection::vec(-50f64..50.0, 4..64)) {
            let d = 4;
            let rows = vals.len() / d;
            if rows == 0 {
                return Ok(());
            }
            let tape: Tape<f64> = Tape::new();
            let x = Tensor::from_f64s(&vals[..rows * d], &[rows, d]).unwrap();
            let y = tape.softmax_rows(&x).unwrap();
            for r in 0..rows {
                let row = &y.data()[r * d..(r + 1) * d];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}

mod codec_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn regression_roundtrip(
            targets in proptest::collection::vec(
                proptest::collection::vec(-100f64..100.0, 2), 3..20)
        ) {
            let codec = LabelCodec::fit_regression(&targets).unwrap();
            for t in &targets {
                let enc = codec.encode(None, Some(t)).unwrap();
                match codec.decode(&enc) {
                    vox4d::harness::DecodedPrediction::Values(v) => {
                        for (a, b) in v.iter().zip(t) {
                            prop_assert!((a - b).abs() < 1e-6);
                        }
                    }
                    _ => prop_assert!(false),
                }
            }
        }
    }
}

mod frame_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn window_length_is_exactly_k(t_len in 1usize..200, k in 1usize..80, seed in 0u64..500) {
            let mut rng = Rng::new(seed, 0);
            for mode in [FrameMode::FirstKEval, FrameMode::RandomTrain] {
                let idx = frame_window_indices(t_len, k, mode, &mut rng).unwrap();
                prop_assert_eq!(idx.len(), k);
                prop_assert!(idx.iter().all(|&i| i < t_len));
            }
        }
    }
}

mod dropout_props {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn w_nonnegative_zero_outside_sets(
            frames in 2usize..4, locs in 2usize..6, seed in 0u64..500,
        ) {
            let n = frames * locs;
            let ids: Vec<Option<(usize, usize)>> =
                (0..n).map(|s| Some((s / locs, s % locs))).collect();
            let sets = OmegaSets::from_ids(&ids);
            let mut rng = Rng::new(seed, 0);
            let logits: Vec<f64> = (0..n * n).map(|_| rng.normal() * 2.0).collect();
            let ctx = RedundancyContext::from_logits(&logits, n, sets.clone());
            let w = ctx.dropout_probabilities();
            for i in 0..n {
                for j in 0..n {
                    let v = w[i * n + j];
                    prop_assert!(v >= 0.0);
                    let eligible = sets.omega_s[i].contains(&j) || sets.omega_t[i].contains(&j);
                    if !eligible {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
            ctx.validate(&clamp01(&w)).unwrap();
        }
    }
}
