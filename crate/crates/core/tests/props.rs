//! Property tests for the format, quantizer, and metric invariants.

use proptest::prelude::*;
use skelseg::data::{load_skel1, save_skel1, SkeletonSequence};
use skelseg::metrics::{edit_score, f1_at, segments};
use skelseg::quantizer::{quantize, Codebook};
use skelseg::tensor::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn skel1_roundtrip_bit_exact(
        c in 1usize..4,
        t in 1usize..12,
        v in 1usize..5,
        fps in 1.0f32..200.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..c * t * v).map(|_| rng.gen_range(-1e6..1e6)).collect();
        let seq = SkeletonSequence::new("p", c, t, v, fps, v - 1, data, None).unwrap();
        let dir = tempdir();
        let path = dir.join(format!("p{seed}.skl1"));
        save_skel1(&seq, &path).unwrap();
        let loaded = load_skel1(&path).unwrap();
        let a: Vec<u32> = seq.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = loaded.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(loaded.fps.to_bits(), seq.fps.to_bits());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn conv1d_same_length_for_any_dilation(
        b in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        t in 1usize..20,
        dilation in 1usize..6,
    ) {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![b, cin, t]));
        let w = tape.constant(Tensor::zeros(vec![cout, cin, 3]));
        let bias = tape.constant(Tensor::zeros(vec![cout]));
        let y = tape.conv1d(x, w, bias, dilation).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[b, cout, t]);
    }

    #[test]
    fn quantize_is_argmin_over_codebook(
        k in 1usize..6,
        n_patches in 1usize..12,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let dim = 3usize;
        let words: Vec<Tensor<f64>> = (0..k)
            .map(|_| Tensor::new(vec![1, dim], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let codebook = Codebook::from_words(words.clone()).unwrap();
        let data: Vec<f64> = (0..n_patches * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let patches = Tensor::new(vec![1, n_patches, 1, dim], data.clone()).unwrap();
        let (_, asg) = quantize(&patches, &codebook, &vec![true; n_patches]).unwrap();
        for pi in 0..n_patches {
            let p = &data[pi * dim..(pi + 1) * dim];
            for (wi, w) in words.iter().enumerate() {
                let d: f64 = p.iter().zip(w.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                prop_assert!(asg.dist2[pi] <= d + 1e-12);
                // Tie-break to the lowest index.
                if (d - asg.dist2[pi]).abs() < 1e-15 {
                    prop_assert!(asg.word[pi] <= wi);
                }
            }
        }
    }

    #[test]
    fn edit_and_f1_stay_in_range(
        seed in any::<u64>(),
        t in 2usize..60,
        k in 1usize..5,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let gt: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
        let e = edit_score(std::slice::from_ref(&pred), std::slice::from_ref(&gt));
        prop_assert!((0.0..=100.0).contains(&e));
        let mut prev = f64::INFINITY;
        for tau in [0.1, 0.25, 0.5] {
            let f = f1_at(std::slice::from_ref(&pred), std::slice::from_ref(&gt), tau).unwrap();
            prop_assert!((0.0..=100.0).contains(&f));
            prop_assert!(f <= prev + 1e-12);
            prev = f;
        }
        // Edit hits 100 exactly when collapsed label sequences agree.
        let same: Vec<usize> = segments(&gt).iter().map(|r| r.label).collect();
        let pred_collapsed: Vec<usize> = segments(&pred).iter().map(|r| r.label).collect();
        if e == 100.0 {
            prop_assert_eq!(&same, &pred_collapsed);
        }
        if same == pred_collapsed {
            prop_assert_eq!(e, 100.0);
        }
    }
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("skelseg-props-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
