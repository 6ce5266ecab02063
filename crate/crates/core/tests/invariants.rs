//! Property tests for the algebraic invariants the architecture relies on.

use proptest::prelude::*;
use tempora_core::fusion::fuse_attention;
use tempora_core::io::{degrade_flow_to_mv, mv_to_dense, BlockMotion};
use tempora_core::pipeline::{consensus, sample_segments, SampleMode};
use tempora_core::rng::SplitMix64;
use tempora_core::tensor::{Graph, Tensor};
use tempora_core::ttn::ttm_merge;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, len..=len)
}

proptest! {
    /// Adaptive fusion at (1, 0, 1) is elementwise equal to attention fusion,
    /// at the exact operation order both paths use.
    #[test]
    fn adaptive_special_case_identity(a in vec_strategy(12), b in vec_strategy(12)) {
        let mut g = Graph::<f64>::new(0);
        let av = g.constant(Tensor::from_vec(vec![12], a).unwrap());
        let bv = g.constant(Tensor::from_vec(vec![12], b).unwrap());
        let att = fuse_attention(&mut g, av, bv).unwrap();
        // Adaptive arithmetic with alpha = (1, 0, 1).
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let t1 = g.scale_var(one, av).unwrap();
        let t2 = g.scale_var(zero, bv).unwrap();
        let h = g.hadamard(av, bv).unwrap();
        let t3 = g.scale_var(one, h).unwrap();
        let p = g.add(t1, t2).unwrap();
        let ada = g.add(p, t3).unwrap();
        let (x, y) = (g.value(att).data(), g.value(ada).data());
        prop_assert!(x.iter().zip(y).all(|(p, q)| p == q));
    }

    /// With a zero residual, swapping the pair negates the merge output; with
    /// equal features the residual passes through untouched.
    #[test]
    fn merge_antisymmetry_and_passthrough(a in vec_strategy(9), b in vec_strategy(9), r in vec_strategy(9)) {
        let mut g = Graph::<f64>::new(0);
        let av = g.constant(Tensor::from_vec(vec![9], a).unwrap());
        let bv = g.constant(Tensor::from_vec(vec![9], b).unwrap());
        let rv = g.constant(Tensor::from_vec(vec![9], r).unwrap());
        let z = g.constant(Tensor::zeros(&[9]));
        let ab = ttm_merge(&mut g, av, bv, z).unwrap();
        let ba = ttm_merge(&mut g, bv, av, z).unwrap();
        for (x, y) in g.value(ab).data().iter().zip(g.value(ba).data()) {
            prop_assert_eq!(*x, -*y);
        }
        let same = ttm_merge(&mut g, av, av, rv).unwrap();
        prop_assert_eq!(g.value(same).data(), g.value(rv).data());
    }

    /// Consensus is exactly invariant under any permutation of the rows.
    #[test]
    fn consensus_permutation_invariance(
        rows in proptest::collection::vec(vec_strategy(5), 2..9),
        seed in 0u64..1000,
    ) {
        let mean = consensus(&rows).unwrap();
        let mut shuffled = rows.clone();
        let mut rng = SplitMix64::new(seed);
        rng.shuffle(&mut shuffled);
        prop_assert_eq!(consensus(&shuffled).unwrap(), mean);
    }

    /// Quantized block motion is a fixed point of upsample-then-degrade.
    #[test]
    fn degrade_after_upsample_identity(
        w in 8usize..48,
        h in 8usize..48,
        bs_pick in 0usize..3,
    ) {
        let bs = [4usize, 8, 16][bs_pick];
        let bx = w.div_ceil(bs);
        let by = h.div_ceil(bs);
        let mut rng = SplitMix64::new((w * 31 + h) as u64);
        let data: Vec<i32> = (0..bx * by * 2).map(|_| rng.below(128) as i32 - 64).collect();
        let mv = BlockMotion { width: w, height: h, block_size: bs, quant_step: 0.25, data };
        let dense = mv_to_dense(&mv);
        let back = degrade_flow_to_mv(&dense, bs, 0.25);
        prop_assert_eq!(back, mv);
    }

    /// Segment sampling: K near-equal contiguous segments covering the whole
    /// range, chosen indices inside their segments, strictly increasing.
    #[test]
    fn segment_structure(n in 2usize..200, k in 2usize..10, seed in 0u64..100) {
        prop_assume!(n >= k);
        let mut rng = SplitMix64::new(seed);
        for mode in [SampleMode::Train, SampleMode::Eval] {
            let sel = sample_segments(n, k, mode, &mut rng, 2).unwrap();
            prop_assert_eq!(sel.bounds.len(), k);
            prop_assert_eq!(sel.bounds[0].0, 0);
            prop_assert_eq!(sel.bounds[k - 1].1, n);
            for win in sel.bounds.windows(2) {
                prop_assert_eq!(win[0].1, win[1].0, "contiguous");
            }
            let sizes: Vec<usize> = sel.bounds.iter().map(|(lo, hi)| hi - lo).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1, "near-equal");
            for (idx, (lo, hi)) in sel.chosen.iter().zip(&sel.bounds) {
                prop_assert!(idx >= lo && idx < hi);
            }
            for win in sel.chosen.windows(2) {
                prop_assert!(win[0] < win[1], "strictly increasing");
            }
        }
    }
}
