use proptest::prelude::*;

use flattenet::io;
use flattenet::shuffle::{
    channel_shuffle, channel_shuffle_sources, connectivity_matrix, invert_permutation, permute_channels, pixel_shuffle,
    pixel_unshuffle, rearrange_r, rearrange_r_inv, RearrangeKind, RearrangeSpec, Rearrangement,
};
use flattenet::toylab::{confusion_matrix, miou, pckh};
use flattenet::Tensor;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn seeded(dims: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
    Tensor::uniform(dims, 1.0, seed)
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// block-diagonal group mask: out channel o sees input i iff same group
fn group_mask(c: usize, g: usize) -> Vec<Vec<bool>> {
    let per = c / g;
    (0..c).map(|o| (0..c).map(|i| o / per == i / per).collect()).collect()
}

fn bool_matmul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().enumerate().any(|(k, &x)| x && b[k][j])).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_shuffle_round_trips(n in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..4, w in 1usize..4, seed: u64) {
        let x = seeded((n, c * r * r, h, w), seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.dims().as_array(), [n, c, h * r, w * r]);
        prop_assert_eq!(bits(&pixel_unshuffle(&y, r).unwrap()), bits(&x));
        let z = seeded((n, c, h * r, w * r), seed ^ 1);
        prop_assert_eq!(bits(&pixel_shuffle(&pixel_unshuffle(&z, r).unwrap(), r).unwrap()), bits(&z));
    }

    #[test]
    fn channel_shuffle_is_a_permutation(c in 1usize..25, pick in 0usize..64, seed: u64) {
        let ds = divisors(c);
        let g = ds[pick % ds.len()];
        let src = channel_shuffle_sources(c, g).unwrap();
        let mut sorted = src.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..c).collect::<Vec<_>>());
        let x = seeded((2, c, 2, 3), seed);
        let y = channel_shuffle(&x, g).unwrap();
        let back = permute_channels(&y, &invert_permutation(&src)).unwrap();
        prop_assert_eq!(bits(&back), bits(&x));
        // shuffling with g then c/g restores the order
        prop_assert_eq!(bits(&channel_shuffle(&y, c / g).unwrap()), bits(&x));
    }

    #[test]
    fn rearrangement_round_trips(s2 in 1usize..4, ct in 1usize..4, h in 1usize..4, w in 1usize..4, seed: u64, kind in 0usize..3) {
        let spec = RearrangeSpec::new(s2, ct);
        let x = seeded((2, spec.stacked_channels(), h, w), seed);
        let y = rearrange_r(&x, spec).unwrap();
        prop_assert_eq!(y.dims().as_array(), [2, ct, h * s2, w * s2]);
        prop_assert_eq!(bits(&rearrange_r_inv(&y, spec).unwrap()), bits(&x));
        let kind = [RearrangeKind::ChannelShufflePixelShuffle, RearrangeKind::PixelShuffleOnly, RearrangeKind::RandPermPixelShuffle][kind];
        let r = Rearrangement::new(spec, kind, seed).unwrap();
        prop_assert_eq!(bits(&r.inverse(&r.apply(&x).unwrap()).unwrap()), bits(&x));
    }

    #[test]
    fn rearrangement_moves_every_value_once(s2 in 1usize..4, ct in 1usize..3, h in 1usize..3, w in 1usize..3) {
        let spec = RearrangeSpec::new(s2, ct);
        let dims = (1, spec.stacked_channels(), h, w);
        let n = dims.1 * h * w;
        let x = Tensor::from_vec(dims, (0..n).map(|v| v as f64).collect()).unwrap();
        let mut seen: Vec<u64> = rearrange_r(&x, spec).unwrap().data().iter().map(|&v| v as u64).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n as u64).collect::<Vec<_>>());
    }

    #[test]
    fn connectivity_matches_brute_force(c in 1usize..33, a in 0usize..64, b in 0usize..64, d in 0usize..64) {
        let ds = divisors(c);
        let (g1, g2, g3) = (ds[a % ds.len()], ds[b % ds.len()], ds[d % ds.len()]);
        let m = connectivity_matrix(g1, g2, g3, c).unwrap();
        let src = channel_shuffle_sources(c, g2).unwrap();
        let shuffle: Vec<Vec<bool>> = (0..c).map(|o| (0..c).map(|i| src[o] == i).collect()).collect();
        let expect = bool_matmul(&bool_matmul(&group_mask(c, g3), &shuffle), &group_mask(c, g1));
        for o in 0..c {
            for i in 0..c {
                prop_assert_eq!(m.get(o, i), expect[o][i], "g=({},{},{}) c={} at ({},{})", g1, g2, g3, c, o, i);
            }
        }
    }

    #[test]
    fn flt1_round_trips(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let x = seeded((n, c, h, w), seed);
        let bytes = io::encode(&x).unwrap();
        prop_assert_eq!(bytes.len(), io::HEADER_LEN + 8 * x.numel());
        prop_assert_eq!(bits(&io::decode::<f64>(&bytes).unwrap()), bits(&x));
        let y: Tensor<f32> = x.cast();
        let back = io::decode::<f32>(&io::encode(&y).unwrap()).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert!(io::decode::<f32>(&bytes).is_err());
    }

    #[test]
    fn flt1_truncation_rejected(cut in 1usize..40, seed: u64) {
        let bytes = io::encode(&seeded((1, 2, 2, 2), seed)).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(io::decode::<f64>(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn miou_matches_confusion_oracle(labels in proptest::collection::vec((0u32..2, 0u32..2), 1..400)) {
        let (pred, truth): (Vec<u32>, Vec<u32>) = labels.into_iter().unzip();
        let cm = confusion_matrix(&pred, &truth, 2).unwrap();
        // direct per-class IoU on the raw label pairs
        let mut ious = vec![];
        for k in 0..2u32 {
            let inter = pred.iter().zip(&truth).filter(|&(&p, &t)| p == k && t == k).count();
            let union = pred.iter().zip(&truth).filter(|&(&p, &t)| p == k || t == k).count();
            prop_assert_eq!(cm[k as usize][k as usize] as usize, inter);
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((miou(&pred, &truth, 2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn pckh_counts_strictly_close_points(offsets in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)) {
        let truth: Vec<(f64, f64)> = (0..offsets.len()).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let pred: Vec<(f64, f64)> = truth.iter().zip(&offsets).map(|(t, o)| (t.0 + o.0, t.1 + o.1)).collect();
        let hits = offsets.iter().filter(|o| o.0.hypot(o.1) < 3.0).count();
        let got = pckh(&pred, &truth, 6.0, 0.5).unwrap();
        prop_assert!((got - 100.0 * hits as f64 / offsets.len() as f64).abs() < 1e-9);
    }
}

#[test]
fn large_two_class_map_miou() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<u32> = (0..256 * 256).map(|_| rng.gen_range(0..2)).collect();
    let pred: Vec<u32> = (0..256 * 256).map(|_| rng.gen_range(0..2)).collect();
    let cm = confusion_matrix(&pred, &truth, 2).unwrap();
    let iou = |k: usize| cm[k][k] as f64 / (cm[k][0] + cm[k][1] + cm[0][k] + cm[1][k] - cm[k][k]) as f64;
    let got = miou(&pred, &truth, 2).unwrap();
    assert!((got - (iou(0) + iou(1)) / 2.0).abs() < 1e-12);
    // independent uniform labels: IoU of each class ≈ 1/3
    assert!((got - 1.0 / 3.0).abs() < 0.01, "{got}");
}
