//! Randomised invariants.

use hazeloop_core::downstream::{feedback_channels, iou, miou, TaskKind};
use hazeloop_core::graph::Graph;
use hazeloop_core::haze::{invert_haze, synthesize_haze, transmission, DepthMap, HazeParams, T_MIN};
use hazeloop_core::losses::mcr_loss;
use hazeloop_core::metrics::psnr;
use hazeloop_core::param::ParamStore;
use hazeloop_core::scene::BoxAnn;
use hazeloop_core::tensor::Tensor;
use hazeloop_core::tfga::{pair_softmax, Tfga};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_image(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |v| Tensor::from_vec(&[3, h, w], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haze_round_trip_where_transmission_is_guarded(
        clear in unit_image(4, 5),
        depth in prop::collection::vec(0.1f64..3.0, 20),
        beta in 0.0f64..0.99,
        a in prop::array::uniform3(0.5f64..=1.0),
    ) {
        let d = DepthMap::new(4, 5, depth).unwrap();
        let t = transmission(&d, beta).unwrap();
        prop_assume!(t.values().iter().all(|&v| v >= T_MIN));
        let p = HazeParams::new(beta, a).unwrap();
        let hazy = synthesize_haze(&clear, &d, &p).unwrap();
        let back = invert_haze(&hazy, &d, &p).unwrap();
        prop_assert!(back.max_abs_diff(&clear) <= 1e-5);
    }

    #[test]
    fn hazy_pixels_lie_between_scene_and_airlight(
        clear in unit_image(3, 3),
        depth in prop::collection::vec(0.1f64..10.0, 9),
        beta in 0.0f64..2.0,
        a in prop::array::uniform3(0.0f64..=1.0),
    ) {
        let d = DepthMap::new(3, 3, depth).unwrap();
        let hazy = synthesize_haze(&clear, &d, &HazeParams::new(beta, a).unwrap()).unwrap();
        for (i, (&h, &j)) in hazy.data().iter().zip(clear.data()).enumerate() {
            let ac = a[i / 9];
            prop_assert!(h >= j.min(ac) - 1e-12 && h <= j.max(ac) + 1e-12);
        }
    }

    #[test]
    fn pair_softmax_sums_to_one(v in prop::collection::vec(-30.0f64..30.0, 2 * 12)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[3, 2, 2], v[..12].to_vec()).unwrap());
        let b = g.constant(Tensor::from_vec(&[3, 2, 2], v[12..].to_vec()).unwrap());
        let q = pair_softmax(&mut g, a, b);
        for (x, y) in g.value(q.q_id).data().iter().zip(g.value(q.q_down).data()) {
            prop_assert!((x + y - 1.0).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn mcr_is_nonnegative_and_zero_when_ranked_with_margins(
        lw in 0.0f64..1.0, gap1 in 0.0f64..1.0, gap2 in 0.0f64..1.0,
    ) {
        let (b1, b2) = (0.1, 0.3);
        let lp = lw + gap1;
        let lh = lp + gap2;
        let m = mcr_loss(lw, lp, lh, b1, b2).unwrap();
        prop_assert!(m >= 0.0);
        if gap1 >= b1 && lh - lw >= b2 {
            prop_assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn psnr_is_symmetric(a in unit_image(2, 2), b in unit_image(2, 2)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn miou_of_identical_masks_is_one(labels in prop::collection::vec(0usize..2, 1..40)) {
        prop_assert!((miou(&labels, &labels, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        x in 0.0f64..10.0, y in 0.0f64..10.0, w in 0.1f64..5.0, h in 0.1f64..5.0,
        x2 in 0.0f64..10.0, y2 in 0.0f64..10.0, w2 in 0.1f64..5.0, h2 in 0.1f64..5.0,
    ) {
        let a = BoxAnn { x, y, w, h };
        let b = BoxAnn { x: x2, y: y2, w: w2, h: h2 };
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
    }
}

/// The branch weights stay a partition of unity through the full fusion,
/// for any input and any parameter draw.
#[test]
fn tfga_weights_partition_unity_on_random_inputs() {
    let fb: Vec<_> = TaskKind::ALL.iter().map(|&k| (k, feedback_channels(k))).collect();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tfga::new(&mut store, &mut rng, 8, &fb);
    use rand::Rng;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    for _ in 0..50 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[8, 2, 2], |_| rng.gen_range(-3.0..3.0)));
        let b = g.constant(Tensor::from_fn(&[8, 2, 2], |_| rng.gen_range(-3.0..3.0)));
        let (_, _, q) = t.fuse(&mut g, &store, a, b).unwrap();
        for (x, y) in g.value(q.q_id).data().iter().zip(g.value(q.q_down).data()) {
            assert!((x + y - 1.0).abs() <= 1e-6);
        }
    }
}
