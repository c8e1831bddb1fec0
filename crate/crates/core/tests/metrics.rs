use proptest::prelude::*;

use pspdet_core::detector::Detection;
use pspdet_core::eval::{ap50, average_precision, centroid_accuracy, iou, GroundTruth};
use pspdet_core::world::CellBox;
use pspdet_core::Tensor;

fn cell_box() -> impl Strategy<Value = CellBox> {
    (0usize..8, 0usize..8, 1usize..5, 1usize..5).prop_map(|(x, y, w, h)| CellBox::new(x, y, x + w, y + h))
}

fn hits_below(n_gt: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 0..12)
        .prop_filter("room for one more true positive", move |h| h.iter().filter(|&&t| t).count() < n_gt)
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in cell_box(), b in cell_box()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), iou(&b, &a).unwrap().to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn true_positive_on_top_never_lowers_ap((n_gt, hits) in (1usize..6).prop_flat_map(|n| (Just(n), hits_below(n)))) {
        let before = average_precision(&hits, n_gt);
        let mut more = vec![true];
        more.extend(&hits);
        prop_assert!(average_precision(&more, n_gt) >= before);
    }

    #[test]
    fn false_positive_at_bottom_leaves_ap_unchanged(
        gts in prop::collection::vec((0u64..3, cell_box()), 1..6),
        dets in prop::collection::vec((0u64..3, cell_box(), 0.05f64..1.0), 0..10),
    ) {
        let gts: Vec<GroundTruth> = gts
            .into_iter()
            .map(|(scene_id, cell_box)| GroundTruth { scene_id, class_id: 0, cell_box })
            .collect();
        let mut dets: Vec<Detection> = dets
            .into_iter()
            .map(|(scene_id, cell_box, confidence)| Detection { scene_id, class_id: 0, cell_box, confidence })
            .collect();
        let before = ap50(&dets, &gts)[&0];
        dets.push(Detection { scene_id: 99, class_id: 0, cell_box: CellBox::new(0, 0, 1, 1), confidence: 0.01 });
        let after = ap50(&dets, &gts)[&0];
        prop_assert_eq!(after.to_bits(), before.to_bits());
    }

    #[test]
    fn centroid_accuracy_ignores_row_order(
        (rows, perm) in (4usize..12).prop_flat_map(|n| (
            prop::collection::vec((0usize..3, prop::collection::vec(-4i32..5, 3)), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )),
    ) {
        let labels: Vec<usize> = rows.iter().map(|(c, _)| *c).collect();
        prop_assume!(labels.iter().any(|&c| c != labels[0]));
        let values: Vec<f64> = rows.iter().flat_map(|(_, v)| v.iter().map(|&x| f64::from(x))).collect();
        let x = Tensor::matrix(rows.len(), 3, values).unwrap();
        let acc = centroid_accuracy(&x, &labels).unwrap();
        let permuted_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let acc_p = centroid_accuracy(&x.select_rows(&perm).unwrap(), &permuted_labels).unwrap();
        prop_assert_eq!(acc.to_bits(), acc_p.to_bits());
    }
}
