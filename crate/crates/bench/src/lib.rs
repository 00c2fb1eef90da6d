//! Fixtures shared by the benchmarks.

use maskaudit::metrics::{EvalSample, ScoredPrediction};
use maskaudit::perturb::{LabelRules, MaskType, QualityLabel};
use maskaudit::BinaryMask;

/// A filled ellipse with a notch, roughly `w/3` by `h/4` radii.
pub fn blob(w: usize, h: usize) -> BinaryMask {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (rx, ry) = (w as f64 / 3.0, h as f64 / 4.0);
    BinaryMask::from_fn(w, h, |x, y| {
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        let notch = x as f64 > cx && (y as f64 - cy).abs() < ry / 6.0;
        dx * dx + dy * dy <= 1.0 && !notch
    })
    .expect("non-empty canvas")
}

/// `n` labelled samples cycling through every mask type, with predictions
/// perturbed deterministically.
pub fn eval_fixture(n: usize, videos: usize) -> Vec<EvalSample> {
    let rules = LabelRules::default();
    let ious = [1.0, 0.87, 0.77, 0.86, 0.78, 0.88, 0.76, 0.6, 0.0];
    let types = [
        MaskType::Perfect,
        MaskType::Cutout,
        MaskType::Cutout,
        MaskType::Dilate,
        MaskType::Dilate,
        MaskType::Erode,
        MaskType::Erode,
        MaskType::Merge,
        MaskType::FullNeg,
    ];
    (0..n)
        .map(|i| {
            let k = i % types.len();
            let label: QualityLabel = rules.label(types[k], ious[k]).expect("admissible");
            let mut prediction = ScoredPrediction::exact(&label);
            prediction.iou = (label.iou + ((i * 37 % 11) as f64 - 5.0) / 100.0).clamp(0.0, 1.0);
            if i % 7 == 0 {
                prediction.mask_type = Some(types[(k + 1) % types.len()]);
            }
            EvalSample {
                split: if i % 2 == 0 {
                    "test_seen"
                } else {
                    "test_unseen"
                }
                .into(),
                video: format!("v{}", i % videos.max(1)),
                label,
                prediction,
            }
        })
        .collect()
}
