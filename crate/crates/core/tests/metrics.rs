use ovcd::dataset::CategoryVocabulary;
use ovcd::eval::{ConfusionAccumulator, EvalMode};
use ovcd::mask::LabelRaster;

/// Feeds one class's counts through a 1x1000 raster pair so that
/// tp/(tp+fp+fn) equals `iou` percent exactly.
fn add_class(acc: &mut ConfusionAccumulator, class: u32, iou: f64) {
    let tp = (iou * 10.0).round() as usize;
    let fp = (1000 - tp) / 2;
    let mut pred = vec![0u32; 1000];
    let mut gt = vec![0u32; 1000];
    pred[..tp + fp].iter_mut().for_each(|l| *l = class);
    gt[..tp].iter_mut().for_each(|l| *l = class);
    gt[tp + fp..].iter_mut().for_each(|l| *l = class);
    acc.add_labels(&LabelRaster::from_labels(1, 1000, pred).unwrap(), &LabelRaster::from_labels(1, 1000, gt).unwrap())
        .unwrap();
}

#[test]
fn absent_class_enters_the_average_as_zero() {
    // Hi-UCD mini per-class row; bridge is printed as a dash (score near zero)
    let names = ["water", "ground", "building", "greenhouse", "road", "bridge", "bareland", "woodland"];
    let ious = [2.9, 26.6, 26.5, 15.1, 18.2, f64::NAN, 24.2, 1.7];
    let vocab = CategoryVocabulary::new(names).unwrap();
    let mut acc = ConfusionAccumulator::new(names.len());
    for (c, &iou) in ious.iter().enumerate() {
        if !iou.is_nan() {
            add_class(&mut acc, c as u32 + 1, iou);
        }
    }
    let r = acc.finalize(&vocab, EvalMode::Standard).unwrap();
    assert_eq!(r.classes[5].iou, 0.0);
    assert_eq!(r.classes[5].f1, 0.0);
    // printed averages: 14.4 mIoU, 23.6 mF1
    assert!((r.miou.unwrap() - 14.4).abs() < 0.05, "{:?}", r.miou);
    assert!((r.mf1.unwrap() - 23.6).abs() < 0.05, "{:?}", r.mf1);
}

#[test]
fn second_multiclass_average_matches_printed_row() {
    let names = ["water", "ground", "low vegetation", "tree", "building", "playground"];
    let ious = [17.5, 30.2, 23.0, 20.9, 42.4, 37.3];
    let vocab = CategoryVocabulary::new(names).unwrap();
    let mut acc = ConfusionAccumulator::new(names.len());
    for (c, &iou) in ious.iter().enumerate() {
        add_class(&mut acc, c as u32 + 1, iou);
    }
    let r = acc.finalize(&vocab, EvalMode::Standard).unwrap();
    // printed averages: 28.6 mIoU, 43.7 mF1
    assert!((r.miou.unwrap() - 28.55).abs() < 0.01);
    assert!((r.mf1.unwrap() - 43.7).abs() < 0.1, "{:?}", r.mf1);
}
