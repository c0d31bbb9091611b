mod common;

use common::{assert_mixed, masked_net};
use lapp::flops::BypassKind;
use lapp::network::{ArchName, ConvUnit};
use lapp::surgery::{convert, convert_with_masks, equivalence_check_random, SurgeryManifest};

#[test]
fn resnet20_single_precision_logits_survive_surgery() {
    let mut masked = masked_net::<f32>(ArchName::Resnet20, 0.4, BypassKind::V2, 3);
    assert_mixed(&masked);
    let mut compact = convert(&masked).unwrap();
    assert!(compact.is_compact() && !compact.has_sbc());
    let dev = equivalence_check_random(&mut masked, &mut compact, 64, 17).unwrap();
    assert!(dev <= 1e-4, "max deviation {dev}");
    assert_eq!(compact.structural_flops(), masked.masked_flops().unwrap());
    assert_eq!(compact.structural_params(), masked.masked_params().unwrap());
}

#[test]
fn double_precision_is_tighter() {
    let mut masked = masked_net::<f64>(ArchName::ResnetTiny, 0.6, BypassKind::V2, 5);
    let mut compact = convert(&masked).unwrap();
    let dev = equivalence_check_random(&mut masked, &mut compact, 16, 2).unwrap();
    assert!(dev <= 1e-10, "max deviation {dev}");
}

#[test]
fn v1_and_half_width_bypasses() {
    for (kind, c) in [(BypassKind::V1, 0.4), (BypassKind::V2, 0.18)] {
        let mut masked = masked_net::<f32>(ArchName::ResnetTiny, c, kind, 9);
        let mut compact = convert(&masked).unwrap();
        let dev = equivalence_check_random(&mut masked, &mut compact, 16, 4).unwrap();
        assert!(dev <= 1e-4, "{kind} C={c}: {dev}");
        assert_eq!(compact.structural_flops(), masked.masked_flops().unwrap());
    }
}

#[test]
fn fully_pruned_and_fully_kept_layers() {
    let mut masked = masked_net::<f64>(ArchName::ResnetTiny, 0.6, BypassKind::V2, 12);
    let mut masks: Vec<Vec<bool>> = masked.sbc_modules().map(|m| m.mask.hard_bits()).collect();
    masks[0].iter_mut().for_each(|b| *b = false);
    masks[1].iter_mut().for_each(|b| *b = true);
    for (m, bits) in masked.sbc_modules_mut().zip(&masks) {
        m.freeze_mask(bits).unwrap();
    }
    let mut compact = convert_with_masks(&masked, &masks).unwrap();
    assert_eq!(compact.kept_counts()[0], 0);
    let dev = equivalence_check_random(&mut masked, &mut compact, 8, 1).unwrap();
    assert!(dev <= 1e-10, "{dev}");
    assert_eq!(compact.structural_flops(), masked.masked_flops().unwrap());
}

#[test]
fn compact_weights_are_the_gathered_rows() {
    let masked = masked_net::<f64>(ArchName::ResnetTiny, 0.6, BypassKind::V2, 14);
    let compact = convert(&masked).unwrap();
    for ((_, a), (_, b)) in masked.prunable_units().zip(compact.prunable_units()) {
        let (ConvUnit::Sbc(m), ConvUnit::Compact(c)) = (a, b) else { panic!("unexpected unit kinds") };
        let kept: Vec<usize> = m.mask.hard_bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        assert_eq!(c.kept, kept);
        let scattered = c.scattered_weights();
        for (o, row) in scattered.outer_iter().enumerate() {
            let orig = m.sparse.conv.weight.value.index_axis(ndarray::Axis(0), o);
            if kept.contains(&o) {
                assert!(row.iter().zip(orig.iter()).all(|(p, q)| p == q));
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn manifest_reports_reductions() {
    let masked = masked_net::<f32>(ArchName::Resnet20, 0.4, BypassKind::V2, 21);
    let compact = convert(&masked).unwrap();
    let man = SurgeryManifest::build(&compact).unwrap();
    assert_eq!(man.modules.len(), 18);
    assert_eq!(man.flops_baseline, 40_813_184);
    assert_eq!(man.flops_compact, masked.masked_flops().unwrap());
    for (e, k) in man.modules.iter().zip(masked.kept_counts()) {
        assert_eq!(e.kept, k);
        assert_eq!(e.kept_indices.len(), k);
        assert!((e.rate - (1.0 - k as f64 / e.c_out as f64)).abs() < 1e-15);
    }
    let json = serde_json::to_string(&man).unwrap();
    let back: SurgeryManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back, man);
}

#[test]
fn wrong_mask_is_detected() {
    let mut masked = masked_net::<f32>(ArchName::ResnetTiny, 0.6, BypassKind::V2, 8);
    let mut masks: Vec<Vec<bool>> = masked.sbc_modules().map(|m| m.mask.hard_bits()).collect();
    let flip = masks[2].iter().position(|&b| b).unwrap();
    masks[2][flip] = false;
    let mut wrong = convert_with_masks(&masked, &masks).unwrap();
    let dev = equivalence_check_random(&mut masked, &mut wrong, 8, 1).unwrap();
    assert!(dev > 1e-3, "a dropped filter went unnoticed: {dev}");
}
