use diaper_core::frame_encoder::stack_features;
use diaper_core::inference::median_filter;
use diaper_core::rttm::{format_rttm, parse_rttm_str};
use diaper_core::{der, Segment, SegmentList, Tensor};
use proptest::prelude::*;

fn segments() -> impl Strategy<Value = SegmentList> {
    prop::collection::vec((0usize..3, 0u32..5000, 1u32..3000), 0..12).prop_map(|raw| SegmentList {
        recording_id: "r".into(),
        segments: raw
            .into_iter()
            .map(|(s, on, dur)| Segment {
                speaker: format!("s{s}"),
                onset: on as f64 / 1000.0,
                duration: dur as f64 / 1000.0,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn median_filter_keeps_length_and_is_symmetric(col in prop::collection::vec(any::<bool>(), 0..200), half in 0usize..7) {
        let w = 2 * half + 1;
        let out = median_filter(&col, w).unwrap();
        prop_assert_eq!(out.len(), col.len());
        let mut rev = col.clone();
        rev.reverse();
        let mut out_rev = median_filter(&rev, w).unwrap();
        out_rev.reverse();
        prop_assert_eq!(&out, &out_rev);
        // complementing the input complements the output
        let neg: Vec<bool> = col.iter().map(|b| !b).collect();
        let out_neg = median_filter(&neg, w).unwrap();
        prop_assert!(out.iter().zip(&out_neg).all(|(a, b)| a != b));
    }

    #[test]
    fn rttm_text_round_trips_millisecond_segments(list in segments()) {
        let parsed = parse_rttm_str(&format_rttm(&list), "t").unwrap();
        let back = parsed.get("r").cloned().unwrap_or_else(|| SegmentList::new("r"));
        prop_assert_eq!(back.segments.len(), list.segments.len());
        for (a, b) in list.segments.iter().zip(&back.segments) {
            prop_assert_eq!(&a.speaker, &b.speaker);
            prop_assert!((a.onset - b.onset).abs() < 1e-9 && (a.duration - b.duration).abs() < 1e-9);
        }
    }

    #[test]
    fn der_components_are_consistent(r in segments(), h in segments(), collar in 0.0f64..0.5) {
        let d = der(&r, &h, collar).unwrap();
        prop_assert!(d.miss >= 0.0 && d.fa >= 0.0 && d.confusion >= 0.0);
        prop_assert!((d.der - d.miss - d.fa - d.confusion).abs() < 1e-9);
        prop_assert!(d.miss <= 1.0 + 1e-9 && d.confusion <= 1.0 + 1e-9);
        if !r.segments.is_empty() {
            prop_assert_eq!(der(&r, &r, collar).unwrap().der, 0.0);
        }
    }

    #[test]
    fn stacking_covers_every_subsampled_frame(t0 in 0usize..60, sub in 1usize..12) {
        let base = Tensor::new(vec![t0, 23], (0..t0 * 23).map(|i| i as f64 + 1.0).collect()).unwrap();
        let x = stack_features(&base, sub).unwrap();
        prop_assert_eq!(x.rows(), t0.div_ceil(sub));
        prop_assert_eq!(x.cols(), 345);
        for r in 0..x.rows() {
            // the centre slot holds the subsampled base frame
            prop_assert_eq!(&x.row(r)[7 * 23..8 * 23], base.row(r * sub));
        }
    }
}
