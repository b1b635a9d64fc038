mod common;

use common::{brute_der, random_instance, random_segments, realistic_instance, seg};
use diaper_core::scoring::{score_all, vad_osd_pr};
use diaper_core::frame_encoder::BASE_PERIOD_S;
use diaper_core::simdata::simulate_set;
use diaper_core::{der, ScConfig, Segment, SegmentList};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn list(segments: Vec<Segment>) -> SegmentList {
    SegmentList {
        recording_id: "r".into(),
        segments,
    }
}


fn check_against_oracle(instances: impl Iterator<Item = (SegmentList, SegmentList, f64)>, step_s: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, h, c) in instances {
        let exact = der(&r, &h, c).unwrap();
        let oracle = brute_der(&r, &h, c, step_s);
        worst = worst.max((exact.der - oracle).abs());
        assert!(
            (exact.der - oracle).abs() < 1e-3,
            "der {} vs oracle {oracle} at collar {c}\nref {r:?}\nhyp {h:?}",
            exact.der
        );
        assert!((exact.der - (exact.miss + exact.fa + exact.confusion)).abs() < 1e-9);
        assert!(exact.miss >= 0.0 && exact.fa >= 0.0 && exact.confusion >= 0.0);
    }
    worst
}

#[test]
fn matches_millisecond_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let worst = check_against_oracle((0..200).map(|_| realistic_instance(&mut rng)), 1e-3);
    eprintln!("largest deviation from the 1 ms oracle: {worst:.2e}");
}

#[test]
fn matches_fine_oracle_on_adversarial_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let worst = check_against_oracle((0..40).map(|_| random_instance(&mut rng)), 1e-5);
    eprintln!("largest deviation from the 10 us oracle: {worst:.2e}");
}

#[test]
fn hand_examples_are_exact() {
    let r = list(vec![seg("spk1", 0.0, 10.0)]);
    let d = der(&r, &list(vec![seg("a", 0.0, 9.0)]), 0.0).unwrap();
    assert!((d.miss - 0.1).abs() < 1e-12 && d.fa == 0.0 && d.confusion == 0.0);
    assert!((d.der - 0.1).abs() < 1e-12);
    let d = der(&r, &list(vec![seg("a", 0.0, 5.0), seg("b", 5.0, 10.0)]), 0.0).unwrap();
    assert!((d.confusion - 0.5).abs() < 1e-12 && d.miss == 0.0 && d.fa == 0.0);
    assert_eq!(der(&r, &r, 0.0).unwrap().der, 0.0);
}

#[test]
fn invariant_to_relabeling_and_splitting() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (r, h, c) = random_instance(&mut rng);
        let base = der(&r, &h, c).unwrap().der;

        let mut renamed = h.clone();
        let names = h.speakers();
        let perm = common::shuffled(&mut rng, names.len());
        for s in &mut renamed.segments {
            let i = names.iter().position(|n| *n == s.speaker).unwrap();
            s.speaker = format!("other{}", perm[i]);
        }
        assert!((der(&r, &renamed, c).unwrap().der - base).abs() < 1e-9);

        let mut split = h.clone();
        split.segments = h
            .segments
            .iter()
            .flat_map(|s| {
                let cut = s.onset + s.duration * rng.random_range(0.1..0.9);
                [seg(&s.speaker, s.onset, cut), seg(&s.speaker, cut, s.end())]
            })
            .collect();
        assert!((der(&r, &split, c).unwrap().der - base).abs() < 1e-9);
    }
}

#[test]
fn collar_forgives_boundary_errors_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let r = random_segments(&mut rng, "r", "ref", 2, 10.0, 0.5..2.0);
        // hypothesis = reference with every boundary shifted by up to 0.2 s
        let mut h = r.clone();
        for s in &mut h.segments {
            let a = s.onset + rng.random_range(-0.2..0.2);
            let b = s.end() + rng.random_range(-0.2..0.2);
            s.onset = a.max(0.0);
            s.duration = (b - s.onset).max(0.01);
        }
        let mut prev = f64::INFINITY;
        for c in [0.0, 0.05, 0.1, 0.15, 0.2, 0.25] {
            let d = der(&r, &h, c).unwrap().der;
            assert!(d <= prev + 1e-12, "collar {c}: {d} > {prev}");
            prev = d;
        }
        assert!(prev < 1e-9, "errors within the collar remain: {prev}");
    }
}

#[test]
fn reference_scores_zero_against_itself_on_generated_sets() {
    for (seed, speakers) in [(1, 1), (2, 2), (3, 3), (4, 5)] {
        let cfg = ScConfig {
            min_speakers: 1,
            max_speakers: speakers,
            duration_s: 30.0,
            seed,
            ..ScConfig::default()
        };
        let set = simulate_set(&cfg, "x", 5).unwrap();
        let refs: std::collections::BTreeMap<_, _> = set
            .iter()
            .map(|r| (r.id.clone(), r.labels.to_segments(&r.id, BASE_PERIOD_S)))
            .collect();
        for c in [0.0, 0.25] {
            for (_, report) in score_all(&refs, &refs, c).unwrap() {
                assert_eq!(report.der, 0.0);
            }
        }
        for r in refs.values() {
            let p = vad_osd_pr(r, r, 0.01);
            assert_eq!((p.vad.precision, p.vad.recall), (1.0, 1.0));
        }
    }
}

