use diaper_core::eda::{eend_eda_layout, EdaConfig};
use diaper_core::frame_encoder::EncoderConfig;
use diaper_core::model::count_params;
use diaper_core::ModelConfig;

const FEATURES: usize = 345;

/// Closed-form size of a post-norm transformer encoder with an input
/// projection and no final norm.
fn encoder_tally(d: usize, layers: usize, ff: usize) -> usize {
    let input = FEATURES * d + d;
    let attention = 4 * (d * d + d);
    let feed_forward = d * ff + ff + ff * d + d;
    let norms = 2 * 2 * d;
    input + layers * (attention + feed_forward + norms)
}

/// Two single-bias LSTMs of input `d`, hidden `h`, an optional `h -> d`
/// projection and a linear existence head.
fn eda_tally(d: usize, h: usize) -> usize {
    let lstm = 4 * h * (d + h) + 4 * h;
    let proj = if h == d { 0 } else { h * d + d };
    2 * lstm + proj + d + 1
}

fn eend_eda(d: usize, h: usize) -> usize {
    let enc = EncoderConfig {
        model_dim: d,
        ..EncoderConfig::default()
    };
    let eda = EdaConfig {
        hidden_dim: h,
        ..EdaConfig::default()
    };
    eend_eda_layout(&enc, FEATURES, &eda).unwrap().0.num_scalars()
}

#[test]
fn eend_eda_at_width_256_has_6_4_million() {
    let n = eend_eda(256, 256);
    assert_eq!(n, encoder_tally(256, 4, 2048) + eda_tally(256, 256));
    assert_eq!(n, 6_399_745);
}

#[test]
fn eend_eda_matches_the_tally_when_widths_differ() {
    assert_eq!(eend_eda(128, 256), encoder_tally(128, 4, 2048) + eda_tally(128, 256));
    assert_eq!(eend_eda(64, 64), encoder_tally(64, 4, 2048) + eda_tally(64, 64));
}

#[test]
fn eend_eda_at_width_256_is_larger_than_the_reference_model() {
    let diaper = count_params(&ModelConfig::default()).unwrap().total;
    let eda = eend_eda(256, 256);
    eprintln!("reference model {diaper}, eend-eda at 256 {eda}, eend-eda at 128 {}", eend_eda(128, 128));
    assert!(eda > diaper);
}

#[test]
fn reference_total_rounds_to_4_3_million_and_stays_below_4_6() {
    let total = count_params(&ModelConfig::default()).unwrap().total as f64;
    assert_eq!((total / 1e5).round(), 43.0);
    let gap = 4.6e6 - total;
    eprintln!("4.6 M exceeds the reference count by {gap:.0}");
    assert!(gap > 0.05 * 4.6e6);
}
