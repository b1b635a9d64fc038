//! Input features and the self-attention frame encoder.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::nn::{Fwd, Linear, TransformerLayer};
use crate::numerics::{Tensor, Var};
use crate::params::{Layout, ParamId};
use crate::perceiver::PerceiverDecoder;

/// Log-Mel bands per base frame.
pub const BASE_DIM: usize = 23;
/// Base frames taken on each side of the centre frame.
pub const CONTEXT: usize = 7;
/// Seconds between base frames.
pub const BASE_PERIOD_S: f64 = 0.01;

/// A `T × F` matrix of model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub frame_period_s: f64,
    pub recording_id: String,
}

impl FeatureSequence {
    pub fn new(features: Tensor, frame_period_s: f64, recording_id: impl Into<String>) -> Result<Self> {
        features.dims2()?;
        if !(frame_period_s > 0.0) {
            return Err(config_err!("frame period must be positive, got {frame_period_s}"));
        }
        Ok(Self {
            features,
            frame_period_s,
            recording_id: recording_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

/// Splices `±CONTEXT` neighbouring base frames around every `subsample`-th
/// frame of a `T0 × 23` matrix, zero-padding past either end. The result
/// has `ceil(T0 / subsample)` rows of `15 · 23 = 345` values.
pub fn stack_features(base: &Tensor, subsample: usize) -> Result<Tensor> {
    let (t0, dim) = base.dims2()?;
    if dim != BASE_DIM {
        return Err(Error::Format(format!(
            "base features must have {BASE_DIM} columns, got {dim}"
        )));
    }
    if subsample == 0 {
        return Err(config_err!("subsample must be at least 1"));
    }
    let width = (2 * CONTEXT + 1) * dim;
    let rows = t0.div_ceil(subsample);
    let mut out = vec![0.0; rows * width];
    for (r, centre) in (0..t0).step_by(subsample).enumerate() {
        for slot in 0..2 * CONTEXT + 1 {
            let Some(src) = (centre + slot).checked_sub(CONTEXT).filter(|&s| s < t0) else {
                continue;
            };
            let at = r * width + slot * dim;
            out[at..at + dim].copy_from_slice(base.row(src));
        }
    }
    Tensor::new(vec![rows, width], out)
}

const DPFT_MAGIC: &[u8; 4] = b"DPFT";
const DPFT_VERSION: u8 = 1;

/// Writes a feature matrix as `DPFT`: magic, version byte, `u32` rows,
/// `u32` columns, then `f32` little-endian values in row-major order.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, f) = features.dims2()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(DPFT_MAGIC).map_err(io)?;
    w.write_all(&[DPFT_VERSION]).map_err(io)?;
    w.write_all(&(t as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(f as u32).to_le_bytes()).map_err(io)?;
    for v in features.data() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 13 || &bytes[..4] != DPFT_MAGIC {
        return Err(bad("not a DPFT feature file"));
    }
    if bytes[4] != DPFT_VERSION {
        return Err(bad(&format!("unsupported DPFT version {}", bytes[4])));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[13..];
    if payload.len() != t * f * 4 {
        return Err(bad(&format!(
            "header says {t}x{f} but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, f], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub conditioning: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 128,
            num_heads: 4,
            ff_dim: 2048,
            conditioning: true,
        }
    }
}

/// Outputs of every encoder layer; the last one is the final embedding.
pub struct FrameEmbeddings<'t> {
    pub per_layer: Vec<Var<'t>>,
}

impl<'t> FrameEmbeddings<'t> {
    pub fn last(&self) -> &Var<'t> {
        self.per_layer.last().expect("at least one encoder layer")
    }
}

#[derive(Debug, Clone)]
pub struct FrameEncoder {
    input: Linear,
    layers: Vec<TransformerLayer>,
    condition: Option<ParamId>,
    feature_dim: usize,
}

impl FrameEncoder {
    pub(crate) fn new(layout: &mut Layout, cfg: &EncoderConfig, feature_dim: usize) -> Result<Self> {
        if cfg.num_layers == 0 {
            return Err(config_err!("the frame encoder needs at least one layer"));
        }
        let d = cfg.model_dim;
        let input = Linear::new(layout, "encoder.input", feature_dim, d, true);
        let layers = (0..cfg.num_layers)
            .map(|l| TransformerLayer::new(layout, &format!("encoder.layer{l}"), d, cfg.num_heads, cfg.ff_dim))
            .collect::<Result<_>>()?;
        let condition = cfg
            .conditioning
            .then(|| layout.weight("encoder.condition".into(), d, d));
        Ok(Self {
            input,
            layers,
            condition,
            feature_dim,
        })
    }

    /// `E⁽⁰⁾ = X W_in + b_in`, then each layer applied to its input plus the
    /// frame-speaker conditioning `σ(E Aᵀ) A W_c` with `A` decoded from `E`.
    pub fn encode<'t>(
        &self,
        f: &Fwd<'t, '_>,
        x: &Var<'t>,
        decoder: &PerceiverDecoder,
    ) -> Result<FrameEmbeddings<'t>> {
        let (_, cols) = x.dims2()?;
        if cols != self.feature_dim {
            return Err(config_err!(
                "features have {cols} columns, the model expects {}",
                self.feature_dim
            ));
        }
        let mut e = self.input.forward(f, x)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = match self.condition {
                Some(w_c) => {
                    let a = decoder.decode(f, &e)?.attractors;
                    let activity = e.matmul_t(&a)?.sigmoid();
                    e.add(&activity.matmul(&a)?.matmul(f.p(w_c))?)?
                }
                None => e,
            };
            e = layer.forward(f, &input)?;
            per_layer.push(e.clone());
        }
        Ok(FrameEmbeddings { per_layer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t0: usize) -> Tensor {
        let data = (0..t0 * BASE_DIM).map(|i| (i / BASE_DIM + 1) as f64).collect();
        Tensor::new(vec![t0, BASE_DIM], data).unwrap()
    }

    #[test]
    fn stacking_shapes() {
        assert_eq!(stack_features(&ramp(100), 10).unwrap().shape(), &[10, 345]);
        assert_eq!(stack_features(&ramp(100), 5).unwrap().shape(), &[20, 345]);
        assert_eq!(stack_features(&ramp(101), 10).unwrap().shape(), &[11, 345]);
    }

    #[test]
    fn single_base_frame_is_mostly_padding() {
        let s = stack_features(&ramp(1), 10).unwrap();
        assert_eq!(s.shape(), &[1, 345]);
        let slots: Vec<bool> = s
            .data()
            .chunks(BASE_DIM)
            .map(|c| c.iter().all(|&v| v == 0.0))
            .collect();
        assert_eq!(slots.iter().filter(|&&z| z).count(), 14);
        assert!(!slots[CONTEXT]);
    }

    #[test]
    fn context_slots_hold_neighbours() {
        let s = stack_features(&ramp(40), 10).unwrap();
        // Row 1 is centred on base frame 10 (value 11); slot k holds frame 3 + k.
        for k in 0..15 {
            assert_eq!(s.get(1, k * BASE_DIM), (3 + k + 1) as f64);
        }
    }

    #[test]
    fn wrong_width_is_a_format_error() {
        let t = Tensor::zeros(vec![5, 24]);
        assert!(matches!(stack_features(&t, 10), Err(Error::Format(_))));
    }

    #[test]
    fn dpft_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dpft");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3_f32 as f64, 7.0]).unwrap();
        write_features(&path, &t).unwrap();
        assert_eq!(read_features(&path).unwrap(), t);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }
}
