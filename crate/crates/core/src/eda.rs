//! Forward-only LSTM encoder-decoder attractors (EEND-EDA), kept as the
//! baseline for runtime and speaker-counting comparisons.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::frame_encoder::{EncoderConfig, FrameEncoder};
use crate::numerics::{gemm, sigmoid, Tensor};
use crate::params::{Layout, ModelParams, ParamId};

#[derive(Debug, Clone, PartialEq)]
pub struct EdaConfig {
    pub hidden_dim: usize,
    pub max_attractors: usize,
    pub shuffle_frames: bool,
    pub existence_threshold: f64,
}

impl Default for EdaConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            max_attractors: 10,
            shuffle_frames: true,
            existence_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

impl Lstm {
    fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: layout.weight(format!("{name}.w_ih"), input, 4 * hidden),
            w_hh: layout.weight(format!("{name}.w_hh"), hidden, 4 * hidden),
            bias: layout.constant(format!("{name}.bias"), vec![4 * hidden], 0.0),
        }
    }
}

/// One LSTM step from precomputed input contributions `gates_in`
/// (`x W_ih + b`, gate order input, forget, candidate, output).
fn lstm_step(gates_in: &[f64], w_hh: &[f64], h: &mut [f64], c: &mut [f64], scratch: &mut [f64]) {
    let hidden = h.len();
    scratch.copy_from_slice(gates_in);
    for (k, &hk) in h.iter().enumerate() {
        if hk != 0.0 {
            let row = &w_hh[k * 4 * hidden..(k + 1) * 4 * hidden];
            scratch.iter_mut().zip(row).for_each(|(s, w)| *s += hk * w);
        }
    }
    for j in 0..hidden {
        let i = sigmoid(scratch[j]);
        let f = sigmoid(scratch[hidden + j]);
        let g = scratch[2 * hidden + j].tanh();
        let o = sigmoid(scratch[3 * hidden + j]);
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

/// Attractors accepted before the existence probability first fell below
/// the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EdaOutput {
    /// `k × D`, `k ≤ max_attractors`
    pub attractors: Tensor,
    pub existence: Vec<f64>,
    /// Encoder state after the last frame.
    pub final_state: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EdaDecoder {
    cfg: EdaConfig,
    dim: usize,
    encoder: Lstm,
    decoder: Lstm,
    proj: Option<(ParamId, ParamId)>,
    exist: (ParamId, ParamId),
}

impl EdaDecoder {
    pub fn new(layout: &mut Layout, cfg: EdaConfig, dim: usize) -> Result<Self> {
        if cfg.hidden_dim == 0 || dim == 0 {
            return Err(config_err!("hidden and embedding sizes must be positive"));
        }
        let h = cfg.hidden_dim;
        let encoder = Lstm::new(layout, "eda.encoder", dim, h);
        let decoder = Lstm::new(layout, "eda.decoder", dim, h);
        let proj = (h != dim).then(|| {
            (
                layout.weight("eda.proj.w".into(), h, dim),
                layout.constant("eda.proj.b".into(), vec![dim], 0.0),
            )
        });
        let exist = (
            layout.weight("eda.exist.w".into(), dim, 1),
            layout.constant("eda.exist.b".into(), vec![1], 0.0),
        );
        Ok(Self {
            cfg,
            dim,
            encoder,
            decoder,
            proj,
            exist,
        })
    }

    pub fn config(&self) -> &EdaConfig {
        &self.cfg
    }

    /// Initial values with the forget-gate biases set to one.
    pub fn init_params(&self, layout: &Layout, seed: u64) -> ModelParams {
        let mut params = ModelParams::init(layout, seed);
        let h = self.cfg.hidden_dim;
        for lstm in [&self.encoder, &self.decoder] {
            params.tensors_mut()[lstm.bias.0].data_mut()[h..2 * h].fill(1.0);
        }
        params
    }

    /// Runs the encoder over all frames of `e` (in an order shuffled by
    /// `seed` when enabled), then decodes attractors from zero inputs.
    pub fn decode(&self, params: &ModelParams, e: &Tensor, seed: u64) -> Result<EdaOutput> {
        let (t, d) = e.dims2()?;
        if d != self.dim {
            return Err(shape_err!("embeddings have {d} columns, expected {}", self.dim));
        }
        let h = self.cfg.hidden_dim;
        let frames = if self.cfg.shuffle_frames && t > 1 {
            let mut order: Vec<usize> = (0..t).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            e.select_rows(&order)?
        } else {
            e.clone()
        };

        // Input contributions are batched over chunks of frames; only the
        // recurrence is sequential.
        const CHUNK: usize = 256;
        let enc_bias = params.get(self.encoder.bias).data();
        let w_ih = params.get(self.encoder.w_ih).data();
        let w_hh = params.get(self.encoder.w_hh).data();
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        let mut scratch = vec![0.0; 4 * h];
        let mut gates_in = vec![0.0; CHUNK * 4 * h];
        for chunk in frames.data().chunks(CHUNK * d) {
            let n = chunk.len() / d;
            let gates = &mut gates_in[..n * 4 * h];
            for row in gates.chunks_mut(4 * h) {
                row.copy_from_slice(enc_bias);
            }
            gemm(n, d, 4 * h, chunk, false, w_ih, false, gates, 1.0);
            for row in gates.chunks(4 * h) {
                lstm_step(row, w_hh, &mut hs, &mut cs, &mut scratch);
            }
        }
        let final_state = (hs.clone(), cs.clone());

        // Zero decoder inputs contribute only the bias.
        let dec_bias = params.get(self.decoder.bias).data();
        let w_hh = params.get(self.decoder.w_hh).data();
        let (exist_w, exist_b) = (params.get(self.exist.0).data(), params.get(self.exist.1).data()[0]);
        let mut attractors = Vec::new();
        let mut existence = Vec::new();
        for _ in 0..self.cfg.max_attractors {
            lstm_step(dec_bias, w_hh, &mut hs, &mut cs, &mut scratch);
            let a = match self.proj {
                Some((w, b)) => {
                    let mut a = params.get(b).data().to_vec();
                    gemm(1, h, self.dim, &hs, false, params.get(w).data(), false, &mut a, 1.0);
                    a
                }
                None => hs.clone(),
            };
            let p = sigmoid(a.iter().zip(exist_w).map(|(x, w)| x * w).sum::<f64>() + exist_b);
            if p < self.cfg.existence_threshold {
                break;
            }
            existence.push(p);
            attractors.extend(a);
        }
        Ok(EdaOutput {
            attractors: Tensor::new(vec![existence.len(), self.dim], attractors)?,
            existence,
            final_state,
        })
    }
}

/// Layout of a full EEND-EDA model: a frame encoder without conditioning
/// followed by the LSTM attractor module.
pub fn eend_eda_layout(encoder: &EncoderConfig, feature_dim: usize, eda: &EdaConfig) -> Result<(Layout, EdaDecoder)> {
    let mut layout = Layout::default();
    let enc = EncoderConfig {
        conditioning: false,
        ..encoder.clone()
    };
    FrameEncoder::new(&mut layout, &enc, feature_dim)?;
    let decoder = EdaDecoder::new(&mut layout, eda.clone(), enc.model_dim)?;
    Ok((layout, decoder))
}
