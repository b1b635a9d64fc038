//! Building blocks shared by the frame encoder and the attractor decoder.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::numerics::{column_softmax, gemm, Tape, Tensor, Var};
use crate::params::{Layout, ParamId};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameters bound to one tape plus the train/eval switch.
pub struct Fwd<'t, 'a> {
    tape: &'t Tape,
    vars: &'a [Var<'t>],
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t, 'a> Fwd<'t, 'a> {
    /// Evaluation mode: dropout disabled, fully deterministic.
    pub fn eval(tape: &'t Tape, vars: &'a [Var<'t>]) -> Self {
        Self {
            tape,
            vars,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training mode with dropout masks drawn from `seed`.
    pub fn train(tape: &'t Tape, vars: &'a [Var<'t>], dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            vars,
            dropout,
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn p(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub(crate) fn constant(&self, t: &Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub(crate) fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        match &self.rng {
            Some(rng) if self.dropout > 0.0 => x.dropout(self.dropout, &mut *rng.borrow_mut()),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new(layout: &mut Layout, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = layout.weight(format!("{name}.w"), fan_in, fan_out);
        let b = bias.then(|| layout.constant(format!("{name}.b"), vec![fan_out], 0.0));
        Self { w, b }
    }

    pub(crate) fn forward<'t>(&self, f: &Fwd<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(f.p(self.w))?;
        match self.b {
            Some(b) => y.add_bias(f.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        Self {
            gain: layout.constant(format!("{name}.gain"), vec![dim], 1.0),
            bias: layout.constant(format!("{name}.bias"), vec![dim], 0.0),
        }
    }

    pub(crate) fn forward<'t>(&self, f: &Fwd<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(f.p(self.gain), f.p(self.bias), LN_EPS)
    }
}

/// Which axis the attention softmax normalises over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionNorm {
    /// Each query's weights over the keys sum to one (standard attention).
    Time,
    /// Each key's weights over the queries sum to one: in latent
    /// cross-attention, every frame is distributed over the latents.
    #[default]
    Latents,
    /// First half of the heads over time, the rest over latents.
    Mixed,
}

impl fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionNorm::Time => "time",
            AttentionNorm::Latents => "latents",
            AttentionNorm::Mixed => "mixed",
        })
    }
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(AttentionNorm::Time),
            "latents" => Ok(AttentionNorm::Latents),
            "mixed" => Ok(AttentionNorm::Mixed),
            other => Err(config_err!("unknown attention normalisation {other:?}")),
        }
    }
}

impl AttentionNorm {
    fn axis(self, head: usize, heads: usize) -> usize {
        match self {
            AttentionNorm::Time => 1,
            AttentionNorm::Latents => 0,
            AttentionNorm::Mixed if head < heads / 2 => 1,
            AttentionNorm::Mixed => 0,
        }
    }
}

const KEY_CHUNK: usize = 256;
const QUERY_BLOCK: usize = 256;

/// Rows `r0..r0 + n` of the columns `c0..c0 + w` of a row-major matrix.
fn block(m: &[f64], cols: usize, r0: usize, n: usize, c0: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * w);
    for r in r0..r0 + n {
        out.extend_from_slice(&m[r * cols + c0..r * cols + c0 + w]);
    }
    out
}

/// Affine map `x W + b` of a row-major block of `n` rows.
fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, m) = (w.len() / b.len(), b.len());
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, k, m, x, false, w, false, &mut out, 1.0);
    out
}

/// Values of one attention module's parameters.
struct AttnValues<'a> {
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
}

/// Multi-head attention on plain values with the keys streamed in chunks,
/// so no queries × keys matrix is ever held. Heads normalised over the
/// keys (`axes[h] == 1`) keep a running maximum and denominator per query;
/// heads normalised over the queries are exact chunk by chunk. With few
/// queries the key and value projections are also computed per chunk.
fn streamed_attention(q: &Tensor, memory: &Tensor, p: &AttnValues<'_>, axes: &[usize]) -> Result<Tensor> {
    let (nq, dim) = q.dims2()?;
    let (nk, din) = memory.dims2()?;
    let heads = axes.len();
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let single_block = nq <= QUERY_BLOCK || axes.contains(&0);
    let full = (!single_block).then(|| {
        (
            affine(memory.data(), nk, p.wk, p.bk),
            affine(memory.data(), nk, p.wv, p.bv),
        )
    });
    let kv_chunk = |k0: usize, n: usize| -> (Vec<f64>, Vec<f64>) {
        match &full {
            Some((k, v)) => (k[k0 * dim..(k0 + n) * dim].to_vec(), v[k0 * dim..(k0 + n) * dim].to_vec()),
            None => {
                let x = &memory.data()[k0 * din..(k0 + n) * din];
                (affine(x, n, p.wk, p.bk), affine(x, n, p.wv, p.bv))
            }
        }
    };

    let qb_len = if single_block { nq.max(1) } else { QUERY_BLOCK };
    let mut out = vec![0.0; nq * dim];
    for q0 in (0..nq).step_by(qb_len) {
        let b = qb_len.min(nq - q0);
        let qh: Vec<Vec<f64>> = (0..heads)
            .map(|h| block(q.data(), dim, q0, b, h * d, d).into_iter().map(|x| x * scale).collect())
            .collect();
        let mut acc = vec![vec![0.0; b * d]; heads];
        let mut max = vec![vec![f64::NEG_INFINITY; b]; heads];
        let mut denom = vec![vec![0.0; b]; heads];
        for k0 in (0..nk).step_by(KEY_CHUNK) {
            let n = KEY_CHUNK.min(nk - k0);
            let (kc, vc) = kv_chunk(k0, n);
            for h in 0..heads {
                let kh = block(&kc, dim, 0, n, h * d, d);
                let vh = block(&vc, dim, 0, n, h * d, d);
                let mut s = vec![0.0; b * n];
                gemm(b, d, n, &qh[h], false, &kh, true, &mut s, 0.0);
                if axes[h] == 0 {
                    s = column_softmax(&s, b, n);
                } else {
                    let (acc, max, denom) = (&mut acc[h], &mut max[h], &mut denom[h]);
                    for i in 0..b {
                        let row = &mut s[i * n..(i + 1) * n];
                        let m = row.iter().copied().fold(max[i], f64::max);
                        let carry = (max[i] - m).exp();
                        let mut total = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x - m).exp();
                            total += *x;
                        }
                        denom[i] = denom[i] * carry + total;
                        acc[i * d..(i + 1) * d].iter_mut().for_each(|a| *a *= carry);
                        max[i] = m;
                    }
                }
                gemm(b, n, d, &s, false, &vh, false, &mut acc[h], 1.0);
            }
        }
        for h in 0..heads {
            for i in 0..b {
                let norm = if axes[h] == 0 { 1.0 } else { 1.0 / denom[h][i] };
                let dst = &mut out[(q0 + i) * dim + h * d..(q0 + i) * dim + (h + 1) * d];
                dst.iter_mut().zip(&acc[h][i * d..(i + 1) * d]).for_each(|(o, a)| *o = a * norm);
            }
        }
    }
    Tensor::new(vec![nq, dim], out)
}

/// Multi-head scaled dot-product attention with biased projections.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub(crate) fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("model dimension {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(layout, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(layout, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(layout, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(layout, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub(crate) fn forward<'t>(
        &self,
        f: &Fwd<'t, '_>,
        queries: &Var<'t>,
        memory: &Var<'t>,
        norm: AttentionNorm,
    ) -> Result<Var<'t>> {
        self.run(f, queries, memory, norm, None)
    }

    /// Like `forward`, also returning each head's normalised weights
    /// (`queries × memory`).
    pub(crate) fn forward_with_weights<'t>(
        &self,
        f: &Fwd<'t, '_>,
        queries: &Var<'t>,
        memory: &Var<'t>,
        norm: AttentionNorm,
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let mut weights = Vec::with_capacity(self.heads);
        let out = self.run(f, queries, memory, norm, Some(&mut weights))?;
        Ok((out, weights))
    }

    fn run<'t>(
        &self,
        f: &Fwd<'t, '_>,
        queries: &Var<'t>,
        memory: &Var<'t>,
        norm: AttentionNorm,
        mut keep: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(f, queries)?;
        if !f.tape().is_recording() && keep.is_none() {
            let axes: Vec<usize> = (0..self.heads).map(|h| norm.axis(h, self.heads)).collect();
            let value = |id: Option<ParamId>| f.p(id.expect("attention projections have biases")).value().data();
            let p = AttnValues {
                wk: value(Some(self.k.w)),
                bk: value(self.k.b),
                wv: value(Some(self.v.w)),
                bv: value(self.v.b),
            };
            let ctx = streamed_attention(q.value(), memory.value(), &p, &axes)?;
            return self.o.forward(f, &f.constant(&ctx));
        }
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (
                    q.slice_cols(h * d, d)?,
                    k.slice_cols(h * d, d)?,
                    v.slice_cols(h * d, d)?,
                )
            };
            let scores = qh.matmul_t(&kh)?.scale(scale);
            let weights = scores.softmax(norm.axis(h, self.heads))?;
            if let Some(keep) = keep.as_deref_mut() {
                keep.push(weights.value().clone());
            }
            ctx.push(weights.matmul(&vh)?);
        }
        let joined = if ctx.len() == 1 {
            ctx.pop().expect("one head")
        } else {
            Var::concat_cols(&ctx)?
        };
        self.o.forward(f, &joined)
    }
}

/// `Ē = LN(X)`, `Ê = LN(Ē + MHSA(Ē))`, output `Ê + FF(Ê)`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln_in: LayerNorm,
    attn: Attention,
    ln_mid: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerLayer {
    pub(crate) fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(Self {
            ln_in: LayerNorm::new(layout, &format!("{name}.ln_in"), dim),
            attn: Attention::new(layout, &format!("{name}.attn"), dim, heads)?,
            ln_mid: LayerNorm::new(layout, &format!("{name}.ln_mid"), dim),
            ff1: Linear::new(layout, &format!("{name}.ff1"), dim, ff_dim, true),
            ff2: Linear::new(layout, &format!("{name}.ff2"), ff_dim, dim, true),
        })
    }

    pub(crate) fn forward<'t>(&self, f: &Fwd<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let bar = self.ln_in.forward(f, x)?;
        let attended = f.dropout(self.attn.forward(f, &bar, &bar, AttentionNorm::Time)?)?;
        let hat = self.ln_mid.forward(f, &bar.add(&attended)?)?;
        let hidden = self.ff1.forward(f, &hat)?.relu();
        let ff = f.dropout(self.ff2.forward(f, &hidden)?)?;
        hat.add(&ff)
    }
}
