//! Training objectives: permutation-invariant BCE, attractor existence,
//! their intermediate variants, and the latent-entropy term.

use crate::assignment::hungarian;
use crate::error::{shape_err, Error, Result};
use crate::model::ForwardOutput;
use crate::numerics::{Tensor, Var, PROB_EPS};
use crate::perceiver::entropy_loss;

/// `−[y ln p + (1 − y) ln(1 − p)]` with `p` clamped away from 0 and 1.
pub fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `C[i][j] = Σ_t BCE(y_{t,i}, ŷ_{t,j})` with `y` zero-padded to `A` columns.
pub fn bce_cost_matrix(y: &Tensor, yhat: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (t, s) = y.dims2()?;
    let (t2, a) = yhat.dims2()?;
    if t != t2 {
        return Err(shape_err!("labels have {t} frames, posteriors {t2}"));
    }
    if s > a {
        return Err(Error::Capacity {
            references: s,
            attractors: a,
        });
    }
    let mut c = vec![vec![0.0; a]; a];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..t)
                .map(|k| bce(if i < s { y.get(k, i) } else { 0.0 }, yhat.get(k, j)))
                .sum();
        }
    }
    Ok(c)
}

/// Sum of `values` in ascending order, so that equal multisets of terms
/// give bit-identical totals.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub struct PitLoss<'t> {
    pub loss: Var<'t>,
    /// Minimum assignment cost divided by the normaliser, summed canonically.
    pub cost: f64,
    /// For each attractor, the reference column it was matched to, or
    /// `None` for padding.
    pub assignment: Vec<Option<usize>>,
}

/// Permutation-invariant BCE between `T × S` labels and `T × A` posteriors.
/// Normalised by `T·S` when `normalize_by_speakers` (by `T` when `S = 0`),
/// otherwise by `T·A`.
pub fn pit_bce<'t>(y: &Tensor, yhat: &Var<'t>, normalize_by_speakers: bool) -> Result<PitLoss<'t>> {
    let (t, s) = y.dims2()?;
    let a = yhat.dims2()?.1;
    let cost = bce_cost_matrix(y, yhat.value())?;
    let rows = hungarian(&cost)?;
    let norm = if normalize_by_speakers {
        (t * s.max(1)) as f64
    } else {
        (t * a) as f64
    };
    let mut picked: Vec<f64> = rows.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    let best = canonical_sum(&mut picked) / norm;

    let mut assignment = vec![None; a];
    for (i, &j) in rows.iter().enumerate().take(s) {
        assignment[j] = Some(i);
    }
    let mut target = vec![0.0; t * a];
    for (j, r) in assignment.iter().enumerate() {
        if let Some(i) = *r {
            for k in 0..t {
                target[k * a + j] = y.get(k, i);
            }
        }
    }
    let tape = yhat.tape();
    let target = tape.constant(&Tensor::new(vec![t, a], target)?);
    let loss = bce_var(&target, yhat)?.scale(1.0 / norm);
    Ok(PitLoss {
        loss,
        cost: best,
        assignment,
    })
}

/// Summed elementwise BCE of probabilities `p` against constant targets.
fn bce_var<'t>(target: &Var<'t>, p: &Var<'t>) -> Result<Var<'t>> {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let on = target.mul(&p.log()?)?;
    let off = target.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).log()?)?;
    Ok(on.add(&off)?.sum().neg())
}

/// Mean BCE between existence targets `r` and probabilities `p` (`A × 1`).
pub fn existence_bce<'t>(r: &[f64], p: &Var<'t>) -> Result<Var<'t>> {
    let n = p.value().numel();
    if r.len() != n {
        return Err(shape_err!("{} existence targets for {n} attractors", r.len()));
    }
    let target = p.tape().constant(&Tensor::new(p.shape().to_vec(), r.to_vec())?);
    Ok(bce_var(&target, p)?.scale(1.0 / n.max(1) as f64))
}

fn targets(assignment: &[Option<usize>]) -> Vec<f64> {
    assignment.iter().map(|r| if r.is_some() { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub normalize_by_speakers: bool,
    pub intermediate_encoder: bool,
    pub intermediate_decoder: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            normalize_by_speakers: true,
            intermediate_encoder: true,
            intermediate_decoder: true,
        }
    }
}

pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub diar_final: f64,
    pub diar_intermediate: f64,
    pub exist_final: f64,
    pub exist_intermediate: f64,
    pub entropy: f64,
    /// Attractor index → reference column for the final posteriors.
    pub assignment: Vec<Option<usize>>,
}

impl LossBreakdown<'_> {
    pub fn diar(&self) -> f64 {
        self.diar_final + self.diar_intermediate
    }

    pub fn exist(&self) -> f64 {
        self.exist_final + self.exist_intermediate
    }
}

/// Mean of `(diarization, existence)` terms, each under its own optimal
/// assignment.
fn mean_terms<'t>(
    y: &Tensor,
    items: &[(Var<'t>, Var<'t>)],
    normalize: bool,
) -> Result<Option<(Var<'t>, Var<'t>)>> {
    let mut acc: Option<(Var<'t>, Var<'t>)> = None;
    for (post, exist) in items {
        let pit = pit_bce(y, post, normalize)?;
        let e = existence_bce(&targets(&pit.assignment), exist)?;
        acc = Some(match acc {
            None => (pit.loss, e),
            Some((d, x)) => (d.add(&pit.loss)?, x.add(&e)?),
        });
    }
    let k = items.len() as f64;
    Ok(acc.map(|(d, e)| (d.scale(1.0 / k), e.scale(1.0 / k))))
}

/// `L = L_d + L_a + L_e` with optional intermediate encoder-layer and
/// decoder-block terms averaged into `L_d` and `L_a`.
pub fn total_loss<'t>(y: &Tensor, out: &ForwardOutput<'t>, flags: LossFlags) -> Result<LossBreakdown<'t>> {
    let final_pit = pit_bce(y, &out.posteriors, flags.normalize_by_speakers)?;
    let final_exist = existence_bce(&targets(&final_pit.assignment), &out.existence)?;
    let entropy = entropy_loss(&out.combine)?;

    let mut diar_int: Option<Var<'t>> = None;
    let mut exist_int: Option<Var<'t>> = None;
    let mut push = |terms: Option<(Var<'t>, Var<'t>)>| -> Result<()> {
        if let Some((d, e)) = terms {
            diar_int = Some(match diar_int.take() {
                None => d,
                Some(acc) => acc.add(&d)?,
            });
            exist_int = Some(match exist_int.take() {
                None => e,
                Some(acc) => acc.add(&e)?,
            });
        }
        Ok(())
    };
    if flags.intermediate_encoder {
        let items: Vec<_> = out
            .per_layer_posteriors
            .iter()
            .map(|p| (p.clone(), out.existence.clone()))
            .collect();
        push(mean_terms(y, &items, flags.normalize_by_speakers)?)?;
    }
    if flags.intermediate_decoder {
        push(mean_terms(y, &out.per_block, flags.normalize_by_speakers)?)?;
    }

    let mut total = final_pit.loss.add(&final_exist)?.add(&entropy)?;
    let value = |v: &Option<Var<'t>>| v.as_ref().map_or(0.0, |v| v.value().item());
    let (diar_intermediate, exist_intermediate) = (value(&diar_int), value(&exist_int));
    for term in [diar_int, exist_int].into_iter().flatten() {
        total = total.add(&term)?;
    }
    Ok(LossBreakdown {
        diar_final: final_pit.loss.value().item(),
        exist_final: final_exist.value().item(),
        entropy: entropy.value().item(),
        diar_intermediate,
        exist_intermediate,
        total,
        assignment: final_pit.assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn two_speaker_example() {
        let tape = Tape::inference();
        let y = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let yhat = tape.constant(&t(&[&[0.9, 0.1], &[0.1, 0.9]]));
        let pit = pit_bce(&y, &yhat, true).unwrap();
        assert!((pit.cost + 0.9f64.ln()).abs() < 1e-12);
        assert!((pit.loss.value().item() - pit.cost).abs() < 1e-12);
        assert_eq!(pit.assignment, vec![Some(0), Some(1)]);
    }

    #[test]
    fn swapped_columns_pick_swapped_assignment() {
        let tape = Tape::inference();
        let y = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let yhat = tape.constant(&t(&[&[0.9, 0.1], &[0.1, 0.9]]));
        let pit = pit_bce(&y, &yhat, true).unwrap();
        assert_eq!(pit.assignment, vec![Some(1), Some(0)]);
        assert!((pit.cost + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let tape = Tape::inference();
        let y = t(&[&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
        let yhat = tape.constant(&y);
        let pit = pit_bce(&y, &yhat, true).unwrap();
        assert!(pit.cost < 1e-5 && pit.loss.value().item() < 1e-5);
    }

    #[test]
    fn capacity_and_silence() {
        let tape = Tape::inference();
        let yhat = tape.constant(&Tensor::full(vec![4, 2], 0.5));
        let too_many = Tensor::zeros(vec![4, 3]);
        assert!(matches!(
            pit_bce(&too_many, &yhat, true),
            Err(Error::Capacity { references: 3, attractors: 2 })
        ));
        let silent = Tensor::zeros(vec![4, 0]);
        let pit = pit_bce(&silent, &yhat, true).unwrap();
        // normalised by T only: 2 columns × 4 frames × ln 2 / 4
        assert!((pit.cost - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(pit.assignment, vec![None, None]);
    }

    #[test]
    fn existence_examples() {
        let tape = Tape::inference();
        let half = tape.constant(&Tensor::full(vec![3, 1], 0.5));
        for r in [[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]] {
            let l = existence_bce(&r, &half).unwrap().value().item();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
        let p = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        assert!(existence_bce(&[1.0, 0.0], &p).unwrap().value().item() < 1e-6);
        let a = tape.constant(&Tensor::new(vec![4, 1], vec![0.9, 0.7, 0.2, 0.4]).unwrap());
        let b = tape.constant(&Tensor::new(vec![4, 1], vec![0.7, 0.9, 0.4, 0.2]).unwrap());
        let r = [1.0, 1.0, 0.0, 0.0];
        let la = existence_bce(&r, &a).unwrap().value().item();
        let lb = existence_bce(&r, &b).unwrap().value().item();
        assert!((la - lb).abs() < 1e-15);
    }

    #[test]
    fn tiny_model_total_loss_gradients() {
        use crate::model::{DiaPer, ModelConfig};
        use crate::nn::Fwd;
        use crate::numerics::{grad_check, GradCheckOptions};

        let mut cfg = ModelConfig::default();
        cfg.feature_dim = 5;
        cfg.encoder.model_dim = 8;
        cfg.encoder.num_heads = 2;
        cfg.encoder.num_layers = 2;
        cfg.encoder.ff_dim = 16;
        cfg.decoder.num_heads = 2;
        cfg.decoder.num_blocks = 2;
        cfg.decoder.num_latents = 4;
        cfg.decoder.num_attractors = 3;
        cfg.decoder.self_ff_dim = 48;
        cfg.seed = 4;
        let model = DiaPer::new(cfg).unwrap();
        let params = model.init_params();
        let x: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::new(vec![6, 5], x).unwrap();
        let y = t(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let report = grad_check(
            |tape, vars| {
                let f = Fwd::eval(tape, vars);
                let out = model.forward(&f, &tape.constant(&x))?;
                Ok(total_loss(&y, &out, LossFlags::default())?.total)
            },
            params.tensors(),
            &GradCheckOptions::default(),
        )
        .unwrap();
        eprintln!("{report:?}");
        assert!(report.passed());
    }
}
