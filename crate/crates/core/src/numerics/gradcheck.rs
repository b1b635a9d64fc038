//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Tensors larger than this are checked on a random subset of this many
    /// coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_coords: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Worst>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` with respect to each of `params`
/// against central differences `(f(p + h) - f(p - h)) / 2h`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p)).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        tol: opts.tol,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = params[ti].numel();
        let coords: Vec<usize> = if n > opts.max_coords {
            sample(&mut rng, n, opts.max_coords).into_vec()
        } else {
            (0..n).collect()
        };
        for c in coords {
            let orig = params[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.h;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.h;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data()[c];
            let err = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    tensor: ti,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::from_rows(&[[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let a = tape.constant(&a);
                let ax = a.matmul(&v[0])?;
                Ok(v[0].t()?.matmul(&ax)?.sum())
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn zero_gradient_coordinates_use_the_floor() {
        assert_eq!(relative_error(0.0, 1e-12, 1e-6), 1e-6);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng)
    }

    fn check<F>(f: F, params: &[Tensor])
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let report = grad_check(f, params, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn composite_elementwise_expression() {
        let x = rand(&[3, 4], 1);
        let y = rand(&[3, 4], 2);
        check(
            |tape, v| {
                let s = v[0].mul(&v[1])?.sigmoid();
                let r = v[0].sub(&v[1])?.relu().tanh();
                let e = v[1].scale(0.3).exp().add_scalar(0.5);
                let l = s.clamp(0.2, 0.8).log()?;
                let c = tape.constant(&Tensor::scalar(0.7));
                Ok(l.add(&r)?.mul(&e)?.add(&c)?.mean())
            },
            &[x, y],
        );
    }

    #[test]
    fn matrix_ops() {
        let a = rand(&[3, 5], 3);
        let b = rand(&[5, 2], 4);
        let c = rand(&[4, 5], 5);
        let bias = rand(&[2], 6);
        check(
            |_, v| {
                let ab = v[0].matmul(&v[1])?.add_bias(&v[3])?;
                let act = v[0].matmul_t(&v[2])?.t()?;
                let joined = Var::concat_cols(&[ab.clone(), act.t()?])?;
                let part = joined.slice_cols(1, 4)?;
                Ok(part.mul(&part)?.sum())
            },
            &[a, b, c, bias],
        );
    }

    #[test]
    fn softmax_and_layer_norm() {
        let x = rand(&[4, 3], 7);
        let g = rand(&[3], 8);
        let b = rand(&[3], 9);
        let w = rand(&[4, 3], 10);
        check(
            |tape, v| {
                let w = tape.constant(&w);
                let n = v[0].layer_norm(&v[1], &v[2], 1e-5)?;
                let s0 = n.softmax(0)?.mul(&w)?.sum();
                let s1 = v[0].softmax(1)?.mul(&v[0].log_softmax(1)?)?.sum();
                let s2 = v[0].log_softmax(0)?.mul(&w)?.sum();
                Ok(s0.add(&s1)?.add(&s2)?)
            },
            &[x, g, b],
        );
    }

    #[test]
    fn detached_term_is_reported() {
        // The detached factor hides half of the true gradient from the tape,
        // exactly as a broken backward rule would.
        let x = rand(&[5], 11);
        let report = grad_check(
            |_, v| Ok(v[0].mul(&v[0].detach())?.sum()),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }
}
