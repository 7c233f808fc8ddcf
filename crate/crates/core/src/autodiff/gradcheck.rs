use super::{ShapeError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest relative error per input.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const SCALE_FLOOR: f64 = 1e-6;

/// Relative discrepancy `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Checks the gradient of the scalar function `f` at `inputs` using central
/// differences with step 1e-5.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradcheckReport, ShapeError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, ShapeError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, ShapeError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(ShapeError::new("gradcheck", "function must return a scalar"));
        }
        Ok(v.data()[0])
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape()))
            })
            .collect()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e <= tol);
    Ok(GradcheckReport {
        max_rel_error,
        tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::concat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_has_zero_error() {
        let report = gradcheck(|_, x| Ok(x[0].sum_all()), &[Tensor::vector(vec![0.0])], 1e-12)
            .unwrap();
        assert_eq!(report.worst(), 0.0);
        assert!(report.passed);
    }

    #[test]
    fn softplus_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0]));
        let y = x.softplus().sum_all();
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 0.5).abs() < 1e-6);
        let r = gradcheck(|_, x| Ok(x[0].softplus().sum_all()), &[Tensor::vector(vec![0.0])], 1e-6)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let r = gradcheck(
            |tape, x| {
                let w = tape.constant(w.clone());
                Ok(x[0].matmul(x[1])?.mul(w)?.sum_all())
            },
            &[a, b],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn batched_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 2], &mut rng);
        let c = random(&[4, 2], &mut rng);
        let r = gradcheck(
            |_, x| {
                let p = x[0].matmul(x[1])?.tanh();
                let q = x[0].matmul(x[2])?;
                Ok(p.mul(q)?.sum_all())
            },
            &[a, b, c],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn masked_softmax_loss_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let mask = [
            false, true, false, false, //
            true, true, false, true, //
            false, false, false, false,
        ];
        let r = gradcheck(
            |tape, xs| {
                let w = tape.constant(w.clone());
                Ok(xs[0].masked_softmax(&mask)?.mul(w)?.sum_all())
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 1.0, 2.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2]).unwrap());
        assert!(x.masked_softmax(&[false; 4]).is_err());
        let y = x.masked_softmax(&[false, false, true, false, false, false]).unwrap();
        for row in y.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let g = tape.backward(y.mul(w).unwrap().sum_all()).unwrap();
        for row in g.get(x).unwrap().data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let bias = random(&[4], &mut rng);
        let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect())
            .unwrap();
        let w = random(&[3, 12], &mut rng);
        let r = gradcheck(
            |tape, x| {
                let w = tape.constant(w.clone());
                let sum = x[0].add(x[1])?.sub(x[2])?;
                let prod = x[0].mul(x[1])?.div(x[3])?;
                let ex = x[0].exp().scale(0.3).add_scalar(1.0).log();
                let sp = x[1].softplus().tanh();
                let cat = concat(&[sum, prod, ex, sp], 1)?; // 3 x 16
                let sl = cat.slice(1, 2, 14)?; // 3 x 12
                let tr = sl.transpose()?.transpose()?;
                let reduced = tr.mul(w)?.sum(1)?.mean(0)?;
                let extra = x[2].sum(0)?;
                Ok(reduced.add(extra)?.sum_all())
            },
            &[a, b, bias, pos],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
