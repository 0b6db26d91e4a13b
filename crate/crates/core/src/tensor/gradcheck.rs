//! Central finite-difference oracle for gradients.
//!
//! Meant to run with `F = f64`; the 1e-4 tolerances used across the crate are
//! unattainable in f32. The function under test must be a deterministic pure
//! function of its inputs (fix any masks or dropout patterns beforehand).

use super::{sc, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|).
pub fn check_gradient<F: Scalar>(
    f: &dyn Fn(&Tape<F>, &Tensor<F>) -> Result<Tensor<F>>,
    data: &[F],
    shape: &[usize],
    h: f64,
) -> Result<f64> {
    check_gradient_multi(
        &|tape, xs: &[Tensor<F>]| f(tape, &xs[0]),
        &[(data.to_vec(), shape.to_vec())],
        h,
    )
}

/// Gradient check over several independent inputs at once (e.g. every
/// parameter tensor of a block). Returns the worst relative error seen.
pub fn check_gradient_multi<F: Scalar>(
    f: &dyn Fn(&Tape<F>, &[Tensor<F>]) -> Result<Tensor<F>>,
    inputs: &[(Vec<F>, Vec<usize>)],
    h: f64,
) -> Result<f64> {
    let fh = sc::<F>(h);
    let two_h = fh + fh;

    // Analytic pass: all inputs as tracked leaves.
    let tape: Tape<F> = Tape::new();
    let leaves: Vec<Tensor<F>> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "check_gradient requires a scalar function, got output shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<F>> = leaves
        .iter()
        .map(|l| grads.wrt(l).expect("leaf gradient").to_vec())
        .collect();

    // Untracked evaluation used for the finite-difference probes.
    let eval = |datas: &[Vec<F>]| -> Result<F> {
        let tape: Tape<F> = Tape::new();
        let ts: Vec<Tensor<F>> = datas
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| Tensor::from_vec(d.clone(), s))
            .collect::<Result<_>>()?;
        Ok(f(&tape, &ts)?.item())
    };

    let mut datas: Vec<Vec<F>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for i in 0..datas[ti].len() {
            let orig = datas[ti][i];
            datas[ti][i] = orig + fh;
            let fp = eval(&datas)?;
            datas[ti][i] = orig - fh;
            let fm = eval(&datas)?;
            datas[ti][i] = orig;
            let fd = (fp - fm) / two_h;
            let a = analytic[ti][i];
            let err = (a - fd).abs() / F::one().max(a.abs());
            worst = worst.max(err.to_f64().unwrap());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum(x^2), grad = 2x; analytic [2, 4] at x = [1, 2]
        let f = |tape: &Tape<f64>, x: &Tensor<f64>| {
            let sq = tape.mul(x, x)?;
            tape.sum_all(&sq)
        };
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let loss = f(&tape, &x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, 4.0]);

        let err = check_gradient(&f, &[1.0, 2.0], &[2], 1e-3).unwrap();
        assert!(err < 1e-8, "quadratic fd err {err}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let f = |_tape: &Tape<f64>, x: &Tensor<f64>| Ok(x.clone());
        let r = check_gradient(&f, &[1.0, 2.0], &[2], 1e-3);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn unary_ops_pass_fd() {
        let mut worst = 0.0f64;
        let xs = [-1.7, -0.3, 0.0, 0.4, 2.1];
        for (name, f) in [
            ("gelu", 0usize),
            ("silu", 1),
            ("softplus", 2),
            ("tanh", 3),
            ("sigmoid", 4),
            ("exp", 5),
        ] {
            let which = f;
            let func = move |tape: &Tape<f64>, x: &Tensor<f64>| {
                let y = match which {
                    0 => tape.gelu(x)?,
                    1 => tape.silu(x)?,
                    2 => tape.softplus(x)?,
                    3 => tape.tanh(x)?,
                    4 => tape.sigmoid(x)?,
                    _ => tape.exp(x)?,
                };
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            };
            let err = check_gradient(&func, &xs, &[5], 1e-3).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn matmul_random_4x3_3x2_fd() {
        use crate::rng::Rng;
        let mut rng = Rng::new(17, 0);
        let a: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let err = check_gradient_multi(
            &|tape, xs: &[Tensor<f64>]| {
                let c = tape.matmul(&xs[0], &xs[1])?;
                let sq = tape.mul(&c, &c)?;
                tape.sum_all(&sq)
            },
            &[(a, vec![4, 3]), (b, vec![3, 2])],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul fd err {err}");
    }

    #[test]
    fn composite_ops_pass_fd_on_multiple_shapes() {
        use crate::rng::Rng;
        // softmax+layernorm+reductions through a couple of shapes
        for (rows, cols, seed) in [(2usize, 3usize, 1u64), (4, 4, 2), (1, 7, 3)] {
            let mut rng = Rng::new(seed, 0);
            let x: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
            let err = check_gradient(
                &|tape, x: &Tensor<f64>| {
                    let ln = tape.layer_norm(x, 1e-5)?;
                    let sm = tape.softmax_rows(&ln)?;
                    let g = tape.gelu(&sm)?;
                    let n = tape.l2_normalize_rows(&g, 1e-12)?;
                    tape.mean_all(&n)
                },
                &x,
                &[rows, cols],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "{rows}x{cols}: {err}");
        }
    }
}
