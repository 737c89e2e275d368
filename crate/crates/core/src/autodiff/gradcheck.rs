//! Finite-difference verification of tape gradients.

use crate::autodiff::tape::{Tape, VarId};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Compare analytic gradients against central differences.
///
/// `build` records the computation on a fresh tape from the given leaf ids
/// and returns the scalar loss. It is invoked once per perturbed coordinate,
/// so it must be a pure function of the leaf values.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`, with `numeric` the central
/// difference `(f(x + h) - f(x - h)) / 2h`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<VarId>, VarId)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> =
            tensors.iter().map(|t| tape.input(t.clone())).collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&ids)
        .map(|(t, &id)| grads.take(id, t.rows(), t.cols()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.data()[c];

            perturbed[pi].data_mut()[c] = orig + step;
            let (tape_hi, _, loss_hi) = eval(&perturbed)?;
            let f_hi = tape_hi.value(loss_hi).item()?;

            perturbed[pi].data_mut()[c] = orig - step;
            let (tape_lo, _, loss_lo) = eval(&perturbed)?;
            let f_lo = tape_lo.value(loss_lo).item()?;

            perturbed[pi].data_mut()[c] = orig;

            let numeric = (f_hi - f_lo) / (2.0 * step);
            let rel = (analytic[pi].data()[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.range_f64(-1.5, 1.5)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    const STEP: f64 = 1e-5;
    const PRIMITIVE_TOL: f64 = 1e-6;

    /// Every primitive op, checked against central differences one at a time
    /// with a smooth reduction on top.
    #[test]
    fn primitives_match_central_differences() {
        let mut rng = SplitMix64::new(2024);
        let a23 = random_tensor(&mut rng, 2, 3);
        let b23 = random_tensor(&mut rng, 2, 3);
        let b34 = random_tensor(&mut rng, 3, 4);
        let col2 = random_tensor(&mut rng, 2, 1);
        let row13 = random_tensor(&mut rng, 1, 3);

        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>>)> = vec![
            ("matmul", vec![a23.clone(), b34], Box::new(|t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                t.mean(y)
            })),
            ("add", vec![a23.clone(), b23.clone()], Box::new(|t, ids| {
                let y = t.add(ids[0], ids[1])?;
                t.sum(y)
            })),
            ("mul", vec![a23.clone(), b23.clone()], Box::new(|t, ids| {
                let y = t.mul(ids[0], ids[1])?;
                t.sum(y)
            })),
            ("scale_add", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.scale_add(ids[0], -2.5, 0.75)?;
                let z = t.mul(y, y)?;
                t.sum(z)
            })),
            ("concat_rows", vec![a23.clone(), b23.clone()], Box::new(|t, ids| {
                let y = t.concat(&[ids[0], ids[1]], 0)?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            })),
            ("concat_cols_slice", vec![a23.clone(), b23.clone()], Box::new(|t, ids| {
                let y = t.concat(&[ids[0], ids[1]], 1)?;
                let part = t.slice_cols(y, 2, 3)?;
                let s = t.tanh(part)?;
                t.sum(s)
            })),
            ("slice_rows", vec![a23.clone()], Box::new(|t, ids| {
                let part = t.slice_rows(ids[0], 1, 1)?;
                let s = t.mul(part, part)?;
                t.sum(s)
            })),
            ("mean", vec![a23.clone()], Box::new(|t, ids| {
                let m = t.mean(ids[0])?;
                t.mul(m, m)
            })),
            ("sum_axis0", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.sum_axis(ids[0], 0)?;
                let s = t.tanh(y)?;
                t.sum(s)
            })),
            ("mean_axis1", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.mean_axis(ids[0], 1)?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            })),
            ("sigmoid", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.sigmoid(ids[0])?;
                t.sum(y)
            })),
            ("tanh", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.tanh(ids[0])?;
                t.sum(y)
            })),
            ("exp", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.exp(ids[0])?;
                t.mean(y)
            })),
            ("elu", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.elu(ids[0])?;
                t.sum(y)
            })),
            ("log_of_positive", vec![a23.clone()], Box::new(|t, ids| {
                // exp first so log sees strictly positive values
                let p = t.exp(ids[0])?;
                let y = t.log(p)?;
                t.sum(y)
            })),
            ("gather_rows", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.gather_rows(ids[0], &[1, 0, 1])?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            })),
            ("segment_sum", vec![a23.clone()], Box::new(|t, ids| {
                let y = t.segment_sum(ids[0], &[1, 1], 2)?;
                let s = t.tanh(y)?;
                t.sum(s)
            })),
            ("scale_rows", vec![a23.clone(), col2], Box::new(|t, ids| {
                let y = t.scale_rows(ids[0], ids[1])?;
                t.sum(y)
            })),
            ("repeat_rows", vec![row13], Box::new(|t, ids| {
                let y = t.repeat_rows(ids[0], 4)?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            })),
            ("segment_softmax", vec![random_tensor(&mut rng, 6, 1)], Box::new(|t, ids| {
                let y = t.segment_softmax(ids[0], &[0, 0, 1, 1, 1, 2])?;
                let w = t.mul(y, y)?;
                t.sum(w)
            })),
        ];

        for (name, inputs, build) in cases {
            let err = grad_check(&*build, &inputs, STEP).unwrap();
            assert!(err < PRIMITIVE_TOL, "{name}: max rel err {err:.3e}");
        }
    }

    /// leaky_relu and clamp are piecewise; keep inputs away from the kinks
    /// so the central difference is valid.
    #[test]
    fn piecewise_primitives_away_from_kinks() {
        let x = Tensor::from_vec(2, 3, vec![-1.2, 0.8, -0.4, 1.5, -2.0, 0.3]).unwrap();
        let err = grad_check(
            |t, ids| {
                let y = t.leaky_relu(ids[0], 0.2)?;
                t.sum(y)
            },
            &[x.clone()],
            STEP,
        )
        .unwrap();
        assert!(err < PRIMITIVE_TOL, "leaky_relu: {err:.3e}");

        let err = grad_check(
            |t, ids| {
                let y = t.clamp(ids[0], -1.0, 1.0)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err < PRIMITIVE_TOL, "clamp: {err:.3e}");
    }

    /// A small composite expression mixing most ops, as a smoke test that
    /// adjoint accumulation across shared nodes stays consistent.
    #[test]
    fn composite_expression_gradient() {
        let mut rng = SplitMix64::new(7);
        let x = random_tensor(&mut rng, 3, 2);
        let w = random_tensor(&mut rng, 2, 2);
        let err = grad_check(
            |t, ids| {
                let h = t.matmul(ids[0], ids[1])?;
                let a = t.tanh(h)?;
                let b = t.sigmoid(h)?; // h fans out
                let p = t.mul(a, b)?;
                // p is in (-1, 1), so 0.5p + 2 is in (1.5, 2.5): log-safe
                let q = t.scale_add(p, 0.5, 2.0)?;
                let l = t.log(q)?;
                t.mean(l)
            },
            &[x, w],
            STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "composite: {err:.3e}");
    }
}
