use super::model::{Gradients, ShapeError, SiameseModel};

fn check_dims(a: usize, p: usize, n: usize) -> Result<(), ShapeError> {
    if a != p {
        return Err(ShapeError {
            expected: a,
            got: p,
        });
    }
    if a != n {
        return Err(ShapeError {
            expected: a,
            got: n,
        });
    }
    Ok(())
}

/// Squared Euclidean distance, accumulated in `f64`.
pub fn squared_distance<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x).into() - (*y).into();
            d * d
        })
        .sum()
}

/// `max(‖a−p‖² − ‖a−n‖² + margin, 0)`.
pub fn triplet_loss<T: Copy + Into<f64>>(
    anchor: &[T],
    positive: &[T],
    negative: &[T],
    margin: f64,
) -> Result<f64, ShapeError> {
    check_dims(anchor.len(), positive.len(), negative.len())?;
    let raw = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    Ok(raw.max(0.0))
}

/// Loss gradients with respect to the three embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Returns the loss and, when the hinge is active (loss > 0), its gradient
/// w.r.t. each embedding:
/// `dL/da = 2(n − p)`, `dL/dp = −2(a − p)`, `dL/dn = 2(a − n)`.
pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<(f64, Option<OutputGrads>), ShapeError> {
    let loss = triplet_loss(anchor, positive, negative, margin)?;
    if loss <= 0.0 {
        return Ok((0.0, None));
    }
    let grads = OutputGrads {
        anchor: negative
            .iter()
            .zip(positive)
            .map(|(n, p)| 2.0 * (n - p))
            .collect(),
        positive: anchor
            .iter()
            .zip(positive)
            .map(|(a, p)| -2.0 * (a - p))
            .collect(),
        negative: anchor
            .iter()
            .zip(negative)
            .map(|(a, n)| 2.0 * (a - n))
            .collect(),
    };
    Ok((loss, Some(grads)))
}

/// Exact gradient of the triplet loss w.r.t. every parameter. All three
/// branches share the parameters, so their contributions are summed.
/// Returns the loss alongside; gradients are all zero when the hinge is
/// inactive.
pub fn backward(
    model: &SiameseModel,
    anchor: &[f32],
    positive: &[f32],
    negative: &[f32],
    margin: f64,
) -> Result<(f64, Gradients), ShapeError> {
    let mut grads = Gradients::zeros(model);
    let loss = backward_into(model, anchor, positive, negative, margin, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`backward`] but adds into an existing accumulator.
pub(crate) fn backward_into(
    model: &SiameseModel,
    anchor: &[f32],
    positive: &[f32],
    negative: &[f32],
    margin: f64,
    grads: &mut Gradients,
) -> Result<f64, ShapeError> {
    model.check_input(anchor)?;
    model.check_input(positive)?;
    model.check_input(negative)?;
    let ca = model.forward_cached(anchor);
    let cp = model.forward_cached(positive);
    let cn = model.forward_cached(negative);
    let (loss, out) = triplet_loss_grad(&ca.output, &cp.output, &cn.output, margin)?;
    if let Some(out) = out {
        model.accumulate(&ca, &out.anchor, grads);
        model.accumulate(&cp, &out.positive, grads);
        model.accumulate(&cn, &out.negative, grads);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siamese::model::{init_model, Activation, Layer};

    #[test]
    fn satisfied_margin_gives_zero() {
        let l = triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn collapsed_embeddings_cost_the_margin() {
        let v = [1.5f32, -2.0, 0.25];
        assert_eq!(triplet_loss(&v, &v, &v, 0.7).unwrap(), 0.7);
    }

    #[test]
    fn direct_formula() {
        assert_eq!(triplet_loss(&[0.0], &[2.0], &[1.0], 0.5).unwrap(), 3.5);
    }

    #[test]
    fn mismatched_dims() {
        assert!(triplet_loss(&[0.0, 1.0], &[2.0], &[1.0, 0.0], 0.5).is_err());
        assert!(triplet_loss(&[0.0], &[2.0], &[1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let m = init_model(3, &[4], 2, 5).unwrap();
        let a = [0.1f32, 0.2, 0.3];
        let far = [50.0f32, -40.0, 30.0];
        let (loss, g) = backward(&m, &a, &a, &far, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += h;
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 2.0];
        let p = [1.0, 0.5, -0.5];
        let n = [0.2, -1.0, 1.9];
        let (loss, g) = triplet_loss_grad(&a, &p, &n, 1.0).unwrap();
        assert!(loss > 0.0);
        let g = g.unwrap();
        let fd_a = central_difference(|x| triplet_loss(x, &p, &n, 1.0).unwrap(), &a, 1e-6);
        let fd_p = central_difference(|x| triplet_loss(&a, x, &n, 1.0).unwrap(), &p, 1e-6);
        let fd_n = central_difference(|x| triplet_loss(&a, &p, x, 1.0).unwrap(), &n, 1e-6);
        for (got, want) in [(&g.anchor, fd_a), (&g.positive, fd_p), (&g.negative, fd_n)] {
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
        // dL/da = 2(n - p)
        for i in 0..3 {
            assert!((g.anchor[i] - 2.0 * (n[i] - p[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_linear_layer_matches_finite_differences() {
        // Model with weights [[1, -1]] on the hand-evaluated inputs.
        let layer = Layer::new(2, 1, vec![1.0, -1.0], vec![0.0], Activation::Identity).unwrap();
        let m = SiameseModel::from_layers(vec![layer]).unwrap();
        let (a, p, n) = ([0.0f32, 0.0], [2.0f32, 0.0], [1.0f32, 0.0]);
        let (loss, g) = backward(&m, &a, &p, &n, 0.5).unwrap();
        assert_eq!(loss, 3.5);

        // loss as a function of (w0, w1, b), evaluated independently
        let loss_at = |theta: &[f64]| {
            let f = |x: &[f32]| theta[0] * f64::from(x[0]) + theta[1] * f64::from(x[1]) + theta[2];
            let (fa, fp, fn_) = (f(&a), f(&p), f(&n));
            ((fa - fp).powi(2) - (fa - fn_).powi(2) + 0.5).max(0.0)
        };
        let fd = central_difference(loss_at, &[1.0, -1.0, 0.0], 1e-6);
        for (x, y) in g.flat().iter().zip(&fd) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
            assert!(rel < 1e-6 || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
        // d/dw0 = 2(fa-fp)(xa-xp) - 2(fa-fn)(xa-xn) = 2(-2)(-2) - 2(-1)(-1) = 6
        assert!((g.flat()[0] - 6.0).abs() < 1e-12);
    }
}
