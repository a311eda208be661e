use super::{Result, Tensor, TensorError};

/// Outcome of a finite-difference comparison over several parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over all checked elements of
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// `(tensor index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic gradient of scalar `f` at `theta` against central
/// differences with step `eps`. Returns the max relative error.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let report = grad_check_many(
        |ts: &[Tensor]| f(&ts[0]),
        std::slice::from_ref(theta),
        eps,
        None,
    )?;
    Ok(report.max_rel_err)
}

/// Multi-tensor variant. `stride` checks every `stride`-th element of each
/// tensor (all elements when `None`), which keeps large end-to-end checks
/// affordable.
pub fn grad_check_many<F>(
    f: F,
    thetas: &[Tensor],
    eps: f64,
    stride: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let leaves: Vec<Tensor> = thetas
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(TensorError::NotScalar(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite { tensor: 0, index: 0 });
    }
    y.backward()?;

    let stride = stride.unwrap_or(1).max(1);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for idx in (0..leaf.numel()).step_by(stride) {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[idx] += delta;
                let mut probe: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
                probe[ti] = Tensor::new(data, leaf.shape())?;
                Ok(f(&probe)?.item())
            };
            let (plus, minus) = (eval(eps)?, eval(-eps)?);
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() || !analytic[idx].is_finite() {
                return Err(TensorError::NonFinite {
                    tensor: ti,
                    index: idx,
                });
            }
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, idx);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let theta = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let leaf = Tensor::param(theta.to_vec(), &[2]).unwrap();
        leaf.square().sum().backward().unwrap();
        assert_eq!(leaf.grad().unwrap(), vec![2.0, 4.0]);
        let err = grad_check(|t| Ok(t.square().sum()), &theta, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::new(vec![0.3, -0.2, 5.0], &[3]).unwrap();
        let err = grad_check(|_| Ok(Tensor::scalar(4.0)), &theta, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_reports_parameter_index() {
        let theta = Tensor::new(vec![1.0, 0.0], &[2]).unwrap();
        let f = |t: &Tensor| {
            let data: Vec<f64> = t.data().iter().map(|v| v.ln()).collect();
            let src = t.clone();
            let y = Tensor::from_op("ln", data, t.shape(), vec![t.clone()], move |g, _| {
                vec![Some(g.iter().zip(src.data()).map(|(g, x)| g / x).collect())]
            })?;
            // ln(0) only appears in the dropped element, whose backward is 0/0.
            Ok(y.narrow(0, 0, 1)?.sum())
        };
        match grad_check(f, &theta, 1e-6) {
            Err(TensorError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let theta = Tensor::new(vec![1.0], &[1]).unwrap();
        assert!(grad_check(|t| Ok(t.sum()), &theta, 0.0).is_err());
    }
}
