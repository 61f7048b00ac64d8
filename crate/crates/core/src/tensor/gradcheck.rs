use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Check the analytic gradient of a scalar-valued tensor function against
/// central finite differences (f(x+h) - f(x-h)) / 2h, elementwise over every
/// input. Relative error uses a unit floor: |a - fd| / max(1, |a|, |fd|).
///
/// Runs at f64; the same generic graph code is what training uses at f32.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &ids)?;
        let v = g.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value {v}")));
        }
        Ok(v)
    };
    // Reject non-finite f(x) up front.
    eval(inputs)?;

    // Analytic pass.
    let g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let loss = f(&g, &ids)?;
    if g.shape(loss) != [1] {
        return Err(Error::Oracle(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(loss)
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| {
            g.grad(*id)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked_elements: checked,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_to_rounding() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 4.5, 0.0, -0.7]).unwrap();
        let report = grad_check(|g, xs| g.sum(xs[0]), &[x], 1e-5, 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-9, "err {}", report.max_rel_err);
        assert_eq!(report.checked_elements, 6);
    }

    #[test]
    fn sum_of_sigmoid_passes() {
        let x = Tensor::new(vec![3], vec![-1.7, 0.4, 1.9]).unwrap();
        let report = grad_check(
            |g, xs| {
                let s = g.sigmoid(xs[0])?;
                g.sum(s)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "err {}", report.max_rel_err);
    }

    #[test]
    fn sum_of_layer_norm_passes() {
        let x = Tensor::new(
            vec![2, 5],
            vec![0.3, -1.0, 0.8, 2.1, -0.4, 1.5, 0.2, -2.2, 0.9, 0.1],
        )
        .unwrap();
        let gain = Tensor::new(vec![5], vec![1.1, 0.9, -0.5, 1.3, 0.7]).unwrap();
        let bias = Tensor::new(vec![5], vec![0.1, -0.2, 0.0, 0.4, -0.1]).unwrap();
        let report = grad_check(
            |g, xs| {
                let y = g.layer_norm(xs[0], xs[1], xs[2], 1e-6)?;
                g.sum(y)
            },
            &[x, gain, bias],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "err {}", report.max_rel_err);
    }

    #[test]
    fn non_finite_function_is_oracle_error() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |g, xs| {
                // ln(sum exp) of a masked-out... simpler: scale to infinity
                let y = g.scale(xs[0], f64::MAX)?;
                let z = g.mul(y, y)?;
                g.sum(z)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert_eq!(err.category(), "oracle");
    }
}
