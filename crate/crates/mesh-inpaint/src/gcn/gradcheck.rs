//! Central-difference verification of every analytic parameter gradient.

use super::GcnModel;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_entry: usize,
    pub parameters_checked: usize,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative disagreement with a floor so near-zero entries compare on an
/// absolute scale. The floor tracks the overall gradient magnitude (like the
/// atol term of standard gradient checkers): an entry that is orders of
/// magnitude below the largest gradient carries no training signal, and its
/// finite difference measures only rounding noise amplified by 1/(2h).
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare every parameter gradient against central finite differences.
///
/// `loss` must evaluate the same deterministic loss each call; when
/// `with_grad` is true it must also run a backward pass that accumulates into
/// the model's gradient buffers (which this function zeroes first).
/// `corrupt` adds 1.0 to the analytic gradient of the first parameter whose
/// name contains the fragment, for self-testing the checker.
pub fn grad_check(
    model: &mut GcnModel,
    loss: &mut dyn FnMut(&mut GcnModel, bool) -> Result<f64>,
    h: f64,
    tolerance: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    model.zero_grad();
    let _ = loss(model, true)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for p in model.params_mut() {
        analytic.push((p.name.clone(), p.grad.as_slice().to_vec()));
    }
    if let Some(fragment) = corrupt {
        let target = analytic
            .iter_mut()
            .find(|(name, _)| name.contains(fragment));
        if let Some((_, grads)) = target {
            grads[0] += 1.0;
        }
    }

    let gradient_scale = analytic
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = (1e-3 * gradient_scale).max(1e-5);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_entry: 0,
        parameters_checked: analytic.len(),
        entries_checked: 0,
        tolerance,
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for entry in 0..grads.len() {
            let original = {
                let mut params = model.params_mut();
                let v = params[pi].value.as_mut_slice()[entry];
                params[pi].value.as_mut_slice()[entry] = v + h;
                v
            };
            let plus = loss(model, false)?;
            {
                let mut params = model.params_mut();
                params[pi].value.as_mut_slice()[entry] = original - h;
            }
            let minus = loss(model, false)?;
            {
                let mut params = model.params_mut();
                params[pi].value.as_mut_slice()[entry] = original;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(grads[entry], numeric, floor);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_entry = entry;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gcn::{GraphContext, ModelConfig, Phase, ScaledGraphOperator};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadratic loss through the full SGCN; gradients must match finite
    /// differences tightly.
    #[test]
    fn sgcn_quadratic_loss_matches_finite_differences() {
        let mesh = fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let config = ModelConfig {
            hidden: 4,
            ..ModelConfig::sgcn()
        };
        let mut model = crate::gcn::GcnModel::new(config, &mut rng).unwrap();
        let features = DMatrix::from_fn(mesh.vertex_count(), 4, |i, j| {
            ((i * 4 + j) as f64 * 0.21).sin() * 0.2
        });
        let target = DMatrix::from_fn(mesh.vertex_count(), 3, |i, j| {
            ((i * 3 + j) as f64 * 0.13).cos() * 0.1
        });

        let mut loss = |model: &mut crate::gcn::GcnModel, with_grad: bool| -> crate::error::Result<f64> {
            let ctx = GraphContext::Single(&op);
            let phase = Phase::Train { update_stats: false };
            let (out, tape) = model.forward(&ctx, &features, phase)?;
            let diff = &out[0] - &target;
            let value = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            if with_grad {
                model.backward(&ctx, tape.unwrap(), &[diff])?;
            }
            Ok(value)
        };
        let report = grad_check(&mut model, &mut loss, 1e-5, 1e-4, None).unwrap();
        assert!(
            report.passed(),
            "max rel error {} at {}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_entry
        );
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let mesh = fixtures::icosphere(0);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let config = ModelConfig {
            hidden: 3,
            ..ModelConfig::sgcn()
        };
        let mut model = crate::gcn::GcnModel::new(config, &mut rng).unwrap();
        let features = DMatrix::from_fn(mesh.vertex_count(), 4, |i, j| ((i + j) as f64 * 0.3).sin());
        let mut loss = |model: &mut crate::gcn::GcnModel, with_grad: bool| -> crate::error::Result<f64> {
            let ctx = GraphContext::Single(&op);
            let (out, tape) = model.forward(&ctx, &features, Phase::Train { update_stats: false })?;
            let value = 0.5 * out[0].iter().map(|v| v * v).sum::<f64>();
            if with_grad {
                model.backward(&ctx, tape.unwrap(), &[out[0].clone()])?;
            }
            Ok(value)
        };
        let report = grad_check(&mut model, &mut loss, 1e-5, 1e-4, Some("head.w")).unwrap();
        assert!(!report.passed());
        assert!(report.worst_param.contains("head.w"), "got {}", report.worst_param);
    }
}
