//! Counting, optimal-transport and total-variation losses between a
//! ground-truth map `y` and a prediction `ŷ`, each with its gradient in `ŷ`.

use crate::density::DensityMap;
use crate::error::{Error, Result};

use super::sinkhorn::{sinkhorn_with_gradient, CostMatrix, TransportPlan, TransportProblem};

/// A scalar loss and its gradient with respect to every cell of `ŷ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtSettings {
    /// Entropic regularization; `None` means 1% of the mean cost.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for OtSettings {
    fn default() -> Self {
        OtSettings {
            epsilon: None,
            max_iters: TransportProblem::DEFAULT_MAX_ITERS,
            tolerance: TransportProblem::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmCountWeights {
    pub lambda_ot: f64,
    pub lambda_tv: f64,
}

impl Default for DmCountWeights {
    fn default() -> Self {
        DmCountWeights { lambda_ot: 0.1, lambda_tv: 0.01 }
    }
}

fn same_grid(y: &DensityMap, yhat: &DensityMap) -> Result<()> {
    if (y.height(), y.width()) != (yhat.height(), yhat.width()) {
        return Err(Error::Shape(format!(
            "maps differ in size: {}x{} vs {}x{}",
            y.height(),
            y.width(),
            yhat.height(),
            yhat.width()
        )));
    }
    Ok(())
}

fn normalized(m: &DensityMap, what: &str) -> Result<(Vec<f64>, f64)> {
    let mass = m.count();
    if mass <= 0.0 {
        return Err(Error::ZeroMass(format!("{what} density map has zero mass")));
    }
    Ok((m.values().iter().map(|v| v / mass).collect(), mass))
}

/// Chains a gradient in `b = ŷ/‖ŷ‖₁` back to `ŷ`.
fn through_normalization(gb: &[f64], b: &[f64], mass: f64) -> Vec<f64> {
    let dot: f64 = gb.iter().zip(b).map(|(g, v)| g * v).sum();
    gb.iter().map(|g| (g - dot) / mass).collect()
}

/// `|‖y‖₁ − ‖ŷ‖₁|`
pub fn counting_loss(y: &DensityMap, yhat: &DensityMap) -> Result<LossValue> {
    same_grid(y, yhat)?;
    let diff = yhat.count() - y.count();
    let s = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(LossValue { value: diff.abs(), grad: vec![s; yhat.values().len()] })
}

/// Entropic transport cost between the normalized maps on the cell grid.
pub fn ot_loss_with_plan(y: &DensityMap, yhat: &DensityMap, settings: OtSettings) -> Result<(LossValue, Option<TransportPlan>)> {
    same_grid(y, yhat)?;
    let (p, _) = normalized(y, "ground-truth")?;
    let (q, mass) = normalized(yhat, "predicted")?;
    let cost = CostMatrix::grid(y.height(), y.width());
    let epsilon = settings.epsilon.unwrap_or(0.01 * cost.mean());
    if y.values().len() == 1 {
        return Ok((LossValue { value: 0.0, grad: vec![0.0] }, None));
    }
    let problem = TransportProblem { p, q, cost, epsilon, max_iters: settings.max_iters, tolerance: settings.tolerance };
    let (plan, gq) = sinkhorn_with_gradient(&problem)?;
    let grad = through_normalization(&gq, &problem.q, mass);
    Ok((LossValue { value: plan.cost, grad }, Some(plan)))
}

pub fn ot_loss(y: &DensityMap, yhat: &DensityMap, settings: OtSettings) -> Result<LossValue> {
    Ok(ot_loss_with_plan(y, yhat, settings)?.0)
}

/// `½ ‖y/‖y‖₁ − ŷ/‖ŷ‖₁‖₁`
pub fn tv_loss(y: &DensityMap, yhat: &DensityMap) -> Result<LossValue> {
    same_grid(y, yhat)?;
    let (a, _) = normalized(y, "ground-truth")?;
    let (b, mass) = normalized(yhat, "predicted")?;
    let mut value = 0.0;
    let gb: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| {
            let d = bi - ai;
            value += 0.5 * d.abs();
            0.5 * if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue { value, grad: through_normalization(&gb, &b, mass) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmCountLoss {
    pub total: f64,
    pub counting: f64,
    pub ot: f64,
    pub tv: f64,
    pub grad: Vec<f64>,
    pub ot_converged: bool,
}

/// `ℓ_C + λ₁ ℓ_OT + λ₂ ‖y‖₁ ℓ_TV`
pub fn dm_count_loss(y: &DensityMap, yhat: &DensityMap, weights: DmCountWeights, settings: OtSettings) -> Result<DmCountLoss> {
    let c = counting_loss(y, yhat)?;
    let mut grad = c.grad;
    let (mut ot, mut tv, mut converged) = (0.0, 0.0, true);
    if weights.lambda_ot != 0.0 {
        let (o, plan) = ot_loss_with_plan(y, yhat, settings)?;
        converged = plan.is_none_or(|p| p.converged);
        ot = o.value;
        grad.iter_mut().zip(&o.grad).for_each(|(g, d)| *g += weights.lambda_ot * d);
    }
    if weights.lambda_tv != 0.0 {
        let t = tv_loss(y, yhat)?;
        tv = t.value;
        let scale = weights.lambda_tv * y.count();
        grad.iter_mut().zip(&t.grad).for_each(|(g, d)| *g += scale * d);
    }
    Ok(DmCountLoss {
        total: c.value + weights.lambda_ot * ot + weights.lambda_tv * y.count() * tv,
        counting: c.value,
        ot,
        tv,
        grad,
        ot_converged: converged,
    })
}
