//! Learnable per-channel smoothing ahead of the group-wise Hadamard rotation.
//!
//! For one linear layer with weight `W` (`O x C`) and calibration activations
//! `X_i`, the quantized output at step `i` is `Q(X_i diag(l) H_B) Q(W diag(1/l) H_B)^T`.
//! The smoothing vector `l` is trained to minimize the mean squared difference
//! to `X_i W^T`, summed over steps.

mod adamw;
mod calib;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState, LAMBDA_FLOOR};
pub use calib::{
    build_calibration, synth_calibration, CalibrationSet, OutlierSpec, SynthCalibration,
    DEFAULT_SCHEDULE,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpcodec::FpFormat;
use crate::hadamard::{ght_rows_inplace, HadamardConfig};
use crate::quant::{quantize, Granularity};

pub const DEFAULT_EPOCHS: usize = 50;

#[derive(Clone, Debug)]
pub struct GaltProblem {
    calib: CalibrationSet,
    weight: Array2<f64>,
    hadamard: HadamardConfig,
    /// Current smoothing vector, all ones after construction.
    pub lambda: Array1<f64>,
    /// `None` keeps both operands in full precision.
    quant: Option<FpFormat>,
    granularity: Granularity,
    targets: Vec<Array2<f64>>,
}

struct Forward {
    qa: Array2<f64>,
    qw: Array2<f64>,
    resid: Array2<f64>,
}

impl GaltProblem {
    pub fn new(
        calib: CalibrationSet,
        weight: Array2<f64>,
        hadamard: HadamardConfig,
        quant: Option<FpFormat>,
        granularity: Granularity,
    ) -> Result<Self> {
        hadamard.validate()?;
        let c = calib.dim();
        if weight.ncols() != c || hadamard.dim != c {
            return Err(Error::input(format!(
                "channel mismatch: activations {c}, weight {}, Hadamard {}",
                weight.ncols(),
                hadamard.dim
            )));
        }
        if weight.nrows() == 0 {
            return Err(Error::input("weight has no output rows"));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("weight contains non-finite values"));
        }
        granularity.layout(weight.nrows(), c)?;
        for x in calib.steps() {
            granularity.layout(x.nrows(), c)?;
        }
        let wt = weight.t();
        let targets = calib.steps().iter().map(|x| x.dot(&wt)).collect();
        Ok(GaltProblem {
            calib,
            weight,
            hadamard,
            lambda: Array1::ones(c),
            quant,
            granularity,
            targets,
        })
    }

    pub fn calibration(&self) -> &CalibrationSet {
        &self.calib
    }

    pub fn weight(&self) -> ArrayView2<'_, f64> {
        self.weight.view()
    }

    pub fn hadamard(&self) -> HadamardConfig {
        self.hadamard
    }

    pub fn quant_format(&self) -> Option<FpFormat> {
        self.quant
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn steps(&self) -> usize {
        self.calib.len()
    }

    pub fn dim(&self) -> usize {
        self.calib.dim()
    }

    fn check(&self, step: usize, lambda: ArrayView1<'_, f64>) -> Result<()> {
        if step >= self.steps() {
            return Err(Error::input(format!(
                "step {step} out of range for {} steps",
                self.steps()
            )));
        }
        check_lambda(lambda, self.dim())
    }

    fn q(&self, x: Array2<f64>) -> Result<Array2<f64>> {
        match self.quant {
            None => Ok(x),
            Some(f) => Ok(quantize(x.view(), f, self.granularity)?.dequantize()),
        }
    }

    fn forward(&self, step: usize, lambda: ArrayView1<'_, f64>) -> Result<Forward> {
        self.check(step, lambda)?;
        let mut a = &self.calib.step(step) * &lambda;
        ght_rows_inplace(&mut a, &self.hadamard);
        let mut w = &self.weight / &lambda;
        ght_rows_inplace(&mut w, &self.hadamard);
        let qa = self.q(a)?;
        let qw = self.q(w)?;
        let resid = &self.targets[step] - &qa.dot(&qw.t());
        Ok(Forward { qa, qw, resid })
    }

    /// Mean squared output error at one step for an arbitrary positive `lambda`.
    pub fn loss_at(&self, step: usize, lambda: ArrayView1<'_, f64>) -> Result<f64> {
        let f = self.forward(step, lambda)?;
        Ok(mse(&f.resid))
    }

    /// Loss and straight-through gradient with respect to `lambda`.
    pub fn loss_and_grad(
        &self,
        step: usize,
        lambda: ArrayView1<'_, f64>,
    ) -> Result<(f64, Array1<f64>)> {
        let Forward { qa, qw, resid } = self.forward(step, lambda)?;
        let loss = mse(&resid);
        // dL/dY_hat = -2 R / N, and Y_hat = Qa Qw^T with Q passed straight through
        let g = resid * (-2.0 / (qa.nrows() * qw.nrows()) as f64);
        let mut da = g.dot(&qw);
        let mut dw = g.t().dot(&qa);
        // back through H_B (symmetric)
        ght_rows_inplace(&mut da, &self.hadamard);
        ght_rows_inplace(&mut dw, &self.hadamard);
        let x = self.calib.step(step);
        let from_act = (&x * &da).sum_axis(Axis(0));
        let from_w = (&self.weight * &dw).sum_axis(Axis(0));
        let mut grad = from_act;
        Zip::from(&mut grad)
            .and(&from_w)
            .and(lambda)
            .for_each(|gr, &fw, &l| *gr -= fw / (l * l));
        Ok((loss, grad))
    }

    /// Sum of per-step losses.
    pub fn total_loss(&self, lambda: ArrayView1<'_, f64>) -> Result<f64> {
        (0..self.steps()).map(|i| self.loss_at(i, lambda)).sum()
    }
}

fn mse(r: &Array2<f64>) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
}

fn check_lambda(lambda: ArrayView1<'_, f64>, dim: usize) -> Result<()> {
    if lambda.len() != dim {
        return Err(Error::input(format!(
            "lambda has {} entries, expected {dim}",
            lambda.len()
        )));
    }
    if let Some((c, v)) = lambda
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return Err(Error::input(format!("lambda[{c}] = {v} is not positive")));
    }
    Ok(())
}

/// Per-step loss at the problem's current `lambda`.
pub fn galt_loss(problem: &GaltProblem, step: usize) -> Result<f64> {
    problem.loss_at(step, problem.lambda.view())
}

/// Straight-through gradient at the problem's current `lambda`.
pub fn galt_grad(problem: &GaltProblem, step: usize) -> Result<Array1<f64>> {
    Ok(problem.loss_and_grad(step, problem.lambda.view())?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GaltOutcome {
    pub lambda: Array1<f64>,
    /// Summed per-step loss before any update.
    pub initial_loss: f64,
    pub best_loss: f64,
    /// `None` when no epoch beat the starting point.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Runs `epochs` passes over the steps in order, one update per step, and
/// keeps the lambda seen after the epoch with the lowest summed loss.
/// On return `problem.lambda` holds that snapshot.
pub fn optimize_galt(
    problem: &mut GaltProblem,
    epochs: usize,
    config: AdamWConfig,
) -> Result<GaltOutcome> {
    let initial_loss = problem.total_loss(problem.lambda.view())?;
    let mut best_loss = initial_loss;
    let mut best_lambda = problem.lambda.clone();
    let mut best_epoch = None;
    let mut state = OptimizerState::new(problem.dim(), config);
    let mut lambda = problem.lambda.clone();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for step in 0..problem.steps() {
            let (loss, grad) = problem.loss_and_grad(step, lambda.view())?;
            adamw_step(&mut state, &mut lambda, grad.view())?;
            epoch_loss += loss;
        }
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss,
        });
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_lambda.assign(&lambda);
            best_epoch = Some(epoch);
        }
    }
    problem.lambda.assign(&best_lambda);
    Ok(GaltOutcome {
        lambda: best_lambda,
        initial_loss,
        best_loss,
        best_epoch,
        history,
    })
}

/// Affine tail of a LayerNorm, `y = x * (scale + alpha) + beta`.
/// An unfused layer has `scale = 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerNormAffine {
    pub scale: Array1<f64>,
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormAffine {
    pub fn new(alpha: Array1<f64>, beta: Array1<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::input(format!(
                "alpha has {} entries, beta {}",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().chain(beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("affine parameters must be finite"));
        }
        Ok(LayerNormAffine {
            scale: Array1::ones(alpha.len()),
            alpha,
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// Applies the affine to normalized rows.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::input(format!(
                "input has {} columns, affine has {}",
                x.ncols(),
                self.dim()
            )));
        }
        let gain = &self.scale + &self.alpha;
        Ok(&x * &gain + &self.beta)
    }
}

/// Folds `lambda` into the affine so that `fused.apply(x) == affine.apply(x) * lambda`.
pub fn fuse_lambda(affine: &LayerNormAffine, lambda: ArrayView1<'_, f64>) -> Result<LayerNormAffine> {
    check_lambda(lambda, affine.dim())?;
    Ok(LayerNormAffine {
        scale: &affine.scale * &lambda,
        alpha: &affine.alpha * &lambda,
        beta: &affine.beta * &lambda,
    })
}

/// `W diag(1/lambda) H_B`, the weight operand ready for one-time quantization.
pub fn fuse_lambda_weight(
    w: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
    hadamard: &HadamardConfig,
) -> Result<Array2<f64>> {
    hadamard.validate()?;
    if w.ncols() != hadamard.dim {
        return Err(Error::input(format!(
            "weight has {} columns, Hadamard config expects {}",
            w.ncols(),
            hadamard.dim
        )));
    }
    check_lambda(lambda, w.ncols())?;
    let mut out = &w / &lambda;
    ght_rows_inplace(&mut out, hadamard);
    Ok(out)
}
