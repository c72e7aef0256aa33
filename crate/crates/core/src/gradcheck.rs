//! Finite-difference validation of the analytic gradients.
//!
//! Every parameter element and every input element of a (small) network is
//! perturbed by ±1e-5 and the central difference of the loss is compared
//! against the gradient from backpropagation. Relative errors are taken
//! where `max(|analytic|, |numeric|)` exceeds 1e-8; tinier pairs carry no
//! signal at this step size and are counted as skipped instead.

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Phase};
use crate::label::LabelBatch;
use crate::tensor::VolumeTensor;

const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Elements with a meaningful relative error.
    pub checked: usize,
    /// Elements whose analytic and numeric gradients both sit below the
    /// denominator floor.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Location of the worst element, for diagnostics.
    pub worst: Option<String>,
    pub tolerance: f64,
    pub pass: bool,
}

struct Sweep<'a> {
    net: &'a mut NetworkGraph<f64>,
    inputs: Vec<VolumeTensor<f64>>,
    labels: &'a LabelBatch,
    checked: usize,
    skipped: usize,
    max_rel_error: f64,
    worst: Option<String>,
}

impl Sweep<'_> {
    fn loss(&self) -> Result<f64> {
        let loss = self.net.loss(&self.inputs, self.labels, Phase::Inference, 0)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} during finite-difference sweep")));
        }
        Ok(loss)
    }

    /// Central difference at one element, addressed by a getter/setter pair.
    fn element(&mut self, analytic: f64, place: impl Fn(&mut Self, f64), original: f64, what: &str) -> Result<()> {
        place(self, original + STEP);
        let plus = self.loss();
        // restore before propagating any error
        let minus = plus.and_then(|p| {
            place(self, original - STEP);
            self.loss().map(|m| (p, m))
        });
        place(self, original);
        let (plus, minus) = minus?;
        let numeric = (plus - minus) / (2.0 * STEP);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at {what}")));
        }
        let denom = analytic.abs().max(numeric.abs());
        if denom <= DENOM_FLOOR {
            self.skipped += 1;
            return Ok(());
        }
        self.checked += 1;
        let rel = (analytic - numeric).abs() / denom;
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some(format!("{what}: analytic {analytic:.3e}, numeric {numeric:.3e}"));
        }
        Ok(())
    }
}

/// Validate every parameter and input gradient of `net` on one labelled
/// batch by central finite differences. Meant for fragments small enough
/// that O(P) extra forward passes are affordable.
pub fn grad_check(
    net: &mut NetworkGraph<f64>,
    inputs: &[VolumeTensor<f64>],
    labels: &LabelBatch,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = net.backward(inputs, labels, Phase::Inference, 0)?;
    let mut sweep = Sweep {
        net,
        inputs: inputs.to_vec(),
        labels,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };

    for (b, bank_grads) in grads.banks.iter().enumerate() {
        for i in 0..bank_grads.weights.len() {
            let original = sweep.net.banks[b].weights[i];
            sweep.element(
                bank_grads.weights[i],
                move |s, v| s.net.banks[b].weights[i] = v,
                original,
                &format!("bank {b} weight {i}"),
            )?;
        }
        for i in 0..bank_grads.bias.len() {
            let original = sweep.net.banks[b].bias[i];
            sweep.element(
                bank_grads.bias[i],
                move |s, v| s.net.banks[b].bias[i] = v,
                original,
                &format!("bank {b} bias {i}"),
            )?;
        }
        if let Some(prelu_grads) = &bank_grads.prelu {
            for i in 0..prelu_grads.len() {
                let original = sweep.net.banks[b].prelu.as_ref().expect("bank has slopes")[i];
                sweep.element(
                    prelu_grads[i],
                    move |s, v| s.net.banks[b].prelu.as_mut().expect("bank has slopes")[i] = v,
                    original,
                    &format!("bank {b} prelu slope {i}"),
                )?;
            }
        }
    }

    for (s_idx, input_grads) in grads.inputs.iter().enumerate() {
        for i in 0..input_grads.data().len() {
            let original = sweep.inputs[s_idx].data()[i];
            sweep.element(
                input_grads.data()[i],
                move |s, v| s.inputs[s_idx].data_mut()[i] = v,
                original,
                &format!("input stream {s_idx} element {i}"),
            )?;
        }
    }

    let pass = sweep.max_rel_error <= tolerance;
    Ok(GradCheckReport {
        checked: sweep.checked,
        skipped: sweep.skipped,
        max_rel_error: sweep.max_rel_error,
        worst: sweep.worst,
        tolerance,
        pass,
    })
}
