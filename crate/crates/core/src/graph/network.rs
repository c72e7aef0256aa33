//! Runnable network: parameter storage, forward pass, and backpropagation
//! over an arbitrary wiring plan.

use super::wiring::{NodeKey, WiringPlan};
use super::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::label::LabelBatch;
use crate::ops::conv::{conv3d_valid, conv3d_valid_backward, ConvKernelBank, ConvStrategy};
use crate::ops::dropout::{dropout_backward, dropout_forward, DropoutMask};
use crate::ops::prelu::{prelu_backward, prelu_forward};
use crate::ops::softmax::{cross_entropy, voxel_softmax};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, crop_center, embed_center, split_channels, Shape5, VolumeTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Whether stochastic regularisation (dropout) is live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

/// A wiring plan bound to parameter banks, one per node.
#[derive(Clone, Debug)]
pub struct NetworkGraph<T> {
    pub plan: WiringPlan,
    pub banks: Vec<ConvKernelBank<T>>,
    pub strategy: ConvStrategy,
}

/// Intermediate activations kept by a traced forward pass, enough to run
/// backpropagation without recomputing anything.
pub struct ForwardTrace<T> {
    /// Per node: the concatenated (and centre-cropped) input it convolved.
    concat: Vec<VolumeTensor<T>>,
    /// Per node with PReLU: the pre-activation tensor.
    preact: Vec<Option<VolumeTensor<T>>>,
    masks: Vec<Option<DropoutMask>>,
    /// Per node: spatial size of its output block.
    out_spatial: Vec<[usize; 3]>,
    pub probs: VolumeTensor<T>,
}

/// Gradients for one node's parameter bank.
#[derive(Clone, Debug)]
pub struct BankGradients<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub prelu: Option<Vec<T>>,
}

/// Gradients for the whole network plus the inputs.
#[derive(Clone, Debug)]
pub struct NetworkGradients<T> {
    pub banks: Vec<BankGradients<T>>,
    pub inputs: Vec<VolumeTensor<T>>,
}

impl<T: Scalar> NetworkGradients<T> {
    pub fn all_finite(&self) -> bool {
        self.banks.iter().all(|b| {
            b.weights.iter().all(|v| v.is_finite())
                && b.bias.iter().all(|v| v.is_finite())
                && b.prelu.as_ref().map_or(true, |p| p.iter().all(|v| v.is_finite()))
        }) && self.inputs.iter().all(|t| t.all_finite())
    }
}

fn add_assign<T: Scalar>(acc: &mut VolumeTensor<T>, add: &VolumeTensor<T>) -> Result<()> {
    if acc.shape() != add.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient accumulation: {} vs {}",
            acc.shape(),
            add.shape()
        )));
    }
    for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a += *b;
    }
    Ok(())
}

impl<T: Scalar> NetworkGraph<T> {
    /// Build a network with freshly initialised parameters (He-scaled
    /// normal weights, zero biases, PReLU slopes at 0.25), deterministic in
    /// `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let plan = super::wiring::plan_wiring(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = plan
            .nodes
            .iter()
            .map(|node| {
                let mut bank = ConvKernelBank::zeros(node.out_channels, node.in_channels, node.kernel, node.prelu);
                crate::train::init::he_init_bank(&mut bank, &mut rng);
                bank
            })
            .collect();
        Ok(NetworkGraph { plan, banks, strategy: ConvStrategy::default() })
    }

    /// Reassemble a network from stored parts (checkpoint load).
    pub fn from_parts(plan: WiringPlan, banks: Vec<ConvKernelBank<T>>) -> Result<Self> {
        if plan.nodes.len() != banks.len() {
            return Err(Error::InvalidArchitecture(format!(
                "plan has {} nodes but {} parameter banks supplied",
                plan.nodes.len(),
                banks.len()
            )));
        }
        for (node, bank) in plan.nodes.iter().zip(&banks) {
            if bank.out_channels != node.out_channels
                || bank.in_channels != node.in_channels
                || bank.kernel != node.kernel
                || bank.prelu.is_some() != node.prelu
            {
                return Err(Error::InvalidArchitecture(format!(
                    "parameter bank for {} does not match its wiring",
                    node.key
                )));
            }
        }
        Ok(NetworkGraph { plan, banks, strategy: ConvStrategy::default() })
    }

    pub fn plan(&self) -> &WiringPlan {
        &self.plan
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.plan.spec
    }

    pub fn banks(&self) -> &[ConvKernelBank<T>] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [ConvKernelBank<T>] {
        &mut self.banks
    }

    fn validate_inputs(&self, inputs: &[VolumeTensor<T>]) -> Result<Shape5> {
        let spec = self.spec();
        if inputs.len() != spec.input_streams() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input stream(s), got {}",
                spec.input_streams(),
                inputs.len()
            )));
        }
        let first = inputs[0].shape();
        for (i, t) in inputs.iter().enumerate() {
            let s = t.shape();
            if s.channels != spec.input_channels(i + 1) {
                return Err(Error::ShapeMismatch(format!(
                    "input stream {} must have {} channel(s), got {}",
                    i + 1,
                    spec.input_channels(i + 1),
                    s.channels
                )));
            }
            if s.batch != first.batch || s.spatial() != first.spatial() {
                return Err(Error::ShapeMismatch(format!(
                    "input stream {} is {} but stream 1 is {}",
                    i + 1,
                    s,
                    first
                )));
            }
        }
        let min = spec.min_input_edge();
        if first.spatial().iter().any(|&d| d < min) {
            return Err(Error::ShapeMismatch(format!(
                "input spatial {:?} too small; {} conv layers need at least {min} per axis",
                first.spatial(),
                spec.conv_depth()
            )));
        }
        Ok(first)
    }

    /// Per-node dropout seeds derived from one master seed, in node order.
    fn node_seeds(&self, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.plan.nodes.len()).map(|_| rng.gen()).collect()
    }

    fn run(
        &self,
        inputs: &[VolumeTensor<T>],
        phase: Phase,
        seed: u64,
        keep_trace: bool,
    ) -> Result<(VolumeTensor<T>, Option<ForwardTrace<T>>)> {
        self.validate_inputs(inputs)?;
        let n_nodes = self.plan.nodes.len();
        let seeds = self.node_seeds(seed);
        let mut outputs: Vec<Option<VolumeTensor<T>>> = (0..n_nodes).map(|_| None).collect();
        let mut tr_concat: Vec<VolumeTensor<T>> = Vec::new();
        let mut tr_preact: Vec<Option<VolumeTensor<T>>> = Vec::new();
        let mut tr_masks: Vec<Option<DropoutMask>> = Vec::new();
        let mut tr_spatial: Vec<[usize; 3]> = Vec::with_capacity(n_nodes);
        let mut probs = None;

        for (i, node) in self.plan.nodes.iter().enumerate() {
            // Assemble the node input: fetch source blocks, centre-crop all
            // to the smallest spatial size present, concatenate channels.
            let parts: Vec<&VolumeTensor<T>> = node
                .sources
                .iter()
                .map(|src| match src {
                    NodeKey::Input { stream } => Ok(&inputs[stream - 1]),
                    key => {
                        let j = self.plan.node_index(*key).ok_or_else(|| {
                            Error::InvalidArchitecture(format!("{} reads undefined block {}", node.key, key))
                        })?;
                        outputs[j].as_ref().ok_or_else(|| {
                            Error::InvalidArchitecture(format!("{} reads {} before it ran", node.key, key))
                        })
                    }
                })
                .collect::<Result<_>>()?;
            let mut target = parts[0].shape().spatial();
            for p in &parts {
                let s = p.shape().spatial();
                for a in 0..3 {
                    target[a] = target[a].min(s[a]);
                }
            }
            let cropped: Vec<Option<VolumeTensor<T>>> = parts
                .iter()
                .map(|p| {
                    if p.shape().spatial() == target {
                        Ok(None)
                    } else {
                        crop_center(p, target).map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&VolumeTensor<T>> = parts
                .iter()
                .zip(&cropped)
                .map(|(p, c)| c.as_ref().unwrap_or(p))
                .collect();
            let concat = concat_channels(&refs)?;
            drop(cropped);

            let preact = conv3d_valid(&concat, &self.banks[i], self.strategy)?;
            let (out, kept_preact) = if node.prelu {
                let slopes = self.banks[i]
                    .prelu
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArchitecture(format!("{} lacks PReLU slopes", node.key)))?;
                let act = prelu_forward(&preact, slopes)?;
                (act, Some(preact))
            } else {
                (preact, None)
            };
            let (out, mask) = if node.dropout {
                dropout_forward(&out, self.spec().dropout_rate, phase == Phase::Train, seeds[i])?
            } else {
                (out, None)
            };

            tr_spatial.push(out.shape().spatial());
            if node.key == NodeKey::Classifier {
                probs = Some(voxel_softmax(&out));
            }
            if keep_trace {
                tr_concat.push(concat);
                tr_preact.push(kept_preact);
                tr_masks.push(mask);
            }
            outputs[i] = Some(out);
        }

        let probs = probs.ok_or_else(|| Error::InvalidArchitecture("plan has no classifier node".into()))?;
        let trace = if keep_trace {
            Some(ForwardTrace {
                concat: tr_concat,
                preact: tr_preact,
                masks: tr_masks,
                out_spatial: tr_spatial,
                probs: probs.clone(),
            })
        } else {
            None
        };
        Ok((probs, trace))
    }

    /// Forward pass; returns voxel-wise class probabilities.
    pub fn forward(&self, inputs: &[VolumeTensor<T>], phase: Phase, seed: u64) -> Result<VolumeTensor<T>> {
        Ok(self.run(inputs, phase, seed, false)?.0)
    }

    /// Forward pass keeping everything backpropagation needs.
    pub fn forward_trace(
        &self,
        inputs: &[VolumeTensor<T>],
        phase: Phase,
        seed: u64,
    ) -> Result<(VolumeTensor<T>, ForwardTrace<T>)> {
        let (probs, trace) = self.run(inputs, phase, seed, true)?;
        Ok((probs, trace.expect("trace requested")))
    }

    /// Mean cross-entropy of the network on one labelled batch.
    pub fn loss(&self, inputs: &[VolumeTensor<T>], labels: &LabelBatch, phase: Phase, seed: u64) -> Result<T> {
        let probs = self.forward(inputs, phase, seed)?;
        let (loss, _) = cross_entropy(&probs, labels)?;
        Ok(loss)
    }

    /// Full backpropagation: returns the loss and gradients for every
    /// parameter bank and every input stream.
    pub fn backward(
        &self,
        inputs: &[VolumeTensor<T>],
        labels: &LabelBatch,
        phase: Phase,
        seed: u64,
    ) -> Result<(T, NetworkGradients<T>)> {
        let (probs, trace) = self.forward_trace(inputs, phase, seed)?;
        let (loss, d_logits) = cross_entropy(&probs, labels)?;

        let n_nodes = self.plan.nodes.len();
        let mut pending: Vec<Option<VolumeTensor<T>>> = (0..n_nodes).map(|_| None).collect();
        pending[n_nodes - 1] = Some(d_logits);
        let mut bank_grads: Vec<Option<BankGradients<T>>> = (0..n_nodes).map(|_| None).collect();
        let mut input_grads: Vec<VolumeTensor<T>> = inputs.iter().map(|t| VolumeTensor::zeros(t.shape())).collect();

        for i in (0..n_nodes).rev() {
            let node = &self.plan.nodes[i];
            let g_out = pending[i]
                .take()
                .ok_or_else(|| Error::InvalidArchitecture(format!("{} received no gradient", node.key)))?;
            let g_out = match &trace.masks[i] {
                Some(mask) => dropout_backward(&g_out, mask)?,
                None => g_out,
            };
            let (g_pre, d_slopes) = if node.prelu {
                let slopes = self.banks[i].prelu.as_ref().expect("prelu bank");
                let pre = trace.preact[i].as_ref().expect("preact traced");
                let (g, d) = prelu_backward(pre, slopes, &g_out)?;
                (g, Some(d))
            } else {
                (g_out, None)
            };
            let cg = conv3d_valid_backward(&trace.concat[i], &self.banks[i], &g_pre, self.strategy)?;
            bank_grads[i] = Some(BankGradients { weights: cg.weights, bias: cg.bias, prelu: d_slopes });

            let counts: Vec<usize> = node.sources.iter().map(|&k| self.plan.channels_of(k)).collect();
            let parts = split_channels(&cg.input, &counts)?;
            for (src, part) in node.sources.iter().zip(parts) {
                match src {
                    NodeKey::Input { stream } => {
                        let full = embed_center(&part, inputs[stream - 1].shape().spatial())?;
                        add_assign(&mut input_grads[stream - 1], &full)?;
                    }
                    key => {
                        let j = self.plan.node_index(*key).expect("validated in forward");
                        let full = embed_center(&part, trace.out_spatial[j])?;
                        match &mut pending[j] {
                            Some(acc) => add_assign(acc, &full)?,
                            slot @ None => *slot = Some(full),
                        }
                    }
                }
            }
        }

        let banks = bank_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or_else(|| Error::InvalidArchitecture(format!("{} produced no gradient", self.plan.nodes[i].key)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, NetworkGradients { banks, inputs: input_grads }))
    }
}
