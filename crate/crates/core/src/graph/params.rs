//! Parameter counting, straight off the wiring plan.
//!
//! Counts come in two flavours: multiplicative weights only (kernel taps,
//! the convention used when comparing architectures), and the full count
//! including biases and PReLU slopes (what a checkpoint actually stores).

use super::wiring::{plan_wiring, WiringPlan};
use super::ArchitectureSpec;
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    /// Kernel taps of the 3x3x3 stage.
    pub conv_weights: usize,
    /// Kernel taps of the 1x1x1 stage including the classifier.
    pub fc_weights: usize,
    /// Biases plus PReLU slopes across the whole network.
    pub aux: usize,
}

impl ParameterCount {
    /// Multiplicative weights only.
    pub fn weights_total(&self) -> usize {
        self.conv_weights + self.fc_weights
    }

    /// Everything a checkpoint stores.
    pub fn full_total(&self) -> usize {
        self.weights_total() + self.aux
    }
}

pub(super) fn count_plan(plan: &WiringPlan) -> ParameterCount {
    let mut conv_weights = 0;
    let mut fc_weights = 0;
    let mut aux = 0;
    for node in &plan.nodes {
        let taps = node.in_channels * node.out_channels * node.kernel.pow(3);
        if node.kernel > 1 {
            conv_weights += taps;
        } else {
            fc_weights += taps;
        }
        aux += node.out_channels; // bias
        if node.prelu {
            aux += node.out_channels; // slopes
        }
    }
    ParameterCount { conv_weights, fc_weights, aux }
}

pub fn count_parameters(spec: &ArchitectureSpec) -> Result<ParameterCount> {
    Ok(count_plan(&plan_wiring(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::preset;

    fn counts(name: &str) -> ParameterCount {
        count_parameters(&preset(name).unwrap()).unwrap()
    }

    #[test]
    fn hyper_dense_two_modalities() {
        let c = counts("hyperdense-2mod");
        assert_eq!(c.conv_weights, 9_518_850);
        assert_eq!(c.fc_weights, 830_600);
        assert_eq!(c.weights_total(), 10_349_450);
        // aux: per conv layer bias+slope = 2*C, fc same, classifier bias only
        let conv_aux = 2 * 2 * (3 * 25 + 3 * 50 + 3 * 75);
        let fc_aux = 2 * (400 + 200 + 150) + 4;
        assert_eq!(c.aux, conv_aux + fc_aux);
        assert_eq!(c.full_total(), 10_349_450 + conv_aux + fc_aux);
    }

    #[test]
    fn late_fusion_two_streams() {
        let c = counts("dual-2mod");
        assert_eq!(c.conv_weights, 4_760_100);
        assert_eq!(c.fc_weights, 470_600);
    }

    #[test]
    fn widened_late_fusion() {
        let c = counts("dual-wide-2mod");
        assert_eq!(c.conv_weights, 9_381_960);
        assert_eq!(c.fc_weights, 614_600);
    }

    #[test]
    fn widened_merge_after_first() {
        let c = counts("dual-single-wide-2mod");
        // widths chosen to land exactly on the hyper-dense budget
        assert_eq!(c.conv_weights, 9_518_850);
        assert_eq!(c.fc_weights, 470_600);
    }

    #[test]
    fn early_fusion() {
        let c = counts("single-2mod");
        // layer 1 reads both modalities (27*2*25 = 1350); the rest chains
        // within one stream
        assert_eq!(c.conv_weights, 2_380_725);
        assert_eq!(c.fc_weights, 290_600);
    }

    #[test]
    fn merge_after_first() {
        let c = counts("dual-single-2mod");
        assert_eq!(c.conv_weights, 2_667_600);
        assert_eq!(c.fc_weights, 300_600);
    }

    #[test]
    fn widened_early_fusion() {
        let c = counts("single-wide-2mod");
        assert_eq!(c.conv_weights, 7_950_825);
        // dense state 3*50 + 3*75 + 3*150 = 825 channels into fc1
        assert_eq!(c.fc_weights, 825 * 400 + 400 * 200 + 200 * 150 + 150 * 4);
    }

    #[test]
    fn three_modality_hyper_dense_grows_quadratically() {
        let c = counts("hyperdense-3mod");
        // per stream: layer l reads 3 * cumsum(l-1) channels
        let widths = [25, 25, 25, 50, 50, 50, 75, 75, 75];
        let mut per_stream = 27 * widths[0]; // 1 input channel
        let mut cum = 0;
        for l in 1..9 {
            cum += widths[l - 1];
            per_stream += 27 * 3 * cum * widths[l];
        }
        assert_eq!(c.conv_weights, 3 * per_stream);
        // fc1 reads 3 stream views of 3*450 channels
        assert_eq!(c.fc_weights, 9 * 450 * 400 + 400 * 200 + 200 * 150 + 150 * 4);
    }
}
