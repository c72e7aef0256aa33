//! Network description and assembly.
//!
//! An [`ArchitectureSpec`] is a small declarative description: how many image
//! modalities come in, how the per-modality streams are cross-wired
//! ([`FusionMode`]), channel widths for the convolutional and pointwise
//! stages, and the class count. [`plan_wiring`] expands it into an explicit
//! node list (see [`wiring`]), which drives network construction, parameter
//! counting and the `describe` output alike, so those can never disagree.

mod network;
mod params;
mod wiring;

pub use network::{BankGradients, ForwardTrace, NetworkGradients, NetworkGraph, Phase};
pub use params::{count_parameters, ParameterCount};
pub use wiring::{describe, plan_wiring, DescribeReport, NodeDesc, NodeKey, WiringPlan, WiringRow};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the per-modality streams exchange features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// All modalities concatenated at the input of one densely connected
    /// stream (early fusion).
    SingleDense,
    /// One densely connected stream per modality, no cross links until the
    /// pointwise stage (late fusion).
    DualDense,
    /// Separate first layers per modality, merged into a single densely
    /// connected stream from layer 2 on.
    DualSingle,
    /// Dense links both within and across streams: every layer sees every
    /// earlier layer of every stream.
    HyperDense,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::SingleDense => "single_dense",
            FusionMode::DualDense => "dual_dense",
            FusionMode::DualSingle => "dual_single",
            FusionMode::HyperDense => "hyper_dense",
        }
    }
}

/// Order in which a consuming layer sees the feature blocks of one depth.
///
/// With `OwnStreamFirst`, stream s reads its own block first, then the other
/// streams in ascending order; every stream therefore sees the same set in a
/// different order, which keeps the streams' parameter roles symmetric. With
/// `StreamAscending` every consumer uses the plain stream order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationRule {
    #[default]
    OwnStreamFirst,
    StreamAscending,
}

fn default_dropout() -> f64 {
    0.5
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub fusion_mode: FusionMode,
    pub num_modalities: usize,
    /// Output channels of each 3x3x3 conv layer, in depth order.
    pub conv_kernels: Vec<usize>,
    /// Output channels of each 1x1x1 layer between conv stage and classifier.
    pub fc_kernels: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub permutation_rule: PermutationRule,
    /// Dropout rate on the 1x1x1 stage during training.
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let need = match self.fusion_mode {
            FusionMode::SingleDense => 1,
            _ => 2,
        };
        if self.num_modalities < need {
            return Err(Error::InvalidArchitecture(format!(
                "{} needs at least {} modalities, got {}",
                self.fusion_mode.as_str(),
                need,
                self.num_modalities
            )));
        }
        if self.conv_kernels.is_empty() {
            return Err(Error::InvalidArchitecture("conv_kernels must not be empty".into()));
        }
        if self.conv_kernels.iter().chain(self.fc_kernels.iter()).any(|&c| c == 0) {
            return Err(Error::InvalidArchitecture("kernel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArchitecture(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Number of 3x3x3 layers; each erodes the volume by 2 voxels per axis.
    pub fn conv_depth(&self) -> usize {
        self.conv_kernels.len()
    }

    /// Spatial erosion of the whole network per axis side
    /// (= conv depth, since pointwise layers keep size).
    pub fn margin(&self) -> usize {
        self.conv_depth()
    }

    /// Smallest cubic input edge the network accepts.
    pub fn min_input_edge(&self) -> usize {
        2 * self.conv_depth() + 1
    }

    /// Receptive field edge of one output voxel.
    pub fn receptive_field(&self) -> usize {
        2 * self.conv_depth() + 1
    }

    /// Number of separate input streams (and input tensors expected):
    /// 1 for early fusion, one per modality otherwise.
    pub fn input_streams(&self) -> usize {
        match self.fusion_mode {
            FusionMode::SingleDense => 1,
            _ => self.num_modalities,
        }
    }

    /// Channels of input stream `s` (1-based).
    pub fn input_channels(&self, _s: usize) -> usize {
        match self.fusion_mode {
            FusionMode::SingleDense => self.num_modalities,
            _ => 1,
        }
    }
}

const BASE_CONV: [usize; 9] = [25, 25, 25, 50, 50, 50, 75, 75, 75];
const BASE_FC: [usize; 3] = [400, 200, 150];

/// Resolve a named preset of the form `{family}-{N}mod`.
///
/// Families: `single`, `dual`, `dual-single`, `hyperdense`, plus widened
/// variants `single-wide`, `dual-wide` and `dual-single-wide` whose conv
/// widths are chosen so the widened networks match the hyper-dense
/// parameter budget.
pub fn preset(name: &str) -> Result<ArchitectureSpec> {
    let err = || {
        Error::InvalidArchitecture(format!(
            "unknown preset '{name}'; expected {{family}}-{{N}}mod with family one of \
             single, single-wide, dual, dual-wide, dual-single, dual-single-wide, hyperdense"
        ))
    };
    let rest = name.strip_suffix("mod").ok_or_else(err)?;
    let dash = rest.rfind('-').ok_or_else(err)?;
    let (family, n_str) = rest.split_at(dash);
    let num_modalities: usize = n_str[1..].parse().map_err(|_| err())?;
    let (fusion_mode, conv): (FusionMode, Vec<usize>) = match family {
        "single" => (FusionMode::SingleDense, BASE_CONV.to_vec()),
        "single-wide" => (FusionMode::SingleDense, vec![50, 50, 50, 75, 75, 75, 150, 150, 150]),
        "dual" => (FusionMode::DualDense, BASE_CONV.to_vec()),
        "dual-wide" => (FusionMode::DualDense, vec![40, 40, 40, 70, 70, 70, 100, 100, 100]),
        "dual-single" => (FusionMode::DualSingle, BASE_CONV.to_vec()),
        "dual-single-wide" => (FusionMode::DualSingle, vec![25, 50, 50, 100, 100, 100, 150, 150, 150]),
        "hyperdense" => (FusionMode::HyperDense, BASE_CONV.to_vec()),
        _ => return Err(err()),
    };
    let spec = ArchitectureSpec {
        fusion_mode,
        num_modalities,
        conv_kernels: conv,
        fc_kernels: BASE_FC.to_vec(),
        num_classes: 4,
        permutation_rule: PermutationRule::default(),
        dropout_rate: 0.5,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let h = preset("hyperdense-2mod").unwrap();
        assert_eq!(h.fusion_mode, FusionMode::HyperDense);
        assert_eq!(h.num_modalities, 2);
        assert_eq!(h.conv_kernels, BASE_CONV.to_vec());
        assert_eq!(h.fc_kernels, vec![400, 200, 150]);
        assert_eq!(h.num_classes, 4);

        let d = preset("dual-single-wide-3mod").unwrap();
        assert_eq!(d.fusion_mode, FusionMode::DualSingle);
        assert_eq!(d.num_modalities, 3);
        assert_eq!(d.conv_kernels[1], 50);

        assert!(preset("hyperdense-1mod").is_err()); // needs two streams
        assert!(preset("quad-2mod").is_err());
        assert!(preset("hyperdense").is_err());
        assert!(preset("hyperdense-xmod").is_err());
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut s = preset("single-2mod").unwrap();
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = preset("dual-2mod").unwrap();
        s.conv_kernels.clear();
        assert!(s.validate().is_err());
        let mut s = preset("dual-2mod").unwrap();
        s.dropout_rate = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_roundtrip_rejects_unknown_keys() {
        let s = preset("hyperdense-2mod").unwrap();
        let j = serde_json::to_string(&s).unwrap();
        let back: ArchitectureSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let bad = j.replace("\"num_classes\"", "\"n_classes\"");
        assert!(serde_json::from_str::<ArchitectureSpec>(&bad).is_err());
    }

    #[test]
    fn geometry_helpers() {
        let s = preset("hyperdense-2mod").unwrap();
        assert_eq!(s.conv_depth(), 9);
        assert_eq!(s.margin(), 9);
        assert_eq!(s.receptive_field(), 19);
        assert_eq!(s.input_streams(), 2);
        assert_eq!(s.input_channels(1), 1);
        let e = preset("single-3mod").unwrap();
        assert_eq!(e.input_streams(), 1);
        assert_eq!(e.input_channels(1), 3);
    }
}
