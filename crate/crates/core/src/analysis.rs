//! Connection re-use analysis: per (source block, consumer conv layer)
//! average absolute weight, normalized per consumer, exported as heatmap
//! data.
//!
//! For a consumer layer t whose concatenated input gives source block b the
//! channel range R, the raw entry is the mean of |w| over t's output
//! channels × R × all kernel taps. Normalization divides each column by its
//! maximum raw value (a column of zeros normalizes to zeros), so every
//! consumer's strongest source reads exactly 1.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeDesc, NodeKey};
use crate::scalar::Scalar;

/// Mean-|w| table over the dense wiring, rows = source blocks (inputs
/// first, then conv blocks, stream-major and layer-minor), columns =
/// consumer conv layers in the same order. `None` marks block pairs the
/// wiring does not connect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `raw[source][target]`: mean absolute weight, before normalization.
    pub raw: Vec<Vec<Option<f64>>>,
    /// `raw` scaled so each column's maximum is 1 (columns of zeros stay 0).
    pub normalized: Vec<Vec<Option<f64>>>,
}

impl ReuseMatrix {
    pub fn entry_raw(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.sources.iter().position(|n| n == source)?;
        let t = self.targets.iter().position(|n| n == target)?;
        self.raw[s][t]
    }

    pub fn entry_normalized(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.sources.iter().position(|n| n == source)?;
        let t = self.targets.iter().position(|n| n == target)?;
        self.normalized[s][t]
    }

    /// CSV rendering of the normalized matrix: header row of target ids,
    /// one row per source, six decimals, empty cells where no edge exists.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.targets {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (s, name) in self.sources.iter().enumerate() {
            out.push_str(name);
            for t in 0..self.targets.len() {
                out.push(',');
                if let Some(v) = self.normalized[s][t] {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Conv-layer keys of a plan, stream-major then layer-minor.
fn conv_keys_ordered(net_nodes: &[NodeDesc]) -> Vec<NodeKey> {
    let mut keys: Vec<(usize, usize)> = net_nodes
        .iter()
        .filter_map(|n| match n.key {
            NodeKey::Conv { stream, layer } => Some((stream, layer)),
            _ => None,
        })
        .collect();
    keys.sort_unstable();
    keys.into_iter().map(|(stream, layer)| NodeKey::Conv { stream, layer }).collect()
}

/// Compute the re-use matrix of a built network.
pub fn reuse_matrix<T: Scalar>(net: &NetworkGraph<T>) -> ReuseMatrix {
    let plan = &net.plan;
    let inputs: Vec<NodeKey> =
        (1..=plan.spec.input_streams()).map(|stream| NodeKey::Input { stream }).collect();
    let convs = conv_keys_ordered(&plan.nodes);
    let sources: Vec<NodeKey> = inputs.iter().chain(&convs).copied().collect();
    let targets = convs;

    // (sum of |w|, tap count) per defined entry, accumulated over every
    // occurrence of the source in the consumer's concatenation.
    let mut acc: Vec<Vec<Option<(f64, f64)>>> = vec![vec![None; targets.len()]; sources.len()];
    for (t_idx, &t_key) in targets.iter().enumerate() {
        let node_i = plan.node_index(t_key).expect("target key comes from the plan");
        let node = &plan.nodes[node_i];
        let bank = &net.banks[node_i];
        let k3 = bank.kernel * bank.kernel * bank.kernel;
        let mut offset = 0usize;
        for &src in &node.sources {
            let ch = plan.channels_of(src);
            let s_idx = sources.iter().position(|&s| s == src).expect("source block is a row");
            let mut sum = 0.0f64;
            for o in 0..bank.out_channels {
                let row = (o * bank.in_channels + offset) * k3;
                for w in &bank.weights[row..row + ch * k3] {
                    sum += w.as_f64().abs();
                }
            }
            let count = (bank.out_channels * ch * k3) as f64;
            let cell = acc[s_idx][t_idx].get_or_insert((0.0, 0.0));
            cell.0 += sum;
            cell.1 += count;
            offset += ch;
        }
    }

    let raw: Vec<Vec<Option<f64>>> = acc
        .iter()
        .map(|row| row.iter().map(|c| c.map(|(sum, count)| sum / count)).collect())
        .collect();

    let mut normalized = raw.clone();
    for t in 0..targets.len() {
        let max = raw.iter().filter_map(|row| row[t]).fold(0.0f64, f64::max);
        for row in &mut normalized {
            if let Some(v) = &mut row[t] {
                *v = if max > 0.0 { *v / max } else { 0.0 };
            }
        }
    }

    ReuseMatrix {
        sources: sources.iter().map(|k| k.name()).collect(),
        targets: targets.iter().map(|k| k.name()).collect(),
        raw,
        normalized,
    }
}

/// Write the matrix to `path`: JSON (full content, raw and normalized) for a
/// `.json` extension, the normalized CSV table otherwise.
pub fn export_heatmap(matrix: &ReuseMatrix, path: &Path) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        let mut s = serde_json::to_string_pretty(matrix)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        s.push('\n');
        s
    } else {
        matrix.to_csv()
    };
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse the CSV form back into (sources, targets, normalized values).
pub fn parse_heatmap_csv(text: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("<csv>", "empty heatmap file"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("source") {
        return Err(Error::format("<csv>", "heatmap header must start with 'source'"));
    }
    let targets: Vec<String> = cols.map(str::to_string).collect();
    let mut sources = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        sources.push(cells.next().unwrap_or_default().to_string());
        let row = cells
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::format("<csv>", format!("bad heatmap value {c:?}: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != targets.len() {
            return Err(Error::format(
                "<csv>",
                format!("row {} has {} values, header has {}", sources.last().unwrap(), row.len(), targets.len()),
            ));
        }
        values.push(row);
    }
    Ok((sources, targets, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{preset, ArchitectureSpec, FusionMode, NetworkGraph, PermutationRule};

    fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            fusion_mode: FusionMode::HyperDense,
            num_modalities: 2,
            conv_kernels: vec![1, 1],
            fc_kernels: vec![2],
            num_classes: 2,
            dropout_rate: 0.0,
            permutation_rule: PermutationRule::OwnStreamFirst,
        }
    }

    /// Overwrite the weights a consumer applies to one source block.
    fn set_edge<F: Fn(f64) -> f64>(
        net: &mut NetworkGraph<f64>,
        target: NodeKey,
        source: NodeKey,
        f: F,
    ) {
        let node_i = net.plan.node_index(target).unwrap();
        let node = net.plan.nodes[node_i].clone();
        let bank = &mut net.banks[node_i];
        let k3 = bank.kernel.pow(3);
        let mut offset = 0;
        for src in &node.sources {
            let ch = net.plan.channels_of(*src);
            if *src == source {
                for o in 0..bank.out_channels {
                    let row = (o * bank.in_channels + offset) * k3;
                    for w in &mut bank.weights[row..row + ch * k3] {
                        *w = f(*w);
                    }
                }
            }
            offset += ch;
        }
    }

    #[test]
    fn uniform_weights_normalize_to_one_everywhere() {
        let mut net = NetworkGraph::<f64>::build(&tiny_spec(), 0).unwrap();
        for bank in &mut net.banks {
            bank.weights.iter_mut().for_each(|w| *w = -0.5);
        }
        let m = reuse_matrix(&net);
        for (s, row) in m.raw.iter().enumerate() {
            for (t, cell) in row.iter().enumerate() {
                if let Some(raw) = cell {
                    assert!((raw - 0.5).abs() < 1e-15, "raw[{s}][{t}] = {raw}");
                    assert_eq!(m.normalized[s][t], Some(1.0));
                }
            }
        }
    }

    #[test]
    fn zeroed_source_block_reads_zero() {
        let mut net = NetworkGraph::<f64>::build(&tiny_spec(), 1).unwrap();
        let target = NodeKey::Conv { stream: 1, layer: 2 };
        let source = NodeKey::Conv { stream: 2, layer: 1 };
        set_edge(&mut net, target, source, |_| 0.0);
        let m = reuse_matrix(&net);
        assert_eq!(m.entry_raw("s2L1", "s1L2"), Some(0.0));
        assert_eq!(m.entry_normalized("s2L1", "s1L2"), Some(0.0));
        // the column still has a nonzero entry, so its max is 1
        assert_eq!(m.entry_normalized("s1L1", "s1L2").map(|v| v == 1.0), Some(true));
    }

    #[test]
    fn hand_set_weights_match_a_hand_computed_table() {
        let mut net = NetworkGraph::<f64>::build(&tiny_spec(), 2).unwrap();
        // dyadic magnitudes keep the per-block means exactly representable
        set_edge(&mut net, NodeKey::Conv { stream: 1, layer: 1 }, NodeKey::Input { stream: 1 }, |_| 0.5);
        set_edge(&mut net, NodeKey::Conv { stream: 2, layer: 1 }, NodeKey::Input { stream: 2 }, |_| -0.75);
        // layer 2 of stream 1 reads [s1L1, s2L1]; give the halves distinct magnitudes
        set_edge(&mut net, NodeKey::Conv { stream: 1, layer: 2 }, NodeKey::Conv { stream: 1, layer: 1 }, |_| 0.25);
        set_edge(&mut net, NodeKey::Conv { stream: 1, layer: 2 }, NodeKey::Conv { stream: 2, layer: 1 }, |_| -0.5);
        set_edge(&mut net, NodeKey::Conv { stream: 2, layer: 2 }, NodeKey::Conv { stream: 2, layer: 1 }, |_| 0.875);
        set_edge(&mut net, NodeKey::Conv { stream: 2, layer: 2 }, NodeKey::Conv { stream: 1, layer: 1 }, |_| 0.25);

        let m = reuse_matrix(&net);
        assert_eq!(m.sources, vec!["s1L0", "s2L0", "s1L1", "s1L2", "s2L1", "s2L2"]);
        assert_eq!(m.targets, vec!["s1L1", "s1L2", "s2L1", "s2L2"]);

        assert_eq!(m.entry_raw("s1L0", "s1L1"), Some(0.5));
        assert_eq!(m.entry_raw("s2L0", "s2L1"), Some(0.75));
        assert_eq!(m.entry_raw("s1L1", "s1L2"), Some(0.25));
        assert_eq!(m.entry_raw("s2L1", "s1L2"), Some(0.5));
        assert_eq!(m.entry_raw("s2L1", "s2L2"), Some(0.875));
        assert_eq!(m.entry_raw("s1L1", "s2L2"), Some(0.25));
        // no edge: inputs feed only layer 1, layer 2 blocks feed no conv layer here
        assert_eq!(m.entry_raw("s1L0", "s1L2"), None);
        assert_eq!(m.entry_raw("s1L2", "s2L2"), None);

        // normalization is per column
        assert_eq!(m.entry_normalized("s1L0", "s1L1"), Some(1.0));
        assert_eq!(m.entry_normalized("s1L1", "s1L2"), Some(0.5));
        assert_eq!(m.entry_normalized("s2L1", "s1L2"), Some(1.0));
        assert_eq!(m.entry_normalized("s1L1", "s2L2"), Some(0.25 / 0.875));
    }

    #[test]
    fn base_two_stream_dimensions_and_coverage() {
        let spec = preset("hyperdense-2mod").unwrap();
        let net = NetworkGraph::<f32>::build(&spec, 3).unwrap();
        let m = reuse_matrix(&net);
        assert_eq!(m.sources.len(), 2 + 18);
        assert_eq!(m.targets.len(), 18);

        // every defined entry corresponds to exactly one wiring edge of a
        // conv consumer, and every such edge is present
        let mut defined = 0;
        for row in &m.raw {
            defined += row.iter().filter(|c| c.is_some()).count();
        }
        let mut edges = 0;
        for node in &net.plan.nodes {
            if matches!(node.key, NodeKey::Conv { .. }) {
                edges += node.sources.len();
                for src in &node.sources {
                    assert!(
                        m.entry_raw(&src.name(), &node.key.name()).is_some(),
                        "edge {} -> {} missing",
                        src,
                        node.key
                    );
                }
            }
        }
        assert_eq!(defined, edges);

        // all values in [0,1] after normalization, every column max exactly 1
        for t in 0..m.targets.len() {
            let mut max = 0.0f64;
            for row in &m.normalized {
                if let Some(v) = row[t] {
                    assert!((0.0..=1.0).contains(&v));
                    max = max.max(v);
                }
            }
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn single_stream_matrix_has_only_same_path_rows() {
        let spec = preset("single-2mod").unwrap();
        let net = NetworkGraph::<f32>::build(&spec, 4).unwrap();
        let m = reuse_matrix(&net);
        assert_eq!(m.sources.len(), 1 + 9);
        assert_eq!(m.targets.len(), 9);
        // the fused input feeds layer 1 only
        assert!(m.entry_raw("s1L0", "s1L1").is_some());
        for l in 2..=9 {
            assert_eq!(m.entry_raw("s1L0", &format!("s1L{l}")), None);
        }
        // layer l reads exactly layers 1..l-1
        for l in 2..=9usize {
            for e in 1..l {
                assert!(m.entry_raw(&format!("s1L{e}"), &format!("s1L{l}")).is_some());
            }
            for e in l..=9 {
                assert_eq!(m.entry_raw(&format!("s1L{e}"), &format!("s1L{l}")), None);
            }
        }
    }

    #[test]
    fn doubling_a_source_blocks_consumer_weights_doubles_raw() {
        let mut net = NetworkGraph::<f64>::build(&tiny_spec(), 5).unwrap();
        let before = reuse_matrix(&net);
        let source = NodeKey::Conv { stream: 2, layer: 1 };
        // scale the weights every consumer applies to this block
        for key in [NodeKey::Conv { stream: 1, layer: 2 }, NodeKey::Conv { stream: 2, layer: 2 }] {
            set_edge(&mut net, key, source, |w| 2.0 * w);
        }
        let after = reuse_matrix(&net);
        for target in ["s1L2", "s2L2"] {
            let b_raw = before.entry_raw("s2L1", target).unwrap();
            let a_raw = after.entry_raw("s2L1", target).unwrap();
            assert!((a_raw - 2.0 * b_raw).abs() < 1e-12 * b_raw.max(1.0));
            assert!(
                after.entry_normalized("s2L1", target).unwrap()
                    >= before.entry_normalized("s2L1", target).unwrap()
            );
        }
    }

    #[test]
    fn csv_and_json_roundtrip() {
        let net = NetworkGraph::<f32>::build(&tiny_spec(), 6).unwrap();
        let m = reuse_matrix(&net);

        let csv = m.to_csv();
        let (sources, targets, values) = parse_heatmap_csv(&csv).unwrap();
        assert_eq!(sources, m.sources);
        assert_eq!(targets, m.targets);
        for (s, row) in values.iter().enumerate() {
            for (t, cell) in row.iter().enumerate() {
                match (cell, m.normalized[s][t]) {
                    (None, None) => {}
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 5e-7),
                    other => panic!("cell ({s},{t}) mismatched: {other:?}"),
                }
            }
        }

        let json = serde_json::to_string(&m).unwrap();
        let back: ReuseMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);

        // file export picks the format by extension
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("reuse.csv");
        let json_path = dir.path().join("reuse.json");
        export_heatmap(&m, &csv_path).unwrap();
        export_heatmap(&m, &json_path).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), csv);
        let from_file: ReuseMatrix =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(from_file, m);
    }
}
