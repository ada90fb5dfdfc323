//! Cross-modal attention export: word-to-region and region-to-word weight
//! matrices from selected fusion layers, written as a plain text format.
//!
//! Format, per selected layer and head:
//! ```text
//! pair <id>
//! layer <l> word_to_region head <h> rows <T> cols <N>
//! <T lines of N space-separated weights>
//! layer <l> region_to_word head <h> rows <N> cols <T>
//! <N lines of T space-separated weights>
//! ```

use std::fmt::Write as _;

use crate::data::PairRecord;
use crate::dual::DualNetwork;
use crate::encoders::AttnKind;
use crate::numeric::NumericError;
use crate::trainer::{Result, TrainError};
use crate::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub layer: usize,
    /// One `[T x N]` matrix per head.
    pub word_to_region: Vec<Tensor>,
    /// One `[N x T]` matrix per head.
    pub region_to_word: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub pair_id: u64,
    pub layers: Vec<LayerAttention>,
}

/// Forwards one unmasked pair through the query tower and extracts the
/// cross-modal attention weights of the selected fusion layers.
pub fn dump_attention(
    net: &DualNetwork,
    record: &PairRecord,
    layers: &[usize],
) -> Result<AttentionDump> {
    let n_co = net.dims.enc.n_co;
    if layers.is_empty() {
        return Err(TrainError::Validation("no layers selected".into()));
    }
    for &l in layers {
        if l >= n_co {
            return Err(TrainError::Numeric(NumericError::Index(format!(
                "fusion layer {l} outside a stack of {n_co}"
            ))));
        }
    }
    let frozen = net.query.detached_copy();
    let mut tape = Tape::new();
    let bound = frozen.bind(&mut tape);
    let out = net.forward_pair(
        &mut tape,
        &bound,
        &record.caption,
        &record.feats,
        &record.boxes,
        None,
    )?;

    let mut dump = AttentionDump {
        pair_id: record.id,
        layers: Vec::with_capacity(layers.len()),
    };
    for &l in layers {
        let collect = |kind: AttnKind| -> Vec<Tensor> {
            out.attn
                .iter()
                .filter(|r| r.kind == kind && r.layer == l)
                .flat_map(|r| r.heads.iter().cloned())
                .collect()
        };
        dump.layers.push(LayerAttention {
            layer: l,
            word_to_region: collect(AttnKind::CoLangCross),
            region_to_word: collect(AttnKind::CoVisCross),
        });
    }
    Ok(dump)
}

/// Renders a dump in the documented text format.
pub fn format_attention_dump(dump: &AttentionDump) -> String {
    let mut text = format!("pair {}\n", dump.pair_id);
    let mut block = |layer: usize, direction: &str, head: usize, matrix: &Tensor| {
        let rows = matrix.shape()[0];
        let cols = matrix.shape()[1];
        writeln!(
            text,
            "layer {layer} {direction} head {head} rows {rows} cols {cols}"
        )
        .expect("string write");
        for r in 0..rows {
            let line = matrix
                .row(r)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            text.push_str(&line);
            text.push('\n');
        }
    };
    for layer in &dump.layers {
        for (h, m) in layer.word_to_region.iter().enumerate() {
            block(layer.layer, "word_to_region", h, m);
        }
        for (h, m) in layer.region_to_word.iter().enumerate() {
            block(layer.layer, "region_to_word", h, m);
        }
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::encoders::{EncoderConfig, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(n_co: usize) -> DualNetwork {
        let dims = ModelDims {
            enc: EncoderConfig {
                d_w: 16,
                heads: 2,
                n_lang: 1,
                n_vis: 1,
                n_co,
                ffn_mult: 2,
            },
            vocab: 30,
            max_len: 8,
            d_o: 6,
            n_labels: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        DualNetwork::new(dims, 0.9, &mut rng).unwrap()
    }

    #[test]
    fn rows_are_stochastic_and_shapes_match() {
        let net = tiny_net(2);
        let records = synth_dataset(3, 30, 4, 6, 9).unwrap();
        let dump = dump_attention(&net, &records[1], &[0, 1]).unwrap();
        assert_eq!(dump.pair_id, 1);
        assert_eq!(dump.layers.len(), 2);
        for layer in &dump.layers {
            assert_eq!(layer.word_to_region.len(), 2);
            assert_eq!(layer.region_to_word.len(), 2);
            for m in &layer.word_to_region {
                assert_eq!(m.shape(), &[6, 4]);
                for r in 0..6 {
                    let s: f64 = m.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-10, "row sum {s}");
                }
            }
            for m in &layer.region_to_word {
                assert_eq!(m.shape(), &[4, 6]);
                for r in 0..4 {
                    let s: f64 = m.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-10, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn single_region_gets_weight_exactly_one() {
        let net = tiny_net(1);
        let records = synth_dataset(2, 30, 1, 6, 10).unwrap();
        let dump = dump_attention(&net, &records[0], &[0]).unwrap();
        for m in &dump.layers[0].word_to_region {
            assert!(m.values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn out_of_range_layer_is_an_index_error() {
        let net = tiny_net(2);
        let records = synth_dataset(1, 30, 3, 6, 11).unwrap();
        let err = dump_attention(&net, &records[0], &[2]).unwrap_err();
        assert!(
            matches!(err, TrainError::Numeric(NumericError::Index(_))),
            "{err}"
        );
    }

    #[test]
    fn layers_differ_on_a_random_model() {
        let net = tiny_net(2);
        let records = synth_dataset(1, 30, 4, 6, 12).unwrap();
        let dump = dump_attention(&net, &records[0], &[0, 1]).unwrap();
        let a = &dump.layers[0].word_to_region[0];
        let b = &dump.layers[1].word_to_region[0];
        let max_gap = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-9, "layers are constant maps of each other");
    }

    #[test]
    fn formatted_dump_parses_back_row_by_row() {
        let net = tiny_net(1);
        let records = synth_dataset(1, 30, 3, 6, 13).unwrap();
        let dump = dump_attention(&net, &records[0], &[0]).unwrap();
        let text = format_attention_dump(&dump);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "pair 0");
        let header = lines.next().unwrap();
        assert!(
            header.starts_with("layer 0 word_to_region head 0 rows 6 cols 3"),
            "{header}"
        );
        let first_row: Vec<f64> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        let want: &[f64] = dump.layers[0].word_to_region[0].row(0);
        assert_eq!(first_row, want);
        // Every emitted matrix row in the file sums to 1.
        let mut checked = 0;
        for line in text.lines() {
            if line.starts_with("pair") || line.starts_with("layer") {
                continue;
            }
            let s: f64 = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().unwrap())
                .sum();
            assert!((s - 1.0).abs() < 1e-10, "row sum {s}");
            checked += 1;
        }
        assert_eq!(checked, 2 * (6 + 3));
    }
}
