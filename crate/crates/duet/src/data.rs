//! Paired caption/region data: synthesis, file storage, masking, and
//! match-pair construction.
//!
//! Synthetic pairs are built from latent concepts. Each concept owns one
//! caption token and a feature-space centroid, so captions and regions of
//! one pair are dependent by construction and a nearest-centroid probe can
//! recover true pairings. A masked concept token is unrecoverable from the
//! remaining text alone; the regions are the only other witness.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::NumericError;
use crate::{Scalar, Tensor};

/// Sentence-summary token, always at position 0 and never masked.
pub const CLS_ID: usize = 0;
/// Mask placeholder token.
pub const MASK_ID: usize = 1;
/// First id available to ordinary words.
pub const FIRST_WORD_ID: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("schema error at line {line}: {what}")]
    Schema { line: usize, what: String },
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One caption/image pair. The caption is CLS-prefixed token ids; regions
/// are raw feature rows plus normalized corner boxes; labels name the latent
/// concept behind each region.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub id: u64,
    pub caption: Vec<usize>,
    /// `[N x d_o]` raw region features.
    pub feats: Tensor,
    /// `[N x 4]` normalized corner coordinates.
    pub boxes: Tensor,
    /// Concept id per region.
    pub region_labels: Vec<usize>,
}

impl PartialEq for PairRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.caption == other.caption
            && self.feats.shape() == other.feats.shape()
            && self.feats.values() == other.feats.values()
            && self.boxes.shape() == other.boxes.shape()
            && self.boxes.values() == other.boxes.values()
            && self.region_labels == other.region_labels
    }
}

/// Masking strategy knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Per-token selection probability for text masking.
    pub text_rate: Scalar,
    /// Within selected tokens: probability of the MASK placeholder (the rest
    /// become random non-special tokens).
    pub p_mask: Scalar,
    /// Per-region selection probability for feature masking.
    pub region_rate: Scalar,
    /// Within selected regions: probability of zeroing (the rest are donor
    /// replacements).
    pub p_zero: Scalar,
    /// Draw the key tower's text mask independently of the query tower's.
    pub key_text_independent: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            text_rate: 0.15,
            p_mask: 0.8,
            region_rate: 0.15,
            p_zero: 0.5,
            key_text_independent: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("text_rate", self.text_rate),
            ("p_mask", self.p_mask),
            ("region_rate", self.region_rate),
            ("p_zero", self.p_zero),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Contract(format!(
                    "{name} {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// A caption after masking: tokens to feed, plus where the mask hit and what
/// stood there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Masks every non-CLS position independently at `text_rate`; a selected
/// token becomes MASK with probability `p_mask`, otherwise a uniformly drawn
/// non-special token. Targets record the original ids.
pub fn mask_text(
    tokens: &[usize],
    vocab: usize,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskedText> {
    cfg.validate()?;
    if tokens.len() < 2 {
        return Err(DataError::Contract(
            "caption needs the summary token plus at least one word".into(),
        ));
    }
    if vocab <= FIRST_WORD_ID {
        return Err(DataError::Contract(format!(
            "vocabulary of {vocab} leaves no ordinary words"
        )));
    }
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (pos, tok) in tokens.iter().enumerate().skip(1) {
        if !rng.gen_bool(cfg.text_rate) {
            continue;
        }
        positions.push(pos);
        targets.push(*tok);
        out[pos] = if rng.gen_bool(cfg.p_mask) {
            MASK_ID
        } else {
            rng.gen_range(FIRST_WORD_ID..vocab)
        };
    }
    Ok(MaskedText {
        tokens: out,
        positions,
        targets,
    })
}

/// Region features after masking, with the positions that were hit.
#[derive(Debug, Clone)]
pub struct MaskedRegions {
    pub feats: Tensor,
    pub positions: Vec<usize>,
}

/// Masks regions at `region_rate`: a selected row is zeroed with probability
/// `p_zero`, otherwise replaced by a uniformly drawn row from the donor pool
/// (features of other records). Boxes are untouched by design.
pub fn mask_regions(
    feats: &Tensor,
    donors: &[&Tensor],
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskedRegions> {
    cfg.validate()?;
    if cfg.p_zero < 1.0 && cfg.region_rate > 0.0 && donors.is_empty() {
        return Err(DataError::Contract(
            "donor replacement enabled with an empty donor pool".into(),
        ));
    }
    let n = feats.shape()[0];
    let d = feats.shape()[1];
    let mut values = feats.values().to_vec();
    let mut positions = Vec::new();
    for r in 0..n {
        if !rng.gen_bool(cfg.region_rate) {
            continue;
        }
        positions.push(r);
        if cfg.p_zero >= 1.0 || rng.gen_bool(cfg.p_zero) {
            values[r * d..(r + 1) * d].fill(0.0);
        } else {
            let donor = donors[rng.gen_range(0..donors.len())];
            if donor.shape()[1] != d {
                return Err(DataError::Contract(format!(
                    "donor width {} differs from {}",
                    donor.shape()[1],
                    d
                )));
            }
            let row = rng.gen_range(0..donor.shape()[0]);
            values[r * d..(r + 1) * d].copy_from_slice(donor.row(row));
        }
    }
    Ok(MaskedRegions {
        feats: Tensor::new(values, vec![n, d])?,
        positions,
    })
}

/// Caption assignment for the matching task: which record's caption each
/// pair uses, and the resulting binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// Index into the batch whose caption is used.
    pub caption_from: Vec<usize>,
    /// 1.0 when the caption is the record's own, else 0.0.
    pub labels: Vec<Scalar>,
}

/// Keeps each caption (label 1) or swaps in a different record's caption
/// (label 0) with probability `swap_prob`. A swapped caption never comes
/// from the record itself.
pub fn make_match_pairs(
    batch_len: usize,
    swap_prob: Scalar,
    rng: &mut impl Rng,
) -> Result<MatchAssignment> {
    if !(0.0..=1.0).contains(&swap_prob) {
        return Err(DataError::Contract(format!(
            "swap probability {swap_prob} outside [0, 1]"
        )));
    }
    if batch_len < 2 && swap_prob > 0.0 {
        return Err(DataError::Contract(
            "swapping needs at least two records in the batch".into(),
        ));
    }
    let mut caption_from = Vec::with_capacity(batch_len);
    let mut labels = Vec::with_capacity(batch_len);
    for i in 0..batch_len {
        if swap_prob > 0.0 && rng.gen_bool(swap_prob) {
            let mut j = rng.gen_range(0..batch_len - 1);
            if j >= i {
                j += 1;
            }
            caption_from.push(j);
            labels.push(0.0);
        } else {
            caption_from.push(i);
            labels.push(1.0);
        }
    }
    Ok(MatchAssignment {
        caption_from,
        labels,
    })
}

/// One pair after masking, ready for both towers.
#[derive(Debug, Clone)]
pub struct MaskedPair {
    /// Index of the image record within the dataset slice.
    pub record_idx: usize,
    /// Index of the record whose caption is used (differs when swapped).
    pub caption_from: usize,
    pub query_tokens: Vec<usize>,
    pub query_mask_positions: Vec<usize>,
    pub query_mask_targets: Vec<usize>,
    pub key_tokens: Vec<usize>,
    /// Masked region features for the query tower.
    pub query_feats: Tensor,
    pub masked_region_positions: Vec<usize>,
    /// Original region features for the key tower, bit-identical to the
    /// source record.
    pub key_feats: Tensor,
    pub boxes: Tensor,
    pub region_labels: Vec<usize>,
    pub match_label: Scalar,
}

/// A batch of masked pairs.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub pairs: Vec<MaskedPair>,
}

/// Builds one training batch: caption swaps for the matching task, then
/// text masking for both towers (key independent when configured) and
/// region masking for the query tower only.
pub fn build_masked_batch(
    records: &[PairRecord],
    indices: &[usize],
    vocab: usize,
    cfg: &MaskConfig,
    swap_prob: Scalar,
    mask_vision: bool,
    rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    if indices.is_empty() {
        return Err(DataError::Contract("empty batch".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= records.len()) {
        return Err(DataError::Contract(format!(
            "batch index {bad} outside dataset of {}",
            records.len()
        )));
    }
    let assign = make_match_pairs(indices.len(), swap_prob, rng)?;
    let mut pairs = Vec::with_capacity(indices.len());
    for (slot, &rec_idx) in indices.iter().enumerate() {
        let record = &records[rec_idx];
        let caption_slot = assign.caption_from[slot];
        let caption = &records[indices[caption_slot]].caption;
        let query_text = mask_text(caption, vocab, cfg, rng)?;
        let key_text = if cfg.key_text_independent {
            mask_text(caption, vocab, cfg, rng)?
        } else {
            query_text.clone()
        };
        let (query_feats, masked_positions) = if mask_vision {
            let donors: Vec<&Tensor> = indices
                .iter()
                .filter(|&&other| other != rec_idx)
                .map(|&other| &records[other].feats)
                .collect();
            let masked = mask_regions(&record.feats, &donors, cfg, rng)?;
            (masked.feats, masked.positions)
        } else {
            (record.feats.clone(), Vec::new())
        };
        pairs.push(MaskedPair {
            record_idx: rec_idx,
            caption_from: indices[caption_slot],
            query_tokens: query_text.tokens,
            query_mask_positions: query_text.positions,
            query_mask_targets: query_text.targets,
            key_tokens: key_text.tokens,
            query_feats,
            masked_region_positions: masked_positions,
            key_feats: record.feats.clone(),
            boxes: record.boxes.clone(),
            region_labels: record.region_labels.clone(),
            match_label: assign.labels[slot],
        });
    }
    Ok(MaskedBatch { pairs })
}

/// How the synthetic vocabulary is carved up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthStructure {
    /// Latent concepts; each owns one caption token.
    pub concepts: usize,
    /// Filler tokens that carry no cross-modal signal.
    pub fillers: usize,
}

impl SynthStructure {
    pub fn concept_token(&self, concept: usize) -> usize {
        FIRST_WORD_ID + concept
    }

    /// Concept named by a token id, if any.
    pub fn concept_of_token(&self, token: usize) -> Option<usize> {
        let rel = token.checked_sub(FIRST_WORD_ID)?;
        (rel < self.concepts).then_some(rel)
    }

    pub fn filler_token(&self, filler: usize) -> usize {
        FIRST_WORD_ID + self.concepts + filler
    }
}

/// Carves `vocab` into concept and filler tokens: up to 12 concepts and 32
/// fillers, shrinking on small vocabularies.
pub fn synth_structure(vocab: usize) -> Result<SynthStructure> {
    let available = vocab.saturating_sub(FIRST_WORD_ID);
    if available < 3 {
        return Err(DataError::Contract(format!(
            "vocabulary of {vocab} is too small for synthetic pairs (need at least {})",
            FIRST_WORD_ID + 3
        )));
    }
    let concepts = (available - 1).min(12);
    let fillers = (available - concepts).min(32);
    Ok(SynthStructure { concepts, fillers })
}

/// Caption length produced by the generator: CLS, one token per concept for
/// two concepts, three fillers.
pub const SYNTH_CAPTION_LEN: usize = 6;

/// Scale of the per-record offset added to every region feature row.
const RECORD_NOISE: Scalar = 0.3;

/// Generates `n_pairs` synthetic records. Each pair draws two distinct
/// concepts; the caption names both concepts once among random fillers, and
/// the regions alternate between the concepts' feature centroids over fixed
/// per-slot grid boxes. All regions of one record share a random offset.
///
/// Each concept token appears exactly once per caption, so a masked concept
/// token cannot be recovered from the remaining text; the regions carry the
/// same concepts, making cross-modal reading the only route to it. The
/// shared offset identifies the record: a zeroed region is reconstructable
/// only by reading the record's surviving regions, never from the caption,
/// so contrastive retrieval has to use visual context.
pub fn synth_dataset(
    n_pairs: usize,
    vocab: usize,
    n_regions: usize,
    d_o: usize,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    use rand::SeedableRng;
    if n_pairs == 0 || n_regions == 0 || d_o == 0 {
        return Err(DataError::Contract(
            "n_pairs, n_regions and d_o must be positive".into(),
        ));
    }
    let structure = synth_structure(vocab)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let centroids: Vec<Vec<Scalar>> = (0..structure.concepts)
        .map(|_| (0..d_o).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    // One box per region slot: equal-width columns of a fixed band.
    let slot_box = |r: usize| -> [Scalar; 4] {
        let n = n_regions as Scalar;
        [r as Scalar / n, 0.25, (r + 1) as Scalar / n, 0.75]
    };

    let mut records = Vec::with_capacity(n_pairs);
    for id in 0..n_pairs {
        let a = rng.gen_range(0..structure.concepts);
        let mut b = rng.gen_range(0..structure.concepts - 1);
        if b >= a {
            b += 1;
        }
        let mut caption = vec![CLS_ID, structure.concept_token(a), structure.concept_token(b)];
        for _ in 0..SYNTH_CAPTION_LEN - 3 {
            caption.push(structure.filler_token(rng.gen_range(0..structure.fillers)));
        }

        let offset: Vec<Scalar> = (0..d_o)
            .map(|_| RECORD_NOISE * unit.sample(&mut rng))
            .collect();
        let mut feats = Vec::with_capacity(n_regions * d_o);
        let mut boxes = Vec::with_capacity(n_regions * 4);
        let mut labels = Vec::with_capacity(n_regions);
        for r in 0..n_regions {
            let concept = if r % 2 == 0 { a } else { b };
            labels.push(concept);
            feats.extend(centroids[concept].iter().zip(&offset).map(|(&c, &o)| c + o));
            boxes.extend_from_slice(&slot_box(r));
        }
        records.push(PairRecord {
            id: id as u64,
            caption,
            feats: Tensor::new(feats, vec![n_regions, d_o])?,
            boxes: Tensor::new(boxes, vec![n_regions, 4])?,
            region_labels: labels,
        });
    }
    Ok(records)
}

/// Shape header of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub pairs: usize,
    pub vocab: usize,
    pub regions: usize,
    pub d_o: usize,
}

/// Writes records in the line-record format: one header line
/// `pairs <n> vocab <V> regions <N> dim <d>`, then one record per line with
/// five `|`-separated fields: id, caption ids, region labels, `N*d` feature
/// values, `N*4` box values (all space-separated, floats in shortest
/// round-trip decimal form).
pub fn save_dataset(path: &Path, records: &[PairRecord], vocab: usize) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| DataError::Contract("refusing to write an empty dataset".into()))?;
    let n = first.feats.shape()[0];
    let d = first.feats.shape()[1];
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "pairs {} vocab {} regions {} dim {}", records.len(), vocab, n, d)?;
    for rec in records {
        let caption = join_display(rec.caption.iter());
        let labels = join_display(rec.region_labels.iter());
        let feats = join_display(rec.feats.values().iter());
        let boxes = join_display(rec.boxes.values().iter());
        writeln!(out, "{}|{caption}|{labels}|{feats}|{boxes}", rec.id)?;
    }
    Ok(())
}

fn join_display<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads a dataset file, validating every record against the header shapes.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<PairRecord>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Parse {
            line: 1,
            what: "empty file".into(),
        })??;
    let header = parse_header(&header_line)?;

    let mut records = Vec::with_capacity(header.pairs);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, line_no, &header)?);
    }
    if records.len() != header.pairs {
        return Err(DataError::Schema {
            line: records.len() + 1,
            what: format!(
                "header promises {} records, file holds {}",
                header.pairs,
                records.len()
            ),
        });
    }
    Ok((header, records))
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let bad = |what: &str| DataError::Parse {
        line: 1,
        what: what.into(),
    };
    if parts.len() != 8
        || parts[0] != "pairs"
        || parts[2] != "vocab"
        || parts[4] != "regions"
        || parts[6] != "dim"
    {
        return Err(bad("header must read: pairs <n> vocab <V> regions <N> dim <d>"));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| bad(&format!("{what} is not a number: {s:?}")))
    };
    Ok(DatasetHeader {
        pairs: num(parts[1], "pair count")?,
        vocab: num(parts[3], "vocabulary size")?,
        regions: num(parts[5], "region count")?,
        d_o: num(parts[7], "feature width")?,
    })
}

fn parse_record(line: &str, line_no: usize, header: &DatasetHeader) -> Result<PairRecord> {
    let parse = |what: String| DataError::Parse {
        line: line_no,
        what,
    };
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 5 {
        return Err(parse(format!(
            "expected 5 |-separated fields, found {}",
            fields.len()
        )));
    }
    let id: u64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| parse(format!("record id {:?} is not an integer", fields[0])))?;
    let ints = |s: &str, what: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| parse(format!("{what} holds a non-integer {v:?}")))
            })
            .collect()
    };
    let floats = |s: &str, what: &str| -> Result<Vec<Scalar>> {
        s.split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| parse(format!("{what} holds a non-numeric {v:?}")))
            })
            .collect()
    };
    let caption = ints(fields[1], "caption")?;
    let labels = ints(fields[2], "region labels")?;
    let feats = floats(fields[3], "features")?;
    let boxes = floats(fields[4], "boxes")?;

    let schema = |what: String| DataError::Schema {
        line: line_no,
        what,
    };
    if caption.is_empty() || caption[0] != CLS_ID {
        return Err(schema("caption must start with the summary token".into()));
    }
    if let Some(&bad) = caption.iter().find(|&&t| t >= header.vocab) {
        return Err(schema(format!(
            "token {bad} outside vocabulary {}",
            header.vocab
        )));
    }
    if labels.len() != header.regions {
        return Err(schema(format!(
            "{} region labels for {} regions",
            labels.len(),
            header.regions
        )));
    }
    if feats.len() != header.regions * header.d_o {
        return Err(schema(format!(
            "{} feature values, expected {}",
            feats.len(),
            header.regions * header.d_o
        )));
    }
    if boxes.len() != header.regions * 4 {
        return Err(schema(format!(
            "{} box values, expected {}",
            boxes.len(),
            header.regions * 4
        )));
    }
    if boxes.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
        return Err(schema("box coordinates must lie in [0, 1]".into()));
    }
    Ok(PairRecord {
        id,
        caption,
        feats: Tensor::new(feats, vec![header.regions, header.d_o])?,
        boxes: Tensor::new(boxes, vec![header.regions, 4])?,
        region_labels: labels,
    })
}
