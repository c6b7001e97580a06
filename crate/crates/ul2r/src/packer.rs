//! Packing corrupted examples into fixed-length training rows.
//!
//! Each example contributes one segment laid out as `[inputs][targets]` with
//! no padding between them — the prefix and target are concatenated *before*
//! any padding is applied, so a row holds as many whole examples as fit and
//! all padding sits at the row tail. A legacy layout that pads the prefix
//! block to a fixed width (one example per row) is kept behind
//! [`PackOptions::legacy_pad`] for side-by-side comparison; it wastes most
//! of the row and exists only as the baseline the compact layout replaces.
//!
//! The attention rule derived from a packed row:
//!
//! * tokens attend only within their own segment (packing is invisible
//!   across segment boundaries);
//! * inside a segment, positions before `prefix_len` are visible to every
//!   position of the segment (bidirectional prefix), and everything else is
//!   causal (`j <= i`);
//! * pad positions attend to nothing and nothing attends to them.
//!
//! The loss mask is 1 exactly on target positions — including the final
//! `<eos>` of each example — and 0 on prefix, mode, sentinel-in-input, and
//! pad positions.

use crate::denoiser::CorruptedExample;
use crate::tokenizer::{TokenId, Vocab};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("row budgets must be positive (inputs {len_inputs}, targets {len_targets})")]
    BadBudgets { len_inputs: usize, len_targets: usize },
    #[error("example of length {len} exceeds the row length {cap} even after trimming")]
    ExampleTooLong { len: usize, cap: usize },
}

/// One packed example inside a row: tokens `[start, end)` with the first
/// `prefix_len` of them forming the bidirectional prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub prefix_len: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// First position past the bidirectional prefix.
    pub fn prefix_end(&self) -> usize {
        self.start + self.prefix_len
    }
}

/// Options for [`pack_examples_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PackOptions {
    /// Pad every prefix block to `len_inputs` before the targets start and
    /// give each example its own row, reproducing the inefficient layout
    /// the compact packing replaces. Off by default.
    pub legacy_pad: bool,
}

/// A batch of fixed-length rows of packed segments.
///
/// Serialized field order (`row_len`, `rows`, `segments`, `loss_mask`,
/// `pad_counts`) is normative for the JSON dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBatch {
    /// Length of every row.
    pub row_len: usize,
    /// Token ids, one inner vec per row.
    pub rows: Vec<Vec<TokenId>>,
    /// Per-row segment bounds, in row order.
    pub segments: Vec<Vec<Segment>>,
    /// 1 exactly on target positions (including each example's `<eos>`).
    pub loss_mask: Vec<Vec<u8>>,
    /// Number of pad positions at the tail of each row.
    pub pad_counts: Vec<usize>,
}

impl PackedBatch {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Total number of scored (loss-mask 1) positions.
    pub fn loss_positions_total(&self) -> usize {
        self.loss_mask.iter().flatten().map(|&m| m as usize).sum()
    }
}

/// Trim an example to the row budgets: inputs keep their rightmost
/// `len_inputs` tokens (the boundary region the model must bridge), targets
/// their leftmost `len_targets`.
fn trim(ex: &CorruptedExample, len_inputs: usize, len_targets: usize) -> (Vec<TokenId>, Vec<TokenId>) {
    let inputs = if ex.inputs.len() > len_inputs {
        ex.inputs[ex.inputs.len() - len_inputs..].to_vec()
    } else {
        ex.inputs.clone()
    };
    let targets = if ex.targets.len() > len_targets {
        ex.targets[..len_targets].to_vec()
    } else {
        ex.targets.clone()
    };
    (inputs, targets)
}

/// Pack whole examples greedily into rows of length
/// `len_inputs + len_targets`, first row with room wins. Examples are
/// trimmed to the two budgets first; rows are padded at the tail only.
pub fn pack_examples(
    examples: &[CorruptedExample],
    len_inputs: usize,
    len_targets: usize,
) -> Result<PackedBatch, PackError> {
    pack_examples_with(examples, len_inputs, len_targets, PackOptions::default())
}

pub fn pack_examples_with(
    examples: &[CorruptedExample],
    len_inputs: usize,
    len_targets: usize,
    opts: PackOptions,
) -> Result<PackedBatch, PackError> {
    if len_inputs == 0 || len_targets == 0 {
        return Err(PackError::BadBudgets { len_inputs, len_targets });
    }
    let row_len = len_inputs + len_targets;
    let mut rows: Vec<Vec<TokenId>> = Vec::new();
    let mut segments: Vec<Vec<Segment>> = Vec::new();

    for ex in examples {
        let (inputs, targets) = trim(ex, len_inputs, len_targets);
        if opts.legacy_pad {
            // Baseline layout: prefix block padded to len_inputs, one
            // example per row. The whole block is a single segment whose
            // prefix spans the padded input region, so interior pads are
            // embedded and attended — the waste this layout is known for.
            let mut row = Vec::with_capacity(row_len);
            row.extend_from_slice(&inputs);
            row.resize(len_inputs, Vocab::PAD);
            row.extend_from_slice(&targets);
            segments.push(vec![Segment {
                start: 0,
                end: len_inputs + targets.len(),
                prefix_len: len_inputs,
            }]);
            rows.push(row);
            continue;
        }
        let seg_len = inputs.len() + targets.len();
        if seg_len > row_len {
            return Err(PackError::ExampleTooLong { len: seg_len, cap: row_len });
        }
        // First fit over existing rows.
        let slot = rows.iter().position(|r| r.len() + seg_len <= row_len);
        let row_idx = match slot {
            Some(i) => i,
            None => {
                rows.push(Vec::with_capacity(row_len));
                segments.push(Vec::new());
                rows.len() - 1
            }
        };
        let start = rows[row_idx].len();
        rows[row_idx].extend_from_slice(&inputs);
        rows[row_idx].extend_from_slice(&targets);
        segments[row_idx].push(Segment {
            start,
            end: start + seg_len,
            prefix_len: inputs.len(),
        });
    }

    let mut pad_counts = Vec::with_capacity(rows.len());
    for row in &mut rows {
        pad_counts.push(row_len - row.len());
        row.resize(row_len, Vocab::PAD);
    }
    let loss_mask = loss_mask_from_segments(row_len, &segments);
    Ok(PackedBatch { row_len, rows, segments, loss_mask, pad_counts })
}

fn loss_mask_from_segments(row_len: usize, segments: &[Vec<Segment>]) -> Vec<Vec<u8>> {
    segments
        .iter()
        .map(|segs| {
            let mut mask = vec![0u8; row_len];
            for seg in segs {
                for m in mask.iter_mut().take(seg.end).skip(seg.prefix_end()) {
                    *m = 1;
                }
            }
            mask
        })
        .collect()
}

/// Recompute the loss mask of a batch from its segment bounds.
pub fn loss_positions(batch: &PackedBatch) -> Vec<Vec<u8>> {
    loss_mask_from_segments(batch.row_len, &batch.segments)
}

/// The attention relation of a packed batch. Stored as segment bounds; the
/// relation itself is evaluated by [`AttentionMask::allowed`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub row_len: usize,
    pub segments: Vec<Vec<Segment>>,
}

impl AttentionMask {
    /// May position `i` attend to position `j`?
    ///
    /// True iff both lie in the same segment and `j` is inside the
    /// bidirectional prefix or at/before `i`.
    pub fn allowed(&self, row: usize, i: usize, j: usize) -> bool {
        self.segments[row].iter().any(|seg| {
            i >= seg.start && i < seg.end && j >= seg.start && j < seg.end
                && (j < seg.prefix_end() || j <= i)
        })
    }

    /// Dense row_len x row_len relation for one row (tests and dumps).
    pub fn dense_row(&self, row: usize) -> Vec<Vec<bool>> {
        (0..self.row_len)
            .map(|i| (0..self.row_len).map(|j| self.allowed(row, i, j)).collect())
            .collect()
    }

    pub fn n_rows(&self) -> usize {
        self.segments.len()
    }
}

/// Derive the prefix-LM attention mask of a packed batch.
pub fn prefix_lm_mask(batch: &PackedBatch) -> AttentionMask {
    AttentionMask { row_len: batch.row_len, segments: batch.segments.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{corrupt, DenoiserSpec};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn example(inputs: Vec<TokenId>, targets: Vec<TokenId>) -> CorruptedExample {
        CorruptedExample { mode: None, inputs, targets, original_len: 0 }
    }

    #[test]
    fn single_example_row_concatenates_before_padding() {
        // inputs length 3, targets length 2, row length 8: the target block
        // follows the inputs immediately; all padding is at the tail.
        let batch = pack_examples(&[example(vec![1, 2, 3], vec![4, 5])], 4, 4).unwrap();
        assert_eq!(batch.rows, vec![vec![1, 2, 3, 4, 5, Vocab::PAD, Vocab::PAD, Vocab::PAD]]);
        assert_eq!(batch.segments, vec![vec![Segment { start: 0, end: 5, prefix_len: 3 }]]);
        assert_eq!(batch.loss_mask, vec![vec![0, 0, 0, 1, 1, 0, 0, 0]]);
        assert_eq!(batch.pad_counts, vec![3]);
    }

    #[test]
    fn exactly_fitting_examples_leave_no_padding() {
        let batch = pack_examples(
            &[example(vec![1, 2], vec![3, 4]), example(vec![5, 6], vec![7, 8])],
            4,
            4,
        )
        .unwrap();
        assert_eq!(batch.n_rows(), 1);
        assert_eq!(batch.rows[0], vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(batch.pad_counts, vec![0]);
        assert_eq!(batch.segments[0].len(), 2);
    }

    #[test]
    fn empty_example_list_gives_zero_rows() {
        let batch = pack_examples(&[], 4, 4).unwrap();
        assert_eq!(batch.n_rows(), 0);
        assert_eq!(batch.loss_positions_total(), 0);
    }

    #[test]
    fn long_inputs_trim_from_the_left_and_targets_from_the_right() {
        let ex = example((0..10).collect(), (100..110).collect());
        let batch = pack_examples(&[ex], 4, 4).unwrap();
        // Inputs keep their tail (the tokens adjacent to the boundary),
        // targets their head.
        assert_eq!(batch.rows[0], vec![6, 7, 8, 9, 100, 101, 102, 103]);
        assert_eq!(batch.segments[0][0].prefix_len, 4);
    }

    #[test]
    fn zero_budgets_are_rejected() {
        assert!(matches!(pack_examples(&[], 0, 4), Err(PackError::BadBudgets { .. })));
        assert!(matches!(pack_examples(&[], 4, 0), Err(PackError::BadBudgets { .. })));
    }

    #[test]
    fn first_fit_reuses_earlier_rows_with_room() {
        let batch = pack_examples(
            &[
                example(vec![1; 3], vec![2; 3]), // row 0, 6 of 8
                example(vec![3; 4], vec![4; 3]), // does not fit row 0 -> row 1
                example(vec![5], vec![6]),       // fits back into row 0
            ],
            4,
            4,
        )
        .unwrap();
        assert_eq!(batch.n_rows(), 2);
        assert_eq!(batch.segments[0].len(), 2);
        assert_eq!(batch.segments[1].len(), 1);
        assert_eq!(batch.pad_counts, vec![0, 1]);
    }

    #[test]
    fn prefix_mask_is_bidirectional_then_causal() {
        // One 5-token segment with a 3-token prefix.
        let batch = pack_examples(&[example(vec![1, 2, 3], vec![4, 5])], 3, 2).unwrap();
        let mask = prefix_lm_mask(&batch);
        let visible = |i: usize| -> Vec<usize> {
            (0..5).filter(|&j| mask.allowed(0, i, j)).collect()
        };
        assert_eq!(visible(0), vec![0, 1, 2]);
        assert_eq!(visible(1), vec![0, 1, 2]);
        assert_eq!(visible(2), vec![0, 1, 2]);
        assert_eq!(visible(3), vec![0, 1, 2, 3]);
        assert_eq!(visible(4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn pads_neither_attend_nor_are_attended() {
        let batch = pack_examples(&[example(vec![1, 2], vec![3])], 4, 4).unwrap();
        let mask = prefix_lm_mask(&batch);
        for i in 0..8 {
            for j in 3..8 {
                assert!(!mask.allowed(0, i, j), "pad {j} attended from {i}");
            }
            if i >= 3 {
                assert!((0..8).all(|j| !mask.allowed(0, i, j)), "pad {i} attends");
            }
        }
    }

    #[test]
    fn segments_are_mutually_invisible() {
        let batch = pack_examples(
            &[example(vec![1, 2], vec![3, 4]), example(vec![5, 6], vec![7, 8])],
            4,
            4,
        )
        .unwrap();
        let mask = prefix_lm_mask(&batch);
        for i in 0..4 {
            for j in 4..8 {
                assert!(!mask.allowed(0, i, j), "segment 0 position {i} sees segment 1 position {j}");
                assert!(!mask.allowed(0, j, i), "segment 1 position {j} sees segment 0 position {i}");
            }
        }
    }

    #[test]
    fn all_prefix_segment_is_fully_bidirectional() {
        // prefix_len == segment length: no scored positions, full visibility.
        let batch = pack_examples(&[example(vec![1, 2, 3], vec![])], 4, 4);
        // Empty targets cannot come from the denoisers (they always append
        // <eos>), but the packer accepts them; build one by hand.
        let batch = batch.unwrap();
        let mask = prefix_lm_mask(&batch);
        for i in 0..3 {
            for j in 0..3 {
                assert!(mask.allowed(0, i, j));
            }
        }
        assert_eq!(batch.loss_positions_total(), 0);
    }

    #[test]
    fn full_causal_equals_prefix_len_one() {
        // A single segment with prefix_len 1 must reproduce the plain
        // causal relation j <= i.
        let batch = pack_examples(&[example(vec![9], vec![8, 7, 6])], 2, 3).unwrap();
        let mask = prefix_lm_mask(&batch);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mask.allowed(0, i, j), j <= i, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn loss_mask_marks_exactly_the_target_positions() {
        let batch = pack_examples(&[example(vec![1, 2, 3], vec![4, 5])], 3, 2).unwrap();
        assert_eq!(batch.loss_mask, vec![vec![0, 0, 0, 1, 1]]);
        assert_eq!(loss_positions(&batch), batch.loss_mask);
    }

    #[test]
    fn legacy_layout_pads_the_prefix_block() {
        let opts = PackOptions { legacy_pad: true };
        let batch =
            pack_examples_with(&[example(vec![1, 2], vec![3, 4])], 4, 4, opts).unwrap();
        assert_eq!(batch.n_rows(), 1);
        assert_eq!(
            batch.rows[0],
            vec![1, 2, Vocab::PAD, Vocab::PAD, 3, 4, Vocab::PAD, Vocab::PAD]
        );
        // Interior padding appears, which is exactly why this layout is
        // not the default.
        assert_eq!(batch.loss_mask[0], vec![0, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(batch.segments[0], vec![Segment { start: 0, end: 6, prefix_len: 4 }]);
        // The targets still see the (padded) prefix block.
        let mask = prefix_lm_mask(&batch);
        assert!(mask.allowed(0, 4, 0) && mask.allowed(0, 4, 3));
        assert!(!mask.allowed(0, 4, 5));
    }

    #[test]
    fn packing_conserves_tokens_when_nothing_is_trimmed() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let n_ex = rng.gen_range(1..20);
            let examples: Vec<CorruptedExample> = (0..n_ex)
                .map(|_| {
                    let seq: Vec<TokenId> =
                        (0..rng.gen_range(2..40)).map(|_| rng.gen_range(0..256)).collect();
                    corrupt(&seq, &DenoiserSpec::regular(), &mut rng).unwrap()
                })
                .collect();
            let batch = pack_examples(&examples, 64, 64).unwrap();
            let mut packed: Vec<TokenId> =
                batch.rows.iter().flatten().copied().filter(|&t| t != Vocab::PAD).collect();
            let mut original: Vec<TokenId> = examples
                .iter()
                .flat_map(|ex| ex.inputs.iter().chain(ex.targets.iter()).copied())
                .collect();
            packed.sort_unstable();
            original.sort_unstable();
            assert_eq!(packed, original);

            let expected_scored: usize = examples.iter().map(|ex| ex.targets.len()).sum();
            assert_eq!(batch.loss_positions_total(), expected_scored);
        }
    }

    #[test]
    fn serialized_batch_uses_the_documented_field_order() {
        let batch = pack_examples(&[example(vec![1], vec![2])], 2, 2).unwrap();
        let json = serde_json::to_string(&batch).unwrap();
        let row_len_pos = json.find("\"row_len\"").unwrap();
        let rows_pos = json.find("\"rows\"").unwrap();
        let segments_pos = json.find("\"segments\"").unwrap();
        let loss_pos = json.find("\"loss_mask\"").unwrap();
        let pads_pos = json.find("\"pad_counts\"").unwrap();
        assert!(row_len_pos < rows_pos && rows_pos < segments_pos);
        assert!(segments_pos < loss_pos && loss_pos < pads_pos);
        let back: PackedBatch = serde_json::from_str(&json).unwrap();
        assert_eq!(back, batch);
    }

    proptest! {
        #[test]
        fn prop_rows_have_tail_padding_only(seed in 0u64..500, n_ex in 1usize..16) {
            let mut rng = StdRng::seed_from_u64(seed);
            let examples: Vec<CorruptedExample> = (0..n_ex)
                .map(|_| {
                    let seq: Vec<TokenId> =
                        (0..rng.gen_range(2..60)).map(|_| rng.gen_range(0..256)).collect();
                    corrupt(&seq, &DenoiserSpec::regular(), &mut rng).unwrap()
                })
                .collect();
            let batch = pack_examples(&examples, 48, 48).unwrap();
            for (row, &pads) in batch.rows.iter().zip(&batch.pad_counts) {
                prop_assert_eq!(row.len(), batch.row_len);
                let first_pad = row.iter().position(|&t| t == Vocab::PAD).unwrap_or(row.len());
                prop_assert!(row[first_pad..].iter().all(|&t| t == Vocab::PAD),
                    "pad before non-pad in {:?}", row);
                prop_assert_eq!(pads, row.len() - first_pad);
            }
        }
    }
}
