//! Attention masks: full causal and parallel-context (per-demonstration)
//! visibility, with the position indices each scheme assigns.

use serde::{Deserialize, Serialize};

use crate::corpus::{PackedSequence, Span};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    CausalFull,
    PcwParallel,
}

/// Concrete visibility predicate plus position assignment for one packed
/// sequence.
///
/// Causal-full: query t sees keys <= t, positions run 0..n-1.
///
/// Pcw-parallel: a token in demonstration k sees the instruction plus the
/// earlier tokens of its own demonstration window (delimiters included),
/// and every demonstration's positions restart at the instruction length,
/// so demonstration-internal state is identical to a standalone
/// "instruction + that demonstration" sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub instruction_span: Option<Span>,
    pub demo_windows: Option<Vec<Span>>,
}

impl MaskSpec {
    pub fn causal_full() -> Self {
        Self {
            mode: MaskMode::CausalFull,
            instruction_span: None,
            demo_windows: None,
        }
    }
}

/// Builds the mask for a sequence in the requested mode.
pub fn build_mask(seq: &PackedSequence, mode: MaskMode) -> Result<MaskSpec, ModelError> {
    match mode {
        MaskMode::CausalFull => Ok(MaskSpec::causal_full()),
        MaskMode::PcwParallel => {
            if seq.demo_spans.is_empty() {
                return Err(ModelError::MissingSpans);
            }
            Ok(MaskSpec {
                mode,
                instruction_span: Some(seq.instruction_span),
                demo_windows: Some(seq.demo_spans.iter().map(|d| d.window()).collect()),
            })
        }
    }
}

/// Per-query visible key set, expressed as [0, prefix_end) plus
/// [window_start, t]. Causal-full degenerates to prefix_end = 0,
/// window_start = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisRange {
    pub prefix_end: usize,
    pub window_start: usize,
}

impl VisRange {
    #[inline]
    pub fn sees(&self, query: usize, key: usize) -> bool {
        key <= query && (key < self.prefix_end || key >= self.window_start)
    }
}

impl MaskSpec {
    /// Resolves the visibility ranges and position index for every token
    /// of a length-n sequence.
    pub fn resolve(&self, n: usize) -> Result<(Vec<VisRange>, Vec<usize>), ModelError> {
        match self.mode {
            MaskMode::CausalFull => Ok((
                vec![VisRange { prefix_end: 0, window_start: 0 }; n],
                (0..n).collect(),
            )),
            MaskMode::PcwParallel => {
                let instr = self.instruction_span.ok_or(ModelError::MissingSpans)?;
                let windows = self.demo_windows.as_ref().ok_or(ModelError::MissingSpans)?;
                let mut vis = Vec::with_capacity(n);
                let mut pos = Vec::with_capacity(n);
                for t in 0..n {
                    if instr.contains(t) {
                        // instruction attends causally within itself
                        vis.push(VisRange { prefix_end: 0, window_start: 0 });
                        pos.push(t);
                    } else {
                        let win = windows
                            .iter()
                            .find(|w| w.contains(t))
                            .ok_or(ModelError::MissingSpans)?;
                        vis.push(VisRange {
                            prefix_end: instr.end,
                            window_start: win.start,
                        });
                        pos.push(instr.end + (t - win.start));
                    }
                }
                Ok((vis, pos))
            }
        }
    }

    /// True when query position q may attend to key position k.
    pub fn visible(&self, n: usize, q: usize, k: usize) -> Result<bool, ModelError> {
        let (vis, _) = self.resolve(n)?;
        Ok(vis[q].sees(q, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_tasks, pack_sequence, TaskFamily, Vocabulary};

    fn packed(k: usize) -> PackedSequence {
        let set =
            generate_synthetic_tasks(TaskFamily::LabelPermutation { num_classes: 4 }, 20, 9)
                .unwrap();
        let vocab = Vocabulary::build(&[&set.train]);
        pack_sequence(&set.train, k, 4096, &vocab, 17).unwrap()
    }

    #[test]
    fn causal_visibility_is_lower_triangular() {
        let seq = packed(3);
        let mask = build_mask(&seq, MaskMode::CausalFull).unwrap();
        let n = seq.token_ids.len();
        let (vis, pos) = mask.resolve(n).unwrap();
        for q in 0..n {
            for k in 0..n {
                assert_eq!(vis[q].sees(q, k), k <= q);
            }
            assert_eq!(pos[q], q);
        }
    }

    #[test]
    fn pcw_hides_other_demonstrations() {
        let seq = packed(2);
        let mask = build_mask(&seq, MaskMode::PcwParallel).unwrap();
        let n = seq.token_ids.len();
        let (vis, _) = mask.resolve(n).unwrap();
        let d1 = seq.demo_spans[0];
        let d2 = seq.demo_spans[1];
        let q = d2.x.start; // first token of x_2
        for k in 0..seq.instruction_span.end {
            assert!(vis[q].sees(q, k), "x_2 must see instruction token {k}");
        }
        for k in d1.window().start..d1.window().end {
            assert!(!vis[q].sees(q, k), "x_2 must not see demo-1 token {k}");
        }
        assert!(vis[q].sees(q, d2.window().start));
    }

    #[test]
    fn single_demo_pcw_equals_causal() {
        let seq = packed(1);
        let pcw = build_mask(&seq, MaskMode::PcwParallel).unwrap();
        let causal = build_mask(&seq, MaskMode::CausalFull).unwrap();
        let n = seq.token_ids.len();
        let (pv, pp) = pcw.resolve(n).unwrap();
        let (cv, cp) = causal.resolve(n).unwrap();
        assert_eq!(pp, cp);
        for q in 0..n {
            for k in 0..n {
                assert_eq!(pv[q].sees(q, k), cv[q].sees(q, k));
            }
        }
    }

    #[test]
    fn pcw_positions_restart_at_instruction_end() {
        let seq = packed(3);
        let mask = build_mask(&seq, MaskMode::PcwParallel).unwrap();
        let (_, pos) = mask.resolve(seq.token_ids.len()).unwrap();
        let ie = seq.instruction_span.end;
        for d in &seq.demo_spans {
            assert_eq!(pos[d.window().start], ie);
        }
    }
}
