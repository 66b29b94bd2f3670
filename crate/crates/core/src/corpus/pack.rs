//! Demonstration sampling, token packing, and corpus-level utilities.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;

use super::{
    CorpusError, DemoSpan, PackedSequence, Span, TaskExample, TaskPool, Vocabulary, EOD, SEP_X,
    SEP_Y,
};

/// Draws `k_target` example indices: without replacement when the pool is
/// large enough, with replacement otherwise.
fn sample_indices(pool_len: usize, k_target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool_len >= k_target {
        let mut idx: Vec<usize> = (0..pool_len).collect();
        for i in 0..k_target {
            let j = rng.gen_range(i..pool_len);
            idx.swap(i, j);
        }
        idx.truncate(k_target);
        idx
    } else {
        (0..k_target).map(|_| rng.gen_range(0..pool_len)).collect()
    }
}

/// Packs up to `k_target` demonstrations behind the pool's instruction.
///
/// Layout: instruction tokens, then per demonstration SEP_X, x, SEP_Y, y,
/// EOD. Trailing demonstrations that would push the sequence past
/// `budget` are dropped whole; a demonstration is never split.
pub fn pack_sequence(
    pool: &TaskPool,
    k_target: usize,
    budget: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<PackedSequence, CorpusError> {
    if pool.examples.is_empty() {
        return Err(CorpusError::EmptyPool);
    }
    if k_target < 1 {
        return Err(CorpusError::NoDemonstrations);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9acc));
    let picks = sample_indices(pool.examples.len(), k_target, &mut rng);

    let mut tokens = vocab.encode_str(&pool.instruction_text)?;
    let instruction_span = Span::new(0, tokens.len());
    let mut demo_spans = Vec::new();

    for &i in &picks {
        let ex = &pool.examples[i];
        let x = vocab.encode_str(&ex.input_text)?;
        let y = vocab.encode_str(&ex.label_text)?;
        let cost = x.len() + y.len() + 3;
        if tokens.len() + cost > budget {
            if demo_spans.is_empty() {
                return Err(CorpusError::BudgetTooSmall {
                    budget,
                    needed: tokens.len() + cost,
                });
            }
            break;
        }
        tokens.push(SEP_X);
        let x_span = Span::new(tokens.len(), tokens.len() + x.len());
        tokens.extend_from_slice(&x);
        tokens.push(SEP_Y);
        let y_span = Span::new(tokens.len(), tokens.len() + y.len());
        tokens.extend_from_slice(&y);
        tokens.push(EOD);
        demo_spans.push(DemoSpan { x: x_span, y: y_span });
    }

    let seq = PackedSequence {
        task_id: pool.task_id.clone(),
        token_ids: tokens,
        instruction_span,
        demo_spans,
    };
    seq.validate()?;
    Ok(seq)
}

/// Builds the evaluation prefix "instruction, demonstrations, SEP_X,
/// query, SEP_Y" whose next token is the first label character. Returns
/// None when the prefix cannot fit the budget with all `demos` included.
pub fn pack_query(
    instruction: &str,
    demos: &[&TaskExample],
    query_input: &str,
    budget: usize,
    vocab: &Vocabulary,
) -> Result<Option<Vec<u32>>, CorpusError> {
    let mut tokens = vocab.encode_str(instruction)?;
    for ex in demos {
        tokens.push(SEP_X);
        tokens.extend(vocab.encode_str(&ex.input_text)?);
        tokens.push(SEP_Y);
        tokens.extend(vocab.encode_str(&ex.label_text)?);
        tokens.push(EOD);
    }
    tokens.push(SEP_X);
    tokens.extend(vocab.encode_str(query_input)?);
    tokens.push(SEP_Y);
    if tokens.len() > budget {
        return Ok(None);
    }
    Ok(Some(tokens))
}

/// Caps every pool at ten times the smallest pool size by seeded
/// subsampling (order-preserving); never upsamples.
pub fn balance_corpus(pools: &[TaskPool], seed: u64) -> Vec<TaskPool> {
    let min = match pools.iter().map(|p| p.examples.len()).min() {
        Some(m) if m > 0 => m,
        _ => return pools.to_vec(),
    };
    let cap = min.saturating_mul(10);
    pools
        .iter()
        .enumerate()
        .map(|(i, pool)| {
            if pool.examples.len() <= cap {
                return pool.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xba1a ^ i as u64));
            let mut idx: Vec<usize> = (0..pool.examples.len()).collect();
            for j in 0..cap {
                let r = rng.gen_range(j..idx.len());
                idx.swap(j, r);
            }
            idx.truncate(cap);
            idx.sort_unstable();
            TaskPool {
                examples: idx.into_iter().map(|j| pool.examples[j].clone()).collect(),
                ..pool.clone()
            }
        })
        .collect()
}

/// Exact histogram of demonstration counts K over a corpus.
pub fn kshot_histogram(sequences: &[PackedSequence]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for seq in sequences {
        *hist.entry(seq.k()).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_tasks, Split, TaskFamily};

    fn tiny_pool() -> (TaskPool, Vocabulary) {
        let pool = TaskPool {
            task_id: "t".into(),
            instruction_text: "map it".into(),
            split: Split::Train,
            examples: vec![
                TaskExample {
                    task_id: "t".into(),
                    input_text: "ab".into(),
                    label_text: "c".into(),
                },
                TaskExample {
                    task_id: "t".into(),
                    input_text: "ba".into(),
                    label_text: "d".into(),
                },
            ],
        };
        let vocab = Vocabulary::build(&[&pool]);
        (pool, vocab)
    }

    #[test]
    fn minimal_pack_has_ordered_spans() {
        let (mut pool, _) = tiny_pool();
        pool.examples.truncate(1);
        pool.split = Split::Test;
        let vocab = Vocabulary::build(&[&pool]);
        let seq = pack_sequence(&pool, 1, 1000, &vocab, 0).unwrap();
        assert_eq!(seq.k(), 1);
        assert_eq!(seq.instruction_span, Span::new(0, 6));
        let d = seq.demo_spans[0];
        assert_eq!(seq.token_ids[d.x.start - 1], SEP_X);
        assert_eq!(seq.token_ids[d.x.end], SEP_Y);
        assert_eq!(seq.token_ids[d.y.end], EOD);
        assert_eq!(seq.token_ids.len(), d.y.end + 1);
    }

    #[test]
    fn spans_detokenize_to_source_strings() {
        let set =
            generate_synthetic_tasks(TaskFamily::KeyValueLookup { num_keys: 6 }, 30, 11).unwrap();
        let vocab = Vocabulary::build(&[&set.train]);
        for seed in 0..20 {
            let seq = pack_sequence(&set.train, 7, 4096, &vocab, seed).unwrap();
            let instr = vocab.decode(
                &seq.token_ids[seq.instruction_span.start..seq.instruction_span.end],
            );
            assert_eq!(instr, set.train.instruction_text);
            for d in &seq.demo_spans {
                let x = vocab.decode(&seq.token_ids[d.x.start..d.x.end]);
                let y = vocab.decode(&seq.token_ids[d.y.start..d.y.end]);
                let found = set
                    .train
                    .examples
                    .iter()
                    .any(|e| e.input_text == x && e.label_text == y);
                assert!(found, "({x}, {y}) not in pool");
            }
        }
    }

    #[test]
    fn packing_is_deterministic() {
        let (pool, vocab) = tiny_pool();
        let a = pack_sequence(&pool, 2, 100, &vocab, 42).unwrap();
        let b = pack_sequence(&pool, 2, 100, &vocab, 42).unwrap();
        assert_eq!(a, b);
        let c = pack_sequence(&pool, 2, 100, &vocab, 43).unwrap();
        assert_eq!(c.k(), 2);
    }

    #[test]
    fn truncation_respects_budget_and_is_minimal() {
        let set = generate_synthetic_tasks(TaskFamily::PatternCopy { length: 40 }, 400, 5).unwrap();
        let vocab = Vocabulary::build(&[&set.train]);
        let seq = pack_sequence(&set.train, 350, 8000, &vocab, 1).unwrap();
        assert!(seq.k() < 350);
        assert!(seq.token_ids.len() <= 8000);
        // minimal truncation: one more demonstration would not have fit
        // (every copy demo costs the same 2*40+3 tokens)
        assert!(seq.token_ids.len() + (2 * 40 + 3) > 8000);
    }

    #[test]
    fn budget_too_small_is_an_error() {
        let (pool, vocab) = tiny_pool();
        let err = pack_sequence(&pool, 1, 8, &vocab, 0);
        assert!(matches!(err, Err(CorpusError::BudgetTooSmall { .. })));
    }

    #[test]
    fn sampling_without_replacement_when_pool_allows() {
        let set =
            generate_synthetic_tasks(TaskFamily::ModularArithmetic { modulus: 13 }, 60, 2).unwrap();
        let vocab = Vocabulary::build(&[&set.train]);
        let seq = pack_sequence(&set.train, 20, 100_000, &vocab, 3).unwrap();
        assert_eq!(seq.k(), 20);
        let mut xs: Vec<String> = seq
            .demo_spans
            .iter()
            .map(|d| vocab.decode(&seq.token_ids[d.x.start..d.x.end]))
            .collect();
        let n = xs.len();
        xs.sort();
        xs.dedup();
        assert_eq!(xs.len(), n, "duplicate demonstration drawn with replacement");
    }

    #[test]
    fn balance_examples_from_contract() {
        let pool_of = |n: usize| TaskPool {
            task_id: format!("p{n}"),
            instruction_text: "i".into(),
            split: Split::Train,
            examples: (0..n)
                .map(|j| TaskExample {
                    task_id: format!("p{n}"),
                    input_text: format!("x{j}"),
                    label_text: "y".into(),
                })
                .collect(),
        };
        let sizes = |pools: &[TaskPool]| pools.iter().map(|p| p.examples.len()).collect::<Vec<_>>();

        assert_eq!(sizes(&balance_corpus(&[pool_of(100), pool_of(100)], 0)), vec![100, 100]);
        assert_eq!(sizes(&balance_corpus(&[pool_of(1000), pool_of(50)], 0)), vec![500, 50]);

        let balanced = balance_corpus(&[pool_of(1000), pool_of(500), pool_of(99)], 0);
        let got = sizes(&balanced);
        assert_eq!(got, vec![990, 500, 99]);
        // brute-force: every pairwise ratio <= 10 and downsampling minimal
        for a in &got {
            for b in &got {
                assert!(a * 1 <= b * 10);
            }
        }
        for (orig, kept) in [(1000usize, 990usize), (500, 500), (99, 99)] {
            assert_eq!(kept, orig.min(10 * 99));
        }
        // subsampling preserves order
        let firsts: Vec<usize> = balanced[0]
            .examples
            .windows(2)
            .map(|w| {
                let a: usize = w[0].input_text[1..].parse().unwrap();
                let b: usize = w[1].input_text[1..].parse().unwrap();
                (a < b) as usize
            })
            .collect();
        assert!(firsts.iter().all(|&x| x == 1));
    }

    #[test]
    fn histogram_counts() {
        assert!(kshot_histogram(&[]).is_empty());
        let (pool, vocab) = tiny_pool();
        let mk = |k| pack_sequence(&pool, k, 1000, &vocab, k as u64).unwrap();
        let seqs = vec![mk(2), mk(2), mk(1)];
        let h = kshot_histogram(&seqs);
        assert_eq!(h.get(&2), Some(&2));
        assert_eq!(h.get(&1), Some(&1));
        assert_eq!(h.values().sum::<usize>(), 3);
    }
}
