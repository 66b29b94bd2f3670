//! Line-delimited file formats for task pools and packed corpora.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, PackedSequence, Split, TaskExample, TaskPool, Vocabulary};

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    task_id: String,
    input: String,
    label: String,
}

/// Loads a task pool from a UTF-8 line-delimited file of
/// `{"task_id", "input", "label"}` records. File order is preserved;
/// parse failures name the offending line. The instruction is templated
/// from the task id since the record schema does not carry one.
pub fn load_task_pool(path: &Path, split: Split) -> Result<TaskPool, CorpusError> {
    let body = fs::read_to_string(path)?;
    load_task_pool_str(&body, split)
}

pub fn load_task_pool_str(body: &str, split: Split) -> Result<TaskPool, CorpusError> {
    let mut examples = Vec::new();
    let mut task_id: Option<String> = None;
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::ParseLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        if rec.input.is_empty() || rec.label.is_empty() {
            return Err(CorpusError::ParseLine {
                line: i + 1,
                message: "empty input or label".into(),
            });
        }
        match &task_id {
            None => task_id = Some(rec.task_id.clone()),
            Some(id) if *id != rec.task_id => {
                return Err(CorpusError::MixedTaskIds { line: i + 1 })
            }
            _ => {}
        }
        examples.push(TaskExample {
            task_id: rec.task_id,
            input_text: rec.input,
            label_text: rec.label,
        });
    }
    let task_id = task_id.ok_or(CorpusError::EmptyPool)?;
    Ok(TaskPool {
        instruction_text: default_instruction(&task_id),
        task_id,
        split,
        examples,
    })
}

/// Instruction used when a pool is loaded from a bare task file.
pub fn default_instruction(task_id: &str) -> String {
    format!("Task {task_id}: map each input to its label.")
}

pub fn save_task_pool(pool: &TaskPool, path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    for ex in &pool.examples {
        let rec = TaskRecord {
            task_id: ex.task_id.clone(),
            input: ex.input_text.clone(),
            label: ex.label_text.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable"))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PackedRecord {
    task_id: String,
    token_ids: Vec<u32>,
    instruction_span: [usize; 2],
    demo_spans: Vec<DemoRecord>,
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    x: [usize; 2],
    y: [usize; 2],
}

pub fn save_packed_corpus(seqs: &[PackedSequence], path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    for seq in seqs {
        let rec = PackedRecord {
            task_id: seq.task_id.clone(),
            token_ids: seq.token_ids.clone(),
            instruction_span: [seq.instruction_span.start, seq.instruction_span.end],
            demo_spans: seq
                .demo_spans
                .iter()
                .map(|d| DemoRecord {
                    x: [d.x.start, d.x.end],
                    y: [d.y.start, d.y.end],
                })
                .collect(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable"))?;
    }
    Ok(())
}

pub fn load_packed_corpus(path: &Path) -> Result<Vec<PackedSequence>, CorpusError> {
    let body = fs::read_to_string(path)?;
    let mut seqs = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PackedRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::ParseLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        let seq = PackedSequence {
            task_id: rec.task_id,
            token_ids: rec.token_ids,
            instruction_span: super::Span::new(rec.instruction_span[0], rec.instruction_span[1]),
            demo_spans: rec
                .demo_spans
                .iter()
                .map(|d| super::DemoSpan {
                    x: super::Span::new(d.x[0], d.x[1]),
                    y: super::Span::new(d.y[0], d.y[1]),
                })
                .collect(),
        };
        seq.validate().map_err(|e| CorpusError::ParseLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        seqs.push(seq);
    }
    Ok(seqs)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<(), CorpusError> {
    let json = serde_json::to_string(vocab).expect("serializable");
    fs::write(path, json)?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, CorpusError> {
    let body = fs::read_to_string(path)?;
    let mut v: Vocabulary = serde_json::from_str(&body).map_err(|e| CorpusError::ParseLine {
        line: 1,
        message: e.to_string(),
    })?;
    v.reindex();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_preserves_file_order() {
        let body = concat!(
            "{\"task_id\":\"t\",\"input\":\"a\",\"label\":\"1\"}\n",
            "{\"task_id\":\"t\",\"input\":\"b\",\"label\":\"2\"}\n",
            "{\"task_id\":\"t\",\"input\":\"c\",\"label\":\"3\"}\n",
        );
        let pool = load_task_pool_str(body, Split::Train).unwrap();
        assert_eq!(pool.examples.len(), 3);
        assert_eq!(pool.examples[1].input_text, "b");
        assert_eq!(pool.task_id, "t");
        assert!(!pool.instruction_text.is_empty());
    }

    #[test]
    fn missing_field_names_the_line() {
        let body = concat!(
            "{\"task_id\":\"t\",\"input\":\"a\",\"label\":\"1\"}\n",
            "{\"task_id\":\"t\",\"input\":\"b\"}\n",
        );
        match load_task_pool_str(body, Split::Train) {
            Err(CorpusError::ParseLine { line: 2, .. }) => {}
            other => panic!("expected line-2 parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_pool() {
        assert!(matches!(
            load_task_pool_str("", Split::Train),
            Err(CorpusError::EmptyPool)
        ));
    }

    #[test]
    fn packed_corpus_round_trip() {
        use crate::corpus::{generate_synthetic_tasks, pack_sequence, TaskFamily};
        let set =
            generate_synthetic_tasks(TaskFamily::LabelPermutation { num_classes: 4 }, 20, 3)
                .unwrap();
        let vocab = Vocabulary::build(&[&set.train]);
        let seqs: Vec<_> = (0..5)
            .map(|s| pack_sequence(&set.train, 4, 512, &vocab, s).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_packed_corpus(&seqs, &path).unwrap();
        let back = load_packed_corpus(&path).unwrap();
        assert_eq!(seqs, back);

        let vpath = dir.path().join("vocab.json");
        save_vocabulary(&vocab, &vpath).unwrap();
        assert_eq!(load_vocabulary(&vpath).unwrap(), vocab);
    }

    #[test]
    fn task_pool_file_round_trip() {
        use crate::corpus::{generate_synthetic_tasks, TaskFamily};
        let set =
            generate_synthetic_tasks(TaskFamily::ModularArithmetic { modulus: 5 }, 12, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        save_task_pool(&set.train, &path).unwrap();
        let back = load_task_pool(&path, Split::Train).unwrap();
        assert_eq!(back.examples, set.train.examples);
    }
}
