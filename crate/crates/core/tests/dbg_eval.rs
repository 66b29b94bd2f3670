use dricl_core::corpus::*;
use dricl_core::model::*;

#[test]
fn dbg_generation_vs_training() {
    let (params, vocab) = load_checkpoint(std::path::Path::new("/tmp/ck_200/checkpoint_final.bin")).unwrap();
    // rebuild the training corpus exactly as gen-data did
    let seqs = load_packed_corpus(std::path::Path::new("/tmp/run_b/corpus.jsonl")).unwrap();
    let seq = seqs.iter().find(|s| s.k() >= 12).unwrap();
    // cut the sequence right after demo 10's SEP_Y and greedy-decode
    let d = seq.demo_spans[9];
    let prefix = &seq.token_ids[..d.y.start];
    let gold = &seq.token_ids[d.y.start..d.y.end];
    let out = generate_label(&params, prefix, 1).unwrap();
    eprintln!("gold={:?} ({:?})  generated={:?} ({:?})", gold, vocab.decode(gold), out, vocab.decode(&out));

    // and compare with what the training-time logits said at that row
    let mask = build_mask(seq, MaskMode::CausalFull).unwrap();
    let logits = forward(&params, &seq.token_ids, &mask).unwrap();
    let row = logits.row(d.y.start - 1);
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    eprintln!("full-seq argmax at SEP_Y row: {:?} top3={:?}", idx[0], &idx[..3]);

    // now the same through pack_query with examples recovered from spans
    let mut demos = Vec::new();
    for dd in &seq.demo_spans[..9] {
        demos.push(TaskExample {
            task_id: seq.task_id.clone(),
            input_text: vocab.decode(&seq.token_ids[dd.x.start..dd.x.end]),
            label_text: vocab.decode(&seq.token_ids[dd.y.start..dd.y.end]),
        });
    }
    let demo_refs: Vec<&TaskExample> = demos.iter().collect();
    let query_x = vocab.decode(&seq.token_ids[d.x.start..d.x.end]);
    let instr = vocab.decode(&seq.token_ids[..seq.instruction_span.end]);
    let prefix2 = pack_query(&instr, &demo_refs, &query_x, 256, &vocab).unwrap().unwrap();
    assert_eq!(&prefix2[..], prefix, "pack_query must reproduce the training prefix");
    let out2 = generate_label(&params, &prefix2, 1).unwrap();
    eprintln!("via pack_query: {:?} ({:?})", out2, vocab.decode(&out2));
}
