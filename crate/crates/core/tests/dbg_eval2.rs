use dricl_core::corpus::*;
use dricl_core::model::*;

#[test]
fn dbg_sweep_queries() {
    let (params, vocab) = load_checkpoint(std::path::Path::new("/tmp/ck_200/checkpoint_final.bin")).unwrap();
    let dir = std::path::Path::new("/tmp/run_b");
    let train_file = std::fs::read_dir(dir).unwrap().filter_map(|e| {
        let p = e.unwrap().path();
        p.to_str().unwrap().ends_with(".train.jsonl").then_some(p)
    }).next().unwrap();
    let mut train_pool = load_task_pool(&train_file, Split::Train).unwrap();
    let test_file = train_file.to_str().unwrap().replace(".train.", ".test.");
    let mut test_pool = load_task_pool(std::path::Path::new(&test_file), Split::Test).unwrap();
    // apply sidecar instruction like the CLI does
    let body = std::fs::read_to_string(dir.join("instructions.json")).unwrap();
    let map: serde_json::Value = serde_json::from_str(&body).unwrap();
    let instr = map[&train_pool.task_id].as_str().unwrap().to_string();
    train_pool.instruction_text = instr.clone();
    test_pool.instruction_text = instr.clone();
    eprintln!("instruction = {:?}", instr);
    eprintln!("train examples: {:?}", &train_pool.examples[..6].iter().map(|e| (e.input_text.clone(), e.label_text.clone())).collect::<Vec<_>>());
    eprintln!("test examples: {:?}", &test_pool.examples[..4].iter().map(|e| (e.input_text.clone(), e.label_text.clone())).collect::<Vec<_>>());

    // manual k=10 queries
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
    for q in 0..8 {
        let qi = rng.gen_range(0..test_pool.examples.len());
        let mut idx: Vec<usize> = (0..train_pool.examples.len()).collect();
        for i in 0..10 { let j = rng.gen_range(i..idx.len()); idx.swap(i, j); }
        idx.truncate(10);
        let demos: Vec<&TaskExample> = idx.iter().map(|&i| &train_pool.examples[i]).collect();
        let query = &test_pool.examples[qi];
        let prefix = pack_query(&test_pool.instruction_text, &demos, &query.input_text, 256, &vocab).unwrap().unwrap();
        let out = generate_label(&params, &prefix, 1).unwrap();
        let demo_str: Vec<String> = demos.iter().map(|d| format!("{}>{}", d.input_text, d.label_text)).collect();
        eprintln!("q{q}: query={:?} gold={:?} got={:?} demos={:?}", query.input_text, query.label_text, vocab.decode(&out), demo_str.join(","));
    }
}
