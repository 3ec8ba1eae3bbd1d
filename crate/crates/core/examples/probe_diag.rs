//! Scratch diagnostic: where does test accuracy go after a single-task run?
use rdbcl_core::config::parse_config;
use rdbcl_core::continual::run_task_sequence;
use rdbcl_core::numerics::Rng;
use rdbcl_core::tasks::{generate_stream, verify};

fn main() {
    let mut sets: Vec<(String, String)> = vec![
        ("stream.tasks".into(), "1".into()),
        ("stream.train_per_task".into(), "64".into()),
        ("stream.test_per_task".into(), "40".into()),
        ("train.max_steps".into(), "600".into()),
        ("train.pretrain_steps".into(), "800".into()),
        ("train.samples_per_step".into(), "8".into()),
        ("decode.group_size".into(), "4".into()),
        ("method.kind".into(), "sft".into()),
        ("optim.lr_max".into(), "0.05".into()),
        ("policy.hidden_dim".into(), "64".into()),
    ];
    let mut seed: u64 = 8;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "seed" {
            seed = v.parse().unwrap();
        } else {
            sets.push((k.to_string(), v.to_string()));
        }
    }
    let cfg = parse_config("", &sets).unwrap();
    let stream = generate_stream(&cfg.stream, &Rng::new(seed)).unwrap();
    let out = run_task_sequence(&cfg, &stream, seed).unwrap();
    let params = out.checkpoints.last().unwrap();
    let vocab = &stream.vocab;
    let greedy = cfg.decode.greedy_params();
    let task = &stream.tasks[0];
    let mut rng = Rng::new(0);
    println!("rule {:?}", task.spec.rule);
    let last = out.train_log.last().unwrap();
    println!("final loss {:.4} reward {:.3}", last.loss, last.mean_reward);
    for (name, samples) in [("train", &task.train), ("test", &task.test)] {
        let mut correct = 0;
        let mut by_state = vec![(0usize, 0usize); 10];
        for s in samples.iter() {
            let state = task.spec.decode_state(&s.question, vocab).unwrap() as usize;
            let t = params.sample_trajectory(vocab, &s.question, &greedy, &mut rng).unwrap();
            let ok = verify(&t.tokens, s.ground_truth, vocab).accuracy == 1.0;
            by_state[state].1 += 1;
            if ok {
                by_state[state].0 += 1;
                correct += 1;
            } else if name == "test" {
                println!(
                    "  miss: q {:?} state {} gt {:?} emitted {:?}",
                    s.question, state, s.ground_truth, t.tokens
                );
            }
        }
        println!(
            "{name}: {}/{} by_state {:?}",
            correct,
            samples.len(),
            by_state
        );
    }
}
