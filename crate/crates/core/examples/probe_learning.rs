//! Scratch probe for learning-curve tuning. Run:
//!   cargo run -p rdbcl-core --example probe_learning -- key=value ...
use rdbcl_core::config::parse_config;
use rdbcl_core::continual::run_task_sequence;
use rdbcl_core::numerics::Rng;
use rdbcl_core::tasks::generate_stream;

fn main() {
    let mut sets: Vec<(String, String)> = vec![
        ("stream.tasks".into(), "1".into()),
        ("stream.train_per_task".into(), "24".into()),
        ("stream.test_per_task".into(), "12".into()),
        ("train.max_steps".into(), "60".into()),
        ("train.pretrain_steps".into(), "30".into()),
        ("train.samples_per_step".into(), "4".into()),
        ("decode.group_size".into(), "4".into()),
        ("eval.drift_probes".into(), "4".into()),
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
    for t in &stream.tasks {
        println!(
            "task {} rule {:?} overlap {:.2} portable_train {}",
            t.spec.task_id,
            t.spec.rule,
            t.spec.portable_overlap,
            t.train.iter().filter(|s| s.portable).count()
        );
    }
    match run_task_sequence(&cfg, &stream, seed) {
        Ok(out) => {
            let n = out.train_log.len();
            for (i, row) in out.train_log.iter().enumerate() {
                if i % 10 == 0 || i + 1 == n {
                    println!(
                        "step {:4} task {} reward {:6.3} |A| {:5.3} kl {:8.5} beta {:5.3} loss {:8.4}",
                        row.step, row.task, row.mean_reward, row.mean_abs_adv, row.mean_kl, row.mean_beta, row.loss
                    );
                }
            }
            println!("matrix {:?}", out.matrix.data);
            println!("zero-shot {:?}", out.matrix.zero_shot);
            println!("steps/task {:?}", out.steps_per_task);
            println!("passk {:?}", out.passk);
            println!("auc {:?}", out.auc_portable);
            println!("drift {:?}", out.drift);
            let cl = out.cl;
            println!(
                "avg {:.2} last {:.2} finetune {:.2} bwt {:?}",
                cl.avg, cl.last, cl.finetune, cl.bwt
            );
        }
        Err(abort) => {
            println!("ABORT: {} after {} rows", abort.error, abort.partial_log.len());
        }
    }
}
