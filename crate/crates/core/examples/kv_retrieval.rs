//! Trains one model on synthetic key-value retrieval and prints test accuracy.
//!
//! Usage: kv_retrieval <schedule e.g. sw,cf,sw,sw> <clusters> <seed> <steps> [lr]

use std::time::Instant;

use longseq_core::harness::{
    evaluate, Example, RunOptions, gen_kv_retrieval, train, CentroidFrequency, LayerKind, Metric, Model, ModelConfig, SyntheticTaskSpec,
    TrainRun, TrainState,
};

fn kind(s: &str) -> LayerKind {
    match s {
        "sw" => LayerKind::SlidingWindow,
        "cf" => LayerKind::ClusterFormer,
        "lsh" => LayerKind::Lsh,
        "sp" => LayerKind::SparsePosition,
        other => panic!("unknown layer kind {other}"),
    }
}

fn main() -> longseq_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let schedule: Vec<LayerKind> = args.get(1).map_or("sw,cf,sw,sw", String::as_str).split(',').map(kind).collect();
    let clusters: usize = args.get(2).map_or(16, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let steps: usize = args.get(4).map_or(300, |s| s.parse().unwrap());
    let lr: f64 = args.get(5).map_or(1e-3, |s| s.parse().unwrap());
    let env = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);

    let task = SyntheticTaskSpec {
        length: env("KV_LEN", 2048),
        pairs: env("KV_PAIRS", 4),
        noise_vocab: env("KV_NOISE", 8),
        key_vocab: env("KV_KEYS", 16),
        value_vocab: env("KV_VALUES", 16),
        min_gap: env("KV_GAP", 256),
        examples: env("KV_TRAIN", 512),
        seed: 1000 + seed,
        ..Default::default()
    };
    let test_task = SyntheticTaskSpec { examples: env("KV_TEST", 200), seed: 9000 + seed, ..task.clone() };
    let cfg = ModelConfig {
        num_layers: schedule.len(),
        schedule,
        clusters,
        hashes: clusters,
        vocab: task.vocab(),
        seed,
        bank_capacity: env("KV_BANK", 20_000),
        position_scale: std::env::var("KV_POS").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
        ..Default::default()
    };
    let run = TrainRun {
        lr,
        warmup_steps: steps / 10,
        max_steps: steps,
        batch_size: env("KV_BATCH", 8),
        log_every: 25,
        centroid_frequency: CentroidFrequency::Every(env("KV_FREQ", 25)),
        kmeans_iters: env("KV_ITERS", 10),
        kmeans_restarts: env("KV_RESTARTS", 4),
        seed,
        ..Default::default()
    };
    let train_set = gen_kv_retrieval(&task)?;
    let test_set = gen_kv_retrieval(&test_task)?;
    let mut model = Model::new(cfg)?;
    let t0 = Instant::now();
    let mut state = TrainState::new(&run);
    train(&mut model, &train_set, &run, &mut state, &mut |r| {
        eprintln!(
            "step {:4} loss {:.4} acc {:.3} gn {:.3} epoch {} t {:.0}s",
            r.step,
            r.loss,
            r.accuracy,
            r.grad_norm,
            r.centroid_epoch,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    if std::env::var("KV_DIAG").is_ok() {
        report_colocation(&model, &test_set)?;
    }
    let acc = evaluate(&model, &test_set, Metric::Accuracy)?;
    println!("test accuracy {acc:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
    Ok(())
}

/// How often each routed layer puts the query in the same group as its matching key.
fn report_colocation(model: &Model, data: &[Example]) -> longseq_core::Result<()> {
    for (i, layer) in model.layers.iter().enumerate().filter(|(_, l)| l.kind.is_routed()) {
        let (mut hits, mut sizes) = (0usize, 0usize);
        for ex in data {
            let trace = model.forward(ex, &RunOptions { full: true, ..Default::default() })?;
            let route = trace.layers[i].route.as_ref().expect("routed layer");
            let query = ex.tokens.len() - 1;
            let key = ex.tokens.iter().position(|&t| t == ex.tokens[query]).expect("key present");
            let group_of = |r: usize| (0..route.chunk_count()).find(|&g| route.group(g).contains(&r));
            hits += usize::from(group_of(query) == group_of(key));
            let a = route.assignment();
            sizes += a.iter().filter(|&&c| c == a[query]).count();
        }
        eprintln!(
            "layer {} ({:?}): query shares a group with its key in {:.3}; mean query-cluster size {:.1}",
            i + 1,
            layer.kind,
            hits as f64 / data.len() as f64,
            sizes as f64 / data.len() as f64
        );
    }
    Ok(())
}
