use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use longseq_core::attention::{attention_cost, AttentionPattern};
use longseq_core::harness::{
    evaluate_stats, load_checkpoint, read_cache, save_checkpoint, train as run_training, write_cache, Example,
    Metric, Mode, Model, RunOptions, TrainState,
};
use longseq_core::sliding::ChunkLayout;

use crate::config::{parse_config, RunConfig};
use crate::metrics::JsonLinesSink;

fn default_metric(mode: Mode) -> Metric {
    match mode {
        Mode::QaEncoder => Metric::Accuracy,
        Mode::CausalLm => Metric::BitsPerChar,
    }
}

fn parse_metric(name: &str) -> Result<Metric> {
    serde_json::from_value(json!(name))
        .map_err(|_| anyhow!("unknown metric `{name}`; expected accuracy, perplexity or bits-per-char"))
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg = parse_config(config)?;
    let (train_set, test_set) = cfg.datasets()?;
    let dir = cfg.metrics_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_cache(&dir.join("test.tsv"), &test_set)?;

    let (mut model, mut state) = match resume {
        Some(path) => {
            let (model, state) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if *model.config() != cfg.model {
                bail!("checkpoint {} was trained with a different model config", path.display());
            }
            (model, state.unwrap_or_else(|| TrainState::new(&cfg.run)))
        }
        None => (Model::new(cfg.model.clone())?, TrainState::new(&cfg.run)),
    };

    let mut sink = JsonLinesSink::create(&dir.join("metrics.jsonl"))?;
    let mut sink_error = None;
    let mut emit = |r: &longseq_core::harness::MetricRecord| {
        eprintln!(
            "step {:>6}  loss {:.4}  acc {:.3}  lr {:.2e}  grad {:.3}  centroid epoch {}",
            r.step, r.loss, r.accuracy, r.lr, r.grad_norm, r.centroid_epoch
        );
        sink.emit_value(r).map_err(|e| {
            let msg = e.to_string();
            sink_error = Some(e);
            longseq_core::Error::Invalid(msg)
        })
    };
    let outcome = run_training(&mut model, &train_set, &cfg.run, &mut state, &mut emit);
    if let Some(e) = sink_error {
        return Err(e.context("writing metrics"));
    }
    outcome?;

    let checkpoint = cfg.checkpoint_path();
    save_checkpoint(&checkpoint, &model, Some(&state))?;
    let stats = evaluate_stats(&model, &test_set)?;
    let metric = default_metric(cfg.model.mode);
    let summary = json!({
        "steps": state.iteration,
        "test_examples": test_set.len(),
        "test_loss": stats.mean_nll(),
        "metric": metric,
        "value": metric.from_stats(&stats),
        "checkpoint": checkpoint,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

/// Examples from a cache, or the test split of a config (sized for `model`).
fn load_examples(model: &Model, config: Option<&Path>, data: Option<&Path>) -> Result<Vec<Example>> {
    match (data, config) {
        (Some(path), _) => Ok(read_cache(path).with_context(|| format!("reading {}", path.display()))?),
        (None, Some(path)) => {
            let mut cfg: RunConfig = parse_config(path)?;
            let (_, test) = cfg.datasets()?;
            if cfg.model.vocab > model.config().vocab {
                bail!("config vocabulary {} exceeds the checkpoint's {}", cfg.model.vocab, model.config().vocab);
            }
            Ok(test)
        }
        (None, None) => bail!("need --data or --config to know what to evaluate"),
    }
}

pub fn eval(checkpoint: &Path, config: Option<&Path>, data: Option<&Path>, metric: Option<&str>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let examples = load_examples(&model, config, data)?;
    let metric = metric.map(parse_metric).transpose()?.unwrap_or(default_metric(model.config().mode));
    if metric == Metric::Accuracy && model.config().mode == Mode::CausalLm {
        log::info!("accuracy of a language model is next-token accuracy");
    }
    let stats = evaluate_stats(&model, &examples)?;
    println!(
        "{}",
        json!({
            "examples": examples.len(),
            "loss": stats.mean_nll(),
            "metric": metric,
            "value": metric.from_stats(&stats),
        })
    );
    Ok(())
}

pub fn bench(xs: &[u64], patterns: &[String], q: u64, l: u64, m: u64, d: u64) -> Result<()> {
    if l == 0 || m == 0 || m > l {
        bail!("need 0 < m <= l, got l = {l}, m = {m}");
    }
    let patterns = patterns
        .iter()
        .map(|p| AttentionPattern::parse(p).ok_or_else(|| anyhow!("unknown pattern `{p}`")))
        .collect::<Result<Vec<_>>>()?;
    if let Some(x) = xs.iter().find(|&&x| x == 0) {
        bail!("context length {x} must be positive");
    }
    println!("pattern,x,q,l,m,macs");
    for &pattern in &patterns {
        for &x in xs {
            println!("{},{x},{q},{l},{m},{}", pattern.name(), attention_cost(pattern, x, q, l, m, d));
        }
    }
    Ok(())
}

/// Human-readable origin of flattened row `r`.
fn describe_row(layout: &ChunkLayout, r: usize) -> String {
    let mut start = 0;
    for k in 0..layout.chunks {
        let len = layout.q + layout.flat_slice(k).len();
        if r < start + len {
            let j = r - start;
            return if j < layout.q { format!("q{j}@{k}") } else { (layout.flat_slice(k).start + j - layout.q).to_string() };
        }
        start += len;
    }
    unreachable!("row {r} beyond the flattened length {}", layout.flat_len())
}

pub fn cluster_stats(
    checkpoint: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    example: usize,
    positions: usize,
) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let examples = load_examples(&model, config, data)?;
    let ex = examples
        .get(example)
        .ok_or_else(|| anyhow!("example {example} out of range ({} examples)", examples.len()))?;
    let trace = model.forward(ex, &RunOptions { full: true, ..Default::default() })?;
    let layout = trace.layout;
    println!("example {example}: {} context tokens, {} flattened rows", layout.x, layout.flat_len());
    let centroids: BTreeMap<usize, _> = model.centroids().into_iter().collect();
    for (i, (layer, lt)) in model.layers.iter().zip(&trace.layers).enumerate() {
        let Some(route) = &lt.route else { continue };
        println!();
        println!("layer {} ({})", i + 1, layer.kind.short_name());
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, &c) in route.assignment().iter().enumerate() {
            members.entry(c).or_default().push(r);
        }
        println!("{:>7}  {:>6}  positions", "cluster", "size");
        for (c, rows) in &members {
            let shown: Vec<String> = rows.iter().take(positions).map(|&r| describe_row(&layout, r)).collect();
            let more = if rows.len() > positions { " ..." } else { "" };
            println!("{c:>7}  {:>6}  {}{more}", rows.len(), shown.join(" "));
        }
        println!("{:>7}  {:>6}", "total", members.values().map(Vec::len).sum::<usize>());
        if let Some(c) = centroids.get(&i) {
            let cos: Vec<String> = c.tour_cosines().iter().map(|v| format!("{v:.3}")).collect();
            println!("centroid epoch {}; tour cosines {}", c.epoch(), cos.join(" "));
        }
    }
    Ok(())
}
