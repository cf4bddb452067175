use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mbsr::eval::evaluate;
use mbsr::params::Checkpoint;
use mbsr::sessions::{
    generate_synthetic, parse_sessions, parse_sessions_from, prepare, read_examples_jsonl, write_examples_jsonl,
    write_sessions_jsonl, IndexedSession, PrepareOptions, Vocab,
};
use mbsr::train::write_log_jsonl;
use mbsr::{GlobalGraph, Model, NextBehavior, Task};
use serde::Serialize;
use serde_json::json;

use crate::config::to_toml;
use crate::{BuildGraphArgs, EvalArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs, UsageError};

const ITEMS: &str = "items.tsv";
const BEHAVIORS: &str = "behaviors.tsv";
const TRAIN_SESSIONS: &str = "train_sessions.jsonl";
const GRAPH: &str = "graph.tsv";
const CHECKPOINT: &str = "checkpoint.json";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
        }
    }
    Ok(out)
}

struct Data {
    items: Vocab,
    behaviors: Vocab,
}

fn load_vocabs(dir: &Path) -> Result<Data> {
    Ok(Data {
        items: Vocab::read_tsv(&dir.join(ITEMS))?,
        behaviors: Vocab::read_tsv(&dir.join(BEHAVIORS))?,
    })
}

fn load_model(path: &Path, graph: &GlobalGraph) -> Result<Model> {
    let model = Model::from_checkpoint(Checkpoint::read(path)?)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    model.check_graph(graph).context("checkpoint does not match the graph")?;
    Ok(model)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let sessions = generate_synthetic(a.preset, a.n, a.seed)?;
    run_dir(&a.out)?;
    write_sessions_jsonl(&a.out.join("sessions.jsonl"), &sessions)?;
    let events: usize = sessions.iter().map(|s| s.events.len()).sum();
    write_json(
        &a.out.join("synth.json"),
        &json!({ "preset": a.preset, "n": a.n, "seed": a.seed, "events": events }),
    )?;
    eprintln!("wrote {} sessions ({events} events) to {}", sessions.len(), a.out.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let Ok(ratios) = <[f64; 3]>::try_from(a.ratios.as_slice()) else {
        return Err(usage(format!("--ratios takes 3 comma-separated values, got {}", a.ratios.len())));
    };
    let opts = PrepareOptions {
        min_session_len: a.min_session_len,
        min_item_count: a.min_item_count,
        max_len: a.max_len,
        ratios,
        seed: a.seed,
        subset_fraction: a.subset_fraction,
        subset_order: a.subset_order,
        behaviors: a.behaviors.clone(),
    };
    let raw = parse_sessions(&a.input, a.format, opts.behaviors.as_deref())?;
    let data = prepare(raw, &opts)?;
    run_dir(&a.out)?;
    data.items.write_tsv(&a.out.join(ITEMS))?;
    data.behaviors.write_tsv(&a.out.join(BEHAVIORS))?;
    let mut text = String::new();
    for s in &data.train_sessions {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    fs::write(a.out.join(TRAIN_SESSIONS), text)?;
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        write_examples_jsonl(&a.out.join(format!("{name}.jsonl")), split)?;
    }
    write_json(
        &a.out.join("preprocess.json"),
        &json!({
            "input": a.input,
            "options": opts,
            "items": data.items.len(),
            "behaviors": data.behaviors.ids(),
            "train_sessions": data.train_sessions.len(),
            "examples": { "train": data.train.len(), "valid": data.valid.len(), "test": data.test.len() },
            "dropped_unseen": data.dropped_unseen,
        }),
    )?;
    eprintln!(
        "{} items, {} behaviors; examples train {} valid {} test {} ({} held-out dropped)",
        data.items.len(),
        data.behaviors.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.dropped_unseen
    );
    Ok(())
}

pub fn build_graph(a: &BuildGraphArgs) -> Result<()> {
    let data = load_vocabs(&a.data)?;
    let sessions: Vec<IndexedSession> = read_jsonl(&a.data.join(TRAIN_SESSIONS))?;
    let graph = GlobalGraph::build(&sessions, data.items.len(), data.behaviors.ids(), a.neighbor_cap, a.execution)?;
    run_dir(&a.out)?;
    graph.write_tsv(&a.out.join(GRAPH))?;
    write_json(
        &a.out.join("build_graph.json"),
        &json!({ "data": a.data, "neighbor_cap": a.neighbor_cap, "edges": graph.n_edges() }),
    )?;
    eprintln!("{} weighted edges over {} relations", graph.n_edges(), graph.n_relations());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.model.seed.is_none() {
        return Err(usage("the following required argument was not provided: --seed <SEED>"));
    }
    let config = a.model.resolve()?;
    let graph = GlobalGraph::read_tsv(&a.graph)?;
    let data = load_vocabs(&a.data)?;
    if graph.n_items() != data.items.len() || graph.behaviors() != data.behaviors.ids() {
        bail!("graph {} was not built from {}", a.graph.display(), a.data.display());
    }
    let train = read_examples_jsonl(&a.data.join("train.jsonl"))?;
    let valid = read_examples_jsonl(&a.data.join("valid.jsonl"))?;

    run_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), to_toml(&config)?)?;
    let outcome = mbsr::train::train(&train, &valid, &graph, &config, |log| {
        let val = match (log.val_hr, log.val_mrr) {
            (Some(h), Some(m)) => format!("val HR@20 {:.2} MRR@20 {:.2}", 100.0 * h, 100.0 * m),
            _ => "no validation".to_string(),
        };
        eprintln!(
            "epoch {:>3}  lr {:.2e}  L_item {:.4}  L_bhv {:.4}  {val}",
            log.epoch, log.lr, log.l_item, log.l_bhv
        );
    })?;
    write_log_jsonl(&a.out.join("train_log.jsonl"), &outcome.log)?;
    outcome.model.to_checkpoint().write(&a.out.join(CHECKPOINT))?;
    write_json(
        &a.out.join("train.json"),
        &json!({
            "data": a.data,
            "graph": a.graph,
            "best_epoch": outcome.best_epoch,
            "train_examples": train.len(),
            "valid_examples": valid.len(),
        }),
    )?;
    eprintln!("best epoch {}; checkpoint in {}", outcome.best_epoch, a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !matches!(a.split.as_str(), "train" | "valid" | "test") {
        return Err(usage(format!("invalid value '{}' for '--split': expected train, valid or test", a.split)));
    }
    let graph = GlobalGraph::read_tsv(&a.graph)?;
    let model = load_model(&a.checkpoint, &graph)?;
    let task = a.task.unwrap_or(model.config().task);
    let examples = read_examples_jsonl(&a.data.join(format!("{}.jsonl", a.split)))?;
    let report = evaluate(&model, &graph, &examples, task, a.k, a.execution)?;

    run_dir(&a.out)?;
    fs::write(a.out.join("report.json"), report.to_json()? + "\n")?;
    let table = report.to_table();
    fs::write(a.out.join("report.txt"), &table)?;
    if a.csv {
        fs::write(a.out.join("report.csv"), report.to_csv())?;
    }
    write_json(
        &a.out.join("eval.json"),
        &json!({ "checkpoint": a.checkpoint, "data": a.data, "graph": a.graph, "split": a.split, "task": task, "k": a.k }),
    )?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct RankedItem<'a> {
    rank: usize,
    item: &'a str,
    score: f64,
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let graph = GlobalGraph::read_tsv(&a.graph)?;
    let model = load_model(&a.checkpoint, &graph)?;
    let data = load_vocabs(&a.data)?;
    let task = a.task.unwrap_or(model.config().task);
    let next = match (task, &a.next_behavior) {
        (Task::Task1, None) => return Err(usage("--next-behavior is required for task1")),
        (_, Some(label)) => NextBehavior::Given(
            data.behaviors.index_of(label).with_context(|| format!("unknown behavior label `{label}`"))?,
        ),
        (Task::Task2, None) => NextBehavior::Predicted,
    };

    let sessions = if a.input == "-" {
        parse_sessions_from(std::io::stdin().lock(), a.format, Some(data.behaviors.ids()))?
    } else {
        let path = Path::new(&a.input);
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        parse_sessions_from(BufReader::new(file), a.format, Some(data.behaviors.ids()))?
    };
    let [session] = <[_; 1]>::try_from(sessions)
        .map_err(|s: Vec<_>| anyhow::anyhow!("expected exactly one session, got {}", s.len()))?;

    let mut events: Vec<(usize, usize)> = Vec::new();
    let mut unknown = 0;
    for e in &session.events {
        match (data.items.index_of(&e.item), data.behaviors.index_of(&e.behavior)) {
            (Some(i), Some(b)) => events.push((i, b)),
            _ => unknown += 1,
        }
    }
    if events.is_empty() {
        bail!("session `{}` has no items known to the model", session.session_id);
    }
    let max_len = model.config().max_len;
    let prefix = &events[events.len().saturating_sub(max_len)..];

    let hg = model.global_representations(&graph)?;
    let p = model.predict(&graph, &hg, prefix, next)?;
    let mut order: Vec<usize> = (0..p.item_logits.len()).collect();
    order.sort_by(|&x, &y| p.item_logits[y].total_cmp(&p.item_logits[x]).then(x.cmp(&y)));
    let items: Vec<RankedItem> = order
        .iter()
        .take(a.top_k)
        .enumerate()
        .map(|(r, &i)| RankedItem { rank: r + 1, item: data.items.id(i), score: p.item_scores[i] })
        .collect();
    let behavior = match next {
        NextBehavior::Given(b) => json!({ "given": data.behaviors.id(b) }),
        NextBehavior::Predicted => json!({
            "predicted": data.behaviors.id(p.chosen_behavior),
            "scores": data.behaviors.ids().iter().zip(&p.behavior_scores).map(|(l, s)| (l.clone(), json!(s))).collect::<serde_json::Map<_, _>>(),
        }),
    };
    let out = json!({
        "session_id": session.session_id,
        "task": task,
        "events_used": prefix.len(),
        "events_unknown": unknown,
        "behavior": behavior,
        "items": items,
    });
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &out)?;
    writeln!(stdout)?;
    Ok(())
}
