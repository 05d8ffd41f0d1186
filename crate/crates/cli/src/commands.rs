use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use docgat::error::{Error, Result};
use docgat::heads::{ensure_head, evaluate, finetune_step, gold_labels, head_shapes, label_set_for, EntityLabelSet, MetricsReport, Task};
use docgat::io::checkpoint::{read_container_file, registry_from_container, save_checkpoint_with_metadata, write_container_file};
use docgat::io::corpus::{load_corpus, DocumentRecord};
use docgat::io::synthetic::gen_synthetic;
use docgat::model::{init_parameters, parameter_shapes, prepare_document, Model, PreparedDocument};
use docgat::optim::{batch_indices, StepRecord, Trainer};
use docgat::pretrain::msm_train_step;
use docgat::{PreparedDocument64, Registry64, Tensor64};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const ATTENTION_FILE: &str = "attention.bin";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

const META_MODEL: &str = "model_config";

fn labels_key(task: Task) -> String {
    format!("labels.{task}")
}

fn json_string<S: Serialize + ?Sized>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))
}

fn write_json<S: Serialize + ?Sized>(path: &Path, v: &S) -> Result<()> {
    let mut text = json_string(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(RESOLVED_CONFIG_FILE), cfg)?;
    Ok(cfg.out.clone())
}

fn load_records(cfg: &RunConfig) -> Result<Vec<DocumentRecord>> {
    let docs = match (&cfg.corpus, &cfg.synthetic) {
        (Some(path), _) => load_corpus(path)?,
        (None, Some(spec)) => gen_synthetic(spec)?,
        (None, None) => unreachable!("validated config names a corpus"),
    };
    if docs.is_empty() {
        return Err(Error::Data("corpus has no documents".into()));
    }
    Ok(docs)
}

fn prepare_all(cfg: &RunConfig, records: &[DocumentRecord]) -> Result<Vec<PreparedDocument64>> {
    let provider = cfg.provider();
    records.iter().map(|d| prepare_document(d, provider.as_ref(), &cfg.model)).collect()
}

/// Encoder parameters from `cfg.checkpoint`, or a fresh seeded init.
/// Extra tensors (heads) are kept; missing or misshapen encoder tensors
/// are an error.
fn load_or_init(cfg: &RunConfig) -> Result<(Registry64, BTreeMap<String, String>)> {
    let Some(path) = &cfg.checkpoint else {
        return Ok((init_parameters(&cfg.model, cfg.seed)?, BTreeMap::new()));
    };
    let container = read_container_file(path)?;
    let reg: Registry64 = registry_from_container(&container);
    for (name, shape) in parameter_shapes(&cfg.model) {
        match reg.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model config expects {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }
    info!("loaded {} tensors from {}", reg.len(), path.display());
    Ok((reg, container.metadata.unwrap_or_default()))
}

fn save(reg: &Registry64, cfg: &RunConfig, mut meta: BTreeMap<String, String>, out: &Path) -> Result<()> {
    meta.insert(META_MODEL.into(), serde_json::to_string(&cfg.model).map_err(|e| Error::Data(e.to_string()))?);
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint_with_metadata(reg, &path, &meta)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Runs `cfg.steps` updates over batches cycled in corpus order, writing
/// one log line per applied step.
fn train_loop<F>(cfg: &RunConfig, docs: &[PreparedDocument64], out: &Path, mut step: F) -> Result<()>
where
    F: FnMut(&[usize]) -> Result<Option<StepRecord>>,
{
    let mut log = BufWriter::new(File::create(out.join(TRAIN_LOG_FILE))?);
    for s in 0..cfg.steps {
        let idx = batch_indices(docs.len(), cfg.batch_size, s);
        if let Some(rec) = step(&idx)? {
            #[derive(Serialize)]
            struct Line<'a> {
                step: usize,
                lr: f64,
                loss: f64,
                masked_count: usize,
                grad_norm: f64,
                docs: &'a [usize],
            }
            let line = Line {
                step: rec.step,
                lr: rec.lr,
                loss: rec.loss,
                masked_count: rec.masked_count,
                grad_norm: rec.grad_norm,
                docs: &idx,
            };
            serde_json::to_writer(&mut log, &line).map_err(|e| Error::Data(e.to_string()))?;
            log.write_all(b"\n")?;
            if s % 10 == 0 || s + 1 == cfg.steps {
                info!("step {} lr {:.3e} loss {:.6} items {}", rec.step, rec.lr, rec.loss, rec.masked_count);
            }
        }
    }
    log.flush()?;
    Ok(())
}

fn gather(docs: &[PreparedDocument64], idx: &[usize]) -> Vec<PreparedDocument64> {
    idx.iter().map(|&i| docs[i].clone()).collect()
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let records = load_records(cfg)?;
    let docs = prepare_all(cfg, &records)?;
    let out = prepare_out(cfg)?;
    let (mut reg, meta) = load_or_init(cfg)?;
    let mut trainer = Trainer::new(cfg.optimizer.clone(), cfg.steps)?;
    info!("pretraining on {} documents for {} steps", docs.len(), cfg.steps);
    train_loop(cfg, &docs, &out, |idx| {
        let batch = gather(&docs, idx);
        msm_train_step(&mut trainer, &mut reg, &batch, &cfg.model, &cfg.msm, cfg.seed)
    })?;
    if trainer.skipped() > 0 {
        warn!("{} steps had no masked region and were skipped", trainer.skipped());
    }
    save(&reg, cfg, meta, &out)
}

/// Label set stored with the checkpoint for `task`, if any.
fn stored_labels(meta: &BTreeMap<String, String>, task: Task, background: Option<&str>) -> Result<Option<EntityLabelSet>> {
    let Some(raw) = meta.get(&labels_key(task)) else {
        return Ok(None);
    };
    let names: Vec<String> = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("stored labels: {e}")))?;
    let background = background.filter(|b| names.iter().any(|n| n == b));
    Ok(Some(EntityLabelSet::new(names, background)?))
}

fn background(cfg: &RunConfig) -> Option<&str> {
    match cfg.task {
        Task::Entity => cfg.background_label.as_deref(),
        Task::DocClass => None,
    }
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let records = load_records(cfg)?;
    let docs = prepare_all(cfg, &records)?;
    let task = cfg.task;
    let (mut reg, mut meta) = load_or_init(cfg)?;
    let labels = match stored_labels(&meta, task, background(cfg))? {
        Some(l) => l,
        None => label_set_for(&docs, task, background(cfg))?,
    };
    let gold = docs.iter().map(|d| gold_labels(d, task, &labels)).collect::<Result<Vec<_>>>()?;
    let out = prepare_out(cfg)?;
    if ensure_head(&mut reg, task, cfg.model.dim(), labels.len(), cfg.seed.wrapping_add(1))? {
        info!("added a {task} head over {} labels", labels.len());
    }
    meta.insert(labels_key(task), serde_json::to_string(labels.names()).map_err(|e| Error::Data(e.to_string()))?);
    let mut trainer = Trainer::new(cfg.optimizer.clone(), cfg.steps)?;
    info!("fine-tuning {task} on {} documents for {} steps", docs.len(), cfg.steps);
    train_loop(cfg, &docs, &out, |idx| {
        let batch = gather(&docs, idx);
        let g: Vec<Vec<usize>> = idx.iter().map(|&i| gold[i].clone()).collect();
        finetune_step(&mut trainer, &mut reg, &batch, &g, &cfg.model, task)
    })?;
    save(&reg, cfg, meta, &out)?;
    let report = evaluate(&reg, &docs, &cfg.model, task, &labels)?;
    log_metrics(&report);
    write_json(&out.join(METRICS_FILE), &report)
}

fn log_metrics(r: &MetricsReport) {
    match &r.micro {
        Some(f) => info!("{}: micro F1 {:.4} (P {:.4}, R {:.4}), accuracy {:.4}", r.task, f.f1, f.precision, f.recall, r.accuracy),
        None => info!("{}: accuracy {:.4} over {} documents", r.task, r.accuracy, r.documents),
    }
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs `checkpoint`".into()))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    require_checkpoint(cfg)?;
    let records = load_records(cfg)?;
    let docs = prepare_all(cfg, &records)?;
    let task = cfg.task;
    let (reg, meta) = load_or_init(cfg)?;
    let labels = match stored_labels(&meta, task, background(cfg))? {
        Some(l) => l,
        None => {
            warn!("checkpoint stores no {task} label set; deriving it from the corpus");
            label_set_for(&docs, task, background(cfg))?
        }
    };
    for (name, shape) in head_shapes(task, cfg.model.dim(), labels.len()) {
        if reg.get(&name).map(|t| t.shape() != shape.as_slice()).unwrap_or(true) {
            return Err(Error::Checkpoint(format!("checkpoint has no {task} head over {} labels", labels.len())));
        }
    }
    let out = prepare_out(cfg)?;
    let report = evaluate(&reg, &docs, &cfg.model, task, &labels)?;
    log_metrics(&report);
    write_json(&out.join(METRICS_FILE), &report)
}

#[derive(Serialize)]
struct GraphDump<'a> {
    doc_id: &'a str,
    /// Region count `n`; nodes are `0..=n` with 0 the global node.
    regions: usize,
    k: usize,
    dense: bool,
    region_ids: Vec<&'a str>,
    /// `neighbors[i-1]` is `N(i)` for region node `i`.
    neighbors: &'a [Vec<usize>],
    /// `(n+1) × (n+1)` attention mask, row `i` for queries from node `i`.
    mask: Vec<Vec<bool>>,
}

pub fn inspect_graph(cfg: &RunConfig) -> Result<()> {
    let id = cfg
        .doc_id
        .as_deref()
        .ok_or_else(|| Error::Config("inspect-graph needs `doc_id`".into()))?;
    let records = load_records(cfg)?;
    let record = records
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::Data(format!("no document with id `{id}`")))?;
    let provider = cfg.provider();
    let doc: PreparedDocument<f64> = prepare_document(record, provider.as_ref(), &cfg.model)?;
    let out = prepare_out(cfg)?;
    let n = doc.graph.node_count();
    let dump = GraphDump {
        doc_id: id,
        regions: doc.region_count(),
        k: doc.graph.k(),
        dense: doc.graph.is_dense(),
        region_ids: record.regions.iter().map(|r| r.id.as_str()).collect(),
        neighbors: doc.graph.neighbor_lists(),
        mask: doc.graph.mask().chunks(n).map(<[bool]>::to_vec).collect(),
    };
    write_json(&out.join(GRAPH_FILE), &dump)?;
    info!("{id}: {} regions, k {}, dense {}", dump.regions, dump.k, dump.dense);
    if cfg.checkpoint.is_some() {
        let (params, _) = load_or_init(cfg)?;
        let model = Model {
            config: cfg.model.clone(),
            params,
        };
        let attention = model.attention(&doc)?;
        let names: Vec<(String, &Tensor64)> = attention
            .iter()
            .enumerate()
            .flat_map(|(l, heads)| heads.iter().enumerate().map(move |(h, t)| (format!("attn/layer{l}/head{h}"), t)))
            .collect();
        let path = out.join(ATTENTION_FILE);
        write_container_file(&path, names.iter().map(|(n, t)| (n.as_str(), *t)), None)?;
        info!("wrote {} attention maps to {}", names.len(), path.display());
    }
    Ok(())
}
