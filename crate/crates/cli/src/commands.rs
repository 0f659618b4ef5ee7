use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mmkgc::eval::{candidate_recall, sweep_csv, MetricsReport, SweepRow};
use mmkgc::glp::{
    build_finetune_dataset, run_glp, write_finetune, FinetuneConfig, GlpSettings, HttpClient, LlmClient, MockOracle,
};
use mmkgc::kg::{
    load_dataset, read_feature_matrix, write_entity_matrix, write_feature_matrix, write_triples, FilterIndex, Modality,
    ModalityFeatures, Split, TripleStore, Vocab,
};
use mmkgc::model::{FeatureSet, HerrConfig, HerrModel};
use mmkgc::query::Query;
use mmkgc::retrieve::{candidates_from, write_candidate_dump, CandidateList, RankingResult, Retriever};
use mmkgc::robustness::{apply_corruption, CorruptionSpec};
use mmkgc::structure::{evaluate_baseline, train_structure_embeddings};
use mmkgc::train::{load_checkpoint, save_checkpoint, train, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LlmMode, RunConfig};

/// Queries ranked at once; bounds memory for full score vectors.
const CHUNK: usize = 512;

struct Inputs {
    vocab: Vocab,
    store: TripleStore,
    features: Vec<ModalityFeatures>,
}

fn load_graph(cfg: &RunConfig) -> Result<(Vocab, TripleStore)> {
    let dir = cfg.dataset()?;
    let (vocab, store) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let [tr, va, te] = store.counts();
    info!(
        "{}: {} entities, {} relations, {tr}/{va}/{te} triples",
        dir.display(),
        vocab.num_entities(),
        vocab.num_relations()
    );
    Ok((vocab, store))
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let (vocab, store) = load_graph(cfg)?;
    let mut features = Vec::with_capacity(3);
    for m in Modality::ALL {
        let path = cfg.feature_path(m)?;
        let f = read_feature_matrix(&path, &vocab, m, None).with_context(|| format!("data.{m}"))?;
        info!("{m}: {} x {} from {}", f.rows(), f.cols(), path.display());
        features.push(f);
    }
    Ok(Inputs { vocab, store, features })
}

fn model_config(cfg: &RunConfig, vocab: &Vocab, features: &[ModalityFeatures]) -> HerrConfig {
    HerrConfig {
        num_entities: vocab.num_entities(),
        num_relations: vocab.num_relations(),
        input_dims: [features[0].cols(), features[1].cols(), features[2].cols()],
        ..cfg.model.clone()
    }
}

fn load_model(cfg: &RunConfig, vocab: &Vocab, features: &FeatureSet<f32>) -> Result<HerrModel> {
    let prefix = cfg.checkpoint();
    let ckpt = load_checkpoint(&prefix).with_context(|| format!("loading checkpoint {}", prefix.display()))?;
    let c = &ckpt.model.config;
    if c.num_entities != vocab.num_entities() || c.num_relations != vocab.num_relations() {
        bail!(
            "checkpoint {} was trained on {} entities and {} relations, dataset has {} and {}",
            prefix.display(),
            c.num_entities,
            c.num_relations,
            vocab.num_entities(),
            vocab.num_relations()
        );
    }
    ckpt.model.check_features(features)?;
    Ok(ckpt.model)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("report.txt"), report.table())?;
    print!("{}", report.table());
    Ok(())
}

/// Ranks in chunks, keeping only what `keep` extracts from each result.
fn rank_chunked<T>(
    retriever: &Retriever,
    queries: &[Query],
    filter: &FilterIndex,
    workers: usize,
    mut keep: impl FnMut(RankingResult) -> T,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(CHUNK) {
        for r in retriever.rank_all(chunk, filter, filter, workers)? {
            out.push(keep(r));
        }
    }
    Ok(out)
}

fn test_queries(store: &TripleStore) -> Vec<Query> {
    Query::both_directions(&store.test)
}

pub fn train_structure(cfg: &mut RunConfig) -> Result<()> {
    cfg.echo()?;
    let (vocab, store) = load_graph(cfg)?;
    let sc = cfg.structure_config();
    let start = Instant::now();
    let outcome = train_structure_embeddings(&store, vocab.num_entities(), vocab.num_relations(), &sc)?;
    let filter = FilterIndex::build(&store, &Split::ALL)?;
    let test = if store.test.is_empty() {
        None
    } else {
        Some(evaluate_baseline(&outcome.model, &store.test, &filter)?)
    };
    let out = &cfg.run.out;
    let features = outcome.model.into_features();
    let path = out.join("structural.mmft");
    write_feature_matrix(&features, &vocab, &path)?;

    #[derive(Serialize)]
    struct Report<'a> {
        dim: usize,
        epochs_run: usize,
        losses: &'a [f64],
        valid_mrr: Option<f64>,
        test: Option<mmkgc::eval::Metrics>,
    }
    let report = Report {
        dim: sc.dim,
        epochs_run: outcome.losses.len(),
        losses: &outcome.losses,
        valid_mrr: outcome.valid_mrr,
        test,
    };
    write(&out.join("structure_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    info!(
        "structural embeddings ({} x {}) written to {} in {:.1}s",
        features.rows(),
        features.cols(),
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn init_model(cfg: &RunConfig, inputs: &Inputs) -> Result<HerrModel> {
    let config = model_config(cfg, &inputs.vocab, &inputs.features);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let structural = inputs.features[Modality::Structural.index()].matrix();
    HerrModel::new(config, Some(structural), &mut rng).context("model")
}

/// Trains from a seeded init; on divergence the last finite parameters are
/// saved beside the checkpoint before failing.
fn fit(cfg: &RunConfig, inputs: &Inputs, features: &FeatureSet<f32>, prefix: &Path, log: &Path) -> Result<HerrModel> {
    let model = init_model(cfg, inputs)?;
    let fallback = model.clone();
    let mut sink = BufWriter::new(File::create(log).with_context(|| format!("cannot create {}", log.display()))?);
    let result = train(model, &inputs.store, features, &cfg.train, Some(&mut sink));
    sink.flush()?;
    match result {
        Ok(outcome) => {
            save_checkpoint(prefix, &outcome.model, outcome.epoch, outcome.valid_mrr)?;
            info!(
                "checkpoint {} (epoch {}, valid MRR {:?})",
                prefix.display(),
                outcome.epoch,
                outcome.valid_mrr
            );
            Ok(outcome.model)
        }
        Err(TrainError::Diverged {
            epoch,
            batch,
            loss,
            max_grad,
            last_finite,
            last_finite_epoch,
        }) => {
            let mut model = fallback;
            model.params = *last_finite;
            let mut rescue = prefix.as_os_str().to_owned();
            rescue.push(".last_finite");
            let rescue = PathBuf::from(rescue);
            save_checkpoint(&rescue, &model, last_finite_epoch, None)?;
            bail!(
                "training diverged at epoch {epoch}, batch {batch} (loss {loss}, max |grad| {max_grad:e}); \
                 parameters from epoch {last_finite_epoch} saved to {}",
                rescue.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train_herr(cfg: &mut RunConfig) -> Result<()> {
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let orphans = inputs.store.entities_without_training(inputs.vocab.num_entities());
    if !orphans.is_empty() {
        warn!("{} entities have no training triple", orphans.len());
    }
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let prefix = cfg.checkpoint();
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fit(cfg, &inputs, &features, &prefix, &cfg.run.out.join("train_log.jsonl"))?;
    Ok(())
}

pub fn retrieve(cfg: &mut RunConfig) -> Result<()> {
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let filter = FilterIndex::build(&inputs.store, &Split::ALL)?;
    let queries = test_queries(&inputs.store);
    let k = cfg.retrieval.k;
    let start = Instant::now();
    let kept = rank_chunked(&retriever, &queries, &filter, cfg.run.workers, |r| (r.rank, candidates_from(&r, k)))?;
    let (ranks, lists): (Vec<_>, Vec<CandidateList>) = kept.into_iter().unzip();
    let out = &cfg.run.out;
    write_candidate_dump(&out.join("candidates.jsonl"), &lists, &inputs.vocab)?;
    let ranked: Vec<(Query, f64)> = queries
        .iter()
        .zip(ranks)
        .map(|(q, r)| (*q, r.expect("test queries carry gold")))
        .collect();
    let mut report = MetricsReport::from_query_ranks(&ranked)?.with_config(config_value(cfg));
    report.wall_time = Some(start.elapsed().as_secs_f64());
    write_report(out, &report)?;
    info!("candidate recall@{k}: {:.4}", candidate_recall(&lists));
    Ok(())
}

pub fn evaluate(cfg: &mut RunConfig, split: &str, csv: bool) -> Result<()> {
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let filter = FilterIndex::build(&inputs.store, &Split::ALL)?;
    let triples = match split {
        "valid" => &inputs.store.valid,
        _ => &inputs.store.test,
    };
    if triples.is_empty() {
        bail!("the {split} split is empty");
    }
    let queries = Query::both_directions(triples);
    let start = Instant::now();
    let ranked = rank_chunked(&retriever, &queries, &filter, cfg.run.workers, |r| {
        (r.query, r.rank.expect("split queries carry gold"))
    })?;
    let mut report = MetricsReport::from_query_ranks(&ranked)?.with_config(config_value(cfg));
    report.wall_time = Some(start.elapsed().as_secs_f64());
    let out = &cfg.run.out;
    write_report(out, &report)?;
    if csv {
        let mut text = String::from("direction,queries,mrr,hits1,hits3,hits10\n");
        for (name, m) in [("all", Some(&report.overall)), ("head", report.head.as_ref()), ("tail", report.tail.as_ref())] {
            if let Some(m) = m {
                text.push_str(&format!("{name},{},{},{},{},{}\n", m.queries, m.mrr, m.hits1, m.hits3, m.hits10));
            }
        }
        write(&out.join("report.csv"), text)?;
    }
    Ok(())
}

fn llm_client(cfg: &RunConfig) -> Result<LlmClient> {
    let g = &cfg.glp;
    match g.mode {
        LlmMode::Off => bail!("glp.mode is off; choose --mode mock or --mode http"),
        LlmMode::Mock => match (&g.mock_answers, &g.mock_constant) {
            (Some(path), _) => Ok(LlmClient::Mock(MockOracle::load(path)?)),
            (None, Some(c)) => Ok(LlmClient::Mock(MockOracle::Constant(c.clone()))),
            (None, None) => bail!("glp.mock_answers or glp.mock_constant is required in mock mode"),
        },
        LlmMode::Http => {
            let Some(endpoint) = &g.endpoint else {
                bail!("glp.endpoint is required in http mode (use --endpoint)");
            };
            Ok(LlmClient::Http(HttpClient::with_retries(
                endpoint.clone(),
                Duration::from_millis(g.timeout_ms),
                g.retries,
                Duration::from_millis(g.backoff_ms),
            )))
        }
    }
}

fn glp_settings(cfg: &RunConfig, k: usize) -> GlpSettings {
    GlpSettings {
        k,
        max_tokens: cfg.glp.max_tokens,
        temperature: cfg.glp.temperature,
        slot: cfg.glp.slot(),
        workers: cfg.run.workers,
    }
}

#[derive(Serialize)]
struct PredictReport {
    k: usize,
    retriever: MetricsReport,
    #[serde(rename = "final")]
    reranked: MetricsReport,
    candidate_recall: f64,
    fallbacks: usize,
    parse_failures: usize,
    config: serde_json::Value,
}

pub fn predict(cfg: &mut RunConfig) -> Result<()> {
    let client = llm_client(cfg)?;
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let filter = FilterIndex::build(&inputs.store, &Split::ALL)?;
    let queries = test_queries(&inputs.store);
    let k = cfg.retrieval.k;
    let run = run_glp(&retriever, &inputs.vocab, &queries, &filter, &filter, &client, &glp_settings(cfg, k))?;
    let out = &cfg.run.out;

    let mut lines = String::new();
    for o in &run.outcomes {
        lines.push_str(&serde_json::to_string(o)?);
        lines.push('\n');
    }
    write(&out.join("predictions.jsonl"), lines)?;

    let report = PredictReport {
        k,
        retriever: run.retriever_report()?,
        reranked: run.final_report()?,
        candidate_recall: run.candidate_recall(),
        fallbacks: run.fallbacks(),
        parse_failures: run.parse_failures(),
        config: config_value(cfg),
    };
    if report.fallbacks > 0 {
        warn!("{} of {} queries fell back to the retriever ranking", report.fallbacks, run.outcomes.len());
    }
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let text = format!(
        "retriever\n{}\nreranked\n{}\ncandidate recall@{k} {:.4}\nfallbacks {}\nparse failures {}\n",
        report.retriever.table(),
        report.reranked.table(),
        report.candidate_recall,
        report.fallbacks,
        report.parse_failures
    );
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn export_finetune(cfg: &mut RunConfig) -> Result<()> {
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let config = FinetuneConfig {
        k: cfg.retrieval.k,
        sample: cfg.glp.finetune_sample,
        seed: cfg.run.seed,
        slot: cfg.glp.slot(),
        lora: cfg.glp.lora.clone(),
        workers: cfg.run.workers,
    };
    let export = build_finetune_dataset(&inputs.store, &retriever, &inputs.vocab, &config)?;
    write_finetune(&cfg.run.out, &export)?;
    info!(
        "{} train and {} valid records ({} with inserted gold)",
        export.train.len(),
        export.valid.len(),
        export.manifest.gold_inserted
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulationReport {
    corruption: CorruptionSpec,
    train_triples: usize,
    removed_triples: usize,
    orphaned_entities: usize,
    metrics: MetricsReport,
}

pub fn simulate(cfg: &mut RunConfig) -> Result<()> {
    let Some(kind) = cfg.corruption.kind else {
        bail!("corruption.kind is not set (use --corruption)");
    };
    let mut spec = CorruptionSpec::new(kind, cfg.corruption.fraction, cfg.run.seed).with_scale(cfg.corruption.noise_scale);
    if let Some(m) = cfg.corruption.modality {
        spec = spec.on(m);
    }
    spec.validate().context("corruption")?;
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let n = inputs.vocab.num_entities();
    let corrupted = apply_corruption(&inputs.store, &inputs.features, &spec, n)?;

    let dir = cfg.run.out.join("corrupted");
    fs::create_dir_all(&dir)?;
    for split in Split::ALL {
        write_triples(&dir.join(split.file_name()), corrupted.store.split(split), &inputs.vocab)?;
    }
    for f in &corrupted.features {
        write_feature_matrix(f, &inputs.vocab, &dir.join(format!("{}.mmft", f.modality)))?;
    }

    let damaged = Inputs {
        vocab: inputs.vocab,
        store: corrupted.store,
        features: corrupted.features,
    };
    let features = FeatureSet::from_modalities(&damaged.features)?;
    let model = fit(cfg, &damaged, &features, &dir.join("herr"), &dir.join("train_log.jsonl"))?;
    let retriever = Retriever::new(&model, &features)?;
    // removed triples are still true facts, so filter with the intact graph
    let filter = FilterIndex::build(&inputs.store, &Split::ALL)?;
    let ranked = rank_chunked(&retriever, &test_queries(&damaged.store), &filter, cfg.run.workers, |r| {
        (r.query, r.rank.expect("test queries carry gold"))
    })?;
    let metrics = MetricsReport::from_query_ranks(&ranked)?.with_config(config_value(cfg));
    let report = SimulationReport {
        corruption: spec,
        train_triples: damaged.store.train.len(),
        removed_triples: inputs.store.train.len() - damaged.store.train.len(),
        orphaned_entities: corrupted.orphaned.len(),
        metrics,
    };
    let out = &cfg.run.out;
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write(&out.join("report.txt"), report.metrics.table())?;
    print!("{}", report.metrics.table());
    Ok(())
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn export_embeddings(cfg: &mut RunConfig, relation: Option<&str>) -> Result<()> {
    let Some(label) = relation else {
        bail!("--relation is required");
    };
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let Some(rid) = inputs.vocab.relation(label) else {
        bail!("unknown relation `{label}`");
    };
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let fused = retriever.fused(rid)?;
    let path = cfg.run.out.join(format!("fused_{}.mmft", file_safe(label)));
    write_entity_matrix(fused, &inputs.vocab, &path)?;
    info!("fused embeddings under `{label}` written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepOut<'a> {
    reranked: bool,
    rows: &'a [SweepRow],
}

pub fn sweep_k(cfg: &mut RunConfig) -> Result<()> {
    let client = match cfg.glp.mode {
        LlmMode::Off => None,
        _ => Some(llm_client(cfg)?),
    };
    cfg.echo()?;
    let inputs = load_inputs(cfg)?;
    let features = FeatureSet::from_modalities(&inputs.features)?;
    let model = load_model(cfg, &inputs.vocab, &features)?;
    let retriever = Retriever::new(&model, &features)?;
    let filter = FilterIndex::build(&inputs.store, &Split::ALL)?;
    let queries = test_queries(&inputs.store);
    let mut ks = cfg.retrieval.sweep.clone();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        bail!("retrieval.sweep is empty");
    }

    let mut rows = Vec::with_capacity(ks.len());
    match &client {
        None => {
            // one ranking pass serves every k
            let max_k = *ks.last().expect("sweep is non-empty");
            let kept = rank_chunked(&retriever, &queries, &filter, cfg.run.workers, |r| {
                ((r.query, r.rank.expect("test queries carry gold")), candidates_from(&r, max_k))
            })?;
            let (ranked, lists): (Vec<_>, Vec<CandidateList>) = kept.into_iter().unzip();
            let metrics = MetricsReport::from_query_ranks(&ranked)?.overall;
            for &k in &ks {
                let truncated: Vec<CandidateList> = lists
                    .iter()
                    .map(|l| CandidateList {
                        query: l.query,
                        k,
                        candidates: l.candidates.iter().take(k).cloned().collect(),
                    })
                    .collect();
                rows.push(SweepRow {
                    k,
                    metrics: metrics.clone(),
                    recall: candidate_recall(&truncated),
                });
            }
        }
        Some(client) => {
            for &k in &ks {
                let run = run_glp(&retriever, &inputs.vocab, &queries, &filter, &filter, client, &glp_settings(cfg, k))?;
                rows.push(SweepRow {
                    k,
                    metrics: run.final_report()?.overall,
                    recall: run.candidate_recall(),
                });
            }
        }
    }
    let out = &cfg.run.out;
    write(&out.join("sweep.csv"), sweep_csv(&rows))?;
    let json = SweepOut {
        reranked: client.is_some(),
        rows: &rows,
    };
    write(&out.join("sweep.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    let mut text = format!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "k", "MRR", "Hits@1", "Hits@3", "Hits@10", "recall");
    for r in &rows {
        let m = &r.metrics;
        text.push_str(&format!(
            "{:>4} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.k,
            m.mrr * 100.0,
            m.hits1 * 100.0,
            m.hits3 * 100.0,
            m.hits10 * 100.0,
            r.recall * 100.0
        ));
    }
    write(&out.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}
