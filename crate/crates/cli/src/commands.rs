use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use tracing::info;

use lift_core::corpus::synth::{self, SynthShape};
use lift_core::corpus::{
    read_json, read_jsonl, write_json, write_jsonl, CorpusStats, DatasetAdapter, DatasetId,
    GlobalLabelSpace, Timeline,
};
use lift_core::evalharness::{
    self, build_eval_prompts, EvalOptions, EvalPrompt, EvalReport, LabelConvention,
};
use lift_core::interp::{self, LayerRouting, PatchReport, PatchSource, ProbeReport};
use lift_core::model::LiftModel;
use lift_core::pipeline::{build_run, builder_config, split_corpus, StageShard};
use lift_core::tokenspace::{
    encode_with_spans, EncodeOptions, EncodedExample, Tokenizer, WordTokenizer,
};
use lift_core::toylm::{LanguageModel, ToyLm};
use lift_core::trainer::{
    init_model, load_checkpoint, run_curriculum, split_validation, CheckpointMeta, RunContext,
    TrainConfig,
};

use crate::manifest::{file_hash, RunLock, RunManifest, MANIFEST};
use crate::{EvalArgs, InterpArgs, ModelArgs, PatchArgs};

pub fn corpus_synth(out: &Path, shape: &str, seed: u64, only: Option<DatasetId>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for ds in DatasetId::ALL
        .into_iter()
        .filter(|d| only.is_none_or(|o| o == *d))
    {
        let s = if shape == "paper" {
            SynthShape::paper(ds)
        } else {
            SynthShape::desk(ds)
        };
        let records = synth::generate_records(ds, s, seed);
        let path = out.join(format!("{ds}.jsonl"));
        write_jsonl(&path, &records)?;
        info!("wrote {} records to {}", records.len(), path.display());
    }
    Ok(())
}

pub fn corpus_build(dataset: DatasetId, input: &Path, out: &Path) -> Result<()> {
    let labels = GlobalLabelSpace::standard();
    let timelines =
        DatasetAdapter::for_dataset(dataset).ingest(input, &labels, &Default::default())?;
    write_jsonl(&out.join(format!("{dataset}.timelines.jsonl")), &timelines)?;
    write_json(
        &out.join(format!("{dataset}.stats.json")),
        &CorpusStats::compute(&timelines),
    )?;
    info!("{dataset}: {} timelines", timelines.len());
    Ok(())
}

fn run_config(run: &Path) -> Result<TrainConfig> {
    Ok(TrainConfig::load(Some(&run.join("config.toml")))?)
}

#[derive(Serialize)]
struct BuildStats<'a> {
    corpus: BTreeMap<DatasetId, CorpusStats>,
    stages: Vec<&'a lift_core::builder::StageBuildStats>,
}

pub fn build(corpus: &Path, run: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let _lock = RunLock::acquire(run)?;
    let labels = GlobalLabelSpace::standard();
    let mut manifest = RunManifest::new(cfg.clone(), labels.hash());
    let mut splits = Vec::new();
    let mut corpus_stats = BTreeMap::new();
    for ds in DatasetId::ALL {
        let path = corpus.join(format!("{ds}.jsonl"));
        if !path.exists() {
            continue;
        }
        manifest
            .inputs
            .insert(path.display().to_string(), file_hash(&path)?);
        let timelines =
            DatasetAdapter::for_dataset(ds).ingest(&path, &labels, &Default::default())?;
        corpus_stats.insert(ds, CorpusStats::compute(&timelines));
        let sp = split_corpus(ds, &timelines, cfg.seed);
        write_jsonl(
            &run.join("corpus").join(format!("{ds}.train.jsonl")),
            &sp.train,
        )?;
        write_jsonl(
            &run.join("corpus").join(format!("{ds}.test.jsonl")),
            &sp.test,
        )?;
        splits.push(sp);
    }
    if splits.is_empty() {
        bail!("no <dataset>.jsonl files found in {}", corpus.display());
    }
    let (tok, shards) = build_run(&splits, &cfg)?;
    tok.save(&run.join("tokenizer.json"))?;
    for sh in &shards {
        write_jsonl(
            &run.join("shards").join(format!("stage{}.jsonl", sh.stage)),
            &sh.examples,
        )?;
        info!(
            "stage {}: {} examples ({} dropped)",
            sh.stage, sh.stats.examples, sh.stats.dropped
        );
    }
    let stats = BuildStats {
        corpus: corpus_stats,
        stages: shards.iter().map(|s| &s.stats).collect(),
    };
    write_json(&run.join("shards").join("stats.json"), &stats)?;
    fs::write(run.join("config.toml"), cfg.to_toml()).context("writing config snapshot")?;
    manifest.save(run, "build")
}

fn load_shards(run: &Path) -> Result<Vec<StageShard>> {
    let mut out = Vec::new();
    for k in 1..=3u8 {
        let path = run.join("shards").join(format!("stage{k}.jsonl"));
        if !path.exists() {
            continue;
        }
        let examples: Vec<lift_core::builder::PromptExample> = read_jsonl(&path)?;
        let dataset = examples
            .first()
            .map(|e| e.dataset)
            .ok_or_else(|| anyhow!("{} is empty", path.display()))?;
        out.push(StageShard {
            stage: k,
            dataset,
            shots: examples[0].k_requested,
            examples,
            stats: Default::default(),
        });
    }
    Ok(out)
}

pub fn encode(run: &Path) -> Result<()> {
    let _lock = RunLock::acquire(run)?;
    let cfg = run_config(run)?;
    let tok = WordTokenizer::load(&run.join("tokenizer.json"))?;
    let opts = EncodeOptions {
        fewshot_in_prompt_ce: cfg.fewshot_in_prompt_ce,
    };
    for sh in load_shards(run)? {
        let enc = lift_core::pipeline::encode_examples(&sh.examples, &tok, opts)?;
        write_jsonl(
            &run.join("encoded").join(format!("stage{}.jsonl", sh.stage)),
            &enc,
        )?;
    }
    let mut m = RunManifest::load(run)?;
    m.save(run, "encode")
}

pub fn train(run: &Path, from_stage: u8) -> Result<()> {
    let _lock = RunLock::acquire(run)?;
    let cfg = run_config(run)?;
    let tok = WordTokenizer::load(&run.join("tokenizer.json"))?;
    let labels = GlobalLabelSpace::standard();
    let mut data = BTreeMap::new();
    for k in 1..=3u8 {
        let path = run.join("encoded").join(format!("stage{k}.jsonl"));
        if path.exists() {
            let enc: Vec<EncodedExample> = read_jsonl(&path)?;
            data.insert(k, split_validation(enc, cfg.val_fraction, cfg.seed));
        }
    }
    let mut model = init_model(&cfg, tok.vocab_size(), labels.len())?;
    model.base.save(&run.join("model"))?;
    if from_stage == 1 {
        let _ = fs::remove_file(run.join("metrics.jsonl"));
    }
    let ctx = RunContext {
        run_dir: run.to_path_buf(),
        label_space_hash: labels.hash(),
        n_labels: labels.len(),
    };
    let outcome = run_curriculum(&mut model, &data, &cfg, &ctx, from_stage)?;
    let mut m = RunManifest::load(run)?;
    for st in &outcome.stages {
        info!(
            "stage {}: {} steps, best {}",
            st.schedule.stage, st.steps, st.best.dir
        );
        m.stage_checkpoints
            .insert(st.schedule.stage, st.best.dir.clone());
    }
    m.save(run, "train")
}

/// Run directory holding `path` (the nearest ancestor with a manifest).
fn run_of(path: &Path) -> Result<PathBuf> {
    let mut p = Some(path);
    while let Some(d) = p {
        if d.join(MANIFEST).exists() {
            return Ok(d.to_path_buf());
        }
        p = d.parent();
    }
    bail!("no run directory above {}", path.display())
}

struct Loaded {
    run: PathBuf,
    cfg: TrainConfig,
    tok: WordTokenizer,
    model: LiftModel<ToyLm>,
    tag: String,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let run = match (&a.run, &a.ckpt) {
        (Some(r), _) => r.clone(),
        (None, Some(c)) => run_of(c)?,
        (None, None) => bail!("either --run or --ckpt is required"),
    };
    let cfg = run_config(&run)?;
    let tok = WordTokenizer::load(&run.join("tokenizer.json"))?;
    let labels = GlobalLabelSpace::standard();
    let mut model = init_model(&cfg, tok.vocab_size(), labels.len())?;
    model.base = ToyLm::load(&run.join("model"))?;
    let tag = if a.base {
        model.conditioning = None;
        "base".to_string()
    } else {
        let (dir, tag) = match &a.ckpt {
            Some(c) => (c.clone(), None),
            None => {
                let best: CheckpointMeta = read_json(&run.join("stage3").join("best.json"))
                    .context("no trained stage-3 checkpoint; run `lift train` first")?;
                (run.join(&best.dir), Some("lift".to_string()))
            }
        };
        let meta = load_checkpoint(&mut model, &dir)?;
        if meta.label_space_hash != labels.hash() {
            bail!(
                "checkpoint {} was trained with a different label space",
                dir.display()
            );
        }
        tag.unwrap_or_else(|| format!("stage{}-step{}", meta.stage, meta.step))
    };
    Ok(Loaded {
        run,
        cfg,
        tok,
        model,
        tag,
    })
}

fn split(run: &Path, ds: DatasetId, part: &str) -> Result<Vec<Timeline>> {
    let path = run.join("corpus").join(format!("{ds}.{part}.jsonl"));
    read_jsonl(&path).with_context(|| format!("dataset {ds} was not part of this build"))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let _lock = RunLock::acquire(&l.run)?;
    let ds = a.model.dataset;
    let test = split(&l.run, ds, "test")?;
    let mut demos = split(&l.run, ds, "train")?;
    if a.context.is_some() {
        demos.extend(test.iter().cloned());
    }
    let bcfg = builder_config(&l.cfg);
    for &k in &a.shots {
        let opts = EvalOptions {
            shots: k,
            seed: a.model.seed.unwrap_or(l.cfg.seed),
            mode: a.mode,
            convention: if a.full_label_set {
                LabelConvention::Full
            } else {
                LabelConvention::Union
            },
            context: a.context,
            max_examples: a.model.max_examples,
            max_new_tokens: a.max_new_tokens,
        };
        let r = evalharness::evaluate(&l.model, &l.tok, &bcfg, &test, &demos, &opts, &l.tag)?;
        let mode = if matches!(a.mode, evalharness::DecodeMode::Rank) {
            "rank"
        } else {
            "generate"
        };
        let dir = l.run.join("eval");
        fs::create_dir_all(&dir).context("creating eval dir")?;
        let stem = format!("{}.{ds}.{k}shot.{mode}", l.tag);
        r.write_json(&dir.join(format!("{stem}.json")))?;
        r.write_csv(&dir.join(format!("{stem}.csv")))?;
        info!(
            "{} {ds} {k}-shot: macro-F1 {:.3} over {} (prompt hash {})",
            l.tag,
            r.macro_f1,
            r.n,
            &r.prompt_hash[..12]
        );
        println!("{}\t{ds}\t{k}\t{:.4}", l.tag, r.macro_f1);
    }
    let mut m = RunManifest::load(&l.run)?;
    m.save(&l.run, "eval")
}

fn interp_inputs(
    l: &Loaded,
    a: &InterpArgs,
) -> Result<(Vec<EvalPrompt>, Vec<EncodedExample>, Vec<usize>)> {
    let ds = a.model.dataset;
    let test = split(&l.run, ds, "test")?;
    let demos = split(&l.run, ds, "train")?;
    let opts = EvalOptions {
        shots: a.shots,
        seed: a.model.seed.unwrap_or(l.cfg.seed),
        max_examples: a.model.max_examples,
        ..Default::default()
    };
    let (prompts, _) = build_eval_prompts(&l.tok, &builder_config(&l.cfg), &test, &demos, &opts)?;
    let enc = prompts
        .iter()
        .map(|p| encode_with_spans(&p.example, &l.tok, EncodeOptions::default()))
        .collect::<lift_core::Result<Vec<_>>>()?;
    let layers = a
        .layers
        .clone()
        .unwrap_or_else(|| (0..l.model.base.n_layers()).collect());
    Ok((prompts, enc, layers))
}

fn interp_path(l: &Loaded, ds: DatasetId, kind: &str, ext: &str) -> Result<PathBuf> {
    let dir = l.run.join("interp");
    fs::create_dir_all(&dir).context("creating interp dir")?;
    Ok(dir.join(format!("{}.{ds}.{kind}.{ext}", l.tag)))
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn probe(a: &InterpArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let _lock = RunLock::acquire(&l.run)?;
    let (_, enc, layers) = interp_inputs(&l, a)?;
    let reps = enc
        .iter()
        .map(|e| interp::extract_region_reps(&l.model, e, &layers))
        .collect::<lift_core::Result<Vec<_>>>()?;
    let gold: Vec<u32> = enc.iter().map(|e| e.global_label_id).collect();
    let r = interp::probe(&reps, &gold, a.folds, a.model.seed.unwrap_or(l.cfg.seed))?;
    let ds = a.model.dataset;
    write_json(&interp_path(&l, ds, "probe", "json")?, &r)?;
    write_rows(&interp_path(&l, ds, "probe", "csv")?, &r.cells)?;
    let mut m = RunManifest::load(&l.run)?;
    m.save(&l.run, "probe")
}

#[derive(Serialize)]
struct RoutingRow {
    layer: usize,
    kind: &'static str,
    key: String,
    mass: f64,
}

fn routing_rows(routes: &[LayerRouting]) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for r in routes {
        for (key, mass) in [
            ("instruction", r.instruction),
            ("fewshot", r.fewshot),
            ("hist", r.hist),
            ("curr", r.curr),
            ("other", r.other),
        ] {
            rows.push(RoutingRow {
                layer: r.layer,
                kind: "region",
                key: key.into(),
                mass,
            });
        }
        for (b, mass) in r.recency.iter().enumerate() {
            let key = if b + 1 == interp::RECENCY_BINS {
                format!("t-{}+", b + 1)
            } else {
                format!("t-{}", b + 1)
            };
            rows.push(RoutingRow {
                layer: r.layer,
                kind: "recency",
                key,
                mass: *mass,
            });
        }
    }
    rows
}

pub fn attn(a: &InterpArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let _lock = RunLock::acquire(&l.run)?;
    let (_, enc, _) = interp_inputs(&l, a)?;
    let all = enc
        .iter()
        .map(|e| interp::attention_routing(&l.model, e))
        .collect::<lift_core::Result<Vec<_>>>()?;
    let mut mean = interp::mean_routing(&all);
    if let Some(layers) = &a.layers {
        mean.retain(|r| layers.contains(&r.layer));
    }
    let ds = a.model.dataset;
    write_json(&interp_path(&l, ds, "attn", "json")?, &mean)?;
    write_rows(&interp_path(&l, ds, "attn", "csv")?, &routing_rows(&mean))?;
    let mut m = RunManifest::load(&l.run)?;
    m.save(&l.run, "attn")
}

pub fn patch(a: &PatchArgs) -> Result<()> {
    let l = load_model(&a.interp.model)?;
    let _lock = RunLock::acquire(&l.run)?;
    let (prompts, _, layers) = interp_inputs(&l, &a.interp)?;
    let ds = a.interp.model.dataset;
    let seed = a.interp.model.seed.unwrap_or(l.cfg.seed);
    let r = interp::activation_patch(
        &l.model,
        &l.tok,
        &prompts,
        ds,
        &layers,
        seed,
        a.n,
        PatchSource::Shuffled,
    )?;
    write_json(&interp_path(&l, ds, "patch", "json")?, &r)?;
    write_rows(&interp_path(&l, ds, "patch", "csv")?, &r.layers)?;
    let mut m = RunManifest::load(&l.run)?;
    m.save(&l.run, "patch")
}

fn json_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    Ok(v)
}

#[derive(Serialize)]
struct Table1Row {
    variant: String,
    dataset: DatasetId,
    shots: usize,
    decode_mode: String,
    macro_f1: f64,
    n: usize,
    prompt_hash: String,
}

#[derive(Serialize)]
struct ReferenceRow {
    dataset: DatasetId,
    shots: usize,
    backbone: String,
    variant: String,
    paper_macro_f1: f64,
}

#[derive(Serialize)]
struct PatchRow {
    variant: String,
    dataset: DatasetId,
    layer: usize,
    delta_macro_f1: f64,
    mean_delta_gold: f64,
    mean_delta_margin: f64,
    flip_rate: f64,
}

#[derive(Serialize)]
struct ShiftRow {
    dataset: DatasetId,
    layer: usize,
    region: &'static str,
    lift: f64,
    base: f64,
    shift: f64,
}

#[derive(Serialize)]
struct RecencyRow {
    variant: String,
    dataset: DatasetId,
    layer: usize,
    bin: String,
    mass: f64,
}

/// `(variant, dataset)` from `<variant>.<dataset>.<kind>.json`.
fn tag_of(path: &Path) -> Option<(String, DatasetId)> {
    let name = path.file_name()?.to_str()?;
    let mut parts = name.split('.');
    let tag = parts.next()?.to_string();
    let ds = parts.next()?.parse().ok()?;
    Some((tag, ds))
}

pub fn report(run: &Path) -> Result<()> {
    let _lock = RunLock::acquire(run)?;
    let out = run.join("reports");
    fs::create_dir_all(&out).context("creating reports dir")?;

    let mut table = Vec::new();
    let mut refs = BTreeMap::new();
    for p in json_files(&run.join("eval"), ".json")? {
        let r: EvalReport = read_json(&p)?;
        for t in &r.reference_targets {
            refs.insert(
                (r.dataset, r.shots, t.backbone.clone(), t.variant.clone()),
                t.macro_f1,
            );
        }
        table.push(Table1Row {
            variant: r.model_tag.clone(),
            dataset: r.dataset,
            shots: r.shots,
            decode_mode: serde_json::to_value(r.decode_mode)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            macro_f1: r.macro_f1,
            n: r.n,
            prompt_hash: r.prompt_hash.clone(),
        });
    }
    write_rows(&out.join("table1.csv"), &table)?;
    let ref_rows: Vec<ReferenceRow> = refs
        .into_iter()
        .map(
            |((dataset, shots, backbone, variant), paper_macro_f1)| ReferenceRow {
                dataset,
                shots,
                backbone,
                variant,
                paper_macro_f1,
            },
        )
        .collect();
    write_rows(&out.join("table1_reference.csv"), &ref_rows)?;

    let interp_dir = run.join("interp");
    let mut probes: BTreeMap<(String, DatasetId), ProbeReport> = BTreeMap::new();
    for p in json_files(&interp_dir, ".probe.json")? {
        if let Some(k) = tag_of(&p) {
            probes.insert(k, read_json(&p)?);
        }
    }
    let mut deltas = Vec::new();
    for ((tag, ds), lift) in &probes {
        if tag == "base" {
            continue;
        }
        if let Some(base) = probes.get(&("base".to_string(), *ds)) {
            for d in interp::probe_deltas(lift, base) {
                deltas.push(serde_json::json!({
                    "variant": tag, "dataset": ds, "layer": d.layer, "region": d.region,
                    "delta_accuracy": d.delta_accuracy, "delta_macro_f1": d.delta_macro_f1,
                }));
            }
        }
    }
    write_value_rows(
        &out.join("figure3_a_probe_deltas.csv"),
        &deltas,
        &[
            "variant",
            "dataset",
            "layer",
            "region",
            "delta_accuracy",
            "delta_macro_f1",
        ],
    )?;

    let mut routes: BTreeMap<(String, DatasetId), Vec<LayerRouting>> = BTreeMap::new();
    for p in json_files(&interp_dir, ".attn.json")? {
        if let Some(k) = tag_of(&p) {
            routes.insert(k, read_json(&p)?);
        }
    }
    let mut recency = Vec::new();
    for ((tag, ds), rs) in &routes {
        for r in rs {
            for (b, mass) in r.recency.iter().enumerate() {
                let bin = if b + 1 == interp::RECENCY_BINS {
                    format!("t-{}+", b + 1)
                } else {
                    format!("t-{}", b + 1)
                };
                recency.push(RecencyRow {
                    variant: tag.clone(),
                    dataset: *ds,
                    layer: r.layer,
                    bin,
                    mass: *mass,
                });
            }
        }
    }
    write_rows(&out.join("figure3_b_recency.csv"), &recency)?;

    let mut patch_rows = Vec::new();
    for p in json_files(&interp_dir, ".patch.json")? {
        if let Some((tag, ds)) = tag_of(&p) {
            let r: PatchReport = read_json(&p)?;
            for l in r.layers {
                patch_rows.push(PatchRow {
                    variant: tag.clone(),
                    dataset: ds,
                    layer: l.layer,
                    delta_macro_f1: l.delta_macro_f1,
                    mean_delta_gold: l.mean_delta_gold,
                    mean_delta_margin: l.mean_delta_margin,
                    flip_rate: l.flip_rate,
                });
            }
        }
    }
    write_rows(&out.join("figure3_c_patch.csv"), &patch_rows)?;

    let mut shift = Vec::new();
    for ((tag, ds), lift) in &routes {
        if tag == "base" {
            continue;
        }
        if let Some(base) = routes.get(&("base".to_string(), *ds)) {
            for (a, b) in lift.iter().zip(base) {
                for (region, x, y) in [
                    ("instruction", a.instruction, b.instruction),
                    ("fewshot", a.fewshot, b.fewshot),
                    ("hist", a.hist, b.hist),
                    ("curr", a.curr, b.curr),
                    ("other", a.other, b.other),
                ] {
                    shift.push(ShiftRow {
                        dataset: *ds,
                        layer: a.layer,
                        region,
                        lift: x,
                        base: y,
                        shift: x - y,
                    });
                }
            }
        }
    }
    write_rows(&out.join("figure3_d_routing_shift.csv"), &shift)?;
    let mut m = RunManifest::load(run)?;
    m.save(run, "report")
}

/// CSV from JSON objects with a fixed column order; writes only the header when empty.
fn write_value_rows(path: &Path, rows: &[serde_json::Value], cols: &[&str]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(cols)?;
    for r in rows {
        let rec: Vec<String> = cols
            .iter()
            .map(|c| match &r[*c] {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
