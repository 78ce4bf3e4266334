//! The six subcommands. Each returns a CliError whose variant picks the
//! process exit code: Usage for anything caught before work starts,
//! Runtime for failures after.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use hashkit::checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint};
use hashkit::data::{
    build_split, generate_synthetic, load_manifest, read_manifest_labels, write_dataset,
};
use hashkit::eval::{evaluate_queries, render_table, BenchmarkReport, EvalError, ReportEntry};
use hashkit::retrieval::{load_db, save_db, RetrievalDatabase};
use hashkit::trainer::{encode_dataset, train, HashModel};
use hashkit::types::{HashCode, LabelSet, Sample, SplitSpec};

use crate::config::{
    dataset_name, load_config, CheckpointMeta, DatasetSection, DbMeta, ExperimentConfig,
    LogHeader, SplitArtifact,
};
use crate::error::{runtime, usage, CliError};
use crate::{EncodeArgs, EvaluateArgs, RetrieveArgs, SplitArgs, SynthArgs, TrainArgs};

/// Root directory for outputs when --out is absent and the config does not
/// name one.
pub const OUTPUT_ROOT_ENV: &str = "HASHKIT_OUTPUT_ROOT";

fn output_root(flag: Option<&Path>, config_dir: Option<&str>) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(d) = config_dir {
        return Ok(PathBuf::from(d));
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() {
            return Ok(PathBuf::from(root));
        }
    }
    Err(usage(format!(
        "no output location: pass --out, set output_dir in the config, or export {OUTPUT_ROOT_ENV}"
    )))
}

fn resolve_file_out(
    flag: Option<&Path>,
    config_dir: Option<&str>,
    default_name: &str,
) -> Result<PathBuf, CliError> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => Ok(output_root(None, config_dir)?.join(default_name)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// `db.hhdb` gets its metadata at `db.hhdb.meta.json`.
fn sidecar_path(db: &Path) -> PathBuf {
    let mut s = db.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn materialize_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>, CliError> {
    match &cfg.dataset {
        DatasetSection::Synthetic(s) => {
            generate_synthetic(s).map_err(|e| usage(format!("[dataset.synthetic] {e}")))
        }
        DatasetSection::Manifest(m) => load_manifest(Path::new(&m.path), Some(cfg.backbone.input_size))
            .map_err(|e| usage(format!("[dataset.manifest] {e}"))),
    }
}

fn dataset_labels(cfg: &ExperimentConfig) -> Result<Vec<LabelSet>, CliError> {
    match &cfg.dataset {
        DatasetSection::Synthetic(s) => Ok(generate_synthetic(s)
            .map_err(|e| usage(format!("[dataset.synthetic] {e}")))?
            .into_iter()
            .map(|x| x.labels)
            .collect()),
        DatasetSection::Manifest(m) => Ok(read_manifest_labels(Path::new(&m.path))
            .map_err(|e| usage(format!("[dataset.manifest] {e}")))?
            .into_iter()
            .map(|(_, l)| l)
            .collect()),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let loaded = load_config(
        &args.config,
        args.seed.map(|s| ("train.seed", s)),
        &args.overrides,
    )?;
    let cfg = &loaded.config;
    let out_dir = output_root(args.out.as_deref(), cfg.output_dir.as_deref())?;
    let section = cfg
        .split
        .as_ref()
        .ok_or_else(|| usage("training needs a [split] section"))?;
    let protocol = section.resolve()?;
    let samples = materialize_samples(cfg)?;
    let labels: Vec<LabelSet> = samples.iter().map(|s| s.labels.clone()).collect();
    let outcome = build_split(&protocol, &labels, section.seed)
        .map_err(|e| usage(format!("split failed: {e}")))?;
    let train_samples: Vec<Sample> = outcome
        .split
        .train_ids
        .iter()
        .map(|&id| samples[id as usize].clone())
        .collect();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    for run in 0..cfg.train.runs {
        let run_seed = cfg.train.seed.wrapping_add(run as u64);
        let mut model = HashModel::build(cfg.backbone.clone(), cfg.head, run_seed)
            .map_err(|e| usage(format!("model build failed: {e}")))?;
        let mut run_cfg = cfg.train.clone();
        run_cfg.seed = run_seed;
        run_cfg.runs = 1;
        let log_path = out_dir.join(format!("run{run}.log.jsonl"));
        let mut log = BufWriter::new(
            File::create(&log_path)
                .map_err(|e| runtime(format!("cannot create {}: {e}", log_path.display())))?,
        );
        let header = LogHeader {
            config_hash: loaded.hash.clone(),
            run,
            run_seed,
            overrides: loaded.overrides.clone(),
        };
        writeln!(log, "{}", serde_json::to_string(&header).expect("header serializes"))
            .map_err(|e| runtime(format!("cannot write {}: {e}", log_path.display())))?;
        let mut log_err: Option<std::io::Error> = None;
        let result = train(
            &mut model,
            &train_samples,
            &cfg.loss,
            &run_cfg,
            &cfg.preprocess,
            |rec| {
                if log_err.is_none() {
                    let line = serde_json::to_string(rec).expect("record serializes");
                    if let Err(e) = writeln!(log, "{line}") {
                        log_err = Some(e);
                    }
                }
                eprintln!("run {run} epoch {}: loss {:.6}", rec.epoch, rec.total);
            },
        );
        let outcome = result.map_err(|e| runtime(format!("run {run} failed: {e}")))?;
        if let Some(e) = log_err {
            return Err(runtime(format!("cannot write {}: {e}", log_path.display())));
        }
        log.flush()
            .map_err(|e| runtime(format!("cannot write {}: {e}", log_path.display())))?;
        let meta = CheckpointMeta {
            config_hash: loaded.hash.clone(),
            run,
            run_seed,
            config: cfg.clone(),
        };
        let ckpt_path = out_dir.join(format!("run{run}.ckpt"));
        save_checkpoint(
            &ckpt_path,
            &serde_json::to_string(&meta).expect("meta serializes"),
            &mut model,
        )
        .map_err(|e| runtime(format!("cannot write {}: {e}", ckpt_path.display())))?;
        let wall: f64 = outcome.wall_seconds.iter().sum();
        eprintln!(
            "run {run}: {} epochs in {wall:.1}s -> {}",
            outcome.records.len(),
            ckpt_path.display()
        );
    }
    Ok(())
}

/// Split part selectable on the encode command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitPart {
    Train,
    Test,
    Val,
    Database,
}

impl SplitPart {
    fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Test => "test",
            SplitPart::Val => "val",
            SplitPart::Database => "database",
        }
    }
}

fn part_ids(split: &SplitSpec, part: SplitPart) -> &[u64] {
    match part {
        SplitPart::Train => &split.train_ids,
        SplitPart::Test => &split.test_ids,
        SplitPart::Val => &split.val_ids,
        SplitPart::Database => &split.database_ids,
    }
}

fn select_part(all: Vec<Sample>, args: &EncodeArgs) -> Result<(Vec<Sample>, String), CliError> {
    let Some(split_path) = &args.split else {
        if args.part.is_some() {
            return Err(usage("--part needs --split"));
        }
        if args.include_train_in_db {
            return Err(usage("--include-train-in-db needs --split"));
        }
        return Ok((all, "all".into()));
    };
    let artifact: SplitArtifact = read_json(split_path)?;
    if !artifact.split.is_disjoint() {
        return Err(usage(format!(
            "split file {} has overlapping parts",
            split_path.display()
        )));
    }
    let part = args.part.unwrap_or(SplitPart::Database);
    let mut wanted: BTreeSet<u64> = part_ids(&artifact.split, part).iter().copied().collect();
    let mut name = part.name().to_string();
    if args.include_train_in_db {
        if part != SplitPart::Database {
            return Err(usage("--include-train-in-db only applies to --part database"));
        }
        wanted.extend(artifact.split.train_ids.iter().copied());
        name.push_str("+train");
    }
    let samples: Vec<Sample> = all.into_iter().filter(|s| wanted.contains(&s.id)).collect();
    if samples.len() != wanted.len() {
        return Err(usage(format!(
            "manifest holds {} of the {} samples named by the split",
            samples.len(),
            wanted.len()
        )));
    }
    Ok((samples, name))
}

pub fn cmd_encode(args: &EncodeArgs) -> Result<(), CliError> {
    let meta_text = read_checkpoint_meta(&args.checkpoint)
        .map_err(|e| usage(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text).map_err(|e| {
        usage(format!(
            "checkpoint {}: bad metadata: {e}",
            args.checkpoint.display()
        ))
    })?;
    let cfg = &meta.config;
    if let Some(expected) = args.expect_k {
        if expected != cfg.head.code_length {
            return Err(usage(format!(
                "checkpoint encodes {}-bit codes, --expect-k asked for {expected}",
                cfg.head.code_length
            )));
        }
    }
    let mut model = HashModel::build(cfg.backbone.clone(), cfg.head, meta.run_seed)
        .map_err(|e| usage(format!("model build failed: {e}")))?;
    load_checkpoint(&args.checkpoint, &mut model)
        .map_err(|e| usage(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let all = load_manifest(&args.manifest, Some(cfg.backbone.input_size))
        .map_err(|e| usage(format!("manifest {}: {e}", args.manifest.display())))?;
    let (samples, part_name) = select_part(all, args)?;
    let outcome = encode_dataset(&mut model, &samples, cfg.train.batch_size, &cfg.preprocess)
        .map_err(|e| runtime(format!("encoding failed: {e}")))?;
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let labels: Vec<LabelSet> = samples.iter().map(|s| s.labels.clone()).collect();
    let db = RetrievalDatabase::new(model.code_length(), outcome.codes, labels, ids)
        .map_err(|e| runtime(format!("database assembly failed: {e}")))?;
    let out = resolve_file_out(args.out.as_deref(), cfg.output_dir.as_deref(), "codes.hhdb")?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    save_db(&db, &out).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    let sidecar = DbMeta {
        config_hash: meta.config_hash.clone(),
        run: meta.run,
        run_seed: meta.run_seed,
        dataset: dataset_name(cfg),
        loss: cfg.loss.name.clone(),
        backbone_width: cfg.backbone.base_width,
        bits: model.code_length(),
        map_k: cfg.eval.map_k,
        part: part_name,
        count: db.len(),
    };
    write_json(&sidecar_path(&out), &sidecar)?;
    if outcome.near_zero > 0 {
        eprintln!(
            "note: {} embedding entries within 1e-6 of zero",
            outcome.near_zero
        );
    }
    eprintln!(
        "encoded {} codes ({} bits) -> {}",
        db.len(),
        db.k(),
        out.display()
    );
    Ok(())
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> Result<(), CliError> {
    let db = load_db(&args.db).map_err(|e| usage(format!("database {}: {e}", args.db.display())))?;
    let queries = load_db(&args.queries)
        .map_err(|e| usage(format!("queries {}: {e}", args.queries.display())))?;
    if db.k() != queries.k() {
        return Err(usage(format!(
            "code length mismatch: database {} bits, queries {} bits",
            db.k(),
            queries.k()
        )));
    }
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (qid, code) in queries.ids().iter().zip(queries.codes()) {
        let result = db
            .search(code, args.top_k)
            .map_err(|e| runtime(format!("search failed: {e}")))?;
        for (id, dist) in result.entries {
            writeln!(out, "{qid}\t{id}\t{dist}")
                .map_err(|e| runtime(format!("cannot write results: {e}")))?;
        }
    }
    out.flush()
        .map_err(|e| runtime(format!("cannot write results: {e}")))?;
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let db = load_db(&args.db).map_err(|e| usage(format!("database {}: {e}", args.db.display())))?;
    let queries = load_db(&args.queries)
        .map_err(|e| usage(format!("queries {}: {e}", args.queries.display())))?;
    if db.k() != queries.k() {
        return Err(usage(format!(
            "code length mismatch: database {} bits, queries {} bits",
            db.k(),
            queries.k()
        )));
    }
    if queries.is_empty() {
        return Err(usage("query database is empty"));
    }
    let db_meta: DbMeta = read_json(&sidecar_path(&args.db))?;
    let q_meta: DbMeta = read_json(&sidecar_path(&args.queries))?;
    if db_meta.config_hash != q_meta.config_hash {
        return Err(usage(format!(
            "config hash mismatch: database built from {}, queries from {}",
            db_meta.config_hash, q_meta.config_hash
        )));
    }
    let map_k = args.map_k.unwrap_or(q_meta.map_k);
    if map_k == 0 {
        return Err(usage("--map-k must be positive"));
    }
    let tuples: Vec<(u64, HashCode, LabelSet)> = queries
        .ids()
        .iter()
        .zip(queries.codes())
        .zip(queries.labels())
        .map(|((&id, code), labels)| (id, code.clone(), labels.clone()))
        .collect();
    let outcome = evaluate_queries(&db, &tuples, map_k).map_err(|e| match e {
        EvalError::NoQueries => usage("query database is empty"),
        other => runtime(format!("evaluation failed: {other}")),
    })?;
    let mut report = BenchmarkReport::default();
    report.config_hash = Some(db_meta.config_hash.clone());
    report
        .push(ReportEntry {
            dataset: db_meta.dataset.clone(),
            loss: db_meta.loss.clone(),
            backbone_width: db_meta.backbone_width,
            bits: db.k(),
            run_seed: db_meta.run_seed,
            map: outcome.map,
            num_queries: outcome.num_queries,
            k: map_k,
        })
        .map_err(|e| runtime(format!("report assembly failed: {e}")))?;
    let table = render_table(&report).map_err(|e| runtime(format!("table rendering failed: {e}")))?;
    print!("{table}");
    if outcome.zero_relevant_queries > 0 {
        eprintln!(
            "note: {} queries have no relevant database entry",
            outcome.zero_relevant_queries
        );
    }
    let out = resolve_file_out(args.out.as_deref(), None, "report.json")?;
    write_json(&out, &report)?;
    let table_path = PathBuf::from(format!("{}.txt", out.display()));
    std::fs::write(&table_path, &table)
        .map_err(|e| runtime(format!("cannot write {}: {e}", table_path.display())))?;
    eprintln!(
        "mAP@{map_k} = {:.4} over {} queries -> {}",
        outcome.map,
        outcome.num_queries,
        out.display()
    );
    Ok(())
}

pub fn cmd_split(args: &SplitArgs) -> Result<(), CliError> {
    let loaded = load_config(
        &args.config,
        args.seed.map(|s| ("split.seed", s)),
        &args.overrides,
    )?;
    let cfg = &loaded.config;
    let section = cfg
        .split
        .as_ref()
        .ok_or_else(|| usage("config has no [split] section"))?;
    let protocol = section.resolve()?;
    let labels = dataset_labels(cfg)?;
    let outcome = build_split(&protocol, &labels, section.seed)
        .map_err(|e| usage(format!("split failed: {e}")))?;
    let artifact = SplitArtifact {
        config_hash: loaded.hash.clone(),
        protocol: protocol.name.clone(),
        seed: section.seed,
        retained_classes: outcome.retained_classes,
        retained_tags: outcome.retained_tags,
        split: outcome.split,
    };
    let path = resolve_file_out(args.out.as_deref(), cfg.output_dir.as_deref(), "split.json")?;
    write_json(&path, &artifact)?;
    let s = &artifact.split;
    eprintln!(
        "split {}: train {}, test {}, val {}, database {}",
        artifact.protocol,
        s.train_ids.len(),
        s.test_ids.len(),
        s.val_ids.len(),
        s.database_ids.len()
    );
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let loaded = load_config(
        &args.config,
        args.seed.map(|s| ("dataset.synthetic.seed", s)),
        &args.overrides,
    )?;
    let cfg = &loaded.config;
    let spec = match &cfg.dataset {
        DatasetSection::Synthetic(s) => s.clone(),
        DatasetSection::Manifest(_) => {
            return Err(usage("synth needs a [dataset.synthetic] section"))
        }
    };
    let samples =
        generate_synthetic(&spec).map_err(|e| usage(format!("[dataset.synthetic] {e}")))?;
    let dir = output_root(args.out.as_deref(), cfg.output_dir.as_deref())?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    let manifest = write_dataset(&dir, &samples)
        .map_err(|e| runtime(format!("cannot write dataset: {e}")))?;
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| runtime(format!("cannot read {}: {e}", manifest.display())))?;
    std::fs::write(&manifest, format!("# config_hash {}\n{text}", loaded.hash))
        .map_err(|e| runtime(format!("cannot write {}: {e}", manifest.display())))?;
    eprintln!("wrote {} images under {}", samples.len(), dir.display());
    println!("{}", manifest.display());
    Ok(())
}
