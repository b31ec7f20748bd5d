use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use mtlsent::combiner::{
    combine as combine_sets, corpus_id, embed_corpus, load_contextual, load_embeddings, load_external, save_embeddings_with, EmbedMode,
    EmbeddingSet, Pooling, CONTEXTUAL_MAGIC, EMBEDDING_MAGIC,
};
use mtlsent::eval::{
    curve_csv, discriminator_probe, learning_curve, pair_matrix, reports_csv, similarity_eval, train_logreg, train_mlp_probe,
    weighted_pool_analysis, EvalReport, FrozenTaskData, LabeledSplit, ScoredSplit, SimilarityData,
};
use mtlsent::multitask::{
    accuracy, export_encoders, train_with, Adversarial, BundleMeta, EncoderBundle, EpochLog, MtlModel, TaskHead, TaskKind, TaskSpec,
};
use mtlsent::rng::SeedStreams;
use mtlsent::tensor::{OpKind, Tensor};
use mtlsent::text::{
    load_dataset, load_word_vectors, synth_task, synth_word_vectors, tokenize, write_dataset, write_word_vectors, DatasetRecord,
    EmbeddingTable, Schema, SynthSpec, SynthVocab, Target, Vocab,
};
use mtlsent::verify::{self, Scope};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{
    base_dir, config_hash, existing, required, resolve, AnalyzeRun, CombineRun, EmbedRun, EvalRun, EvalTask, Probe, ProbeEncoder, ProbeRun,
    SynthRun, TrainRun,
};
use crate::{
    CliError, CombineArgs, Common, EmbedArgs, EncoderArg, EvalArgs, GradcheckArgs, ModeArg, PoolArg, ProbeArgs, ScopeArg, TrainArgs,
};

type Res<T = ()> = Result<T, CliError>;

/// Flag paths are relative to the working directory, so they are made
/// absolute before being merged with config-relative paths.
fn abs(p: &Option<PathBuf>) -> Value {
    match p {
        Some(p) => Value::String(std::path::absolute(p).unwrap_or_else(|_| p.clone()).to_string_lossy().into_owned()),
        None => Value::Null,
    }
}

/// The resolved config without its output directory, which must not
/// change the hash.
fn recorded<T: Serialize>(run: &T) -> (Value, String) {
    let mut v = serde_json::to_value(run).expect("configs serialize");
    if let Some(o) = v.as_object_mut() {
        o.remove("out");
    }
    let hash = config_hash(&v);
    (v, hash)
}

fn stamp(hash: &str, seed: u64) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config_hash".into(), hash.into());
    m.insert("seed".into(), seed.into());
    m
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn out_dir(out: &Option<PathBuf>) -> Res<PathBuf> {
    let dir = required(out, "out")?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Res {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Res {
    let text = serde_json::to_string_pretty(v).map_err(CliError::runtime)?;
    write_text(path, &(text + "\n"))
}

/// Appends `config_hash` and `seed` columns to every row.
fn stamp_csv(csv: &str, hash: &str, seed: u64) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash,seed\n");
        } else {
            out.push_str(&format!(",{hash},{seed}\n"));
        }
    }
    out
}

fn schema_of(kind: TaskKind) -> Schema {
    match kind {
        TaskKind::Single => Schema::Single,
        TaskKind::Pair => Schema::Pair,
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    entry: &'a EpochLog,
}

pub fn train(a: TrainArgs) -> Res {
    let flags = json!({
        "word_vectors": abs(&a.word_vectors),
        "out": abs(&a.common.out),
        "preset": a.beta_gamma,
        "train": {"seed": a.common.seed, "batch_size": a.batch, "max_epochs": a.epochs},
        "model": {"hidden_dim": a.hidden},
    });
    let cfg_path = a.common.config.as_deref();
    let mut run: TrainRun = resolve(cfg_path, flags)?;
    // Preset first so explicit --beta/--gamma still win.
    if let Some(p) = run.preset.clone() {
        run.train.apply_preset(&p)?;
    }
    if let Some(b) = a.beta {
        run.train.beta = b;
    }
    if let Some(g) = a.gamma {
        run.train.gamma = g;
    }
    match a.mode {
        Some(ModeArg::Sp) => run.train.adversarial = Adversarial::Off,
        Some(ModeArg::Asp) if run.train.adversarial == Adversarial::Off => run.train.adversarial = Adversarial::Reversal,
        _ => {}
    }
    run.train.validate()?;
    run.model.validate()?;

    let base = base_dir(cfg_path);
    let wv = existing(&base, &required(&run.word_vectors, "word_vectors")?, "word_vectors")?;
    let dim = required(&run.word_dim, "word_dim")?;
    if dim == 0 {
        return Err(CliError::config("word_dim", "must be >= 1"));
    }
    if run.tasks.is_empty() {
        return Err(CliError::config("tasks", "at least one task is required"));
    }
    let mut files = Vec::new();
    for (i, t) in run.tasks.iter().enumerate() {
        let train = existing(&base, &t.train, &format!("tasks[{i}].train"))?;
        let dev = existing(&base, &t.dev, &format!("tasks[{i}].dev"))?;
        let test = match &t.test {
            Some(p) => Some(existing(&base, p, &format!("tasks[{i}].test"))?),
            None => None,
        };
        files.push((train, dev, test));
    }
    let out = out_dir(&run.out)?;
    let seed = run.train.seed;
    let (resolved, hash) = recorded(&run);

    let vectors = load_word_vectors(&wv, dim)?;
    let mut tasks = Vec::new();
    for (t, (train, dev, test)) in run.tasks.iter().zip(&files) {
        let schema = schema_of(t.kind);
        tasks.push(TaskSpec {
            name: t.name.clone(),
            kind: t.kind,
            num_classes: t.num_classes,
            train: load_dataset(train, schema)?,
            dev: load_dataset(dev, schema)?,
            test: match test {
                Some(p) => load_dataset(p, schema)?,
                None => Vec::new(),
            },
        });
    }
    let heads: Vec<TaskHead> = tasks.iter().map(TaskHead::from).collect();
    let model = MtlModel::init(&heads, dim, &run.model, &SeedStreams::new(seed))?;

    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut log_err = None;
    let outcome = train_with(model, &tasks, &vectors.vocab, &vectors.table, &run.train, |e| {
        eprintln!("epoch {:>3}  lr {:.6}  mean dev {:.4}", e.epoch, e.lr, e.mean_dev_accuracy);
        if log_err.is_some() {
            return;
        }
        let line = LogLine {
            config_hash: &hash,
            seed,
            entry: e,
        };
        let res = serde_json::to_writer(&mut log, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| log.write_all(b"\n"));
        if let Err(err) = res {
            log_err = Some(err);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path, e));
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;

    let wv_abs = wv.canonicalize().unwrap_or(wv);
    export_encoders(
        &outcome.model,
        &out,
        &BundleMeta {
            word_vectors: Some(wv_abs.to_string_lossy().into_owned()),
            seed: Some(seed),
            config_hash: Some(hash.clone()),
        },
    )?;
    let mut test_accuracy = BTreeMap::new();
    for (k, t) in tasks.iter().enumerate() {
        if !t.test.is_empty() {
            test_accuracy.insert(
                t.name.clone(),
                accuracy(&outcome.model, k, &t.test, &vectors.vocab, &vectors.table, 256)?,
            );
        }
    }
    write_json(
        &out.join("run.json"),
        &json!({
            "config_hash": hash,
            "seed": seed,
            "config": resolved,
            "epochs_run": outcome.log.len(),
            "state": outcome.state,
            "test_accuracy": test_accuracy,
            "word_vectors_skipped": vectors.skipped,
        }),
    )?;
    println!(
        "trained {} task(s) for {} epoch(s); best epoch {} with mean dev accuracy {:.4}; bundle written to {}",
        tasks.len(),
        outcome.log.len(),
        outcome.state.best_epoch,
        outcome.state.best_mean_dev,
        out.display()
    );
    Ok(())
}

/// Corpus lines are the tokenized sentences joined by single spaces, so a
/// text file and a dataset with the same sentences share a corpus id.
fn dataset_lines(records: &[DatasetRecord], column: usize, field: &str) -> Res<Vec<String>> {
    records
        .iter()
        .map(|r| match column {
            1 => Ok(r.sentence1.join(" ")),
            2 => r
                .sentence2
                .as_ref()
                .map(|s| s.join(" "))
                .ok_or_else(|| CliError::config(field, "column 2 needs a pair dataset")),
            _ => Err(CliError::config(field, "column must be 1 or 2")),
        })
        .collect()
}

fn text_lines(path: &Path) -> Res<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let toks = tokenize(raw);
        if toks.is_empty() {
            return Err(CliError {
                code: 2,
                msg: format!("{}:{}: empty sentence", path.display(), i + 1),
            });
        }
        lines.push(toks.join(" "));
    }
    Ok(lines)
}

/// A bundle with the word vectors it was trained on.
struct Embedder {
    bundle: EncoderBundle,
    vocab: Vocab,
    table: EmbeddingTable,
    batch_size: usize,
}

impl Embedder {
    fn load(base: &Path, bundle: &Option<PathBuf>, word_vectors: &Option<PathBuf>, batch_size: usize) -> Res<Self> {
        let path = existing(base, &required(bundle, "bundle")?, "bundle")?;
        let bundle = EncoderBundle::load(&path)?;
        let wv = match word_vectors {
            Some(p) => existing(base, p, "word_vectors")?,
            None => {
                let p = bundle
                    .word_vectors_path()
                    .ok_or_else(|| CliError::config("word_vectors", "not given and not recorded in the bundle"))?;
                existing(Path::new("."), &p, "word_vectors")?
            }
        };
        let v = load_word_vectors(&wv, bundle.manifest.input_dim)?;
        Ok(Self {
            bundle,
            vocab: v.vocab,
            table: v.table,
            batch_size: batch_size.max(1),
        })
    }

    fn embed(&self, lines: &[String], mode: &EmbedMode) -> Res<EmbeddingSet> {
        Ok(embed_corpus(&self.bundle, lines, &self.vocab, &self.table, mode, self.batch_size)?)
    }
}

pub fn embed(a: EmbedArgs) -> Res {
    let flags = json!({
        "bundle": abs(&a.bundle),
        "input": abs(&a.input),
        "dataset": abs(&a.dataset),
        "schema": a.schema,
        "column": a.column,
        "mode": a.mode,
        "word_vectors": abs(&a.word_vectors),
        "batch_size": a.batch,
        "out": abs(&a.common.out),
        "seed": a.common.seed,
    });
    let cfg_path = a.common.config.as_deref();
    let run: EmbedRun = resolve(cfg_path, flags)?;
    let base = base_dir(cfg_path);
    let mode: EmbedMode = run.mode.as_deref().unwrap_or("concat_all").parse()?;
    let lines = match (&run.input, &run.dataset) {
        (Some(p), None) => text_lines(&existing(&base, p, "input")?)?,
        (None, Some(p)) => {
            let p = existing(&base, p, "dataset")?;
            let records = load_dataset(&p, run.schema.unwrap_or(Schema::Single))?;
            dataset_lines(&records, run.column.unwrap_or(1), "column")?
        }
        (None, None) => return Err(CliError::config("input", "give either input or dataset")),
        (Some(_), Some(_)) => return Err(CliError::config("input", "input and dataset are mutually exclusive")),
    };
    let embedder = Embedder::load(&base, &run.bundle, &run.word_vectors, run.batch_size.unwrap_or(128))?;
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let set = embedder.embed(&lines, &mode)?;
    let path = out.join("embeddings.semb");
    save_embeddings_with(&path, &set, stamp(&hash, run.seed))?;
    println!(
        "embedded {} sentences ({} dims, corpus {}) into {}",
        set.len(),
        set.dim(),
        set.corpus_hex(),
        path.display()
    );
    Ok(())
}

fn load_any(path: &Path, pooling: Pooling) -> Res<EmbeddingSet> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| io_err(path, e))?;
    if &magic == CONTEXTUAL_MAGIC {
        return Ok(load_contextual(path)?.pool(pooling)?);
    }
    if &magic != EMBEDDING_MAGIC {
        return Err(CliError {
            code: 2,
            msg: format!("{}: not an embedding cache or contextual-vector file", path.display()),
        });
    }
    let set = load_embeddings(path)?;
    let known = ["mtl:", "contextual:", "external:"];
    if known.iter().any(|k| set.provenance.starts_with(k)) {
        Ok(set)
    } else {
        Ok(load_external(path)?)
    }
}

pub fn combine(a: CombineArgs) -> Res {
    let inputs: Vec<Value> = a.inputs.iter().map(|p| abs(&Some(p.clone()))).collect();
    let flags = json!({
        "inputs": if inputs.is_empty() { Value::Null } else { Value::Array(inputs) },
        "normalize": if a.normalize { Value::Bool(true) } else { Value::Null },
        "pool": a.pool.map(|p| match p { PoolArg::Avg => "avg", PoolArg::Max => "max" }),
        "out": abs(&a.common.out),
        "seed": a.common.seed,
    });
    let cfg_path = a.common.config.as_deref();
    let run: CombineRun = resolve(cfg_path, flags)?;
    let base = base_dir(cfg_path);
    if run.inputs.is_empty() {
        return Err(CliError::config("inputs", "at least one input is required"));
    }
    let paths = run
        .inputs
        .iter()
        .enumerate()
        .map(|(i, p)| existing(&base, p, &format!("inputs[{i}]")))
        .collect::<Res<Vec<_>>>()?;
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let sets = paths.iter().map(|p| load_any(p, run.pool)).collect::<Res<Vec<_>>>()?;
    let combined = combine_sets(&sets, run.normalize)?;
    let path = out.join("combined.semb");
    save_embeddings_with(&path, &combined, stamp(&hash, run.seed))?;
    println!(
        "{} rows, {} dims, provenance {}",
        combined.len(),
        combined.dim(),
        combined.provenance
    );
    Ok(())
}

enum Features {
    Classes(FrozenTaskData),
    Scores(SimilarityData),
}

struct SplitFeatures {
    columns: Vec<Tensor>,
    labels: Vec<usize>,
    scores: Vec<f64>,
    corpus_ids: Vec<String>,
}

/// Embeds or loads every sentence column of one split.
fn split_features(
    task: &EvalTask,
    field: &str,
    records: &[DatasetRecord],
    caches: Option<&[PathBuf]>,
    base: &Path,
    embed: &mut dyn FnMut(&[String]) -> Res<EmbeddingSet>,
) -> Res<SplitFeatures> {
    let ncols = if task.schema == Schema::Single { 1 } else { 2 };
    if let Some(c) = caches {
        if c.len() != ncols {
            return Err(CliError::config(
                field,
                format!("expected {ncols} cache file(s), one per sentence column"),
            ));
        }
    }
    let mut columns = Vec::new();
    let mut corpus_ids = Vec::new();
    for col in 1..=ncols {
        let lines = dataset_lines(records, col, field)?;
        let set = match caches {
            Some(c) => {
                let p = existing(base, &c[col - 1], &format!("{field}[{}]", col - 1))?;
                let set = load_embeddings(&p)?;
                let want = corpus_id(&lines);
                if set.corpus_id != want {
                    return Err(mtlsent::Error::Alignment(format!(
                        "{}: corpus id {} does not match column {col} of {field} ({})",
                        p.display(),
                        set.corpus_hex(),
                        hex::encode(want)
                    ))
                    .into());
                }
                set
            }
            None => embed(&lines)?,
        };
        corpus_ids.push(set.corpus_hex());
        columns.push(set.matrix);
    }
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for r in records {
        match r.target {
            Target::Label(l) => labels.push(l),
            Target::Score(s) => scores.push(s),
        }
    }
    Ok(SplitFeatures {
        columns,
        labels,
        scores,
        corpus_ids,
    })
}

struct EvalContext {
    base: PathBuf,
    embedder: Option<Embedder>,
    mode: EmbedMode,
}

impl EvalContext {
    fn new(cfg_path: Option<&Path>, run: &EvalRun) -> Res<Self> {
        let base = base_dir(cfg_path);
        let needs_bundle = run.tasks.iter().any(|t| t.embeddings.is_none());
        let embedder = if needs_bundle {
            Some(Embedder::load(&base, &run.bundle, &run.word_vectors, run.batch_size)?)
        } else {
            None
        };
        let mode = run.mode.as_deref().unwrap_or("concat_all").parse()?;
        Ok(Self { base, embedder, mode })
    }

    fn task(&self, i: usize, t: &EvalTask) -> Res<(Features, BTreeMap<String, Vec<String>>)> {
        let field = format!("tasks[{i}]");
        let mut ids = BTreeMap::new();
        let mut data: BTreeMap<&str, SplitFeatures> = BTreeMap::new();
        let splits = [("train", &t.train), ("dev", &t.dev), ("test", &Some(t.test.clone()))];
        for (name, path) in splits {
            let Some(path) = path else { continue };
            let f = format!("{field}.{name}");
            let records = load_dataset(existing(&self.base, path, &f)?, t.schema)?;
            let caches = t.embeddings.as_ref().map(|c| match name {
                "train" => c.train.as_slice(),
                "dev" => c.dev.as_slice(),
                _ => c.test.as_slice(),
            });
            let mut embed = |lines: &[String]| -> Res<EmbeddingSet> {
                let e = self.embedder.as_ref().ok_or_else(|| CliError::config("bundle", "required"))?;
                e.embed(lines, &self.mode)
            };
            let sf = split_features(t, &format!("{field}.embeddings.{name}"), &records, caches, &self.base, &mut embed)?;
            ids.insert(name.to_string(), sf.corpus_ids.clone());
            data.insert(name, sf);
        }
        let features = if t.schema == Schema::PairScore {
            let scored = |s: &SplitFeatures| ScoredSplit::new(s.columns[0].clone(), s.columns[1].clone(), s.scores.clone());
            let test = scored(&data["test"])?;
            Features::Scores(SimilarityData {
                name: t.name.clone(),
                train: data.get("train").map(scored).transpose()?,
                dev: data.get("dev").map(scored).transpose()?,
                test,
            })
        } else {
            let x = |s: &SplitFeatures| -> Res<Tensor> {
                Ok(match s.columns.as_slice() {
                    [a] => a.clone(),
                    [a, b] => pair_matrix(a, b)?,
                    _ => unreachable!("one or two columns"),
                })
            };
            let split = |name: &str| -> Res<LabeledSplit> {
                let s = data
                    .get(name)
                    .ok_or_else(|| CliError::config(&format!("{field}.{name}"), "required for classification tasks"))?;
                Ok(LabeledSplit::new(x(s)?, s.labels.clone())?)
            };
            let (train, dev, test) = (split("train")?, split("dev")?, split("test")?);
            let classes = t
                .num_classes
                .unwrap_or_else(|| train.y.iter().chain(&dev.y).chain(&test.y).max().map_or(0, |m| m + 1));
            let mut d = FrozenTaskData::new(&t.name, classes, train, dev, test)?;
            d.report_f1 = t.report_f1;
            Features::Classes(d)
        };
        Ok((features, ids))
    }
}

fn eval_run(a: EvalArgs) -> Res<(EvalRun, Option<PathBuf>)> {
    let flags = json!({
        "bundle": abs(&a.bundle),
        "mode": a.mode,
        "word_vectors": abs(&a.word_vectors),
        "out": abs(&a.common.out),
        "seed": a.common.seed,
    });
    let run: EvalRun = resolve(a.common.config.as_deref(), flags)?;
    if run.tasks.is_empty() {
        return Err(CliError::config("tasks", "at least one task is required"));
    }
    Ok((run, a.common.config))
}

pub fn eval(a: EvalArgs) -> Res {
    let (run, cfg_path) = eval_run(a)?;
    let ctx = EvalContext::new(cfg_path.as_deref(), &run)?;
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut corpus_ids = BTreeMap::new();
    for (i, t) in run.tasks.iter().enumerate() {
        let (features, ids) = ctx.task(i, t)?;
        let mut report = match &features {
            Features::Classes(d) => match t.probe {
                Probe::Logreg => train_logreg(d, &run.classifier, run.seed)?,
                Probe::Mlp => train_mlp_probe(d, t.hidden, &run.classifier, run.seed)?,
            },
            Features::Scores(d) => similarity_eval(d, t.similarity, &run.classifier, run.seed)?,
        };
        report.config_hash = Some(hash.clone());
        println!(
            "{:<20} dev {:>8}  test {:.4}",
            report.task,
            report.dev.map_or("-".into(), |v| format!("{v:.4}")),
            report.test
        );
        corpus_ids.insert(t.name.clone(), ids);
        reports.push(report);
    }
    write_json(
        &out.join("eval.json"),
        &json!({"config_hash": hash, "seed": run.seed, "reports": reports, "corpus_ids": corpus_ids}),
    )?;
    write_text(&out.join("eval.csv"), &stamp_csv(&reports_csv(&reports), &hash, run.seed))
}

pub fn curve(a: EvalArgs) -> Res {
    let (run, cfg_path) = eval_run(a)?;
    if run.sizes.is_empty() {
        return Err(CliError::config("sizes", "at least one training-set size is required"));
    }
    let ctx = EvalContext::new(cfg_path.as_deref(), &run)?;
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let mut csv = String::from("task,size,dev_accuracy,test_accuracy\n");
    let mut curves = BTreeMap::new();
    for (i, t) in run.tasks.iter().enumerate() {
        let Features::Classes(d) = ctx.task(i, t)?.0 else {
            return Err(CliError::config(
                &format!("tasks[{i}].schema"),
                "learning curves need a classification task",
            ));
        };
        let points = learning_curve(&d, &run.sizes, &run.classifier, run.seed)?;
        for line in curve_csv(&points).lines().skip(1) {
            csv.push_str(&format!("{},{line}\n", t.name));
        }
        for p in &points {
            println!("{:<20} n={:<6} test {:.4}", t.name, p.size, p.test);
        }
        curves.insert(t.name.clone(), points);
    }
    write_json(
        &out.join("curve.json"),
        &json!({"config_hash": hash, "seed": run.seed, "curves": curves}),
    )?;
    write_text(&out.join("curve.csv"), &stamp_csv(&csv, &hash, run.seed))
}

pub fn probe(a: ProbeArgs) -> Res {
    let flags = json!({
        "bundle": abs(&a.bundle),
        "encoder": a.encoder.map(|e| match e { EncoderArg::Shared => "shared", EncoderArg::Private => "private" }),
        "word_vectors": abs(&a.word_vectors),
        "out": abs(&a.common.out),
        "seed": a.common.seed,
    });
    let cfg_path = a.common.config.as_deref();
    let run: ProbeRun = resolve(cfg_path, flags)?;
    let base = base_dir(cfg_path);
    if run.sets.len() < 2 {
        return Err(CliError::config("sets", "at least two sets are required"));
    }
    enum Source {
        Data(PathBuf, EmbedMode),
        Cache(PathBuf),
    }
    let mut sources = Vec::new();
    for (i, s) in run.sets.iter().enumerate() {
        let field = format!("sets[{i}]");
        sources.push(match (&s.data, &s.embeddings) {
            (_, Some(p)) => Source::Cache(existing(&base, p, &format!("{field}.embeddings"))?),
            (Some(p), None) => {
                let mode = match run.encoder {
                    ProbeEncoder::Shared => EmbedMode::Shared,
                    ProbeEncoder::Private => EmbedMode::Private(required(&s.task, &format!("{field}.task"))?),
                };
                Source::Data(existing(&base, p, &format!("{field}.data"))?, mode)
            }
            (None, None) => return Err(CliError::config(&field, "give data or embeddings")),
        });
    }
    let embedder = if sources.iter().any(|s| matches!(s, Source::Data(..))) {
        Some(Embedder::load(&base, &run.bundle, &run.word_vectors, run.batch_size)?)
    } else {
        None
    };
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let mut sets = Vec::new();
    for (s, src) in run.sets.iter().zip(&sources) {
        sets.push(match src {
            Source::Cache(p) => load_embeddings(p)?,
            Source::Data(p, mode) => {
                let records = load_dataset(p, s.schema)?;
                embedder
                    .as_ref()
                    .expect("loaded above")
                    .embed(&dataset_lines(&records, 1, "sets")?, mode)?
            }
        });
    }
    let mats: Vec<&Tensor> = sets.iter().map(|s| &s.matrix).collect();
    let result = discriminator_probe(&mats, &run.classifier, run.seed)?;
    let info: Vec<Value> = run
        .sets
        .iter()
        .zip(&sets)
        .map(|(s, e)| json!({"task": s.task, "rows": e.len(), "corpus_id": e.corpus_hex(), "provenance": e.provenance}))
        .collect();
    let encoder = match run.encoder {
        ProbeEncoder::Shared => "shared",
        ProbeEncoder::Private => "private",
    };
    write_json(
        &out.join("probe.json"),
        &json!({"config_hash": hash, "seed": run.seed, "encoder": encoder, "result": result, "sets": info}),
    )?;
    let csv = format!(
        "encoder,accuracy,chance,num_tasks\n{encoder},{},{},{}\n",
        result.accuracy, result.chance, result.num_tasks
    );
    write_text(&out.join("probe.csv"), &stamp_csv(&csv, &hash, run.seed))?;
    println!("{encoder} probe accuracy {:.4} (chance {:.4})", result.accuracy, result.chance);
    Ok(())
}

pub fn analyze(a: Common) -> Res {
    let flags = json!({"out": abs(&a.out), "seed": a.seed});
    let cfg_path = a.config.as_deref();
    let run: AnalyzeRun = resolve(cfg_path, flags)?;
    let base = base_dir(cfg_path);
    let data = existing(&base, &required(&run.data, "data")?, "data")?;
    if run.encoders.is_empty() {
        return Err(CliError::config("encoders", "at least one encoder is required"));
    }
    let caches = run
        .encoders
        .iter()
        .enumerate()
        .map(|(i, e)| existing(&base, &e.embeddings, &format!("encoders[{i}].embeddings")))
        .collect::<Res<Vec<_>>>()?;
    let out = out_dir(&run.out)?;
    let (_, hash) = recorded(&run);
    let records = load_dataset(&data, Schema::Single)?;
    let want = corpus_id(&dataset_lines(&records, 1, "data")?);
    let labels: Vec<usize> = records
        .iter()
        .map(|r| match r.target {
            Target::Label(l) => l,
            Target::Score(_) => unreachable!("single-sentence datasets are labeled"),
        })
        .collect();
    let classes = run.num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut sets = Vec::new();
    for p in &caches {
        let s = load_embeddings(p)?;
        if s.corpus_id != want {
            return Err(mtlsent::Error::Alignment(format!(
                "{}: corpus id {} does not match {} ({})",
                p.display(),
                s.corpus_hex(),
                data.display(),
                hex::encode(want)
            ))
            .into());
        }
        sets.push(s);
    }
    let named: Vec<(String, &Tensor)> = run.encoders.iter().zip(&sets).map(|(e, s)| (e.name.clone(), &s.matrix)).collect();
    let result = weighted_pool_analysis(&named, &labels, classes, &run.pool, run.seed)?;
    let mut csv = String::from("encoder,alpha\n");
    for (name, alpha) in result.encoders.iter().zip(&result.alpha) {
        csv.push_str(&format!("{name},{alpha}\n"));
        println!("{name:<20} alpha {alpha:.4}");
    }
    println!("pooled accuracy {:.4}", result.accuracy);
    write_json(
        &out.join("analyze.json"),
        &json!({"config_hash": hash, "seed": run.seed, "encoders": result.encoders, "alpha": result.alpha, "accuracy": result.accuracy}),
    )?;
    write_text(&out.join("analyze.csv"), &stamp_csv(&csv, &hash, run.seed))
}

pub fn gradcheck(a: GradcheckArgs) -> Res {
    let scope = match a.scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Encoder => Scope::Encoder,
        ScopeArg::Mtl => Scope::Mtl,
    };
    let fault = match &a.inject_fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| CliError::config("inject_fault", format!("unknown op {name:?}")))?,
        ),
        None => None,
    };
    let report = verify::run(scope, a.seed, fault)?;
    for c in &report.checks {
        println!(
            "{:<32} max rel error {:.3e}  {}",
            c.name,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        println!("all {} checks passed (tolerance {:e})", report.checks.len(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(CliError::runtime(format!("gradient check failed for: {}", names.join(", "))))
    }
}

pub fn synth(a: Common) -> Res {
    let flags = json!({"out": abs(&a.out), "seed": a.seed});
    let run: SynthRun = resolve(a.config.as_deref(), flags)?;
    if run.tasks.is_empty() {
        return Err(CliError::config("tasks", "at least one task is required"));
    }
    if run.n < 3 {
        return Err(CliError::config("n", "need at least 3 sentences per task"));
    }
    let out = out_dir(&run.out)?;
    let (resolved, hash) = recorded(&run);
    let streams = SeedStreams::new(run.seed);
    let mut tokens = Vec::new();
    let mut task_files = Vec::new();
    for name in &run.tasks {
        let spec = SynthSpec {
            task: name.clone(),
            num_classes: run.num_classes,
            n: run.n,
            shared_signal_weight: run.shared_signal_weight,
            private_signal_weight: run.private_signal_weight,
            vocab: SynthVocab::default(),
        };
        let records = synth_task(streams.seed(&format!("synth/{name}")), &spec)?;
        tokens.extend(spec.tokens());
        let n_train = run.n * 7 / 10;
        let n_dev = ((run.n - n_train) / 2).max(1);
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_dataset(dir.join("train.tsv"), &records[..n_train])?;
        write_dataset(dir.join("dev.tsv"), &records[n_train..n_train + n_dev])?;
        write_dataset(dir.join("test.tsv"), &records[n_train + n_dev..])?;
        task_files.push(json!({
            "name": name,
            "kind": "single",
            "num_classes": run.num_classes,
            "train": format!("{name}/train.tsv"),
            "dev": format!("{name}/dev.tsv"),
            "test": format!("{name}/test.tsv"),
        }));
    }
    let (vocab, table) = synth_word_vectors(streams.seed("vectors"), &tokens, run.word_dim)?;
    write_word_vectors(out.join("vectors.txt"), &vocab, &table)?;
    write_json(
        &out.join("train.json"),
        &json!({
            "word_vectors": "vectors.txt",
            "word_dim": run.word_dim,
            "tasks": task_files,
            "train": {"seed": run.seed, "batch_size": 32},
            "model": {"hidden_dim": 16, "classifier_hidden": 0},
        }),
    )?;
    write_json(
        &out.join("run.json"),
        &json!({"config_hash": hash, "seed": run.seed, "config": resolved}),
    )?;
    println!(
        "wrote {} task(s) of {} sentences and vectors.txt to {}",
        run.tasks.len(),
        run.n,
        out.display()
    );
    Ok(())
}
