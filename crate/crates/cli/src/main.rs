use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde_json::json;

use schemanet::atlas::{average_init, read_atlas, read_graphs, write_atlas, write_graphs, LabeledGraph, SNAT_MAGIC, SNGR_MAGIC};
use schemanet::evaluation::{
    evaluate_logits, generate_synthetic, run_perturbation, verify_lemma1, verify_theorem1, Polarity, SyntheticSpec,
};
use schemanet::export::GraphDocument;
use schemanet::feat2graph::{batch_components, Feat2GraphParams};
use schemanet::feature_io::{header_for, load_dataset, write_dataset, DatasetHeader, FeatureRecord};
use schemanet::matcher::{argmax, explain_prepared, train, train_extension, Model, TrainConfig};
use schemanet::numerics::{streams, SeededRng};
use schemanet::vocabulary::{
    build_vocabulary, probe_indices, visual_token_matrix, VisualVocabulary, DEFAULT_PROBE_RECORDS,
};
use schemanet::Error;

/// Schema inference: visual vocabularies, ingredient-relation graphs, atlas
/// training, graph-matching classification and evidence reports.
#[derive(Parser)]
#[command(name = "schema-infer", version)]
struct Cli {
    /// Worker threads; 0 or unset uses one per core.
    #[arg(long, global = true, env = "SCHEMA_INFER_THREADS")]
    threads: Option<usize>,

    /// Log level for messages on standard error.
    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster visual tokens of a feature file into a vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Convert feature records into normalized instance graphs.
    Feat2graph(Feat2GraphArgs),
    /// Average instance graphs per class into a sparsified atlas.
    InitAtlas(InitAtlasArgs),
    /// Train matcher and atlas on a feature file.
    Train(TrainArgs),
    /// Classify every record of a feature file.
    Infer(InferArgs),
    /// Decompose one record's logit for a class into evidence terms.
    Explain(ExplainArgs),
    /// Accuracy while dropping tokens in relevance order.
    Perturb(PerturbArgs),
    /// Add new classes to a trained model with the matcher frozen.
    Extend(ExtendArgs),
    /// Write a synthetic feature file.
    Synth(SynthArgs),
    /// Render a graph or atlas file as DOT or JSON.
    ExportGraph(ExportArgs),
    /// Run a verification suite and print its report.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    input: PathBuf,
    /// Vocabulary size; defaults to 10 per class.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    /// Cluster tokens of at most this many records (seeded sample).
    #[arg(long, default_value_t = DEFAULT_PROBE_RECORDS)]
    probe_records: usize,
}

#[derive(Args)]
struct MixingArgs {
    #[arg(long, default_value_t = 0.5)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha2: f64,
    #[arg(long, default_value_t = 0.5)]
    beta1: f64,
    #[arg(long, default_value_t = 0.5)]
    beta2: f64,
    /// Offset of the inverse-distance adjacency term.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
}

#[derive(Args)]
struct Feat2GraphArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mixing: MixingArgs,
}

#[derive(Args)]
struct InitAtlasArgs {
    /// Instance graph file from feat2graph.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Class count; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    delta_t: f64,
    #[arg(long)]
    max_vertices: Option<usize>,
}

/// Training hyperparameters. Unset flags keep the base configuration: the
/// defaults for `train`, the model's own settings for `extend`.
#[derive(Args)]
struct TrainOpts {
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    batch: Option<usize>,
    /// [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 5e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    gamma_v: Option<f64>,
    /// [default: 0.75]
    #[arg(long)]
    gamma_e: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    delta_t: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOpts {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($opt:ident => $field:ident),*) => {
                $(if let Some(v) = self.$opt { cfg.$field = v; })*
            };
        }
        set!(epochs => epochs, batch => batch_size, lr => lr, weight_decay => weight_decay,
             gamma_v => gamma_v, gamma_e => gamma_e, delta_t => delta_t, seed => seed);
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    /// Graph convolution layers [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// Embedding dimension [default: 256]
    #[arg(long)]
    dim: Option<usize>,
    /// Keep at most this many vertices per class graph at initialization.
    #[arg(long)]
    max_vertices: Option<usize>,
    /// Bag-of-words configuration: no convolution layers, CLS vertex term off.
    #[arg(long)]
    bovw: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image_id: u64,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Pos,
    Neg,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    polarity: PolarityArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtendArgs {
    /// Records of the new classes only.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    EdgeOnly,
    PlantedRelevance,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset description (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in description instead of a spec file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Seed for a preset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// The planted centers as a vocabulary file.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Json,
}

#[derive(Args)]
struct ExportArgs {
    /// Graph (SNGR) or atlas (SNAT) file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Only the graph at this position (the class index for atlases).
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Lemma1,
    Theorem1,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vector dimension of the Monte-Carlo suite.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Random cases of the exactness suite.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure reported as one JSON line on standard error.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json(value: &impl serde::Serialize) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_records(path: &Path) -> Result<(DatasetHeader, Vec<FeatureRecord>), Failure> {
    let (header, records) = load_dataset(path)?;
    info!("read {} records from {}", records.len(), path.display());
    Ok((header, records))
}

fn check_dims(header: &DatasetHeader, vocab: &VisualVocabulary) -> Outcome {
    if header.d as usize != vocab.dim() {
        return Err(Error::FingerprintMismatch(format!(
            "features have d = {}, vocabulary centers have d = {}",
            header.d,
            vocab.dim()
        ))
        .into());
    }
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Outcome {
    let (header, records) = load_records(&a.input)?;
    let classes = records.iter().map(|r| r.label as usize + 1).max().unwrap_or(0);
    let size = a.size.unwrap_or(10 * classes);
    let rng = SeededRng::new(a.seed);
    let probe = probe_indices(records.len(), a.probe_records, &mut rng.fork(streams::PROBE_SAMPLE));
    let tokens = visual_token_matrix(probe.iter().map(|&i| &records[i]))?;
    info!("clustering {} tokens into {size} words", tokens.rows());
    let vocab = build_vocabulary(
        &tokens,
        size,
        &mut rng.fork(streams::KMEANS),
        a.max_iters,
        a.rel_tol,
        header.layer_index,
        probe.len(),
    )?;
    vocab.save(&a.out)?;
    Ok(())
}

fn feat2graph(a: Feat2GraphArgs) -> Outcome {
    let vocab = VisualVocabulary::load(&a.vocab)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &vocab)?;
    let mixing = Feat2GraphParams {
        alpha1: a.mixing.alpha1,
        alpha2: a.mixing.alpha2,
        beta1: a.mixing.beta1,
        beta2: a.mixing.beta2,
        epsilon: a.mixing.epsilon,
    };
    mixing.validate()?;
    let comps = batch_components(&records, &vocab, mixing.epsilon)?;
    let graphs = comps
        .iter()
        .map(|c| {
            Ok(LabeledGraph {
                image_id: c.image_id,
                label: c.label,
                graph: c.graph(&mixing)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_graphs(&a.out, vocab.size(), &graphs)?;
    Ok(())
}

fn init_atlas(a: InitAtlasArgs) -> Outcome {
    let (vocab_size, graphs) = read_graphs(&a.input)?;
    let classes = a
        .classes
        .unwrap_or_else(|| graphs.iter().map(|g| g.label as usize + 1).max().unwrap_or(0));
    let mut atlas = average_init(
        graphs.iter().map(|g| (g.label as usize, &g.graph)),
        classes,
        vocab_size,
        a.delta_t,
        a.max_vertices,
    )?;
    let pruned = atlas.sparsify(a.delta_t);
    info!("{classes} classes, {} edges pruned", pruned.total_removed());
    write_atlas(&a.out, &atlas)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let vocab = VisualVocabulary::load(&a.vocab)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &vocab)?;
    let mut cfg = a.opts.apply(TrainConfig::default());
    if let Some(l) = a.layers {
        cfg.layers = l;
    }
    if let Some(d) = a.dim {
        cfg.dim = d;
    }
    cfg.max_vertices = a.max_vertices;
    if a.bovw {
        cfg = cfg.bovw();
    }
    let out = train(&records, &vocab, &cfg)?;
    let model = Model::new(out.params, out.atlas, vocab, cfg)?;
    model.save(&a.out_dir)?;
    Model::save_history(&a.out_dir, &out.history)?;
    Ok(())
}

fn infer(a: InferArgs) -> Outcome {
    let model = Model::load(&a.model)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &model.vocab)?;
    let logits = model.batch_logits(&records)?;
    let labels: Vec<u32> = records.iter().map(|r| r.label).collect();
    let eval = evaluate_logits(&labels, &logits, model.class_count())?;
    info!("accuracy {:.4} ({}/{})", eval.accuracy, eval.correct, eval.total);
    let predictions: Vec<_> = records
        .iter()
        .zip(&logits)
        .map(|(r, y)| json!({"image_id": r.image_id, "label": r.label, "prediction": argmax(y), "logits": y}))
        .collect();
    let report = json!({
        "accuracy": eval.accuracy,
        "correct": eval.correct,
        "total": eval.total,
        "confusion": eval.confusion,
        "predictions": predictions,
    });
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn explain_cmd(a: ExplainArgs) -> Outcome {
    let model = Model::load(&a.model)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &model.vocab)?;
    let rec = records
        .iter()
        .find(|r| r.image_id == a.image_id)
        .ok_or_else(|| fail("not_found", format!("no record with image id {}", a.image_id)))?;
    let graph = model.instance_graph(rec)?;
    let report = explain_prepared(&graph, a.class, &model.prepare()?, &model.params, a.top_k)?;
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn perturb(a: PerturbArgs) -> Outcome {
    let model = Model::load(&a.model)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &model.vocab)?;
    let polarity = match a.polarity {
        PolarityArg::Pos => Polarity::Positive,
        PolarityArg::Neg => Polarity::Negative,
    };
    let curve = run_perturbation(&records, &model, polarity)?;
    info!("{polarity} AUC {:.4}", curve.auc);
    emit(Some(&a.out), &to_json(&curve)?)
}

fn extend(a: ExtendArgs) -> Outcome {
    let model = Model::load(&a.model)?;
    let (header, records) = load_records(&a.input)?;
    check_dims(&header, &model.vocab)?;
    let cfg = a.opts.apply(model.config.clone());
    let comps = batch_components(&records, &model.vocab, model.params.mixing.epsilon)?;
    let (atlas, history) = train_extension(&model.params, &model.atlas, &comps, &cfg)?;
    info!("atlas extended from {} to {} classes", model.class_count(), atlas.class_count());
    let extended = Model::new(model.params, atlas, model.vocab, model.config)?;
    extended.save(&a.out_dir)?;
    Model::save_history(&a.out_dir, &history)?;
    Ok(())
}

fn write_split(path: &Path, records: &[FeatureRecord]) -> Outcome {
    write_dataset(path, header_for(records, 0)?, records)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let spec = match (&a.spec, a.preset) {
        (Some(path), _) => serde_json::from_str::<SyntheticSpec>(&fs::read_to_string(path)?)?,
        (None, Some(Preset::EdgeOnly)) => SyntheticSpec::edge_only(a.seed),
        (None, Some(Preset::PlantedRelevance)) => SyntheticSpec::planted_relevance(3, a.seed),
        (None, None) => return Err(fail("usage", "one of --spec or --preset is required")),
    };
    let data = generate_synthetic(&spec)?;
    write_split(&a.out, &data.train)?;
    if let Some(path) = &a.test_out {
        write_split(path, &data.test)?;
    }
    if let Some(path) = &a.vocab_out {
        data.vocab.save(path)?;
    }
    info!("{} training and {} test records", data.train.len(), data.test.len());
    Ok(())
}

fn export_graph(a: ExportArgs) -> Outcome {
    let mut magic = [0u8; 4];
    File::open(&a.input)?.read_exact(&mut magic)?;
    let mut doc = if &magic == SNGR_MAGIC {
        let (vocab_size, graphs) = read_graphs(&a.input)?;
        GraphDocument::Graphs { vocab_size, graphs }
    } else if &magic == SNAT_MAGIC {
        GraphDocument::Atlas(read_atlas(&a.input)?)
    } else {
        return Err(fail("bad_magic", format!("{} is neither a graph nor an atlas file", a.input.display())));
    };
    if let Some(i) = a.index {
        doc = doc.select(i)?;
    }
    let text = match a.format {
        Format::Dot => doc.to_dot(),
        Format::Json => doc.to_json(),
    };
    emit(a.out.as_deref(), &text)
}

fn verify(a: VerifyArgs) -> Outcome {
    let base = SeededRng::new(a.seed);
    let (text, passed) = match a.suite {
        Suite::Lemma1 => {
            let r = verify_lemma1(a.dim, a.samples, &mut base.fork(streams::LEMMA))?;
            (to_json(&r)?, r.passed)
        }
        Suite::Theorem1 => {
            let r = verify_theorem1(a.trials, &mut base.fork(streams::THEOREM))?;
            (to_json(&r)?, r.passed)
        }
    };
    emit(a.out.as_deref(), &text)?;
    if passed {
        Ok(())
    } else {
        Err(fail("verification_failed", "at least one check is outside its tolerance"))
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail("threads", e.to_string()))?;
    }
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Feat2graph(a) => feat2graph(a),
        Command::InitAtlas(a) => init_atlas(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Perturb(a) => perturb(a),
        Command::Extend(a) => extend(a),
        Command::Synth(a) => synth(a),
        Command::ExportGraph(a) => export_graph(a),
        Command::Verify(a) => verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::FAILURE
        }
    }
}
