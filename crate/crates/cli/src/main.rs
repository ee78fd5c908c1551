use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bayesprompt::embedding_store::{
    generate_synthetic_set, load_embedding_set, save_embedding_set,
};
use bayesprompt::gmm::GmmFit;
use bayesprompt::pipeline::{
    run_pipeline_seed, run_seeded_protocol, stage_fit_gmm, stage_kshot, stage_prompts, stage_svgd,
    stage_train, PipelineConfig,
};
use bayesprompt::prompt_synthesis::{
    load_prompt_pack, save_prompt_pack, TypePromptInit, WordEmbeddingTable,
};
use bayesprompt::svgd::{write_trace_csv, Bandwidth, StepMode};
use bayesprompt::trainer_eval::{evaluate_f1, TrainedPromptModel};
use bayesprompt::{EmbeddingSet, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "bayesprompt",
    version,
    about = "Debiased prompt initialization pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Top-level seed; every stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON pipeline configuration. Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AblateArg {
    #[value(name = "gaussian")]
    Gaussian,
    #[value(name = "del_TPW", alias = "del-tpw")]
    DelTpw,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TypeInitArg {
    Latent,
    Random,
    Absent,
}

impl From<TypeInitArg> for TypePromptInit {
    fn from(t: TypeInitArg) -> Self {
        match t {
            TypeInitArg::Latent => TypePromptInit::Latent,
            TypeInitArg::Random => TypePromptInit::Random,
            TypeInitArg::Absent => TypePromptInit::Absent,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled embedding set.
    GenSynth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        stddev: Option<f64>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Split into test, k-shot train and k-shot validation sets.
    Kshot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        eval_split: Option<f64>,
        #[command(flatten)]
        common: Common,
        /// Directory receiving train.bpem, val.bpem and test.bpem.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit the diagonal Gaussian mixture to a training set.
    FitGmm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Transport the training embeddings toward the fitted mixture.
    Svgd {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        step_mode: Option<String>,
        /// `auto-median` or a positive number.
        #[arg(long)]
        bandwidth: Option<String>,
        /// Per-iteration CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build label and type prompt embeddings.
    SynthPrompts {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        particles: PathBuf,
        #[arg(long, value_enum)]
        type_init: Option<TypeInitArg>,
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        /// JSON word table {"words": [...], "vectors": [[...]]}.
        #[arg(long)]
        word_table: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the prompt scorer.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        pack: PathBuf,
        /// Needed only for per-iteration latent resampling.
        #[arg(long)]
        particles: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// CSV of per-epoch training loss and validation micro-F1.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score a trained model, or an untrained prompt pack, on a test set.
    Eval {
        #[arg(long, conflicts_with = "pack", required_unless_present = "pack")]
        model: Option<PathBuf>,
        #[arg(long)]
        pack: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        null_label: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run every stage for each seed and aggregate F1.
    Pipeline {
        /// Embedding file; synthetic data from the config when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Examples per class in the training set.
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
        /// Mixture components; defaults to one per relation.
        #[arg(long)]
        components: Option<usize>,
        /// SVGD iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// SVGD base step size.
        #[arg(long)]
        step: Option<f64>,
        /// `auto-median` or a positive number.
        #[arg(long)]
        bandwidth: Option<String>,
        /// Ablation to apply; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// How type prompts are initialized.
        #[arg(long, value_enum)]
        type_init: Option<TypeInitArg>,
        /// JSON word embedding table; hashed trigrams when omitted.
        #[arg(long)]
        word_table: Option<PathBuf>,
        /// Include per-stage wall-clock timings in the output.
        #[arg(long)]
        timings: bool,
        /// Write every seed's intermediate artifacts under this directory.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Also write the result JSON here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes: bad input or configuration exits 2,
/// a failing stage exits 1.
enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_config_error(&e) {
            Failure::Config(e.into())
        } else {
            Failure::Stage(e.into())
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidConfig(_) | Error::NonPositiveBandwidth(_))
}

type CmdResult<T> = Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn stage_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Stage(e.into())
}

fn require_file(path: &Path) -> CmdResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(anyhow::anyhow!(
            "no such file: {}",
            path.display()
        )))
    }
}

fn load_config(common: &Common) -> CmdResult<PipelineConfig> {
    let Some(path) = &common.config else {
        return Ok(PipelineConfig::default());
    };
    require_file(path)?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(config_err)
}

fn load_set(path: &Path) -> CmdResult<EmbeddingSet> {
    require_file(path)?;
    load_embedding_set(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(stage_err)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    require_file(path)?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(stage_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(stage_err)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    fs::write(path, to_json(value))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage_err)
}

fn emit<T: Serialize>(value: &T) {
    print!("{}", to_json(value));
}

fn apply_ablations(config: &mut PipelineConfig, ablate: &[AblateArg]) {
    for a in ablate {
        match a {
            AblateArg::Gaussian => config.ablation.gaussian = true,
            AblateArg::DelTpw => config.ablation.del_tpw = true,
        }
    }
}

fn parse_bandwidth(s: &str) -> CmdResult<Bandwidth> {
    Ok(s.parse::<Bandwidth>()?)
}

fn word_table(path: Option<&Path>, dim: usize) -> CmdResult<WordEmbeddingTable> {
    match path {
        None => Ok(WordEmbeddingTable::hashed(dim)),
        Some(p) => {
            require_file(p)?;
            let table = WordEmbeddingTable::from_json_file(p)?;
            if table.dim() != dim {
                return Err(config_err(anyhow::anyhow!(
                    "word table has dimension {}, embeddings have {dim}",
                    table.dim()
                )));
            }
            Ok(table)
        }
    }
}

fn seed_of(common: &Common) -> u64 {
    common.seed.unwrap_or(0)
}

fn write_set(set: &EmbeddingSet, path: &Path) -> CmdResult<()> {
    save_embedding_set(set, path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage_err)
}

#[derive(Serialize)]
struct SetSummary<'a> {
    output: &'a Path,
    rows: usize,
    dim: usize,
    n_relations: usize,
}

fn summary<'a>(set: &EmbeddingSet, output: &'a Path) -> SetSummary<'a> {
    SetSummary {
        output,
        rows: set.len(),
        dim: set.dim(),
        n_relations: set.n_relations(),
    }
}

fn in_stage(stage: &'static str) -> impl Fn(Error) -> Failure {
    move |e| {
        if is_config_error(&e) {
            Failure::Config(e.in_stage(stage).into())
        } else {
            Failure::Stage(e.in_stage(stage).into())
        }
    }
}

fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::GenSynth {
            classes,
            per_class,
            dim,
            separation,
            stddev,
            common,
            output,
        } => {
            let mut synth = load_config(&common)?.synth;
            if let Some(v) = classes {
                synth.n_classes = v;
            }
            if let Some(v) = per_class {
                synth.per_class = v;
            }
            if let Some(v) = dim {
                synth.dim = v;
            }
            if let Some(v) = separation {
                synth.class_separation = v;
            }
            if let Some(v) = stddev {
                synth.within_class_stddev = v;
            }
            if let Some(s) = common.seed {
                synth.seed = s;
            }
            synth.validate()?;
            let set = generate_synthetic_set(&synth).map_err(in_stage("gen-synth"))?;
            write_set(&set, &output)?;
            emit(&summary(&set, &output));
        }

        Command::Kshot {
            input,
            k,
            eval_split,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if let Some(k) = k {
                config.k = k;
            }
            if let Some(f) = eval_split {
                config.train.eval_split = f;
            }
            config.train.validate()?;
            let full = load_set(&input)?;
            let splits = stage_kshot(&full, config.k, config.train.eval_split, seed_of(&common))
                .map_err(in_stage("kshot"))?;
            fs::create_dir_all(&output)
                .with_context(|| format!("creating {}", output.display()))
                .map_err(stage_err)?;
            let paths = [
                output.join("train.bpem"),
                output.join("val.bpem"),
                output.join("test.bpem"),
            ];
            for (set, path) in [&splits.train, &splits.val, &splits.test]
                .into_iter()
                .zip(&paths)
            {
                write_set(set, path)?;
            }
            emit(&serde_json::json!({
                "k": config.k,
                "train": summary(&splits.train, &paths[0]),
                "val": summary(&splits.val, &paths[1]),
                "test": summary(&splits.test, &paths[2]),
            }));
        }

        Command::FitGmm {
            input,
            components,
            ablate,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if components.is_some() {
                config.components = components;
            }
            apply_ablations(&mut config, &ablate);
            config.validate()?;
            let train = load_set(&input)?;
            let n = config.n_components(train.n_relations());
            let fit = stage_fit_gmm(&train, n, &config.em, seed_of(&common))
                .map_err(in_stage("fit-gmm"))?;
            write_json(&output, &fit)?;
            emit(&serde_json::json!({
                "output": output,
                "n_components": n,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "reseeds": fit.reseeds,
                "final_log_likelihood": fit.log_likelihood.last(),
            }));
        }

        Command::Svgd {
            input,
            gmm,
            iters,
            step,
            step_mode,
            bandwidth,
            trace,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if let Some(n) = iters {
                config.svgd.n_iters = n;
            }
            if let Some(s) = step {
                config.svgd.base_step = s;
            }
            if let Some(m) = step_mode {
                config.svgd.step_mode = m.parse::<StepMode>()?;
            }
            if let Some(b) = bandwidth {
                config.svgd.bandwidth = parse_bandwidth(&b)?;
            }
            config.svgd.validate()?;
            let train = load_set(&input)?;
            let fit: GmmFit = read_json(&gmm)?;
            let (particles, rows) = stage_svgd(&train, &fit, &config.svgd, seed_of(&common))
                .map_err(in_stage("svgd"))?;
            write_set(&particles, &output)?;
            if let Some(t) = &trace {
                write_trace_csv(&rows, t).map_err(in_stage("svgd"))?;
            }
            emit(&serde_json::json!({
                "output": output,
                "particles": particles.len(),
                "iterations": rows.len(),
                "final_bandwidth": rows.last().map(|r| r.bandwidth),
                "final_mean_phi_norm": rows.last().map(|r| r.mean_phi_norm),
            }));
        }

        Command::SynthPrompts {
            input,
            particles,
            type_init,
            ablate,
            word_table: table_path,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if let Some(t) = type_init {
                config.type_init = t.into();
            }
            apply_ablations(&mut config, &ablate);
            let train = load_set(&input)?;
            let particles = load_set(&particles)?;
            let table = word_table(table_path.as_deref(), train.dim())?;
            let pack = stage_prompts(
                &train,
                &particles,
                &table,
                config.effective_type_init(),
                seed_of(&common),
            )
            .map_err(in_stage("synth-prompts"))?;
            save_prompt_pack(&pack, &output).map_err(in_stage("synth-prompts"))?;
            emit(&serde_json::json!({
                "output": output,
                "n_relations": pack.n_relations(),
                "dim": pack.dim(),
                "type_init": pack.type_init,
                "type_prompts": pack.type_prompts.is_some(),
            }));
        }

        Command::Train {
            train,
            val,
            pack,
            particles,
            lr,
            epochs,
            trace,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if let Some(lr) = lr {
                config.train.learning_rate = lr;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            config.train.validate()?;
            let train_set = load_set(&train)?;
            let val_set = load_set(&val)?;
            require_file(&pack)?;
            let pack = load_prompt_pack(&pack).map_err(in_stage("train"))?;
            let particles = match &particles {
                Some(p) => load_set(p)?,
                None => train_set.clone(),
            };
            let model = stage_train(
                &train_set,
                &val_set,
                &pack,
                &particles,
                &config.train,
                seed_of(&common),
            )
            .map_err(in_stage("train"))?;
            write_json(&output, &model)?;
            if let Some(t) = &trace {
                write_loss_trace(&model, t)?;
            }
            emit(&serde_json::json!({
                "output": output,
                "best_epoch": model.best_epoch,
                "best_val_micro_f1": model.best_val_metrics.micro_f1,
                "final_loss": model.loss_trace.last(),
            }));
        }

        Command::Eval {
            model,
            pack,
            test,
            null_label,
            common,
            output,
        } => {
            let config = load_config(&common)?;
            let model = match (model, pack) {
                (Some(m), _) => read_json::<TrainedPromptModel>(&m)?,
                (None, Some(p)) => {
                    require_file(&p)?;
                    let pack = load_prompt_pack(&p).map_err(in_stage("eval"))?;
                    TrainedPromptModel::untrained(&pack, config.train.temperature)?
                }
                (None, None) => unreachable!("clap requires one of --model and --pack"),
            };
            let test = load_set(&test)?;
            let null = null_label.or(config.train.null_label);
            let metrics = evaluate_f1(&model, &test, null).map_err(in_stage("eval"))?;
            if let Some(o) = &output {
                write_json(o, &metrics)?;
            }
            emit(&metrics);
        }

        Command::Pipeline {
            input,
            k,
            seeds,
            components,
            iters,
            step,
            bandwidth,
            ablate,
            lr,
            type_init,
            word_table: table_path,
            timings,
            artifacts,
            common,
            output,
        } => {
            let mut config = load_config(&common)?;
            if let Some(k) = k {
                config.k = k;
            }
            if let Some(s) = seeds {
                config.seeds = s;
            } else if let Some(s) = common.seed {
                config.seeds = vec![s];
            }
            if components.is_some() {
                config.components = components;
            }
            if let Some(n) = iters {
                config.svgd.n_iters = n;
            }
            if let Some(s) = step {
                config.svgd.base_step = s;
            }
            if let Some(b) = bandwidth {
                config.svgd.bandwidth = parse_bandwidth(&b)?;
            }
            if let Some(lr) = lr {
                config.train.learning_rate = lr;
            }
            if let Some(t) = type_init {
                config.type_init = t.into();
            }
            apply_ablations(&mut config, &ablate);
            config.validate()?;
            let full = match &input {
                Some(p) => load_set(p)?,
                None => generate_synthetic_set(&config.synth).map_err(in_stage("gen-synth"))?,
            };
            let table = word_table(table_path.as_deref(), full.dim())?;
            if let Some(dir) = &artifacts {
                write_artifacts(&full, &config, &table, dir)?;
            }
            let result =
                run_seeded_protocol(&full, &config, &table, timings).map_err(|e| match e {
                    Error::Stage { .. } => stage_err(e),
                    other => Failure::from(other),
                })?;
            if let Some(o) = &output {
                write_json(o, &result)?;
            }
            emit(&result);
        }
    }
    Ok(())
}

fn write_loss_trace(model: &TrainedPromptModel, path: &Path) -> CmdResult<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage_err)?;
    let rows = model.loss_trace.iter().zip(&model.val_f1_trace).enumerate();
    let result = (|| -> csv::Result<()> {
        w.write_record(["epoch", "train_loss", "val_micro_f1"])?;
        for (i, (loss, f1)) in rows {
            w.write_record([(i + 1).to_string(), loss.to_string(), f1.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })();
    result
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage_err)
}

/// Per-seed intermediate files, laid out exactly as the staged subcommands
/// would produce them.
fn write_artifacts(
    full: &EmbeddingSet,
    config: &PipelineConfig,
    table: &WordEmbeddingTable,
    dir: &Path,
) -> CmdResult<()> {
    for &seed in &config.seeds {
        let art = run_pipeline_seed(full, config, table, seed).map_err(stage_err)?;
        let d = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&d)
            .with_context(|| format!("creating {}", d.display()))
            .map_err(stage_err)?;
        write_set(&art.splits.train, &d.join("train.bpem"))?;
        write_set(&art.splits.val, &d.join("val.bpem"))?;
        write_set(&art.splits.test, &d.join("test.bpem"))?;
        write_json(&d.join("gmm.json"), &art.gmm)?;
        write_set(&art.particles, &d.join("particles.bpem"))?;
        save_prompt_pack(&art.pack, d.join("pack.bpem")).map_err(stage_err)?;
        write_json(&d.join("model.json"), &art.model)?;
        write_json(&d.join("metrics.json"), &art.result.metrics)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
