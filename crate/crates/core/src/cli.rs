//! Command-line interface: train / generate / eval / trace / dump-schedule /
//! synth over the library, with a fixed exit-code contract (config error 2,
//! data error 3, numeric failure 4).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, ScheduleSpec};
use crate::config::FlatConfig;
use crate::data::{synth_task, ParallelCorpus, TaskKind, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{few_step_csv, few_step_report, EvalSystem};
use crate::infer::make_plan;
use crate::model::Denoiser;
use crate::schedule::{NoiseSchedule, Rounding, TimestepPlan};
use crate::train::{train_loop, EncodedCorpus, TrainSignal};

#[derive(Parser, Debug)]
#[command(
    name = "ardiffusion",
    version,
    about = "Desk-scale text diffusion with position-dependent token timesteps"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus (JSONL).
    Synth {
        /// Task kind: copy, reverse, or sort.
        #[arg(long)]
        kind: String,
        /// Vocabulary size including the 4 reserved ids.
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        /// Maximum target length N (content is capped at N - 1 plus eos).
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a JSONL corpus.
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set lr=1e-3 (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate candidates with MBR selection for every corpus source.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decoding steps M.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Candidates per source.
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the checkpoint plan: anchored or uniform.
        #[arg(long)]
        plan: Option<String>,
        /// Evaluate only the first this many examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a checkpoint at several step counts; optionally compare with a
    /// uniform-baseline checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second system for side-by-side comparison.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated decoding step counts.
        #[arg(long, default_value = "20,3,2")]
        steps: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Suppress wall-clock fields for byte-stable output.
        #[arg(long, default_value_t = false)]
        no_timing: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Dump the per-step intermediate states for one example.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Example index within the corpus.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the token-timestep table as CSV: (t, n, f(n,t), alpha_bar).
    DumpSchedule {
        /// Target length N.
        #[arg(long = "target-len", visible_alias = "N")]
        target_len: usize,
        /// Diffusion steps T.
        #[arg(long = "total-steps", visible_alias = "T")]
        total_steps: usize,
        /// Anchor as "pos,t"; defaults to "2N,T".
        #[arg(long)]
        anchor: Option<String>,
        /// Use the uniform baseline plan instead of the anchored one.
        #[arg(long, default_value_t = false)]
        uniform: bool,
        #[arg(long, default_value_t = crate::schedule::DEFAULT_SQRT_OFFSET)]
        offset: f64,
        #[arg(long, default_value = "nearest")]
        rounding: String,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is a usage
            // (config) error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error category={}: {e}", e.category());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            kind,
            vocab,
            max_len,
            count,
            seed,
            out,
        } => cmd_synth(&kind, vocab, max_len, count, seed, &out),
        Command::Train {
            config,
            set,
            data,
            out,
        } => cmd_train(config.as_deref(), &set, &data, &out),
        Command::Generate {
            checkpoint,
            data,
            out,
            steps,
            k,
            seed,
            plan,
            limit,
        } => cmd_generate(&checkpoint, &data, &out, steps, k, seed, plan.as_deref(), limit),
        Command::Eval {
            checkpoint,
            baseline_checkpoint,
            data,
            steps,
            k,
            seed,
            out,
            no_timing,
            limit,
        } => cmd_eval(
            &checkpoint,
            baseline_checkpoint.as_deref(),
            &data,
            &steps,
            k,
            seed,
            &out,
            no_timing,
            limit,
        ),
        Command::Trace {
            checkpoint,
            data,
            index,
            steps,
            seed,
            out,
        } => cmd_trace(&checkpoint, &data, index, steps, seed, &out),
        Command::DumpSchedule {
            target_len,
            total_steps,
            anchor,
            uniform,
            offset,
            rounding,
            out,
        } => cmd_dump_schedule(
            target_len,
            total_steps,
            anchor.as_deref(),
            uniform,
            offset,
            &rounding,
            out.as_deref(),
        ),
    }
}

fn cmd_synth(
    kind: &str,
    vocab: usize,
    max_len: usize,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kind: TaskKind = kind.parse()?;
    let corpus = synth_task(kind, vocab, max_len, count, seed)?;
    corpus.save_jsonl(out)?;
    println!("wrote {} examples to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, set: &[String], data: &Path, out: &Path) -> Result<()> {
    let mut flat = match config {
        Some(path) => FlatConfig::from_file(path)?,
        None => FlatConfig::new(),
    };
    flat.apply_env()?;
    flat.apply_overrides(set)?;
    let resolved = flat.resolve()?;

    let corpus = ParallelCorpus::load_jsonl(data)?;
    let vocab = Vocabulary::from_corpus(&corpus);
    let model_config = resolved.model_config(vocab.len())?;
    let encoded = EncodedCorpus::new(
        &corpus,
        &vocab,
        model_config.max_src_len,
        resolved.train.max_tgt_len,
    )?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), resolved.snapshot(&model_config))?;
    vocab.save(&out.join("vocab.txt"))?;

    let mut model = Denoiser::new(model_config, resolved.train.seed)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let summary = train_loop(&resolved.train, &encoded, &mut model, |record, _| {
        let line = serde_json::to_string(record).expect("step record serializes");
        writeln!(metrics, "{line}")?;
        Ok(TrainSignal::Continue)
    })?;
    metrics.flush()?;

    let spec = ScheduleSpec {
        total_steps: resolved.train.total_steps,
        offset: resolved.train.schedule_offset,
    };
    let plan = resolved.train.timestep_plan()?;
    checkpoint::save(
        &out.join("checkpoint.ardn"),
        &model,
        &spec,
        &plan,
        &vocab,
        resolved.train.seed,
        summary.steps_run,
    )?;

    if summary.diverged {
        return Err(Error::Numeric(format!(
            "training diverged at step {}; last good checkpoint written",
            summary.steps_run
        )));
    }
    println!(
        "trained {} steps: loss {:.6} -> {:.6}",
        summary.steps_run, summary.initial_loss, summary.final_loss
    );
    Ok(())
}

fn plan_override(plan: &TimestepPlan, choice: Option<&str>) -> Result<TimestepPlan> {
    match choice {
        None => Ok(plan.clone()),
        Some("uniform") => TimestepPlan::uniform(plan.target_len(), plan.total_steps()),
        Some("anchored") => {
            TimestepPlan::default_anchored(plan.target_len(), plan.total_steps())
        }
        Some(other) => Err(Error::Config(format!("unknown plan override {other}"))),
    }
}

#[derive(Serialize)]
struct GenerateLine {
    src: String,
    candidates: Vec<String>,
    mbr_index: usize,
    risks: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    steps: usize,
    k: usize,
    seed: u64,
    plan_choice: Option<&str>,
    limit: Option<usize>,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let plan = plan_override(&ckpt.plan, plan_choice)?;
    let corpus = load_limited(data, limit)?;
    let encoded = EncodedCorpus::new(
        &corpus,
        &ckpt.vocab,
        ckpt.model.config().max_src_len,
        plan.target_len(),
    )?;
    let ip = make_plan(plan, steps, k, seed)?;
    let eval = crate::eval::evaluate_corpus(&ckpt.model, &ckpt.schedule, &encoded, &ip, seed, false)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    for example in &eval.outputs {
        let line = GenerateLine {
            src: join_tokens(&ckpt.vocab, &Vocabulary::trim_ids(&example.src)),
            candidates: example
                .candidates
                .iter()
                .map(|c| join_tokens(&ckpt.vocab, c))
                .collect(),
            mbr_index: example.mbr_index,
            risks: example.risks.clone(),
        };
        writeln!(
            file,
            "{}",
            serde_json::to_string(&line).expect("line serializes")
        )?;
    }
    file.flush()?;
    println!(
        "generated {} examples (k={k}, M={steps}): bleu {:.2}, seq-em {:.3}",
        eval.outputs.len(),
        eval.bleu,
        eval.seq_em
    );
    Ok(())
}

fn join_tokens(vocab: &Vocabulary, ids: &[usize]) -> String {
    crate::data::detokenize(&vocab.decode(ids))
}

fn load_limited(data: &Path, limit: Option<usize>) -> Result<ParallelCorpus> {
    let mut corpus = ParallelCorpus::load_jsonl(data)?;
    if let Some(limit) = limit {
        if limit == 0 {
            return Err(Error::InvalidArgument("limit must be positive".into()));
        }
        corpus.pairs.truncate(limit);
    }
    Ok(corpus)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt_path: &Path,
    baseline_path: Option<&Path>,
    data: &Path,
    steps: &str,
    k: usize,
    seed: u64,
    out: &Path,
    no_timing: bool,
    limit: Option<usize>,
) -> Result<()> {
    let step_counts: Vec<usize> = steps
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad step count '{s}'")))
        })
        .collect::<Result<_>>()?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let baseline = baseline_path.map(checkpoint::load).transpose()?;

    let corpus = load_limited(data, limit)?;
    let encoded = EncodedCorpus::new(
        &corpus,
        &ckpt.vocab,
        ckpt.model.config().max_src_len,
        ckpt.plan.target_len(),
    )?;

    let mut systems = vec![EvalSystem {
        name: plan_name(&ckpt.plan),
        model: &ckpt.model,
        schedule: &ckpt.schedule,
        plan: ckpt.plan.clone(),
    }];
    if let Some(b) = &baseline {
        if b.vocab != ckpt.vocab {
            return Err(Error::Data(
                "baseline checkpoint has a different vocabulary".into(),
            ));
        }
        systems.push(EvalSystem {
            name: format!("baseline-{}", plan_name(&b.plan)),
            model: &b.model,
            schedule: &b.schedule,
            plan: b.plan.clone(),
        });
    }

    let report = few_step_report(&systems, &encoded, &step_counts, k, seed, !no_timing)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    std::fs::write(out.join("few_step.csv"), few_step_csv(&report))?;
    for row in &report.rows {
        println!(
            "{} M={}: bleu {:.2} seq-em {:.3} drop {:.2}",
            row.system, row.steps, row.bleu, row.seq_exact_match, row.avg_drop
        );
    }
    Ok(())
}

fn plan_name(plan: &TimestepPlan) -> String {
    if plan.is_uniform() {
        "uniform".into()
    } else {
        "anchored".into()
    }
}

fn cmd_trace(
    ckpt_path: &Path,
    data: &Path,
    index: usize,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = ParallelCorpus::load_jsonl(data)?;
    if index >= corpus.len() {
        return Err(Error::Data(format!(
            "example index {index} out of range ({} examples)",
            corpus.len()
        )));
    }
    let encoded = EncodedCorpus::new(
        &corpus,
        &ckpt.vocab,
        ckpt.model.config().max_src_len,
        ckpt.plan.target_len(),
    )?;
    let ip = make_plan(ckpt.plan.clone(), steps, 1, seed)?;
    let output = crate::infer::generate(
        &ckpt.model,
        &ckpt.schedule,
        &encoded.src[index],
        &ip,
        seed,
    )?;
    let trace = output.trace.expect("generate records a trace");
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    for step in &trace.steps {
        writeln!(
            file,
            "{}",
            serde_json::to_string(step).expect("trace step serializes")
        )?;
    }
    file.flush()?;
    println!(
        "traced example {index} over {} steps -> {}",
        trace.steps.len() - 1,
        join_tokens(&ckpt.vocab, &output.ids)
    );
    Ok(())
}

fn cmd_dump_schedule(
    target_len: usize,
    total_steps: usize,
    anchor: Option<&str>,
    uniform: bool,
    offset: f64,
    rounding: &str,
    out: Option<&Path>,
) -> Result<()> {
    let rounding = match rounding {
        "nearest" => Rounding::Nearest,
        "floor" => Rounding::Floor,
        other => return Err(Error::Config(format!("unknown rounding mode {other}"))),
    };
    let plan = if uniform {
        TimestepPlan::uniform(target_len, total_steps)?
    } else {
        match anchor {
            None => TimestepPlan::anchored(
                target_len,
                total_steps,
                2.0 * target_len as f64,
                total_steps as f64,
                rounding,
            )?,
            Some(spec) => {
                let (pos, t) = spec.split_once(',').ok_or_else(|| {
                    Error::Config(format!("anchor '{spec}' is not 'pos,t'"))
                })?;
                let pos: f64 = pos.trim().parse().map_err(|_| {
                    Error::Config(format!("bad anchor position '{pos}'"))
                })?;
                let t: f64 = t.trim().parse().map_err(|_| {
                    Error::Config(format!("bad anchor timestep '{t}'"))
                })?;
                TimestepPlan::anchored(target_len, total_steps, pos, t, rounding)?
            }
        }
    };
    let schedule = NoiseSchedule::sqrt(total_steps, offset)?;
    let csv = render_schedule_csv(&plan, &schedule)?;
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// CSV rows (t, n, f(n,t), alpha_bar[f(n,t)]) over the full sentence-level
/// domain and every position.
pub fn render_schedule_csv(plan: &TimestepPlan, schedule: &NoiseSchedule) -> Result<String> {
    let mut out = String::from("t,n,f,alpha_bar\n");
    for t in 0..=plan.max_sentence_t() {
        for n in 1..=plan.target_len() {
            let f = plan.token_timestep(n, t as f64)?;
            out.push_str(&format!(
                "{t},{n},{f},{:.12}\n",
                schedule.alpha_bar(f)
            ));
        }
    }
    Ok(out)
}
