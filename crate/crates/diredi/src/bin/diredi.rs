use clap::{Args, Parser, Subcommand};
use diredi::eval::EvalConfig;
use diredi::pipeline::{
    apply_delta_files, evaluate_checkpoint, render_report, run_plan, run_single_stage,
    toy_experiment1_plan, toy_experiment2_plan, ExperimentPlan, RunOptions, Stage, OUT_ROOT_ENV,
};
use diredi::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "diredi",
    about = "Edge-detector lifecycle tool: distillation, reverse distillation, \
             weight-delta transfer, gated updates, and re-distillation.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Experiment plan file (JSON).
    plan: PathBuf,
    /// Run output directory. Defaults to $DIREDI_OUT_ROOT/<plan_id> or
    /// ./runs/<plan_id>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the plan's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip stages whose digests and artifacts are unchanged (default).
    #[arg(long, overrides_with = "no_resume")]
    resume: bool,
    #[arg(long = "no-resume")]
    no_resume: bool,
    /// Testing hook: replace the extracted delta with norm-matched noise
    /// before applying it, to exercise the verification gate.
    #[arg(long)]
    inject_noise_delta: bool,
}

impl PlanArgs {
    fn load(&self) -> Result<(ExperimentPlan, PathBuf, RunOptions)> {
        let mut plan = ExperimentPlan::load(&self.plan)?;
        if let Some(seed) = self.seed {
            plan.seed = seed;
        }
        let out = match &self.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(&plan.plan_id),
        };
        let opts = RunOptions {
            resume: !self.no_resume,
            inject_noise_delta: self.inject_noise_delta,
        };
        Ok((plan, out, opts))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full 11-stage experiment graph from a plan file.
    Run(PlanArgs),
    /// Write a built-in toy experiment plan to a file.
    InitPlan {
        /// Which preset: exp1 (learn a private category) or exp2 (also
        /// forget a presumed one).
        preset: String,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Train the large manufacturer model.
    TrainLarge(PlanArgs),
    /// Forward distillation; --which a (large->tutor) or b (tutor->edge).
    Distill {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "a")]
        which: String,
    },
    /// Reverse distillation; --which emulation (tutor 1) or customer (tutor 2).
    ReverseDistill {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "emulation")]
        which: String,
    },
    /// Extract the neck+head weight delta between the two tutors into a packet.
    ExtractDelta(PlanArgs),
    /// Apply a knowledge packet. Plan mode (positional plan) or standalone
    /// with --base/--packet/--output.
    ApplyDelta {
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        inject_noise_delta: bool,
        /// Standalone mode: base checkpoint to update.
        #[arg(long, requires = "packet", requires = "output")]
        base: Option<PathBuf>,
        #[arg(long)]
        packet: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        delta_weight: f64,
    },
    /// Run the verification gate between the origin and updated tutors.
    Verify(PlanArgs),
    /// Re-distill the edge model from the updated tutor.
    Redistill(PlanArgs),
    /// Train the direct-update baseline edge model.
    TrainDirect(PlanArgs),
    /// Evaluate a checkpoint. Plan mode runs the evaluate_all stage;
    /// standalone mode takes --checkpoint and --dataset.
    Evaluate {
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, requires = "dataset", requires = "output")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (images/ + annotations.json).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Optional EvalConfig JSON file; defaults apply otherwise.
        #[arg(long)]
        eval_config: Option<PathBuf>,
    },
    /// Re-render the comparison table and plots from a finished run.
    Report(PlanArgs),
}

fn stage_command(args: &PlanArgs, stage: Stage) -> Result<()> {
    let (plan, out, opts) = args.load()?;
    let manifest = run_single_stage(&plan, &out, stage, opts)?;
    let rec = manifest.stage(stage).expect("stage just ran");
    eprintln!(
        "stage {} {:?} in {:.1}s, {} artifact(s)",
        stage.name(),
        rec.status,
        rec.wall_clock_secs,
        rec.outputs.len()
    );
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let (plan, out, opts) = args.load()?;
            let manifest = run_plan(&plan, &out, opts)?;
            for s in &manifest.stages {
                eprintln!("{:<16} {:?} ({:.1}s)", s.name, s.status, s.wall_clock_secs);
            }
            println!("{}", out.join("report.txt").display());
            Ok(())
        }
        Command::InitPlan { preset, out } => {
            let plan = match preset.as_str() {
                "exp1" => toy_experiment1_plan(),
                "exp2" => toy_experiment2_plan(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown preset `{other}` (expected exp1 or exp2)"
                    )))
                }
            };
            plan.save(&out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::TrainLarge(args) => stage_command(&args, Stage::TrainLarge),
        Command::Distill { plan, which } => match which.as_str() {
            "a" => stage_command(&plan, Stage::DistillA),
            "b" => stage_command(&plan, Stage::DistillB),
            other => Err(Error::Config(format!("--which must be a or b, got `{other}`"))),
        },
        Command::ReverseDistill { plan, which } => match which.as_str() {
            "emulation" => stage_command(&plan, Stage::RdEmulation),
            "customer" => stage_command(&plan, Stage::RdCustomer),
            other => Err(Error::Config(format!(
                "--which must be emulation or customer, got `{other}`"
            ))),
        },
        Command::ExtractDelta(args) => stage_command(&args, Stage::ExtractDelta),
        Command::ApplyDelta {
            plan,
            out,
            seed,
            inject_noise_delta,
            base,
            packet,
            output,
            delta_weight,
        } => {
            if let (Some(base), Some(packet), Some(output)) = (&base, &packet, &output) {
                apply_delta_files(base, packet, delta_weight, output)?;
                println!("{}", output.display());
                return Ok(());
            }
            let plan = plan.ok_or_else(|| {
                Error::Config("apply-delta needs a plan file or --base/--packet/--output".into())
            })?;
            stage_command(
                &PlanArgs {
                    plan,
                    out,
                    seed,
                    resume: false,
                    no_resume: false,
                    inject_noise_delta,
                },
                Stage::ApplyDelta,
            )
        }
        Command::Verify(args) => stage_command(&args, Stage::Verify),
        Command::Redistill(args) => stage_command(&args, Stage::DistillC),
        Command::TrainDirect(args) => stage_command(&args, Stage::BaselineDirect),
        Command::Evaluate { plan, out, seed, checkpoint, dataset, output, eval_config } => {
            if let (Some(ckpt), Some(ds), Some(output)) = (&checkpoint, &dataset, &output) {
                let config = match &eval_config {
                    Some(path) => {
                        let bytes =
                            std::fs::read(path).map_err(|e| Error::io(path, e))?;
                        serde_json::from_slice(&bytes)?
                    }
                    None => EvalConfig::default(),
                };
                let report = evaluate_checkpoint(ckpt, ds, &config, output)?;
                eprintln!("mAP {:.4} F1 {:.4}", report.map, report.f1);
                println!("{}", output.display());
                return Ok(());
            }
            let plan = plan.ok_or_else(|| {
                Error::Config("evaluate needs a plan file or --checkpoint/--dataset/--output".into())
            })?;
            stage_command(
                &PlanArgs {
                    plan,
                    out,
                    seed,
                    resume: false,
                    no_resume: false,
                    inject_noise_delta: false,
                },
                Stage::EvaluateAll,
            )
        }
        Command::Report(args) => {
            let (plan, out, _) = args.load()?;
            let outputs = render_report(&out, &plan)?;
            for rel in outputs {
                println!("{}", out.join(rel).display());
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(err) = real_main() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
