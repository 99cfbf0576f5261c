use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use denviscom::checkpoint::Checkpoint;
use denviscom::config::ModelConfig;
use denviscom::formats::{flo_valid_mask, pfm_valid_mask, read_flo, read_pfm, read_ppm, write_flo, write_pfm};
use denviscom::heads::Task;
use denviscom::metrics::{compute_disparity_metrics, compute_flow_metrics, Thresholds};
use denviscom::selftest;
use denviscom::train::{train_toy_with, TrainOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "denviscom", version, about = "Joint optical flow and stereo disparity with a hybrid SSM/attention trunk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant and oracle suite.
    Selftest {
        #[arg(long)]
        json: bool,
    },
    /// Compare tape gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = selftest::GRAD_TOL)]
        tol: f64,
        /// Tolerance for the whole-model check.
        #[arg(long, default_value_t = selftest::END_TO_END_TOL)]
        e2e_tol: f64,
    },
    /// Train on synthetic pairs and write a checkpoint.
    Train(TrainArgs),
    /// Predict a flow (.flo) or disparity (.pfm) field for a PPM image pair.
    Infer {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted field against ground truth.
    Eval {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Re-target a checkpoint's trunk to another task.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Fail unless the checkpoint was trained with this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// JSON model configuration; defaults to the full model.
    #[arg(long, conflicts_with = "reduced")]
    config: Option<PathBuf>,
    /// Use the small configuration (embed 64, depth 2, 2 heads).
    #[arg(long)]
    reduced: bool,
    /// Start from an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_self_attn: bool,
    #[arg(long)]
    no_cross_attn: bool,
    #[arg(long)]
    no_attention: bool,
    /// Evaluate on held-out pairs every N steps.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Print one JSON object per line instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn selftest_cmd(json: bool) -> anyhow::Result<bool> {
    let mut ok = true;
    for o in selftest::SELFTEST_CRITERIA.iter().filter_map(|&c| selftest::run(c)) {
        ok &= o.passed;
        if json {
            let line = json!({
                "criterion": o.criterion,
                "title": o.title,
                "passed": o.passed,
                "detail": o.detail,
                "seconds": o.seconds,
            });
            println!("{line}");
        } else {
            println!("{}", o.line());
        }
    }
    Ok(ok)
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let mut config = match (&a.config, a.reduced) {
        (Some(path), _) => ModelConfig::load(path)?,
        (None, true) => ModelConfig::reduced(),
        (None, false) => ModelConfig::default(),
    };
    let f = &mut config.flags;
    f.no_fusion |= a.no_fusion;
    f.no_self |= a.no_self_attn;
    f.no_cross |= a.no_cross_attn;
    f.no_attention |= a.no_attention;
    config.validate()?;
    let mut opts = TrainOptions::new(a.task, config, a.steps, a.lr, a.batch, a.seed);
    opts.eval_every = a.eval_every;
    if let Some(path) = &a.init {
        let ckpt = Checkpoint::load(path)?;
        // an initial checkpoint brings its own architecture
        opts.config = ckpt.config.clone();
        opts.init = Some(ckpt);
    }
    let json = a.json;
    let out = train_toy_with(&opts, |step, loss| {
        if json {
            println!("{}", json!({ "step": step, "loss": loss }));
        } else {
            println!("step {step} loss {loss:.6}");
        }
    })?;
    for e in &out.evals {
        if json {
            println!("{}", json!({ "eval_step": e.step, "epe": e.epe, "d1": e.d1 }));
        } else {
            match e.d1 {
                Some(d1) => println!("eval step {} epe {:.4} d1 {:.4}", e.step, e.epe, d1),
                None => println!("eval step {} epe {:.4}", e.step, e.epe),
            }
        }
    }
    out.checkpoint.save(&a.out)?;
    if !json {
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

fn extension(path: &Path) -> &str {
    path.extension().and_then(|e| e.to_str()).unwrap_or("")
}

fn infer_cmd(task: Task, ckpt: &Path, img1: &Path, img2: &Path, out: &Path) -> anyhow::Result<()> {
    let want = match task {
        Task::Flow => "flo",
        Task::Disparity => "pfm",
    };
    if extension(out) != want {
        bail!("{} output must end in .{want}", task.name());
    }
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let a = read_ppm(img1)?;
    let b = read_ppm(img2)?;
    let field = model.infer(task, &a, &b)?;
    match task {
        Task::Flow => write_flo(&field, out)?,
        Task::Disparity => write_pfm(&field, out)?,
    }
    Ok(())
}

fn eval_cmd(task: Task, pred: &Path, gt: &Path, json: bool) -> anyhow::Result<()> {
    let th = Thresholds::default();
    let report = match task {
        Task::Flow => {
            let (p, g) = (read_flo(pred)?, read_flo(gt)?);
            let mask = flo_valid_mask(&g);
            compute_flow_metrics(&p, &g, &mask, &th)?
        }
        Task::Disparity => {
            let (p, g) = (read_pfm(pred)?, read_pfm(gt)?);
            let mask = pfm_valid_mask(&g);
            compute_disparity_metrics(&p, &g, &mask, &th)?
        }
    };
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn transfer_cmd(from: &Path, task: Task, out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let src = Checkpoint::load(from)?;
    let target = config.map(ModelConfig::load).transpose()?;
    let dst = src
        .transfer(task, target.as_ref())
        .with_context(|| format!("cannot transfer {}", from.display()))?;
    dst.save(out)?;
    println!("wrote {} ({} -> {})", out.display(), src.task.name(), task.name());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Selftest { json } => return selftest_cmd(json),
        Command::GradCheck { tol, e2e_tol } => {
            println!("{}", selftest::gradient_suite(tol, e2e_tol)?);
        }
        Command::Train(a) => train_cmd(&a)?,
        Command::Infer {
            task,
            ckpt,
            img1,
            img2,
            out,
        } => infer_cmd(task, &ckpt, &img1, &img2, &out)?,
        Command::Eval { task, pred, gt, json } => eval_cmd(task, &pred, &gt, json)?,
        Command::Transfer { from, task, out, config } => transfer_cmd(&from, task, &out, config.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
