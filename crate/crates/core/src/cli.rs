//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::bundle::{Bundle, DATA_MAGIC};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{atlas_tiles, contact_sheet, eval_reconstruction, eval_transfer, write_png, EvalReport};
use crate::fewshot::{finetune_fewshot, transfer, PersonalState};
use crate::gradcheck::run_suite;
use crate::model::Model;
use crate::synthworld::{generate_dataset, prepare_output_dir, DiskDataset, FrameSource, Split};
use crate::trainer::{FrameBatch, StopAfter, TrainLog, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.pgtc";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "geotex", version, about = "Few-shot human motion transfer on a synthetic world")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; the desk preset when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (desk or paper) instead of a file.
    #[arg(long, global = true, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Override one configuration value, e.g. `--set train.lr=0.001`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    /// Initialization only.
    Init,
    /// Initialization then multi-video training.
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both generators (initialization, then multi-video).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Continue from this checkpoint (usually `<out>/checkpoint.pgtc`).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Personalize a trained model to a test person from a few frames.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Person id from the dataset index, e.g. test_000.
        #[arg(long)]
        person: String,
        /// Personalized checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Animate a personalized checkpoint with another person's poses.
    Transfer {
        /// Personalized checkpoint from `finetune`.
        #[arg(long)]
        personal: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Person whose poses drive the animation.
        #[arg(long)]
        driving: String,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction and transfer metrics on every test person.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse arguments, run, and map errors to exit codes: 1 for validation
/// problems, 2 for runtime failures.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    match &g.preset {
        Some(name) => {
            let mut v = RunConfig::preset(name)?.to_value();
            for o in &g.overrides {
                crate::config::apply_override(&mut v, o)?;
            }
            let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => RunConfig::load(g.config.as_deref(), &g.overrides),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.global.threads == 0 {
        return Err(Error::config("--threads", "must be positive"));
    }
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global();
    let force = cli.global.force;
    match &cli.command {
        Command::Gradcheck { out } => cmd_gradcheck(out.as_deref()),
        cmd => {
            let cfg = load_config(&cli.global)?;
            match cmd {
                Command::Synth { out } => cmd_synth(&cfg, out, force),
                Command::Train { data, out, stage, resume } => cmd_train(&cfg, data, out, *stage, resume.as_deref(), force),
                Command::Finetune { checkpoint, data, person, out } => cmd_finetune(&cfg, checkpoint, data, person, out, force),
                Command::Transfer { personal, data, driving, start, count, out } => {
                    cmd_transfer(personal, data, driving, *start, *count, out, force)
                }
                Command::Eval { checkpoint, data, out } => cmd_eval(&cfg, checkpoint, data, out, force),
                Command::Gradcheck { .. } => unreachable!(),
            }
        }
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let index = generate_dataset(&cfg.world, out, force)?;
    println!(
        "wrote {}: {} train persons, {} test persons, {} frames ({} train, {} test)",
        out.display(),
        cfg.world.persons_train,
        cfg.world.persons_test,
        index.frames.len(),
        index.count(Split::Train),
        index.count(Split::Test),
    );
    Ok(())
}

fn open_dataset(data: &Path, cfg: &RunConfig) -> Result<DiskDataset> {
    let ds = DiskDataset::open(data)?;
    if ds.index.config != cfg.world {
        return Err(Error::config("world", format!("dataset {} was generated with a different world config", data.display())));
    }
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, stage: StageArg, resume: Option<&Path>, force: bool) -> Result<()> {
    let ds = open_dataset(data, cfg)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (g, t) = (&cfg.model.geometry, &cfg.model.texture);
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load_matching(p, g, t)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut tr = Trainer::resume(cfg.train.clone(), ck, &ds)?;
            tr.log = TrainLog::to_file(&out.join(LOG_FILE), true)?;
            tr
        }
        None => {
            prepare_output_dir(out, force)?;
            let model = Model::init(g.clone(), t.clone(), cfg.train.seed)?;
            let mut tr = Trainer::new(cfg.train.clone(), model, &ds, cfg.to_value())?;
            tr.log = TrainLog::to_file(&out.join(LOG_FILE), false)?;
            tr
        }
    };
    write_json(&out.join("config.json"), &cfg.to_value())?;
    let stop = match stage {
        StageArg::Init => StopAfter::Init,
        StageArg::All => StopAfter::Multivideo,
    };
    let before = trainer.progress;
    trainer.run(stop, Some(&ckpt), None)?;
    if trainer.progress == before {
        trainer.checkpoint().save(&ckpt)?;
    }
    let p = trainer.progress;
    println!("checkpoint {} at stage {} epoch {} step {}", ckpt.display(), p.stage.name(), p.epoch, p.step);
    Ok(())
}

/// Find a person id in either split.
fn find_person(ds: &dyn FrameSource, id: &str) -> Result<(Split, usize)> {
    for split in [Split::Test, Split::Train] {
        if let Some(i) = ds.persons(split).iter().position(|p| p.person_id == id) {
            return Ok((split, i));
        }
    }
    Err(Error::config("--person", format!("no person `{id}` in the dataset")))
}

fn load_trained(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ck = Checkpoint::load_matching(path, &cfg.model.geometry, &cfg.model.texture)?;
    if ck.progress.stage != Stage::Done {
        eprintln!("warning: checkpoint {} has not finished training", path.display());
    }
    Ok(ck.model)
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, data: &Path, person: &str, out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    let ds = open_dataset(data, cfg)?;
    let model = load_trained(cfg, checkpoint)?;
    let (split, pi) = find_person(&ds, person)?;
    let frames: Vec<usize> = (0..cfg.finetune.sources).collect();
    let sources = FrameBatch::load(&ds, split, pi, &frames)?;
    let (state, report) = finetune_fewshot(&model, &sources, &cfg.finetune)?;
    let echo = json!({"run": cfg.to_value(), "person": person, "source_frames": frames});
    state.to_checkpoint(&model, echo).save(out)?;
    write_json(&out.with_extension("report.json"), &report)?;
    println!(
        "fine-tuned {person}: objective {:.5} -> {:.5} (reverted: {:?})",
        report.initial.total, report.final_loss.total, report.reverted
    );
    Ok(())
}

pub fn cmd_transfer(personal: &Path, data: &Path, driving: &str, start: usize, count: usize, out: &Path, force: bool) -> Result<()> {
    let ck = Checkpoint::load(personal)?;
    let (model, state) = PersonalState::from_checkpoint(&ck)?;
    let ds = DiskDataset::open(data)?;
    let (split, pi) = find_person(&ds, driving)?;
    prepare_output_dir(out, force)?;
    let available = ds.config().frames_per_person;
    let frames: Vec<usize> = (start..start.saturating_add(count).min(available)).collect();
    if frames.is_empty() {
        eprintln!("warning: empty pose sequence, nothing to render");
        return Ok(());
    }
    let batch = FrameBatch::load(&ds, split, pi, &frames)?;
    let result = transfer(&model, &state, &batch.poses)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&out.join(format!("frame_{f:06}.png")), &result.images.batch_item(i))?;
    }
    let mut b = Bundle::new(json!({"driving": driving, "frames": frames, "config": ck.config}));
    b.insert("images", result.images);
    b.insert("scores", result.scores);
    b.insert("uv", result.uv);
    b.write(&out.join("transfer.tns"), DATA_MAGIC)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, force: bool) -> Result<()> {
    let ds = open_dataset(data, cfg)?;
    let model = load_trained(cfg, checkpoint)?;
    prepare_output_dir(out, force)?;
    let persons = ds.persons(Split::Test).to_vec();
    if persons.is_empty() {
        return Err(Error::config("world.persons_test", "evaluation needs at least one test person"));
    }
    let src_frames: Vec<usize> = (0..cfg.finetune.sources).collect();
    let held: Vec<usize> = (cfg.finetune.sources..cfg.finetune.sources + cfg.eval.held_out).collect();
    let mut recon = Vec::new();
    let mut moved = Vec::new();
    for (pi, p) in persons.iter().enumerate() {
        let sources = FrameBatch::load(&ds, Split::Test, pi, &src_frames)?;
        let state = if cfg.eval.finetune {
            finetune_fewshot(&model, &sources, &cfg.finetune)?.0
        } else {
            PersonalState::init(&model, &sources)?
        };
        let targets = FrameBatch::load(&ds, Split::Test, pi, &held)?;
        let r = eval_reconstruction(&model, &state, &p.person_id, &targets)?;
        // the driving sequence comes from the next test person, or a training
        // person when there is only one
        let (dsplit, di) = if persons.len() > 1 { (Split::Test, (pi + 1) % persons.len()) } else { (Split::Train, 0) };
        let driving_id = ds.persons(dsplit)[di].person_id.clone();
        let driving = FrameBatch::load(&ds, dsplit, di, &held)?;
        let t = eval_transfer(&model, &state, &p.person_id, &driving_id, &driving)?;
        if cfg.eval.sheet_rows > 0 {
            let src = sources.images.batch_item(0);
            let sheet = contact_sheet(&src, &targets.poses, &r.images, Some(&targets.images), cfg.eval.sheet_rows)?;
            write_png(&out.join(format!("{}_reconstruction.png", p.person_id)), &sheet)?;
            let sheet = contact_sheet(&src, &driving.poses, &t.images, None, cfg.eval.sheet_rows)?;
            write_png(&out.join(format!("{}_transfer.png", p.person_id)), &sheet)?;
            write_png(&out.join(format!("{}_atlas.png", p.person_id)), &atlas_tiles(&model.decode_texture(&state.embedding)?)?)?;
        }
        recon.push(r.report);
        moved.push(t.report);
    }
    let echo: Value = cfg.to_value();
    let recon = EvalReport::new("reconstruction", recon, echo.clone());
    let moved = EvalReport::new("transfer", moved, echo);
    recon.save(&out.join("eval_reconstruction.json"))?;
    moved.save(&out.join("eval_transfer.json"))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "reconstruction: ssim {} masked_l1 {} pose_error {} px; transfer pose_error {} px",
        show(recon.aggregate.ssim),
        show(recon.aggregate.masked_l1),
        show(recon.aggregate.pose_error),
        show(moved.aggregate.pose_error),
    );
    Ok(())
}

pub fn cmd_gradcheck(out: Option<&Path>) -> Result<()> {
    let entries = run_suite()?;
    for e in &entries {
        println!(
            "{:<5} {:<10} {:<28} max rel err {:.2e} (tol {:.0e}, {} coords)",
            if e.passed { "ok" } else { "FAIL" },
            e.group,
            e.report.name,
            e.report.max_rel_error,
            e.tolerance,
            e.report.coords_checked
        );
    }
    if let Some(p) = out {
        write_json(p, &entries)?;
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.report.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check failed: {}", failed.join(", "))))
    }
}
