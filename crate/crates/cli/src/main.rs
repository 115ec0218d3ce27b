//! `hyperdistill` command-line tool.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperdistill::analysis::emit_report;
use hyperdistill::architectures::{load_checkpoint, Actor, Checkpoint, Model};
use hyperdistill::distillation::{distill, fit_single_robot_teachers, Dataset, TeacherFitConfig};
use hyperdistill::harness::{
    bar_chart_svg, collect, curves_svg, evaluate, make_morphologies, make_oracle, run_ablation, Ablation,
    ExperimentConfig,
};
use hyperdistill::morphology::{parse_morphology, write_morphology, Morphology};
use hyperdistill::rng::{derive_seed, stream};
use hyperdistill::{Error, Result};

use config::KeyValues;
use output::{read_input, Format, OutDir, Table};

#[derive(Parser)]
#[command(name = "hyperdistill", version, about = "Hypernetwork policy distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Draws the train, PD and test morphologies.
    GenerateMorphs {
        #[command(flatten)]
        common: Common,
    },
    /// Writes the seeded oracle teacher checkpoint.
    MakeOracle {
        #[command(flatten)]
        common: Common,
    },
    /// Labels sampled states with a teacher.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        morphs: PathBuf,
        /// Universal teacher checkpoint; the seeded oracle when absent.
        #[arg(long, conflicts_with = "teachers")]
        oracle: Option<PathBuf>,
        /// Directory of per-robot policies named `<id>.ckpt`.
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long)]
        transitions: Option<usize>,
    },
    /// Trains the hypernetwork student on a dataset.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        morphs: PathBuf,
    },
    /// Fits one MLP per morphology to the oracle.
    FitTeachers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        morphs: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// KL to the oracle on fresh states.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A universal model or a compiled policy.
        #[arg(long)]
        student: PathBuf,
        #[arg(long, required_unless_present = "morph")]
        morphs: Option<PathBuf>,
        #[arg(long, conflicts_with = "morphs")]
        morph: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Parameter and FLOPs table for a spec file.
    AnalyzeCosts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        limbs: Option<usize>,
    },
    /// Runs one ablation over all repeats.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        which: String,
    },
    /// Generates the per-robot policy of a hypernetwork checkpoint.
    CompilePolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        morph: PathBuf,
        /// File name inside `--out-dir`.
        #[arg(long, default_value = "policy.ckpt")]
        out: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenerateMorphs { common }
            | Self::MakeOracle { common }
            | Self::Collect { common, .. }
            | Self::Distill { common, .. }
            | Self::FitTeachers { common, .. }
            | Self::Evaluate { common, .. }
            | Self::AnalyzeCosts { common, .. }
            | Self::Ablate { common, .. }
            | Self::CompilePolicy { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::GenerateMorphs { .. } => "generate-morphs",
            Self::MakeOracle { .. } => "make-oracle",
            Self::Collect { .. } => "collect",
            Self::Distill { .. } => "distill",
            Self::FitTeachers { .. } => "fit-teachers",
            Self::Evaluate { .. } => "evaluate",
            Self::AnalyzeCosts { .. } => "analyze-costs",
            Self::Ablate { .. } => "ablate",
            Self::CompilePolicy { .. } => "compile-policy",
        }
    }
}

/// The resolved run context shared by every command.
struct Run {
    out: OutDir,
    format: Format,
    kv: KeyValues,
    seed_flag: Option<u64>,
}

impl Run {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut c = config::experiment_config(&self.kv)?;
        if let Some(s) = self.seed_flag {
            c.seed = s;
        }
        Ok(c)
    }

    fn table(&mut self, stem: &str, table: &Table) -> Result<()> {
        let name = format!("{stem}.{}", self.format.extension());
        self.out.write(&name, table.render(self.format).as_bytes())
    }
}

fn read_morph(run: &mut Run, flag: &str, path: &Path) -> Result<Morphology> {
    let bytes = read_input(flag, path)?;
    run.out.record_input(&path.display().to_string(), &bytes);
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not utf-8", path.display())))?;
    parse_morphology(&text)
}

/// Every `*.morph` file of a directory, by file name.
fn read_morph_dir(run: &mut Run, flag: &str, dir: &Path) -> Result<Vec<Morphology>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("input `{flag}` ({}): {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "morph"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("input `{flag}`: no .morph files in {}", dir.display())));
    }
    paths.iter().map(|p| read_morph(run, flag, p)).collect()
}

fn read_checkpoint(run: &mut Run, flag: &str, path: &Path) -> Result<Checkpoint> {
    let bytes = read_input(flag, path)?;
    run.out.record_input(&path.display().to_string(), &bytes);
    load_checkpoint(&bytes)
}

fn read_model(run: &mut Run, flag: &str, path: &Path) -> Result<Model> {
    match read_checkpoint(run, flag, path)? {
        Checkpoint::Model(m) => Ok(m),
        Checkpoint::Compiled(_) => Err(Error::Config(format!(
            "input `{flag}`: expected a universal model, got a compiled policy"
        ))),
    }
}

fn oracle_or_seeded(run: &mut Run, path: Option<&Path>, seed: u64) -> Result<Model> {
    match path {
        Some(p) => read_model(run, "oracle", p),
        None => Ok(make_oracle(seed)),
    }
}

/// Per-robot policies keyed by file stem.
struct PolicyDir(Vec<(String, Checkpoint)>);

impl Actor for PolicyDir {
    fn act(&self, m: &Morphology, states: &hyperdistill::numerics::Tensor) -> Result<(hyperdistill::numerics::Tensor, Vec<f64>)> {
        let (_, c) = self
            .0
            .iter()
            .find(|(id, _)| id == m.id())
            .ok_or_else(|| Error::UnknownMorphology(m.id().to_string()))?;
        match c {
            Checkpoint::Model(model) => model.act(m, states),
            Checkpoint::Compiled(p) => p.act(m, states),
        }
    }
}

fn execute(cmd: &Command, run: &mut Run) -> Result<u64> {
    let cfg = run.experiment()?;
    let seed = cfg.seed;
    let s = cfg.student.state_dim;
    match cmd {
        Command::GenerateMorphs { .. } => {
            let sets = make_morphologies(&cfg, seed);
            sets.check_disjoint()?;
            let mut rows = Vec::new();
            for (split, ms) in [("train", &sets.train), ("pd", &sets.pd), ("test", &sets.test)] {
                for m in ms {
                    run.out.write(&format!("{split}/{}.morph", m.id()), write_morphology(m).as_bytes())?;
                    rows.push(vec![split.to_string(), m.id().to_string(), m.n_limbs().to_string()]);
                }
            }
            let header = ["split", "id", "n_limbs"].map(String::from).to_vec();
            run.table("morphologies", &Table { header, rows })?;
        }
        Command::MakeOracle { .. } => {
            run.out.write("oracle.ckpt", &make_oracle(seed).to_bytes())?;
        }
        Command::Collect {
            morphs,
            oracle,
            teachers,
            transitions,
            ..
        } => {
            let ms = read_morph_dir(run, "morphs", morphs)?;
            let per = transitions.unwrap_or(cfg.transitions_per_morph);
            let mut rng = stream(seed, "collect");
            let data = match teachers {
                Some(dir) => {
                    let mut policies = Vec::new();
                    for m in &ms {
                        let path = dir.join(format!("{}.ckpt", m.id()));
                        policies.push((m.id().to_string(), read_checkpoint(run, "teachers", &path)?));
                    }
                    collect(&PolicyDir(policies), &ms, s, per, &mut rng)?
                }
                None => {
                    let teacher = oracle_or_seeded(run, oracle.as_deref(), seed)?;
                    collect(&teacher, &ms, s, per, &mut rng)?
                }
            };
            run.out.write("dataset.hdd", &data.to_bytes())?;
        }
        Command::Distill { data, morphs, .. } => {
            let bytes = read_input("data", data)?;
            run.out.record_input(&data.display().to_string(), &bytes);
            let dataset = Dataset::from_bytes(&bytes)?;
            let ms = read_morph_dir(run, "morphs", morphs)?;
            let mut student = Model::init(cfg.student.clone(), &mut stream(seed, "init"))?;
            let mut dcfg = cfg.distill;
            dcfg.seed = derive_seed(seed, "distill");
            if !cfg.dropout {
                dcfg.dropout_site = hyperdistill::architectures::DropoutSite::None;
            }
            let report = distill(&mut student, &dataset, &ms, &dcfg)?;
            run.out.write("student.ckpt", &student.to_bytes())?;
            let rows = report
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(e, l)| vec![e.to_string(), l.to_string()])
                .collect();
            run.table("losses", &Table { header: vec!["epoch".into(), "train_kl".into()], rows })?;
            run.table(
                "distill_summary",
                &Table {
                    header: vec!["epochs".into(), "records".into(), "final_train_kl".into()],
                    rows: vec![vec![dcfg.epochs.to_string(), dataset.len().to_string(), report.train_kl.to_string()]],
                },
            )?;
        }
        Command::FitTeachers { morphs, oracle, .. } => {
            let ms = read_morph_dir(run, "morphs", morphs)?;
            let teacher = oracle_or_seeded(run, oracle.as_deref(), seed)?;
            let mut template = cfg.student.clone();
            template.kind = hyperdistill::architectures::ArchKind::CompiledMlp;
            let fit_cfg = TeacherFitConfig {
                seed: derive_seed(seed, "teacher-fit"),
                ..cfg.teacher_fit
            };
            let fits = fit_single_robot_teachers(&teacher, &ms, &template, &fit_cfg)?;
            let mut rows = Vec::new();
            for f in &fits {
                run.out.write(&format!("teachers/{}.ckpt", f.robot_id), &f.policy.to_bytes())?;
                rows.push(vec![f.robot_id.clone(), f.mse.to_string()]);
            }
            run.table("teacher_fits", &Table { header: vec!["robot_id".into(), "mse".into()], rows })?;
        }
        Command::Evaluate {
            student,
            morphs,
            morph,
            oracle,
            ..
        } => {
            let ms = match (morphs, morph) {
                (Some(dir), _) => read_morph_dir(run, "morphs", dir)?,
                (None, Some(file)) => vec![read_morph(run, "morph", file)?],
                (None, None) => return Err(Error::Config("input `morphs` is required".into())),
            };
            let ckpt = read_checkpoint(run, "student", student)?;
            let teacher = oracle_or_seeded(run, oracle.as_deref(), seed)?;
            let actor: &dyn Actor = match &ckpt {
                Checkpoint::Model(m) => m,
                Checkpoint::Compiled(p) => p,
            };
            let ev = evaluate(actor, &teacher, &ms, s, cfg.n_eval_states, &mut stream(seed, "eval"))?;
            let rows = ev.per_morph.iter().map(|(id, kl)| vec![id.clone(), kl.to_string()]).collect();
            run.table("evaluation", &Table { header: vec!["morphology_id".into(), "mean_kl".into()], rows })?;
            run.table(
                "evaluation_summary",
                &Table {
                    header: vec!["n_morphs".into(), "mean_kl".into(), "stderr".into()],
                    rows: vec![vec![ms.len().to_string(), ev.mean.to_string(), ev.stderr.to_string()]],
                },
            )?;
        }
        Command::AnalyzeCosts { specs, limbs, .. } => {
            let bytes = read_input("specs", specs)?;
            run.out.record_input(&specs.display().to_string(), &bytes);
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("spec file is not utf-8".into()))?;
            let kv = KeyValues::parse(&text)?;
            let (entries, file_limbs) = config::cost_specs(&kv, &text)?;
            let n = limbs
                .or(file_limbs)
                .ok_or_else(|| Error::Config("missing key `limbs` (or pass --limbs)".into()))?;
            let report = emit_report(&entries, n)?;
            run.table("costs", &Table::from_csv(&report.to_csv()))?;
        }
        Command::Ablate { which, .. } => {
            let ab = Ablation::parse(which).ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation `{which}`; expected one of {}", names.join(", ")))
            })?;
            let table = run_ablation(ab, &cfg)?;
            let stem = format!("ablation_{}", ab.name());
            run.table(&stem, &Table::from_csv(&table.to_csv()))?;
            let bars: Vec<(String, f64)> = table
                .arms
                .iter()
                .map(|a| (a.clone(), table.median(a, "test").unwrap_or(f64::NAN)))
                .collect();
            run.out.write(&format!("{stem}_test.svg"), bar_chart_svg(ab.name(), &bars).as_bytes())?;
            run.out.write(
                &format!("{stem}_curves.svg"),
                curves_svg(ab.name(), &table.mean_curves()).as_bytes(),
            )?;
            if !table.failures.is_empty() {
                let rows = table
                    .failures
                    .iter()
                    .map(|f| vec![f.arm.clone(), f.seed.to_string(), f.message.replace(',', ";")])
                    .collect();
                run.table(
                    &format!("{stem}_failures"),
                    &Table { header: vec!["arm".into(), "seed".into(), "message".into()], rows },
                )?;
            }
        }
        Command::CompilePolicy {
            checkpoint, morph, out, ..
        } => {
            let model = read_model(run, "checkpoint", checkpoint)?;
            let m = read_morph(run, "morph", morph)?;
            let policy = model.compile(&m)?;
            run.out.write(out, &policy.to_bytes())?;
        }
    }
    Ok(seed)
}

fn start(cmd: &Command) -> Result<Run> {
    let common = cmd.common();
    let config_text = match &common.config {
        Some(p) => String::from_utf8(read_input("config", p)?)
            .map_err(|_| Error::Config(format!("config {} is not utf-8", p.display())))?,
        None => String::new(),
    };
    let kv = KeyValues::parse(&config_text)?;
    let mut out = OutDir::create(&common.out_dir)?;
    if let Some(p) = &common.config {
        out.record_input(&p.display().to_string(), config_text.as_bytes());
    }
    Ok(Run {
        out,
        format: common.format,
        kv,
        seed_flag: common.seed,
    })
}

fn run(cmd: &Command) -> Result<()> {
    let mut run = start(cmd)?;
    let seed = execute(cmd, &mut run)?;
    let canonical = run.kv.canonical();
    run.out.finish(cmd.name(), seed, &canonical)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
