use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesionlab::config::{RunConfig, RunMatrix};
use lesionlab::dataset::{load_manifest, LesionLabel};
use lesionlab::error::{Error, Result};
use lesionlab::evaluator::F1Column;
use lesionlab::modelkit::pretrain::{pretrain, PretrainConfig};
use lesionlab::modelkit::{fetch, BackboneId, ModelSpec, Profile};
use lesionlab::phantom::{generate_dataset, PhantomParams, MANIFEST_FILE};
use lesionlab::runner::{cmd_matrix, cmd_report, cmd_run, plan_for};
use lesionlab::splits::DEFAULT_VAL_COMMON;

#[derive(Parser)]
#[command(name = "lesionlab", version, about = "OCT lesion classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic layered-tissue dataset.
    Phantom(PhantomArgs),
    /// Write a leave-one-rare-lesion-out split plan.
    Split(SplitArgs),
    /// Train and evaluate every fold of one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a backbones x regimes matrix and print the combined table.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Combine finished run directories into one table.
    Report(ReportArgs),
    /// Download a pretrained checkpoint into the cache.
    Fetch(FetchArgs),
    /// Produce a surrogate pretrained checkpoint from synthetic textures.
    Pretrain(PretrainArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 91)]
    benign: usize,
    #[arg(long, default_value_t = 9)]
    invasive: usize,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generation parameters; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    images_per_lesion: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bm_brightness: Option<f64>,
    #[arg(long)]
    bm_disruption: Option<f64>,
    #[arg(long)]
    speckle_scale: Option<f64>,
    #[arg(long)]
    hyperkeratosis_prob: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "invasive")]
    rare: String,
    #[arg(long, default_value_t = DEFAULT_VAL_COMMON)]
    val_common: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use fewer folds than rare lesions minus one.
    #[arg(long)]
    folds: Option<usize>,
    /// Defaults to plan.json next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, in row order.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    human_reference: bool,
    /// Show the invasive-class F1 instead of the macro F1.
    #[arg(long)]
    f1_invasive: bool,
    /// Also write the table (and a .json companion) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    backbone: BackboneId,
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    sha256: Option<String>,
    /// Defaults to the cache directory.
    #[arg(long)]
    dest: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    backbone: BackboneId,
    #[arg(long, default_value = "compact")]
    profile: Profile,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cache_dest(spec: &ModelSpec, explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit.or_else(|| fetch::cached_path(spec)).ok_or_else(|| {
        Error::Config(format!(
            "no destination: pass --out/--dest or set {}",
            fetch::CHECKPOINT_DIR_ENV
        ))
    })
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut p = match &a.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            PhantomParams::from_toml_str(&text)?
        }
        None => PhantomParams::default(),
    };
    if let Some(v) = a.images_per_lesion {
        p.images_per_lesion = v;
    }
    if let Some(v) = a.seed {
        p.seed = v;
    }
    if let Some(v) = a.bm_brightness {
        p.bm_brightness = v;
    }
    if let Some(v) = a.bm_disruption {
        p.bm_disruption = v;
    }
    if let Some(v) = a.speckle_scale {
        p.speckle_scale = v;
    }
    if let Some(v) = a.hyperkeratosis_prob {
        p.hyperkeratosis_prob = v;
    }
    let m = generate_dataset(&p, a.benign, a.invasive, &a.out)?;
    let c = m.counts();
    println!(
        "{}: {} lesions ({} benign, {} invasive), {} images",
        a.out.join(MANIFEST_FILE).display(),
        m.len(),
        c.benign,
        c.invasive,
        m.image_count()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let rare: LesionLabel = a.rare.parse().map_err(Error::InvalidParams)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut cfg = RunConfig::default();
    cfg.split.rare_label = rare;
    cfg.split.n_val_common = a.val_common;
    cfg.split.seed = a.seed;
    cfg.split.folds = a.folds;
    let plan = plan_for(&cfg, &manifest)?;
    let out = a
        .out
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(std::path::Path::new(".")).join("plan.json"));
    plan.save(&out)?;
    println!(
        "{}: {} folds, {} reserved {} lesion(s)",
        out.display(),
        plan.folds.len(),
        plan.reserved_rare.len(),
        rare
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom(a),
        Command::Split(a) => split(a),
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cmd_run(&cfg)?;
            print!("{}", out.table);
            Ok(())
        }
        Command::Matrix { config } => {
            let m = RunMatrix::load(&config)?;
            let out = cmd_matrix(&m)?;
            print!("{}", out.table);
            if out.failed() > 0 {
                return Err(Error::Training(format!("{} matrix cell(s) failed", out.failed())));
            }
            Ok(())
        }
        Command::Report(a) => {
            let f1 = if a.f1_invasive {
                F1Column::Invasive
            } else {
                F1Column::Macro
            };
            let (table, json) = cmd_report(&a.runs, a.human_reference, f1)?;
            if let Some(out) = a.out {
                std::fs::write(&out, &table).map_err(|e| Error::io(&out, e))?;
                let j = out.with_extension("json");
                std::fs::write(&j, json).map_err(|e| Error::io(&j, e))?;
            }
            print!("{table}");
            Ok(())
        }
        Command::Fetch(a) => {
            let spec = ModelSpec::new(a.backbone, Profile::Standard);
            let dest = cache_dest(&spec, a.dest)?;
            if let Some(dir) = dest.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let url = a.url.unwrap_or_else(|| fetch::default_url(a.backbone).to_string());
            let digest = fetch::fetch(&url, &dest, a.sha256.as_deref())?;
            println!("{}: sha256 {digest}", dest.display());
            Ok(())
        }
        Command::Pretrain(a) => {
            let spec = ModelSpec::new(a.backbone, a.profile);
            let dest = cache_dest(&spec, a.out)?;
            let mut cfg = PretrainConfig::default();
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let (ck, report) = pretrain(spec, &cfg)?;
            let digest = fetch::install(&ck, &dest)?;
            println!(
                "{}: sha256 {digest}, texture holdout accuracy {:.1}%",
                dest.display(),
                100.0 * report.holdout_accuracy
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{}]: {e}", cat.name());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
