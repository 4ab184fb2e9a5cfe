use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nicollide::attack::AttackKind;
use nicollide::codec::io::{load_model, save_model};
use nicollide::codec::{decompress, fit_prior, Architecture};
use nicollide::defense::LpdPolicy;
use nicollide::experiments::data::ingest_dataset;
use nicollide::experiments::store::{model_digest, train_model};
use nicollide::experiments::{ExperimentConfig, ExperimentError, Workbench};
use nicollide::imageio::{self, write_atomic};
use nicollide::tensor::Tensor;
use nicollide::theory::{linspace, theory_curve};

#[derive(Parser)]
#[command(
    name = "nicollide",
    version,
    about = "Bitstream collisions in a miniature learned image codec"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the pair-sampling seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and fit its entropy model.
    Train {
        #[arg(long, default_value = "fp-gdn")]
        arch: Architecture,
        #[arg(long, default_value_t = 1)]
        qf: u8,
        /// Directory of PPM training images; the configured training data
        /// otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Refit the entropy model of a trained model on a dataset.
    FitPrior {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Attack one pair of images.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// Source image (`.ppm` or `.raw`).
        #[arg(long)]
        src: PathBuf,
        /// Target image (`.ppm` or `.raw`).
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value = "mgd")]
        kind: AttackKind,
        /// Judge collisions with the half-precision defended pipeline.
        #[arg(long)]
        lpd: bool,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Attack success rates.
    Table1,
    /// Quality of successful collisions.
    Table2,
    /// Transfer matrix on the first dataset.
    Table3 {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Transfer matrix on the second dataset.
    Table4 {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Attack success under the limited-precision defense.
    Table5,
    /// PGD success and distortion against the perturbation budget.
    EpsSweep {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Mean bitstream length per quality preset.
    Bitlength,
    /// Compression ratio and collision distance of the thresholded codec.
    TheoryCurve {
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long, default_value_t = 6.0)]
        end: f64,
        #[arg(long, default_value_t = 61)]
        count: usize,
    },
    /// Train (or load) the lowest-preset FP-GDN model, attack the first pair
    /// of the first dataset and save every artifact.
    Demo,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(j) = common.jobs {
        c.jobs = j;
    }
    c.validate()?;
    Ok(c)
}

fn workbench(common: &Common) -> Result<Workbench, ExperimentError> {
    Workbench::new(load_config(common)?, &common.out.join("models"))
}

fn read_image(path: &Path) -> Result<Tensor, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Missing(path.display().to_string()));
    }
    let is_raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw"));
    Ok(if is_raw {
        imageio::read_raw(path)?
    } else {
        imageio::read_ppm(path)?
    })
}

fn require(path: &Path) -> Result<(), ExperimentError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ExperimentError::Missing(path.display().to_string()))
    }
}

fn dataset_arg(wb: &Workbench, name: Option<&str>, default: usize) -> Result<usize, ExperimentError> {
    match name {
        Some(n) => wb.config().dataset_index(n),
        None if default < wb.datasets().len() => Ok(default),
        None => Err(ExperimentError::Config(format!(
            "configuration has {} dataset(s); pass --dataset",
            wb.datasets().len()
        ))),
    }
}

fn emit(wb: &Workbench, out: &Path, name: &str, table: &nicollide::experiments::Table) -> Result<(), ExperimentError> {
    wb.write_table(out, name, table)?;
    print!("{}", table.to_csv(&wb.provenance()));
    Ok(())
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let common = &cli.common;
    let out = &common.out;
    match cli.command {
        Command::Train { arch, qf, data, steps } => {
            let mut config = load_config(common)?;
            if let Some(s) = steps {
                config.train.steps = s;
            }
            let images = match data {
                Some(dir) => ingest_dataset(&dir, config.image_size)?.images,
                None => config.train_data.load(config.image_size)?,
            };
            if images.is_empty() {
                return Err(ExperimentError::Missing("no training images".into()));
            }
            let model = train_model(arch, qf, &images, &config.train, config.init_seed)?;
            std::fs::create_dir_all(out)?;
            let path = out.join(format!("{arch}-qf{qf}.nicm"));
            save_model(&model, &path)?;
            println!("{} sha256={}", path.display(), model_digest(&model)?);
        }
        Command::FitPrior { model, data } => {
            require(&model)?;
            let config = load_config(common)?;
            let m = load_model(&model)?;
            let images = ingest_dataset(&data, config.image_size)?.images;
            if images.is_empty() {
                return Err(ExperimentError::Missing(format!("no images in {}", data.display())));
            }
            let prior = fit_prior(&m, &images)?;
            let m = m.with_entropy(prior)?;
            std::fs::create_dir_all(out)?;
            let name = model
                .file_name()
                .map(PathBuf::from)
                .unwrap_or_else(|| "model.nicm".into());
            let path = out.join(name);
            save_model(&m, &path)?;
            println!("{} sha256={}", path.display(), model_digest(&m)?);
        }
        Command::Attack {
            model,
            src,
            tgt,
            kind,
            lpd,
            iterations,
        } => {
            require(&model)?;
            let config = load_config(common)?;
            let m = load_model(&model)?;
            let (x_src, x_tgt) = (read_image(&src)?, read_image(&tgt)?);
            let mut ac = config.attack.clone();
            if lpd {
                ac.lpd = Some(if config.lpd.is_active() {
                    config.lpd
                } else {
                    LpdPolicy::default()
                });
            }
            if let Some(i) = iterations {
                ac.max_iterations = i;
            }
            ac.validate()?;
            let run = kind.run(&m, &x_src, &x_tgt, &ac)?;
            run.save(out)?;
            let r = run.record(0);
            println!(
                "collided={} iterations={} hamming={} l2_src={:.6} l2_tgt={:.6}",
                r.collided, r.iterations, r.hamming, r.l2_to_src, r.l2_to_tgt
            );
        }
        Command::Table1 => {
            let wb = workbench(common)?;
            wb.prepare_models()?;
            let t = wb.table1()?;
            emit(&wb, out, "table1", &t)?;
            wb.save_runs(out)?;
        }
        Command::Table2 => {
            let wb = workbench(common)?;
            wb.prepare_models()?;
            let t = wb.table2()?;
            emit(&wb, out, "table2", &t)?;
        }
        Command::Table3 { dataset } => {
            let wb = workbench(common)?;
            let d = dataset_arg(&wb, dataset.as_deref(), 0)?;
            let t = wb.transfer(d)?.table();
            emit(&wb, out, "table3", &t)?;
        }
        Command::Table4 { dataset } => {
            let wb = workbench(common)?;
            let d = dataset_arg(&wb, dataset.as_deref(), 1)?;
            let t = wb.transfer(d)?.table();
            emit(&wb, out, "table4", &t)?;
        }
        Command::Table5 => {
            let wb = workbench(common)?;
            let t = wb.table5()?;
            emit(&wb, out, "table5", &t)?;
        }
        Command::EpsSweep { dataset } => {
            let wb = workbench(common)?;
            let d = dataset_arg(&wb, dataset.as_deref(), 0)?;
            let t = wb.eps_table(d)?;
            emit(&wb, out, "eps_sweep", &t)?;
        }
        Command::Bitlength => {
            let wb = workbench(common)?;
            wb.prepare_models()?;
            let t = wb.bitlength()?;
            emit(&wb, out, "bitlength", &t)?;
        }
        Command::TheoryCurve { start, end, count } => {
            let curve = theory_curve(&linspace(start, end, count))?;
            let csv = curve.to_csv();
            std::fs::create_dir_all(out)?;
            write_atomic(&out.join("theory_curve.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Demo => {
            let wb = workbench(common)?;
            let qf = *wb.config().qfs.iter().min().expect("validated non-empty");
            let model = wb.model(Architecture::FpGdn, qf)?;
            let ds = &wb.datasets()[0];
            let (s, t) = ds.suite.pairs[0];
            let run = AttackKind::Mgd.run(&model, &ds.images[s], &ds.images[t], &wb.config().attack)?;
            let dir = out.join("demo");
            run.save(&dir)?;
            imageio::write_ppm(dir.join("x_tgt_decoded.ppm"), &decompress(&model, &run.b_tgt)?)?;
            if let Some(b) = &run.b_adv {
                imageio::write_ppm(dir.join("x_adv_decoded.ppm"), &decompress(&model, b)?)?;
            }
            let r = run.record(0);
            println!(
                "demo: {} pair ({s}, {t}) collided={} after {} iterations; artifacts in {}",
                ds.name,
                r.collided,
                r.iterations,
                dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
