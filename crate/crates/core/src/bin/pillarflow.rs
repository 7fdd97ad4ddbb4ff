use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use pillarflow::harness::dataset::{self, files_with_ext, group_by_frame, read_dataset, read_record_file, write_record_file};
use pillarflow::harness::experiment::{ablate, ablation_variants, decode_config, distribution, format_ablation, scenes, train_options};
use pillarflow::harness::gradsuite::{format_reports, run_suite};
use pillarflow::harness::model::{prepare_scene, Model, ModelConfig};
use pillarflow::harness::{evaluate, format_curve, train, FrameResult, RunConfig, DISTANCES};
use pillarflow::head::Record;
use pillarflow::params::ParamStore;
use pillarflow::tensor::checkpoint;
use pillarflow::{Error, Result};

#[derive(Parser)]
#[command(name = "pillarflow", version, about = "Pillar-graph LiDAR video detector on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences (frame files plus ground truth).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every sequence of the data directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect on the last frame of every sequence; writes `.det` records and
    /// the matching in-range ground truth as `.gt`.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP table for `.det` files against `.gt` files with the same stem.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
    },
    /// Finite-difference check of every op and block.
    Gradcheck,
    /// Module on/off grid on freshly generated data.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        eval: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gen(config: &Option<PathBuf>, seed: Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    let dir = out.clone().unwrap_or(cfg.data_dir.clone());
    let data = scenes(&distribution(&cfg), cfg.sequences, cfg.data_seed)?;
    dataset::write_dataset(&dir, &data)?;
    println!("wrote {} sequences to {}", data.len(), dir.display());
    Ok(())
}

fn run_train(config: &Option<PathBuf>, data: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let data_dir = data.clone().unwrap_or(cfg.data_dir.clone());
    let out_dir = out.clone().unwrap_or(cfg.out_dir.clone());
    let model_cfg = ModelConfig::from_run(&cfg)?;
    let grid = model_cfg.anchor_grid()?;
    let samples = read_dataset(&data_dir)?
        .iter()
        .map(|(_, s)| prepare_scene(&model_cfg, &grid, s, cfg.seq_len, true))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(model_cfg, cfg.seed);
    let curve = train(&mut model, &samples, &train_options(&cfg))?;
    fs::create_dir_all(&out_dir)?;
    checkpoint::save(&out_dir.join("model.ckpt"), model.params.entries())?;
    fs::write(out_dir.join("loss.tsv"), format_curve(&curve))?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    print!("{}", format_curve(&curve));
    Ok(())
}

fn infer(config: &Option<PathBuf>, ckpt: &Path, data: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data_dir = data.clone().unwrap_or(cfg.data_dir.clone());
    let model_cfg = ModelConfig::from_run(&cfg)?;
    let grid = model_cfg.anchor_grid()?;
    let expected = Model::new(model_cfg.clone(), 0);
    let params = ParamStore::from_entries(checkpoint::load(ckpt)?)?;
    for ((n, a), (m, b)) in expected.params.entries().iter().zip(params.entries()) {
        if n != m || a.shape() != b.shape() {
            return Err(Error::Config(format!("checkpoint parameter {m} {:?} does not match {n} {:?}", b.shape(), a.shape())));
        }
    }
    if expected.params.len() != params.len() {
        return Err(Error::Config("checkpoint parameter count does not match the config".into()));
    }
    let model = Model {
        config: model_cfg.clone(),
        params,
    };
    let decode = decode_config(&cfg);
    fs::create_dir_all(out)?;
    for (name, scene) in read_dataset(&data_dir)? {
        let sample = prepare_scene(&model_cfg, &grid, &scene, cfg.seq_len, false)?;
        let frame = scene.frames.len() - 1;
        let dets = pillarflow::harness::detect(&model, &sample, &decode)?;
        let recs: Vec<Record> = dets.iter().map(|d| Record::from_detection(frame, d)).collect();
        write_record_file(&out.join(format!("{name}.det")), &recs)?;
        let gts: Vec<Record> = sample.last().gts.iter().map(|g| Record::from_ground_truth(frame, g)).collect();
        write_record_file(&out.join(format!("{name}.gt")), &gts)?;
    }
    Ok(())
}

fn eval(dets: &Path, gts: &Path) -> Result<()> {
    let mut frames = Vec::new();
    let files = files_with_ext(dets, "det")?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .det files in {}", dets.display())));
    }
    for det_path in files {
        let stem = det_path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
        let gt_path = gts.join(stem).with_extension("gt");
        let d = group_by_frame(&read_record_file(&det_path)?);
        let g = group_by_frame(&read_record_file(&gt_path)?);
        let keys: BTreeSet<usize> = d.keys().chain(g.keys()).copied().collect();
        for k in keys {
            frames.push(FrameResult {
                detections: d.get(&k).cloned().unwrap_or_default(),
                gts: g
                    .get(&k)
                    .map(|v| {
                        v.iter()
                            .map(|b| pillarflow::head::GroundTruthBox {
                                bbox: b.bbox,
                                velocity: b.velocity,
                                class: b.class,
                            })
                            .collect()
                    })
                    .unwrap_or_default(),
            });
        }
    }
    print!("{}", pillarflow::harness::eval::format_table(&evaluate(&frames, &DISTANCES)));
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { config, seed, out } => gen(&config, seed, &out)?,
        Command::Train { config, data, out } => run_train(&config, &data, &out)?,
        Command::Infer {
            config,
            checkpoint,
            data,
            out,
        } => infer(&config, &checkpoint, &data, &out)?,
        Command::Eval { dets, gts } => eval(&dets, &gts)?,
        Command::Gradcheck => {
            let reports = run_suite();
            print!("{}", format_reports(&reports));
            return Ok(reports.iter().all(|r| r.passed()));
        }
        Command::Ablate {
            config,
            seeds,
            train,
            eval,
        } => {
            let cfg = load_config(&config)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            print!("{}", format_ablation(&ablate(&cfg, &ablation_variants(cfg.steps.max(1)), &seeds, train, eval)?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}
