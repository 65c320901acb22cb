//! Command-line front end: dataset generation, training, frozen-feature
//! evaluation, attention-map export, and the collapse demonstration. Every
//! result goes to stdout as a single JSON line; errors go to stderr as one
//! line. Exit codes: 0 success, 2 usage or unreadable/malformed file,
//! 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dinolab::checkpoint::{load_checkpoint, Checkpoint};
use dinolab::config::RunConfig;
use dinolab::data::{gen_toy, Dataset, GenSpec};
use dinolab::error::{Error, Result};
use dinolab::eval::{
    attention_mask, cls_patch_attention, extract_features, knn_eval, linear_probe, retrieval_map,
    FeatureBank, KNN_DEFAULT_K, KNN_DEFAULT_TAU,
};
use dinolab::image::{write_pgm, Image};
use dinolab::model::ModelConfig;
use dinolab::params::ParamSet;
use dinolab::tape::Tape;
use dinolab::train::{run_collapse_demo, run_training, CollapseMode};
use dinolab::vit::vit_forward;

#[derive(Parser)]
#[command(name = "dinolab", version, about = "Label-free self-distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shape dataset (train.dsv + test.dsv)
    GenData {
        /// key=value generation spec (gen.* keys; empty file = defaults)
        spec: PathBuf,
        /// output directory
        out: PathBuf,
    },
    /// Train a student/teacher pair from a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// output directory for metrics, eval snapshots, and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// checkpoint to continue from (config must match exactly)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score frozen features from a checkpoint
    Eval {
        #[command(subcommand)]
        what: EvalCmd,
    },
    /// Export one image's CLS attention mask as a PGM grid
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        /// P6 PPM image to probe
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        /// attention mass the kept patches must cover
        #[arg(long, default_value_t = 0.6)]
        mass: f64,
        #[arg(long, value_enum, default_value_t = Net::Teacher)]
        net: Net,
        /// output P5 PGM path (patch-grid sized, 255 = kept)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train tiny runs that show why centering and sharpening both exist
    CollapseDemo {
        #[arg(long)]
        mode: String,
        /// CSV output path (step,h,kl,ce,loss)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// override the center EMA momentum (ablation knob)
        #[arg(long)]
        center_m: Option<f64>,
    },
    /// Export one dataset image as a P6 PPM for inspection
    ExportImage {
        data: PathBuf,
        index: usize,
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Weighted k-nearest-neighbor accuracy
    Knn {
        #[arg(long)]
        ckpt: PathBuf,
        /// bank dataset (.dsv)
        #[arg(long)]
        train: PathBuf,
        /// query dataset (.dsv)
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = KNN_DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = KNN_DEFAULT_TAU)]
        tau: f64,
        /// how many final blocks' CLS outputs to concatenate
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, value_enum, default_value_t = Net::Teacher)]
        net: Net,
    },
    /// Linear probe accuracy (SGD on frozen features)
    Linear {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Net::Teacher)]
        net: Net,
    },
    /// Mean average precision for similarity ranking
    Retrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// bank dataset (.dsv)
        #[arg(long)]
        bank: PathBuf,
        /// query dataset (.dsv)
        #[arg(long)]
        queries: PathBuf,
        /// relevance file: line q lists the bank indices relevant to query
        /// q, space-separated; an empty line means none; '#' lines are
        /// comments
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, value_enum, default_value_t = Net::Teacher)]
        net: Net,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Net {
    Teacher,
    Student,
}

impl Net {
    fn name(self) -> &'static str {
        match self {
            Net::Teacher => "teacher",
            Net::Student => "student",
        }
    }
}

/// Keep the failing path in I/O error messages (the raw OS error has no
/// idea which file it was).
fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    })
}

fn read_text(path: &Path) -> Result<String> {
    with_path(fs::read_to_string(path).map_err(Error::Io), path)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    with_path(Dataset::load(path), path)
}

/// Checkpoint + the config it embeds, with the requested network selected.
struct LoadedNet {
    model: ModelConfig,
    params: ParamSet<f32>,
}

fn load_net(ckpt_path: &Path, net: Net) -> Result<LoadedNet> {
    let ckpt: Checkpoint<f32> = with_path(load_checkpoint(ckpt_path), ckpt_path)?;
    let cfg = RunConfig::from_text(&ckpt.config_text)?;
    let params = match net {
        Net::Teacher => ckpt.teacher,
        Net::Student => ckpt.student,
    };
    Ok(LoadedNet { model: cfg.model, params })
}

fn bank_from(net: &LoadedNet, path: &Path, layers: usize) -> Result<(FeatureBank, usize)> {
    let ds = load_dataset(path)?;
    let l = layers.clamp(1, net.model.vit.depth);
    Ok((extract_features(&net.model, &net.params, &ds, l)?, l))
}

/// Relevance lists, one line per query in order. Empty line = no relevant
/// items; '#' lines skipped; indices must be inside the bank.
fn load_relevance(path: &Path, n_queries: usize, bank_len: usize) -> Result<Vec<Vec<usize>>> {
    let text = read_text(path)?;
    let mut out = Vec::with_capacity(n_queries);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.starts_with('#') {
            continue;
        }
        let mut ids = Vec::new();
        for tok in t.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| Error::Config {
                line,
                msg: format!("{tok:?} is not a bank index"),
            })?;
            if id >= bank_len {
                return Err(Error::Config {
                    line,
                    msg: format!("bank index {id} out of range (bank has {bank_len})"),
                });
            }
            ids.push(id);
        }
        out.push(ids);
    }
    if out.len() != n_queries {
        return Err(Error::Config {
            line: text.lines().count(),
            msg: format!("{} relevance lines for {n_queries} queries", out.len()),
        });
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let text = read_text(&spec)?;
            let gs = GenSpec::from_text(&text)?;
            fs::create_dir_all(&out)?;
            let train = gen_toy(&gs.train, 0, "train")?;
            let test = gen_toy(&gs.test_spec(), 1, "test")?;
            let train_path = out.join("train.dsv");
            let test_path = out.join("test.dsv");
            train.save(&train_path)?;
            test.save(&test_path)?;
            println!(
                "{}",
                json!({
                    "train": train_path.display().to_string(),
                    "train_n": train.n,
                    "test": test_path.display().to_string(),
                    "test_n": test.n,
                    "side": train.h,
                    "classes": train.class_names,
                })
            );
        }
        Cmd::Train { config, out, resume } => {
            let text = read_text(&config)?;
            let cfg = RunConfig::from_text(&text)?;
            let outcome = run_training::<f32>(&cfg, &out, resume.as_deref())?;
            println!(
                "{}",
                json!({
                    "steps_run": outcome.steps_run,
                    "final_loss": outcome.final_loss,
                    "ckpt": outcome.final_ckpt.display().to_string(),
                })
            );
        }
        Cmd::Eval { what } => run_eval(what)?,
        Cmd::Attn { ckpt, image, layer, head, mass, net, out } => {
            let loaded = load_net(&ckpt, net)?;
            let img = with_path(Image::read_ppm(&image), &image)?;
            let mut tape = Tape::<f32>::inference();
            let bound = loaded.params.bind_frozen(&mut tape);
            let vout =
                vit_forward(&mut tape, &loaded.model.vit, &bound, &img.to_tensor::<f32>(), true)?;
            let attn = cls_patch_attention(&vout, layer, head)?;
            let m = attention_mask(&attn, mass)?;
            let bytes: Vec<u8> =
                m.keep.iter().map(|&k| if k { 255u8 } else { 0 }).collect();
            write_pgm(&out, m.grid, m.grid, &bytes)?;
            println!(
                "{}",
                json!({
                    "out": out.display().to_string(),
                    "grid": m.grid,
                    "kept": m.kept,
                    "kept_mass": m.kept_mass,
                    "net": net.name(),
                })
            );
        }
        Cmd::CollapseDemo { mode, out, steps, seed, center_m } => {
            let mode = CollapseMode::parse(&mode)?;
            let rows = run_collapse_demo(mode, steps, seed, center_m, Some(&out))?;
            let last = rows.last().expect("steps >= 1");
            println!(
                "{}",
                json!({
                    "mode": mode.name(),
                    "steps": steps,
                    "out": out.display().to_string(),
                    "final_h": last.h,
                    "final_kl": last.kl,
                    "final_loss": last.loss,
                })
            );
        }
        Cmd::ExportImage { data, index, out } => {
            let ds = load_dataset(&data)?;
            if index >= ds.n {
                return Err(Error::Param(format!(
                    "index {index} out of range (dataset has {})",
                    ds.n
                )));
            }
            ds.image(index).write_ppm(&out)?;
            println!(
                "{}",
                json!({
                    "out": out.display().to_string(),
                    "label": ds.labels[index],
                    "class": ds.class_names[ds.labels[index] as usize],
                })
            );
        }
    }
    Ok(())
}

fn run_eval(what: EvalCmd) -> Result<()> {
    match what {
        EvalCmd::Knn { ckpt, train, test, k, tau, layers, net } => {
            let loaded = load_net(&ckpt, net)?;
            let (bank, l) = bank_from(&loaded, &train, layers)?;
            let (queries, _) = bank_from(&loaded, &test, layers)?;
            let acc = knn_eval(&bank, &queries, k, tau)?;
            println!(
                "{}",
                json!({
                    "metric": "knn",
                    "value": acc,
                    "k": k,
                    "tau": tau,
                    "layers": l,
                    "net": net.name(),
                })
            );
        }
        EvalCmd::Linear { ckpt, train, test, layers, epochs, lr, batch, seed, net } => {
            let loaded = load_net(&ckpt, net)?;
            let (bank, l) = bank_from(&loaded, &train, layers)?;
            let (queries, _) = bank_from(&loaded, &test, layers)?;
            let acc = linear_probe(&bank, &queries, epochs, lr, batch, seed)?;
            println!(
                "{}",
                json!({
                    "metric": "linear",
                    "value": acc,
                    "epochs": epochs,
                    "lr": lr,
                    "batch": batch,
                    "layers": l,
                    "net": net.name(),
                })
            );
        }
        EvalCmd::Retrieval { ckpt, bank, queries, relevance, layers, net } => {
            let loaded = load_net(&ckpt, net)?;
            let (bank_feats, l) = bank_from(&loaded, &bank, layers)?;
            let (query_feats, _) = bank_from(&loaded, &queries, layers)?;
            let rel = load_relevance(&relevance, query_feats.len(), bank_feats.len())?;
            let map = retrieval_map(&bank_feats, &query_feats, &rel)?;
            println!(
                "{}",
                json!({
                    "metric": "retrieval_map",
                    "value": map,
                    "queries": query_feats.len(),
                    "layers": l,
                    "net": net.name(),
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Format { .. } | Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
