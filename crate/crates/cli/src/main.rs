//! `cdc`: train, run and evaluate the diffusion image codec.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdc_core::checkpoint::{hex, load_model};
use cdc_core::codec::{compress, decompress, DecodeSettings};
use cdc_core::container::Bitstream;
use cdc_core::dataset::{generate_corpus, load_rgb, Dataset};
use cdc_core::fast_coder::Backend;
use cdc_core::metrics::{collect_rd, RdTable};
use cdc_core::trainer::{Adam, Trainer};
use cdc_core::Model32;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{CliConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "cdc", version, about = "Lossy image codec with a conditional diffusion decoder")]
struct Cli {
    /// TOML config with [train], [decode] and [coder] sections. Any key can
    /// also be set through CDC_<SECTION>_<KEY>, e.g. CDC_TRAIN_LR_INITIAL.
    #[arg(long, global = true, env = "CDC_CONFIG")]
    config: Option<PathBuf>,

    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model; checkpoints and the JSONL loss log go to the run directory.
    Train(TrainArgs),
    /// Encode PNG images into .cdc containers.
    Compress(CompressArgs),
    /// Decode .cdc containers into PNG images.
    Decompress(DecompressArgs),
    /// Compress/decode a directory over a settings grid and write rd.csv and rd.json.
    Eval(EvalArgs),
    /// Draw metric-vs-bpp curves from rd.csv files as SVG.
    Plot(PlotArgs),
    /// Write the deterministic synthetic corpus.
    DatasetGen(DatasetGenArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Image directory (flat PNGs or one subdirectory per clip).
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(short, long = "out", value_name = "RUN_DIR")]
    out: PathBuf,
    /// Training preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Start from these weights with a fresh optimizer and step counter.
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct CoderArgs {
    /// Accelerated range coder library; falls back to the built-in coder.
    #[arg(long, value_name = "PATH")]
    coder_lib: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output file (single input) or directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Files processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    coder: CoderArgs,
}

#[derive(Args, Debug, Clone, Default)]
struct DecodeArgs {
    /// Decoding steps (default 17 for x-prediction, 500 for ε-prediction models).
    #[arg(long)]
    steps: Option<usize>,
    /// Scale of the initial noise; 0 decodes deterministically.
    #[arg(long)]
    gamma: Option<f64>,
    /// Seed of the initial noise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Output PNG (single input) or directory.
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Also write x_n at these fractions of the decode, e.g. 0,0.3,0.6,0.9,1.
    #[arg(long, value_delimiter = ',')]
    dump_steps: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    coder: CoderArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of original PNGs.
    #[arg(long)]
    originals: PathBuf,
    /// Containers named after the originals; compressed afresh when omitted.
    #[arg(long)]
    bitstreams: Option<PathBuf>,
    /// Settings axis such as `gamma=0,0.6,0.8,1` or `steps=1,2,4,8,17`.
    /// Repeat to take the product of several axes.
    #[arg(long)]
    grid: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// ρ the model was trained with, recorded in every row.
    #[arg(long)]
    rho: Option<f64>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    coder: CoderArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// rd.csv files; each contributes its mean rows.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DatasetGenArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Train(a) => train(&cfg, a),
        Cmd::Compress(a) => compress_cmd(&cfg, a),
        Cmd::Decompress(a) => decompress_cmd(&cfg, a),
        Cmd::Eval(a) => eval(&cfg, a),
        Cmd::Plot(a) => plot::plot(&a.inputs, &a.out),
        Cmd::DatasetGen(a) => {
            let sum = generate_corpus(&a.out, a.n, a.size, a.seed)?;
            log::info!("wrote {} images of {}x{} to {} (sha256 {sum})", a.n, a.size, a.size, a.out.display());
            println!("{sum}");
            Ok(())
        }
    }
}

fn train(cfg: &CliConfig, a: TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    log::info!("{} clips under {}", data.len(), a.data.display());
    let mut trainer = if let Some(r) = &a.resume {
        let mut t = Trainer::<f32>::resume(r, data).with_context(|| format!("resuming from {}", r.display()))?;
        if let Some(s) = a.steps {
            t.cfg.n_train_steps = s;
        }
        log::info!("resumed at step {}", t.step);
        t
    } else {
        let tc = cfg.train_config(a.preset.as_deref(), a.steps, a.seed)?;
        let arch = tc.arch().map_err(Usage::from)?;
        let mut t = Trainer::<f32>::new(tc, arch, data)?;
        if let Some(p) = &a.init {
            let m = open_model(p)?;
            if m.arch != t.model.arch {
                bail!(Usage(format!("{} is a {} model, the config asks for {}", p.display(), m.arch.preset, t.model.arch.preset)));
            }
            t.model = m;
            t.opt = Adam::new(&t.model);
        }
        t
    };
    log::info!("resolved training config:\n{}", toml::to_string(&trainer.cfg)?);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), toml::to_string(&trainer.cfg)?)?;
    let every = trainer.cfg.log_every.max(1);
    trainer.run(Some(&a.out), |r| {
        if r.step % every == 0 {
            log::info!("step {:>7}  total {:.5}  D {:.5}  rate {:.1} bits  ~{:.3} bpp  lr {:.2e}", r.step, r.total, r.distortion, r.rate_bits, r.bpp_estimate, r.lr);
        }
    })?;
    log::info!("final checkpoint {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn open_model(path: &Path) -> Result<Model32> {
    let m: Model32 = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    log::info!("model {} ({} preset, {:?})", hex(&m.model_id()), m.arch.preset, m.parameterization());
    Ok(m)
}

fn backend(cfg: &CliConfig, a: &CoderArgs) -> Backend {
    Backend::detect(a.coder_lib.as_deref().or(cfg.coder.library.as_deref()))
}

/// Output path for `input`: `out` itself for a single input, else
/// `out/<stem>.<ext>`.
fn output_for(input: &Path, out: &Path, single: bool, ext: &str) -> Result<PathBuf> {
    if single && !out.is_dir() {
        if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(p)?;
        }
        return Ok(out.to_path_buf());
    }
    fs::create_dir_all(out)?;
    let stem = input.file_stem().context("input has no file name")?;
    Ok(out.join(stem).with_extension(ext))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

fn compress_files(model: &Model32, backend: &Backend, inputs: &[PathBuf], out: &Path, jobs: usize) -> Result<()> {
    let single = inputs.len() == 1;
    pool(jobs)?.install(|| {
        inputs.par_iter().try_for_each(|inp| -> Result<()> {
            let img = load_rgb(inp).with_context(|| format!("reading {}", inp.display()))?;
            let bs = compress(model, &img, backend).with_context(|| format!("compressing {}", inp.display()))?;
            let dst = output_for(inp, out, single, "cdc")?;
            fs::write(&dst, bs.to_bytes())?;
            log::info!("{} -> {} ({} bytes, {:.4} bpp)", inp.display(), dst.display(), bs.byte_len(), bs.bpp());
            Ok(())
        })
    })
}

fn compress_cmd(cfg: &CliConfig, a: CompressArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let backend = backend(cfg, &a.coder);
    compress_files(&model, &backend, &a.inputs, &a.out, a.jobs)
}

fn decompress_cmd(cfg: &CliConfig, a: DecompressArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let backend = backend(cfg, &a.coder);
    let mut settings = cfg.decode_settings(model.parameterization(), a.decode.steps, a.decode.gamma, a.decode.seed)?;
    if let Some(d) = a.dump_steps {
        settings.dump_steps = d;
    }
    settings.validate().map_err(Usage::from)?;
    log::info!("decode settings: {settings:?}");
    let single = a.inputs.len() == 1;
    pool(a.jobs)?.install(|| {
        a.inputs.par_iter().try_for_each(|inp| -> Result<()> {
            let bs = Bitstream::from_bytes(&fs::read(inp)?).with_context(|| format!("parsing {}", inp.display()))?;
            let dec = decompress(&model, &bs, &backend, &settings).with_context(|| format!("decoding {}", inp.display()))?;
            let dst = output_for(inp, &a.out, single, "png")?;
            dec.image.save(&dst)?;
            for s in &dec.snapshots {
                let name = format!("{}.step{:03}.png", dst.with_extension("").display(), (s.fraction * 100.0).round() as u32);
                s.image.save(&name)?;
            }
            log::info!("{} -> {}", inp.display(), dst.display());
            Ok(())
        })
    })
}

/// Product of the `key=v1,v2` axes over the base settings.
fn expand_grid(base: &DecodeSettings, axes: &[String]) -> Result<Vec<DecodeSettings>> {
    let mut grid = vec![base.clone()];
    for axis in axes {
        let (key, vals) = axis.split_once('=').ok_or_else(|| Usage(format!("grid axis `{axis}` is not key=v1,v2,...")))?;
        let vals: Vec<&str> = vals.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        let mut next = Vec::new();
        for g in &grid {
            for v in &vals {
                let mut s = g.clone();
                let bad = || Usage(format!("bad value `{v}` for grid axis `{key}`"));
                match key.trim() {
                    "steps" | "n_test" => s.n_test = v.parse().map_err(|_| bad())?,
                    "gamma" => s.gamma = v.parse().map_err(|_| bad())?,
                    "seed" => s.seed = Some(v.parse().map_err(|_| bad())?),
                    other => bail!(Usage(format!("unknown grid axis `{other}` (steps, gamma, seed)"))),
                }
                s.validate().map_err(Usage::from)?;
                next.push(s);
            }
        }
        grid = next;
    }
    Ok(grid)
}

fn eval(cfg: &CliConfig, a: EvalArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let backend = backend(cfg, &a.coder);
    let base = cfg.decode_settings(model.parameterization(), a.decode.steps, a.decode.gamma, a.decode.seed)?;
    let grid = expand_grid(&base, &a.grid)?;
    log::info!("{} decoder settings", grid.len());
    fs::create_dir_all(&a.out)?;
    let bitstreams = match &a.bitstreams {
        Some(b) => b.clone(),
        None => {
            let dir = a.out.join("bitstreams");
            let mut inputs: Vec<PathBuf> = fs::read_dir(&a.originals)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
            inputs.sort();
            if inputs.is_empty() {
                bail!("no PNG files in {}", a.originals.display());
            }
            compress_files(&model, &backend, &inputs, &dir, a.jobs)?;
            dir
        }
    };
    let table = collect_rd(&a.originals, &bitstreams, &grid, &model, &backend, a.rho, a.jobs)?;
    table.write_csv(&a.out.join("rd.csv"))?;
    table.write_json(&a.out.join("rd.json"))?;
    for s in &table.summary {
        log::info!(
            "steps {:>3} gamma {:.2}: {:.4} bpp  PSNR {:.2} dB  SSIM {:.4}  MS-SSIM {}",
            s.n_test,
            s.gamma,
            s.bpp,
            s.psnr_db,
            s.ssim,
            s.ms_ssim.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    log::info!("{} rows written to {}", table.points.len(), a.out.join("rd.csv").display());
    Ok(())
}

/// Only for `plot`: keeps the module's reading of tables in one place.
pub(crate) fn read_table(path: &Path) -> Result<Vec<cdc_core::metrics::RDPoint>> {
    RdTable::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let base = DecodeSettings { n_test: 17, gamma: 0.0, seed: None, dump_steps: vec![] };
        let g = expand_grid(&base, &["gamma=0,0.6,0.8,1".into()]).unwrap();
        assert_eq!(g.iter().map(|s| s.gamma).collect::<Vec<_>>(), [0.0, 0.6, 0.8, 1.0]);
        let g = expand_grid(&base, &["steps=1,2".into(), "gamma=0,1".into()]).unwrap();
        assert_eq!(g.len(), 4);
        assert!(expand_grid(&base, &["steps=".into()]).unwrap().is_empty());
        let e = expand_grid(&base, &["foo=1".into()]).unwrap_err();
        assert!(e.downcast_ref::<Usage>().is_some());
        assert!(expand_grid(&base, &["gamma=-1".into()]).is_err());
    }

    #[test]
    fn help_lists_every_flag() {
        use clap::CommandFactory;
        let mut out = String::new();
        let mut cmd = Cli::command();
        cmd.build();
        for sub in ["train", "compress", "decompress", "eval", "plot", "dataset-gen"] {
            out.push_str(&cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string());
        }
        for flag in ["--init", "--steps", "--gamma", "--seed", "--dump-steps", "--model", "--config", "--jobs", "--grid", "--n", "--size"] {
            assert!(out.contains(flag), "{flag} missing from help");
        }
    }
}
