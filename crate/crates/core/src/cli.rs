//! The `convdraw` command line.
//!
//! Settings layer as defaults < `--config` file < `--set` flags. Keys are
//! dotted: `model.*`, `train.*` and `data.*`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::analysis::{
    chunk_rows, default_t_list, emit_grid, evaluate, parse_ppm, progression_sheet, rgb_to_batch,
    Rgb,
};
use crate::codec::{compress, decompress, has_codec_grids, Bitstream, CodecModel};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{parse_kv, ConvDraw, ModelConfig};
use crate::nn::{Checkpoint, Real};
use crate::train::{
    bench_csv, bench_depth, load_dataset, synth, Dataset, DatasetFormat, DatasetSpec, TrainConfig,
    Trainer,
};

/// Seed used when `--seed` is absent.
pub const DEFAULT_SEED: u64 = 20160;
/// Images used to calibrate codec grids after training.
const CALIBRATION_IMAGES: usize = 64;

#[derive(Parser, Debug)]
#[command(
    name = "convdraw",
    version,
    about = "Convolutional DRAW: training, likelihoods and progressive compression"
)]
struct Cli {
    /// Key-value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.timesteps=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Arithmetic precision: f32 or f64.
    #[arg(long, global = true, default_value = "f32")]
    precision: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes model.ckpt and train_log.csv to --out.
    Train {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Variational bound on the validation split.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 1)]
        draws: usize,
        /// Evaluate the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Encode one image (raw C x H x W bytes or PPM).
    Compress {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        t_keep: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Rate breakdown as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        output: Option<PathBuf>,
    },
    /// Decode a bitstream to raw bytes, or PPM when the output ends in `.ppm`.
    Decompress {
        #[command(flatten)]
        model: ModelArg,
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        output: Option<PathBuf>,
    },
    /// Unconditional samples as a PPM sheet.
    Sample {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value = "samples.ppm")]
        out: PathBuf,
    },
    /// Per-step, per-layer KL over the validation split as CSV.
    Profile {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value = "kl_profile.csv")]
        out: PathBuf,
    },
    /// Loss against examples seen for several step counts.
    Bench {
        /// Comma-separated step counts.
        #[arg(long, default_value = "2,4,8")]
        n_t: String,
        /// Examples per configuration.
        #[arg(long, default_value_t = 512)]
        examples: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Reconstructions at increasing numbers of kept steps.
    Progression {
        #[command(flatten)]
        model: ModelArg,
        /// Comma-separated `t_keep` values; defaults to a schedule scaled to T.
        #[arg(long)]
        t_list: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Validation images to show when no inputs are given.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "progression.ppm")]
        out: PathBuf,
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Checkpoint written by `train`.
    #[arg(long = "model")]
    path: PathBuf,
}

/// Dataset settings (`data.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// File of raw images, or `glyphs` / `blobs` for generated data.
    pub source: String,
    pub format: DatasetFormat,
    pub train: usize,
    pub valid: usize,
    pub shuffle_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "glyphs".into(),
            format: DatasetFormat::RawU8,
            train: 1000,
            valid: 200,
            shuffle_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("bad value `{v}` for `data.{key}`"));
        match key {
            "path" | "source" => self.source = v.to_string(),
            "format" => self.format = v.parse()?,
            "train" => self.train = v.parse().map_err(|_| bad())?,
            "valid" => self.valid = v.parse().map_err(|_| bad())?,
            "shuffle_seed" => self.shuffle_seed = v.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown data key `{other}`"))),
        }
        Ok(())
    }

    /// `(train, valid)` for images of the given dims.
    pub fn load(&self, c: usize, h: usize, w: usize) -> Result<(Dataset, Dataset)> {
        let generated = match self.source.as_str() {
            "glyphs" if c == 1 && h == w => Some(synth::glyphs(
                self.train + self.valid,
                h,
                50,
                self.shuffle_seed,
            )),
            "blobs" if c == 3 && h == w => Some(synth::color_blobs(
                self.train + self.valid,
                h,
                self.shuffle_seed,
            )),
            "glyphs" | "blobs" => {
                return Err(Error::Dataset(format!(
                    "generated `{}` data cannot have shape {c}x{h}x{w}",
                    self.source
                )))
            }
            _ => None,
        };
        if let Some(all) = generated {
            let (valid, train) = all.split_at(self.valid);
            return Ok((train, valid));
        }
        load_dataset(&DatasetSpec {
            path: PathBuf::from(&self.source),
            format: self.format,
            channels: c,
            height: h,
            width: w,
            train: self.train,
            valid: self.valid,
            shuffle_seed: self.shuffle_seed,
        })
    }
}

/// Everything configurable from files and `--set`.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Whether any `model.*` key was given.
    pub model_keys: bool,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", k)) => {
                self.model_keys = true;
                self.model.set(k, value)
            }
            Some(("train", k)) => self.train.set(k, value),
            Some(("data", k)) => self.data.set(k, value),
            _ => Err(Error::Config(format!(
                "unknown key `{key}` (keys start with model., train. or data.)"
            ))),
        }
    }

    pub fn load(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_kv(&text)? {
                s.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {o}` is not KEY=VALUE")))?;
            s.set(k.trim(), v)?;
        }
        s.model.validate()?;
        s.train.validate()?;
        Ok(s)
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CONVDRAW_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 for usage errors, 2 for data or model
/// errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.precision.as_str() {
        "f32" => dispatch::<f32>(&cli),
        "f64" => dispatch::<f64>(&cli),
        p => Err(Error::Config(format!(
            "precision must be f32 or f64, got `{p}`"
        ))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => {
                    eprintln!("usage: convdraw <train|eval|compress|decompress|sample|profile|bench|progression> [options]; see --help");
                    1
                }
                _ => 2,
            }
        }
    }
}

fn load_model<R: Real>(path: &Path) -> Result<ConvDraw<R>> {
    ConvDraw::from_checkpoint(&Checkpoint::read(path)?)
}

fn load_codec<R: Real>(path: &Path) -> Result<CodecModel<R>> {
    CodecModel::from_checkpoint(&Checkpoint::read(path)?)
}

/// Settings for a command on a trained checkpoint; any `model.*` keys must
/// agree with the checkpoint's configuration.
fn settings_for_model(cli: &Cli, model: &ModelConfig) -> Result<Settings> {
    let s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
    if s.model_keys && s.model != *model {
        return Err(Error::Config(
            "model.* settings disagree with the checkpoint's configuration".into(),
        ));
    }
    Ok(s)
}

fn read_image<R: Real>(path: &Path, cfg: &ModelConfig) -> Result<ImageBatch<R>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let batch = if bytes.starts_with(b"P6") {
        let img = parse_ppm(&bytes)?;
        rgb_to_batch(&img, cfg.channels, cfg.quant_step)?
    } else {
        ImageBatch::from_u8(
            &bytes,
            1,
            cfg.channels,
            cfg.height,
            cfg.width,
            cfg.quant_step,
        )?
    };
    let s = batch.x.shape();
    if (s.c, s.h, s.w) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Dataset(format!(
            "{}: image is {}x{}x{}, model expects {}x{}x{}",
            path.display(),
            s.c,
            s.h,
            s.w,
            cfg.channels,
            cfg.height,
            cfg.width
        )));
    }
    Ok(batch)
}

fn write_image<R: Real>(img: &ImageBatch<R>, path: &Path) -> Result<()> {
    let bytes = img.to_u8();
    let out = if path.extension().is_some_and(|e| e == "ppm") {
        let s = img.x.shape();
        let plane = s.h * s.w;
        let data = (0..plane)
            .flat_map(|p| (0..3).map(move |ch| (p, ch)))
            .map(|(p, ch)| bytes[if s.c == 1 { p } else { ch * plane + p }])
            .collect();
        crate::analysis::ppm_bytes(&Rgb {
            width: s.w,
            height: s.h,
            data,
        })
    } else {
        bytes
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad number `{t}` in list `{s}`")))
        })
        .collect()
}

fn output_path(out: &Option<PathBuf>, positional: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone()
        .or_else(|| positional.clone())
        .ok_or_else(|| Error::Config(format!("{what} needs an output path")))
}

fn dispatch<R: Real>(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Train { out } => {
            let mut s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
            s.train.seed = cli.seed;
            let cfg = s.model.clone();
            let (train, _) = s.data.load(cfg.channels, cfg.height, cfg.width)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let model = ConvDraw::<R>::new(cfg.clone(), cli.seed)?;
            let ckpt_every = s.train.checkpoint_every;
            let mut trainer = Trainer::new(model, s.train.clone())?;
            let ckpt_path = out.join("model.ckpt");
            trainer.fit(&train, |t, r| {
                if ckpt_every > 0 && r.step % ckpt_every == 0 {
                    t.model().to_checkpoint(true).write(&ckpt_path)?;
                }
                Ok(())
            })?;
            trainer.log.write_csv(out.join("train_log.csv"))?;
            let model = trainer.into_model();
            let ckpt = if cfg.fixed_posterior_variance {
                let n = train.len().min(CALIBRATION_IMAGES);
                let idx: Vec<usize> = (0..n).collect();
                let cm = CodecModel::calibrate(model, &train.batch(&idx, cfg.quant_step))?;
                cm.to_checkpoint(true)
            } else {
                model.to_checkpoint(true)
            };
            ckpt.write(&ckpt_path)?;
            println!("wrote {}", ckpt_path.display());
        }
        Command::Eval {
            model,
            draws,
            train_split,
        } => {
            let m = load_model::<R>(&model.path)?;
            let cfg = m.config();
            let s = settings_for_model(cli, cfg)?;
            let (train, valid) = s.data.load(cfg.channels, cfg.height, cfg.width)?;
            let data = if *train_split { &train } else { &valid };
            let mut r = evaluate(&m, data, *draws, 32, cli.seed)?.0;
            r.dataset = if *train_split { "train" } else { "valid" }.into();
            println!("{}", r.summary());
            println!("nats {:?}", r.nats);
            println!("bits_per_dim {:?}", r.bits_per_dim);
        }
        Command::Compress {
            model,
            t_keep,
            lambda,
            report,
            input,
            out,
            output,
        } => {
            let out = output_path(out, output, "compress")?;
            let cm = load_codec::<R>(&model.path)?;
            let cfg = cm.model().config();
            let img = read_image::<R>(input, cfg)?;
            let c = compress(
                &cm,
                &img,
                t_keep.unwrap_or(cfg.timesteps),
                *lambda,
                cli.seed,
            )?;
            let bytes = c.bitstream.to_bytes();
            std::fs::write(&out, &bytes).map_err(|e| Error::io(&out, e))?;
            if let Some(p) = report {
                std::fs::write(p, c.report.to_csv()).map_err(|e| Error::io(p, e))?;
            }
            info!("{}", c.report.summary());
            println!("wrote {} ({} bytes)", out.display(), bytes.len());
        }
        Command::Decompress {
            model,
            input,
            out,
            output,
        } => {
            let out = output_path(out, output, "decompress")?;
            let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let ckpt = Checkpoint::read(&model.path)?;
            if !has_codec_grids(&ckpt) {
                return Err(Error::Format(format!(
                    "{} has no codec grids",
                    model.path.display()
                )));
            }
            let cm = CodecModel::<R>::from_checkpoint(&ckpt)?;
            let img = decompress(&cm, &bs, cli.seed)?;
            write_image(&img, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sample {
            model,
            n,
            lambda,
            out,
        } => {
            let m = load_model::<R>(&model.path)?;
            let samples = m.sample(*n, *lambda, cli.seed)?;
            emit_grid(&chunk_rows(&samples, 8), out)?;
            println!("wrote {}", out.display());
        }
        Command::Profile { model, out } => {
            let m = load_model::<R>(&model.path)?;
            let cfg = m.config();
            let s = settings_for_model(cli, cfg)?;
            let (_, valid) = s.data.load(cfg.channels, cfg.height, cfg.width)?;
            let p = evaluate(&m, &valid, 1, 32, cli.seed)?.1;
            std::fs::write(out, p.to_csv()).map_err(|e| Error::io(out, e))?;
            println!("total KL {:.4} nats; wrote {}", p.total(), out.display());
        }
        Command::Bench { n_t, examples, out } => {
            let s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
            let cfg = &s.model;
            let (train, _) = s.data.load(cfg.channels, cfg.height, cfg.width)?;
            let rows = bench_depth::<R>(
                cfg,
                &parse_list(n_t)?,
                &train,
                &s.train,
                *examples,
                cli.seed,
            )?;
            std::fs::write(out, bench_csv(&rows)).map_err(|e| Error::io(out, e))?;
            println!("wrote {}", out.display());
        }
        Command::Progression {
            model,
            t_list,
            lambda,
            count,
            out,
            inputs,
        } => {
            let m = load_model::<R>(&model.path)?;
            let cfg = m.config().clone();
            let images = if inputs.is_empty() {
                let s = settings_for_model(cli, &cfg)?;
                let (_, valid) = s.data.load(cfg.channels, cfg.height, cfg.width)?;
                let idx: Vec<usize> = (0..valid.len().min(*count)).collect();
                valid.batch::<R>(&idx, cfg.quant_step)
            } else {
                let parts = inputs
                    .iter()
                    .map(|p| read_image::<R>(p, &cfg))
                    .collect::<Result<Vec<_>>>()?;
                let shape = parts[0].x.shape().with_n(parts.len());
                let data = parts
                    .iter()
                    .flat_map(|b| b.x.data().iter().copied())
                    .collect();
                ImageBatch::new(crate::nn::Tensor4::new(shape, data)?, cfg.quant_step)
            };
            let ts = match t_list {
                Some(t) => parse_list(t)?,
                None => default_t_list(cfg.timesteps),
            };
            progression_sheet(&m, &images, &ts, *lambda, cli.seed, out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "model.timesteps = 6\ntrain.lr = 0.01\n").unwrap();
        let s = Settings::load(Some(&path), &["model.timesteps=3".into()]).unwrap();
        assert_eq!(s.model.timesteps, 3);
        assert_eq!(s.train.adam.lr, 0.01);
        assert!(Settings::load(None, &["model.bogus=1".into()]).is_err());
        assert!(Settings::load(None, &["timesteps=1".into()]).is_err());
        assert!(Settings::load(None, &["data.path".into()]).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["convdraw", "frobnicate"]), 1);
        assert_eq!(run(["convdraw", "train", "--set", "nope=1"]), 1);
        assert_eq!(
            run(["convdraw", "eval", "--model", "/nonexistent/m.ckpt"]),
            2
        );
    }
}
