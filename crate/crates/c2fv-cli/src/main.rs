//! Command-line encoder/decoder/trainer for the c2fv codec.

use anyhow::{bail, Context};
use c2fv::clip::{load_clip, save_clip_raw, save_frame_png};
use c2fv::codec::{
    decode_video_with_boost, encode_video_with_boost, ModelTables, VideoModel,
};
use c2fv::eval::{bd_quality, bd_rate, evaluate, RdCurve};
use c2fv::frame::Frame;
use c2fv::plot::{plot_rd, read_rd_table};
use c2fv::synth::{gen_synthetic, SynthConfig};
use c2fv::train::checkpoint::{load as load_ckpt, save as save_ckpt, TrainState};
use c2fv::train::{train_schedule, TrainConfig};
use c2fv::ModelConfig;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "c2fv", about = "coarse-to-fine learned video codec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Optional next-higher-lambda checkpoint for every 4th P-frame.
    #[arg(long)]
    boost_model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> anyhow::Result<(VideoModel, Option<VideoModel>)> {
        let (model, _) = load_ckpt(&self.model)
            .with_context(|| format!("loading {}", self.model.display()))?;
        let boost = match &self.boost_model {
            Some(p) => Some(load_ckpt(p).with_context(|| format!("loading {}", p.display()))?.0),
            None => None,
        };
        Ok((model, boost))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a clip (image directory or raw container) to a bitstream.
    Encode {
        #[command(flatten)]
        model: ModelArg,
        /// Group-of-pictures size.
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
    /// Decode a bitstream to a raw clip container or a PNG directory.
    Decode {
        #[command(flatten)]
        model: ModelArg,
        /// Output path: *.c2fr for a raw clip, otherwise a directory of PNGs.
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
    /// Encode + decode + report rate/quality statistics as JSON.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        /// Where to write the JSON stats (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        input: PathBuf,
    },
    /// Train a model on clips (or internally generated synthetic data).
    Train {
        /// Rate-distortion trade-off weight.
        #[arg(long, default_value_t = 512.0)]
        lambda: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training clips (repeatable). Synthetic data is generated when omitted.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// JSON file overriding the whole stage schedule.
        #[arg(long)]
        stage_config: Option<PathBuf>,
        /// Schedule preset when no stage-config is given.
        #[arg(long, default_value = "toy")]
        preset: String,
        /// Model size preset: tiny or desk.
        #[arg(long, default_value = "tiny")]
        size: String,
        /// Warm-start from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// model_id written into bitstreams.
        #[arg(long, default_value_t = 0)]
        model_id: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode/evaluate a clip at several checkpoints and plot the RD curve.
    Curve {
        /// Checkpoints, lowest lambda first.
        #[arg(long, required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        /// Output PNG path (a CSV lands next to it).
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
    /// Bjontegaard deltas between two RD tables (CSV from `curve`).
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Generate a deterministic synthetic clip.
    Synth {
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Background motion in px/frame, "dy,dx".
        #[arg(long, default_value = "1,2")]
        motion: String,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_motion(s: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("motion must be 'dy,dx'");
    }
    Ok((parts[0].trim().parse()?, parts[1].trim().parse()?))
}

fn load_models(
    arg: &ModelArg,
) -> anyhow::Result<(VideoModel, ModelTables, Option<(VideoModel, ModelTables)>)> {
    let (model, boost) = arg.load()?;
    let tables = model.tables();
    let boost = boost.map(|b| {
        let t = b.tables();
        (b, t)
    });
    Ok((model, tables, boost))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Encode {
            model,
            gop,
            out,
            input,
        } => {
            let (m, tables, boost) = load_models(&model)?;
            let frames = load_clip(&input)?;
            let boost_ref = boost.as_ref().map(|(b, t)| (b, t));
            let enc = encode_video_with_boost(&m, &tables, boost_ref, &frames, gop)?;
            std::fs::write(&out, &enc.bytes)?;
            let pixels = (frames[0].height() * frames[0].width() * frames.len()) as f64;
            println!(
                "encoded {} frames -> {} bytes ({:.4} bpp) -> {}",
                frames.len(),
                enc.bytes.len(),
                8.0 * enc.bytes.len() as f64 / pixels,
                out.display()
            );
        }
        Command::Decode { model, out, input } => {
            let (m, tables, boost) = load_models(&model)?;
            let bytes = std::fs::read(&input)?;
            let boost_ref = boost.as_ref().map(|(b, t)| (b, t));
            let frames = decode_video_with_boost(&m, &tables, boost_ref, &bytes)?;
            write_frames(&out, &frames)?;
            println!("decoded {} frames -> {}", frames.len(), out.display());
        }
        Command::Eval {
            model,
            gop,
            out,
            input,
        } => {
            let (m, tables, boost) = load_models(&model)?;
            let frames = load_clip(&input)?;
            let boost_ref = boost.as_ref().map(|(b, t)| (b, t));
            let enc = encode_video_with_boost(&m, &tables, boost_ref, &frames, gop)?;
            let stats = evaluate(&frames, &enc.reconstructions, &enc)?;
            let json = serde_json::to_string_pretty(&stats)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, &json)?;
                    println!(
                        "bpp {:.4} | psnr {:.2} dB | ms-ssim {:.4} -> {}",
                        stats.mean_bpp,
                        stats.mean_psnr,
                        stats.mean_msssim,
                        p.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Train {
            lambda,
            seed,
            data,
            stage_config,
            preset,
            size,
            init,
            model_id,
            out,
        } => {
            let mut cfg = match stage_config {
                Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => match preset.as_str() {
                    "desk" => TrainConfig::desk(lambda),
                    "toy" => TrainConfig::toy(lambda, (300, 120, 120)),
                    other => bail!("unknown preset '{other}' (expected desk|toy)"),
                },
            };
            cfg.lambda = lambda;
            cfg.seed = seed;
            let clips: Vec<Vec<Frame>> = if data.is_empty() {
                println!("no --data given; generating 8 synthetic training clips");
                (0..8)
                    .map(|i| {
                        gen_synthetic(&SynthConfig {
                            seed: seed ^ (i as u64 + 1),
                            frames: 8,
                            objects: 1 + (i % 3),
                            global_motion: (0.5 * (i % 4) as f64, 1.0 + (i % 3) as f64 * 0.5),
                            ..Default::default()
                        })
                    })
                    .collect()
            } else {
                data.iter().map(|p| load_clip(p)).collect::<Result<_, _>>()?
            };
            let mut model = match init {
                Some(p) => load_ckpt(&p)?.0,
                None => {
                    let mut mc = match size.as_str() {
                        "desk" => ModelConfig::desk(),
                        "tiny" => ModelConfig::tiny(),
                        other => bail!("unknown size '{other}' (expected desk|tiny)"),
                    };
                    mc.model_id = model_id;
                    VideoModel::new(mc, seed)
                }
            };
            let log = train_schedule(&mut model, &clips, &cfg)?;
            let state = TrainState {
                stage: cfg.stages.last().map(|s| s.stage).unwrap_or(0),
                step: cfg.total_steps(),
                lambda,
                seed,
                log,
            };
            save_ckpt(&out, &mut model, &state)?;
            println!("trained lambda={lambda} -> {}", out.display());
        }
        Command::Curve {
            models,
            gop,
            out,
            input,
        } => {
            let frames = load_clip(&input)?;
            let mut points = Vec::new();
            for p in &models {
                let (m, _) = load_ckpt(p)?;
                let tables = m.tables();
                let enc = encode_video_with_boost(&m, &tables, None, &frames, gop)?;
                let stats = evaluate(&frames, &enc.reconstructions, &enc)?;
                println!(
                    "{}: bpp {:.4}, psnr {:.2}",
                    p.display(),
                    stats.mean_bpp,
                    stats.mean_psnr
                );
                points.push((stats.mean_bpp, stats.mean_psnr));
            }
            let curve = RdCurve::new(points)?;
            plot_rd(&[("c2fv".to_string(), curve)], &out)?;
            println!("wrote {} and {}", out.display(), out.with_extension("csv").display());
        }
        Command::Bdrate { anchor, test } => {
            let a = read_rd_table(&anchor)?;
            let t = read_rd_table(&test)?;
            let (Some((_, ac)), Some((_, tc))) = (a.first(), t.first()) else {
                bail!("empty RD tables");
            };
            println!("BD-rate: {:+.2}%", bd_rate(ac, tc)?);
            println!("BD-PSNR: {:+.3} dB", bd_quality(ac, tc)?);
        }
        Command::Synth {
            width,
            height,
            frames,
            seed,
            motion,
            objects,
            out,
        } => {
            let clip = gen_synthetic(&SynthConfig {
                width,
                height,
                frames,
                seed,
                global_motion: parse_motion(&motion)?,
                objects,
                texture_cells: 9,
            });
            write_frames(&out, &clip)?;
            println!("wrote {frames} frames -> {}", out.display());
        }
    }
    Ok(())
}

fn write_frames(out: &std::path::Path, frames: &[Frame]) -> anyhow::Result<()> {
    if out.extension().is_some_and(|e| e == "c2fr") {
        save_clip_raw(out, frames)?;
    } else {
        std::fs::create_dir_all(out)?;
        for (i, f) in frames.iter().enumerate() {
            save_frame_png(&out.join(format!("frame{i:04}.png")), f)?;
        }
    }
    Ok(())
}
