use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use svs_cli::server::{serve, ServeOptions};
use svs_cli::*;
use svs_core::ablation::ablation_csv;
use svs_core::train::Regime;

#[derive(Parser)]
#[command(name = "svs", version, about = "Novel view synthesis from posed images and a scene mesh")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic fixture scene.
    Generate {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "diffuse")]
        fixture: Fixture,
    },
    /// Write an untrained checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode source images and depth buffers into the feature cache.
    Setup {
        scene_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Synthesize one view.
    Render {
        scene_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Pose JSON, inline or as a file path.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a camera path (one pose JSON per line).
    RenderPath {
        scene_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Scene-agnostic training.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Fine-tune a checkpoint on one scene.
    Finetune {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_parser = parse_ft_regime)]
        regime: Regime,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score the held-out views; CSV to stdout or --csv.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aggregator, stage-count and regime comparison; CSV to stdout or --csv.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 200)]
        finetune_iters: usize,
        /// Start the regime axis from this checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// HTTP render service.
    Serve {
        scene_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Serve viewer assets from this directory instead of the built-in page.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn parse_ft_regime(s: &str) -> Result<Regime, String> {
    match s.parse::<Regime>() {
        Ok(Regime::SceneAgnostic) => Err("expected network or scene".into()),
        Ok(r) => Ok(r),
        Err(e) => Err(e.to_string()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { dir, fixture } => {
            let s = generate(&dir, fixture)?;
            println!("{}: {} sources, {} held-out", dir.display(), s.sources.len(), s.heldout.len());
        }
        Cmd::Init { out, config, seed } => {
            let ck = init_checkpoint(&out, config.as_deref(), seed)?;
            println!("{} {}", out.display(), ck.digest());
        }
        Cmd::Setup { scene_dir, ckpt } => {
            let (l, outcome) = setup(&scene_dir, &ckpt)?;
            println!("{} sources: {outcome:?} feature cache", l.bundle.len());
        }
        Cmd::Render {
            scene_dir,
            ckpt,
            pose,
            out,
        } => {
            render(&scene_dir, &ckpt, &read_pose(&pose)?, &out)?;
            println!("{}", out.display());
        }
        Cmd::RenderPath {
            scene_dir,
            ckpt,
            path,
            outdir,
        } => {
            for f in render_poses(&scene_dir, &ckpt, &path, &outdir)? {
                println!("{}", f.display());
            }
        }
        Cmd::Train {
            scenes,
            config,
            out,
            iters,
        } => {
            let r = train_scenes(&scenes, config.as_deref(), &out, iters)?;
            println!("{}", last_checkpoint(&r)?.display());
        }
        Cmd::Finetune {
            scene,
            regime,
            ckpt,
            config,
            out,
            iters,
        } => {
            let r = finetune(&scene, regime, &ckpt, config.as_deref(), &out, iters)?;
            println!("{}", last_checkpoint(&r)?.display());
        }
        Cmd::Eval { scene, ckpt, csv } => {
            let r = evaluate(&scene, &ckpt)?;
            write_text(csv.as_deref(), &r.to_csv())?;
            eprintln!("{}", r.summary());
        }
        Cmd::Ablate {
            scene,
            config,
            iters,
            finetune_iters,
            pretrained,
            csv,
        } => {
            let rows = ablate(&scene, config.as_deref(), iters, finetune_iters, pretrained.as_deref())?;
            write_text(csv.as_deref(), &ablation_csv(&rows))?;
        }
        Cmd::Serve {
            scene_dir,
            ckpt,
            port,
            host,
            workers,
            static_dir,
        } => {
            let opts = ServeOptions {
                addr: SocketAddr::new(host, port),
                workers,
                static_dir,
            };
            serve(&scene_dir, &ckpt, &opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
