use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use semiseg::config::RunConfig;
use semiseg::formats::{self, Checkpoint};
use semiseg::infer::{ensemble, tta_predict, ProbMap, TtaConfig};
use semiseg::metrics::{self, Predictions};
use semiseg::pipeline::{self, Role};
use semiseg::synthdata::{generate_dataset, generate_heldout, ClipSpec, Frame};
use semiseg::Error;

#[derive(Parser)]
#[command(name = "semiseg", version, about = "Semi-supervised video segmentation on synthetic clips")]
struct Cli {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (plus `heldout/`) into the output directory
    GenData,
    /// Supervised training of one model on labeled clips
    Train {
        #[arg(long)]
        role: String,
    },
    /// Pseudo labels for unlabeled frames from the teacher + student ensemble
    PseudoGen {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Semi-supervised fine-tuning of the student
    Finetune {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Per-frame probabilities and labels with TTA and optional ensembling
    Infer {
        /// A `.fimg` file or a dataset directory
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "ensemble")]
        ckpt: Option<PathBuf>,
        /// `ckpt1,ckpt2[,w1,w2]`
        #[arg(long)]
        ensemble: Option<String>,
        /// Comma-separated scales; defaults to the config's
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        flip: Option<bool>,
        #[arg(long)]
        out_probs: Option<PathBuf>,
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
    /// Metrics of predicted label maps against a labeled dataset directory
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<clip>/frame_<k>.lmap`
        #[arg(long)]
        pred: PathBuf,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// All three stages and the held-out comparison
    RunAll,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn parse_scales(s: &str) -> anyhow::Result<Vec<f64>> {
    let mut probe = RunConfig::default();
    probe.set("tta.scales", s)?;
    Ok(probe.tta_scales)
}

fn parse_ensemble(spec: &str) -> anyhow::Result<(Vec<PathBuf>, Option<Vec<f64>>)> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let weights: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    let paths: Vec<PathBuf> = parts
        .iter()
        .filter(|p| p.parse::<f64>().is_err())
        .map(PathBuf::from)
        .collect();
    if paths.len() < 2 {
        bail!("--ensemble needs at least two checkpoints");
    }
    if !weights.is_empty() && weights.len() != paths.len() {
        bail!("--ensemble got {} weights for {} checkpoints", weights.len(), paths.len());
    }
    Ok((paths, (!weights.is_empty()).then_some(weights)))
}

/// `(clip_id, frame index, frame)`; a single file becomes clip `frame`, index 0.
fn input_frames(input: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<(String, usize, Frame)>> {
    if input.is_file() {
        let frame = Frame::new(formats::read_fimg(input)?)?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "frame".into());
        return Ok(vec![(stem, 0, frame)]);
    }
    let data = pipeline::load_dataset(input, cfg.num_classes, cfg.seed)?;
    Ok(data
        .labeled
        .into_iter()
        .chain(data.unlabeled)
        .flat_map(|c| {
            let id = c.clip_id;
            c.frames
                .into_iter()
                .enumerate()
                .map(move |(k, f)| (id.clone(), k, f))
        })
        .collect())
}

fn frame_path(root: &Path, clip: &str, k: usize, ext: &str) -> PathBuf {
    root.join(clip).join(format!("frame_{k}.{ext}"))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let out = cfg.out.clone();
    match cli.command {
        Command::GenData => {
            let data = generate_dataset(
                cfg.num_classes,
                cfg.num_clips,
                cfg.frames_per_clip,
                cfg.height,
                cfg.width,
                cfg.labeled_fraction,
                cfg.seed,
            )?;
            pipeline::save_dataset(&out, &data)?;
            let spec = ClipSpec {
                num_classes: cfg.num_classes,
                frames_per_clip: cfg.eval_frames,
                height: cfg.height,
                width: cfg.width,
            };
            pipeline::save_clips(&out.join("heldout"), &generate_heldout(spec, cfg.eval_clips, cfg.seed)?)?;
            println!(
                "{} labeled and {} unlabeled clips written to {}",
                data.labeled.len(),
                data.unlabeled.len(),
                out.display()
            );
        }
        Command::Train { role } => {
            let role: Role = role.parse()?;
            let data = pipeline::load_training_data(&cfg)?;
            let outcome = pipeline::stage_supervised(&cfg, &data, role)?;
            let name = match role {
                Role::Teacher => "teacher",
                Role::Student => "student_sup",
            };
            outcome.checkpoint.save(&out.join(format!("{name}.ckpt")))?;
            formats::write_file(
                &out.join(format!("logs/{}.log", role.name())),
                outcome.log_text(0).as_bytes(),
            )?;
            if let Some(last) = outcome.log.last() {
                println!("{}", last.log_line(outcome.checkpoint.iteration - 1));
            }
        }
        Command::PseudoGen { teacher, student } => {
            let data = pipeline::load_training_data(&cfg)?;
            let t = Checkpoint::load(&teacher.unwrap_or_else(|| out.join("teacher.ckpt")))?;
            let s = Checkpoint::load(&student.unwrap_or_else(|| out.join("student_sup.ckpt")))?;
            let set = pipeline::stage_pseudolabel(&cfg, &data, &t, &s)?;
            pipeline::save_pseudo(&out.join("pseudo"), &set)?;
            println!("gamma {} over {} frames", set.gamma, set.labels.len());
        }
        Command::Finetune { student, pseudo } => {
            let data = pipeline::load_training_data(&cfg)?;
            let s = Checkpoint::load(&student.unwrap_or_else(|| out.join("student_sup.ckpt")))?;
            let set = pipeline::load_pseudo(&pseudo.unwrap_or_else(|| out.join("pseudo")), &data)?;
            let outcome = pipeline::stage_finetune(&cfg, &data, &s, &set)?;
            outcome.checkpoint.save(&out.join("student_semi.ckpt"))?;
            formats::write_file(
                &out.join("logs/finetune.log"),
                outcome.log_text(s.iteration).as_bytes(),
            )?;
        }
        Command::Infer {
            input,
            ckpt,
            ensemble: ens,
            scales,
            flip,
            out_probs,
            out_labels,
        } => {
            let tta = TtaConfig {
                scales: match scales {
                    Some(s) => parse_scales(&s)?,
                    None => cfg.tta_scales.clone(),
                },
                flip: flip.unwrap_or(cfg.tta_flip),
                base: None,
            };
            let (paths, weights) = match (ckpt, ens) {
                (Some(c), None) => (vec![c], None),
                (None, Some(spec)) => parse_ensemble(&spec)?,
                _ => bail!("give either --ckpt or --ensemble"),
            };
            let models = paths
                .iter()
                .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if out_probs.is_none() && out_labels.is_none() {
                bail!("nothing to write: pass --out-probs and/or --out-labels");
            }
            let frames = input_frames(&input, &cfg)?;
            for (clip, k, frame) in &frames {
                let members = models
                    .iter()
                    .map(|m| tta_predict(&m.params, frame, &tta))
                    .collect::<semiseg::Result<Vec<ProbMap>>>()?;
                let fused = if members.len() == 1 {
                    members.into_iter().next().expect("one member")
                } else {
                    let refs: Vec<&ProbMap> = members.iter().collect();
                    ensemble(&refs, weights.as_deref())?
                };
                if let Some(dir) = &out_probs {
                    formats::write_file(&frame_path(dir, clip, *k, "pmap"), &formats::encode_pmap(fused.map())?)?;
                }
                if let Some(dir) = &out_labels {
                    formats::write_file(&frame_path(dir, clip, *k, "lmap"), &formats::encode_lmap(&fused.argmax())?)?;
                }
            }
            println!("{} frames", frames.len());
        }
        Command::Evaluate { data, pred, csv } => {
            let set = pipeline::load_dataset(&data, cfg.num_classes, cfg.seed)?;
            let mut preds = Predictions::new();
            let mut missing = Vec::new();
            for clip in &set.labeled {
                for k in 0..clip.frames.len() {
                    let p = frame_path(&pred, &clip.clip_id, k, "lmap");
                    match formats::read_lmap(&p) {
                        Ok(m) => {
                            preds.insert((clip.clip_id.clone(), k), m);
                        }
                        Err(Error::Io(_)) => missing.push(p),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            if !missing.is_empty() {
                for p in &missing {
                    eprintln!("missing prediction: {}", p.display());
                }
                return Ok(ExitCode::from(2));
            }
            let report = metrics::evaluate(&set.labeled, &preds, &cfg.vc_windows)?;
            match csv {
                Some(p) => formats::write_file(&p, report.to_csv().as_bytes())?,
                None => print!("{}", report.to_csv()),
            }
        }
        Command::RunAll => {
            let summary = pipeline::run_all(&cfg)?;
            print!("{}", summary.comparison_csv(&cfg.vc_windows));
            if let Some(q) = summary.pseudo_quality {
                println!(
                    "pseudo labels: retained accuracy {:.4}, argmax accuracy {:.4}, retained {:.3}",
                    q.retained_accuracy, q.argmax_accuracy, q.retained_fraction
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
