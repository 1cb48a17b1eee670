use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pi_trans::ablate;
use pi_trans::analyze::analyze_model;
use pi_trans::config::RunConfig;
use pi_trans::data::{self, Split};
use pi_trans::gan::PatchDiscriminator;
use pi_trans::generator::{Generator, Variant};
use pi_trans::nn::Mode;
use pi_trans::suite::{render_suite, run_gradcheck_suite};
use pi_trans::tensor::{self, Rng, Tape};
use pi_trans::trainer::{read_checkpoint_config, TrainSettings, Trainer};
use pi_trans::{Error, Result};

#[derive(Parser)]
#[command(name = "pi-trans", version, about = "Cross-view image translation: synthetic data, training, inference, gradient checks, complexity analysis and ablations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoints and CSV logs.
    Train {
        /// key=value config file (desk defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base preset the config file overrides.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u32>,
        /// Ablation variant: A, E or F.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        /// Also save a checkpoint every N epochs.
        #[arg(long)]
        save_every: Option<u32>,
        /// Resume from a checkpoint written by a compatible run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a checkpointed generator on one (aerial, semantic) pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        aerial: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        /// Writes <prefix>_direct.ppm and <prefix>_fused.ppm.
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check every differentiable primitive and block against central
    /// finite differences.
    Gradcheck {
        /// Number of probe seeds per item.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Print the parameter / MAC report for a configuration.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        preset: String,
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train variants A, E and F on shared seeds and tabulate held-out L1.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, default_value = "7,8,9")]
        seeds: String,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>, preset: &str) -> Result<RunConfig> {
    let base = RunConfig::preset(preset)?;
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            RunConfig::parse(&text, base)
        }
        None => Ok(base),
    }
}

fn write_file(path: &PathBuf, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { seed, count, size, out } => {
            data::write_dataset(&out, seed, count, size)?;
            println!(
                "wrote {count} triplets ({size}x{size}) and split.txt to {}",
                out.display()
            );
            Ok(())
        }

        Cmd::Train {
            config,
            preset,
            data: data_dir,
            out,
            seed,
            epochs,
            variant,
            threads,
            save_every,
            resume,
        } => {
            let mut run_cfg = load_config(&config, &preset)?;
            if let Some(s) = seed {
                run_cfg.gen.seed = s;
            }
            if let Some(e) = epochs {
                run_cfg.train.epochs = e;
            }
            if let Some(v) = &variant {
                run_cfg.gen = run_cfg.gen.with_variant(Variant::parse(v)?);
            }
            if let Some(t) = threads {
                run_cfg.threads = t;
            }
            tensor::set_threads(run_cfg.threads);
            let data_dir = data_dir
                .or(run_cfg.data_dir.clone())
                .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".to_string()))?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let resolved = run_cfg.render();
            print!("resolved config:\n{resolved}");
            write_file(&out.join("config_resolved.cfg"), &resolved)?;

            let train_set = data::load_dataset(&data_dir, Split::Train)?;
            let test_set = data::load_dataset(&data_dir, Split::Test)?;
            println!("dataset: {} train / {} test triplets", train_set.len(), test_set.len());

            let mut trainer = match &resume {
                Some(ckpt) => Trainer::load_checkpoint(ckpt, run_cfg.gen.clone(), run_cfg.train.clone())?,
                None => Trainer::new(run_cfg.gen.clone(), run_cfg.train.clone())?,
            };

            let out_dir = out.clone();
            let outcome = trainer.run(&train_set, &test_set, |t, eval| {
                println!(
                    "epoch {:>3}: held-out L1 direct {:.6}  fused {:.6}",
                    eval.epoch, eval.l1_direct, eval.l1_fused
                );
                if let Some(k) = save_every {
                    if k > 0 && eval.epoch % k == 0 {
                        t.save_checkpoint(&out_dir.join(format!("checkpoint_epoch_{:03}.pitr", eval.epoch)))?;
                    }
                }
                Ok(())
            })?;

            trainer.save_checkpoint(&out.join("checkpoint.pitr"))?;
            write_file(&out.join("loss.csv"), &outcome.loss_csv)?;
            let mut eval_csv = String::from("epoch,l1_direct,l1_fused\n");
            for e in &outcome.eval_history {
                eval_csv.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.l1_direct, e.l1_fused));
            }
            write_file(&out.join("eval.csv"), &eval_csv)?;
            println!("wrote checkpoint.pitr, loss.csv, eval.csv to {}", out.display());
            Ok(())
        }

        Cmd::Infer { checkpoint, aerial, semantic, out_prefix, threads } => {
            tensor::set_threads(threads.unwrap_or(1));
            let (gen_cfg, d_cfg) = read_checkpoint_config(&checkpoint)?;
            let settings = TrainSettings { d_config: d_cfg, ..TrainSettings::default() };
            let trainer = Trainer::load_checkpoint(&checkpoint, gen_cfg, settings)?;

            let a_img = data::ppm_read(&aerial)?;
            let s_img = data::ppm_read(&semantic)?;
            let a = batch1(&data::image_to_tensor(&a_img));
            let s = batch1(&data::image_to_tensor(&s_img));
            let mut tape = Tape::no_grad();
            let out = trainer.gen.forward(&mut tape, &a, &s, Mode::Eval)?;

            let direct = data::tensor_to_image(&out.direct)?;
            let fused = data::tensor_to_image(&out.fused)?;
            let dir_path = with_suffix(&out_prefix, "_direct.ppm");
            let fus_path = with_suffix(&out_prefix, "_fused.ppm");
            data::ppm_write(&direct, &dir_path)?;
            data::ppm_write(&fused, &fus_path)?;
            println!("wrote {} and {}", dir_path.display(), fus_path.display());
            Ok(())
        }

        Cmd::Gradcheck { seeds } => {
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| 17 + i).collect();
            let entries = run_gradcheck_suite(&seed_list)?;
            print!("{}", render_suite(&entries));
            if entries.iter().all(|e| e.passed()) {
                println!("all {} checks passed", entries.len());
                Ok(())
            } else {
                let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
                Err(Error::Config(format!("gradcheck failures: {}", failed.join(", "))))
            }
        }

        Cmd::Analyze { config, preset, csv } => {
            let run_cfg = load_config(&config, &preset)?;
            let gen = Generator::new(run_cfg.gen.clone())?;
            let seed = run_cfg.gen.seed;
            let d1 = PatchDiscriminator::new(&run_cfg.train.d_config, &mut Rng::new(seed, "d_direct"))?;
            let d2 = PatchDiscriminator::new(&run_cfg.train.d_config, &mut Rng::new(seed, "d_final"))?;
            let report = analyze_model(&gen, &d1, &d2);

            println!("feature levels (channels, side):");
            let ch = run_cfg.gen.level_channels();
            let sz = run_cfg.gen.level_sizes();
            for i in 0..4 {
                println!("  L{}: ({}, {}, {})", i + 1, ch[i], sz[i], sz[i]);
            }
            println!();
            print!("{}", report.render_text());
            if let Some(path) = csv {
                write_file(&path, &report.render_csv())?;
                println!("wrote per-layer CSV to {}", path.display());
            }
            Ok(())
        }

        Cmd::Ablate { config, preset, data: data_dir, out, seeds, epochs, threads } => {
            let mut run_cfg = load_config(&config, &preset)?;
            if let Some(e) = epochs {
                run_cfg.train.epochs = e;
            }
            if let Some(t) = threads {
                run_cfg.threads = t;
            }
            tensor::set_threads(run_cfg.threads);
            let data_dir = data_dir
                .or(run_cfg.data_dir.clone())
                .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".to_string()))?;
            let seed_list: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad seed '{s}' in --seeds")))
                })
                .collect::<Result<_>>()?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let train_set = data::load_dataset(&data_dir, Split::Train)?;
            let test_set = data::load_dataset(&data_dir, Split::Test)?;
            println!(
                "ablation over variants A/E/F, seeds {seed_list:?}, {} epochs, {} train / {} test",
                run_cfg.train.epochs,
                train_set.len(),
                test_set.len()
            );

            let runs = ablate::run_ablation(
                &train_set,
                &test_set,
                &run_cfg.gen,
                &run_cfg.train,
                &seed_list,
                |r| {
                    println!(
                        "variant {} seed {}: held-out L1 fused {:.6} ({:.0}s)",
                        r.variant.code(),
                        r.seed,
                        r.final_l1_fused(),
                        r.wall_secs
                    );
                },
            )?;

            let table = ablate::render_table(&runs, &seed_list);
            print!("\n{table}");
            write_file(&out.join("ablation.csv"), &ablate::render_csv(&runs))?;
            println!("wrote ablation.csv to {}", out.display());
            Ok(())
        }
    }
}

fn batch1(t: &pi_trans::tensor::Tensor) -> pi_trans::tensor::Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    pi_trans::tensor::Tensor::from_vec(t.data().to_vec(), &shape).unwrap()
}

fn with_suffix(prefix: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
