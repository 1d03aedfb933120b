use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peftlab::augment::{wave_copies, AugmentMethod, AugmentPolicy};
use peftlab::autodiff::gradcheck::check_primitives;
use peftlab::datapipe::{
    filter_entries, load_manifest, save_manifest, split_by_speaker, synth_corpus, AugmentationRecord,
    FilterPolicy, ManifestEntry, SplitName, SplitPolicy,
};
use peftlab::evalkit::ResultsTable;
use peftlab::losses::{check_objective_gradients, PifConfig, TrainExample, View};
use peftlab::model::{apply_peft, build_model, count_params, random_features, ModelConfig, ModelMode, PeftConfig, PeftMethod};
use peftlab::runner::{evaluate, run_matrix, train, ExperimentConfig, MatrixSpec, RunRecord, SizePreset};
use peftlab::signal::{load_wav, save_wav};
use peftlab::Error;

#[derive(Parser)]
#[command(name = "peftlab", version, about = "Augmentation, PEFT and ASR training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic digit corpus (WAV files plus manifest.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        utterances: usize,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
    },
    /// Drop manifest entries by prefilter WER, word count and duration.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the kept entries.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        max_wer: f64,
        #[arg(long, default_value_t = 3)]
        min_words: usize,
        #[arg(long, default_value_t = 30.0)]
        max_duration: f64,
    },
    /// Speaker-disjoint train/dev/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, dev and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.15, 0.15])]
        fractions: Vec<f64>,
    },
    /// Write waveform-perturbed copies of every entry.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        method: AugmentMethod,
        #[arg(long, default_value_t = 2)]
        copies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `final`, `best`, `latest` or a checkpoint path.
        #[arg(long, default_value = "final")]
        checkpoint: String,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Write per-utterance hypotheses as JSON lines.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Merge the results of finished runs into one table.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        tsv: bool,
    },
    /// Train every (size, PEFT method, augmentation) combination.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "tiny,small,base")]
        sizes: Vec<SizePreset>,
        #[arg(long, value_delimiter = ',', default_value = "full,adapter")]
        peft: Vec<PeftMethod>,
        #[arg(long, value_delimiter = ',', default_value = "none")]
        augment: Vec<AugmentMethod>,
    },
    /// Finite-difference gradient checks of the primitives and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Total and trainable parameter counts.
    Params(ParamsArgs),
}

#[derive(Args)]
struct ParamsArgs {
    /// Take the model from an experiment config instead of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "ctc")]
    mode: ModelMode,
    #[arg(long, default_value = "full")]
    peft: PeftMethod,
    /// Use the large reference dimensions.
    #[arg(long)]
    paper_scale: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } => 1,
        Error::Diverged(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> peftlab::Result<()> {
    match cmd {
        Command::Synth {
            out,
            seed,
            utterances,
            speakers,
        } => {
            let entries = synth_corpus(&out, seed, utterances, speakers)?;
            println!("wrote {} utterances to {}", entries.len(), out.join("manifest.jsonl").display());
        }
        Command::Filter {
            manifest,
            out,
            max_wer,
            min_words,
            max_duration,
        } => {
            let policy = FilterPolicy {
                max_wer,
                min_words,
                max_duration_s: max_duration,
            };
            policy.validate()?;
            let outcome = filter_entries(&load_manifest(&manifest)?, &policy);
            for r in &outcome.removed {
                let reasons: Vec<String> = r.reasons.iter().map(ToString::to_string).collect();
                println!("removed\t{}\t{}", r.entry.id, reasons.join(","));
            }
            println!("kept {} of {}", outcome.kept.len(), outcome.kept.len() + outcome.removed.len());
            if let Some(out) = out {
                let kept = rebase(&outcome.kept, &manifest, &out);
                save_manifest(&out, &kept)?;
            }
        }
        Command::Split {
            manifest,
            out_dir,
            seed,
            fractions,
        } => {
            let policy = SplitPolicy {
                fractions: [fractions[0], fractions[1], fractions[2]],
                seed,
            };
            policy.validate()?;
            let splits = split_by_speaker(&load_manifest(&manifest)?, &policy)?;
            fs::create_dir_all(&out_dir)?;
            for s in SplitName::ALL {
                let path = out_dir.join(format!("{s}.jsonl"));
                save_manifest(&path, &rebase(splits.get(s), &manifest, &path))?;
                println!("{s}\t{}", splits.get(s).len());
            }
            fs::write(out_dir.join("speakers.tsv"), splits.audit_tsv())?;
        }
        Command::Augment {
            manifest,
            out_dir,
            method,
            copies,
            seed,
        } => augment(&manifest, &out_dir, method, copies, seed)?,
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = train(&cfg, Some(&out))?;
            let r = &outcome.record;
            println!(
                "trained {} steps, final loss {:.4}, {} trainable parameters",
                r.steps,
                r.final_loss().unwrap_or(f64::NAN),
                r.trainable_params
            );
            print!("{}", r.results.to_text());
        }
        Command::Eval {
            run,
            manifest,
            checkpoint,
            split,
            hyps,
        } => {
            let out = evaluate(&run, &checkpoint, &manifest, &split)?;
            if let Some(path) = hyps {
                let mut s = String::new();
                for u in &out.utterances {
                    s.push_str(&serde_json::to_string(u)?);
                    s.push('\n');
                }
                fs::write(path, s)?;
            }
            print!("{}", out.table.to_text());
        }
        Command::Report { runs, tsv } => {
            if runs.is_empty() {
                return Err(Error::Argument("no run directories given".into()));
            }
            let mut table = ResultsTable::default();
            for dir in runs {
                let rec: RunRecord = serde_json::from_str(&fs::read_to_string(dir.join("record.json"))?)?;
                table.merge(rec.results);
            }
            print!("{}", if tsv { table.to_tsv() } else { table.to_text() });
        }
        Command::Matrix {
            config,
            out,
            sizes,
            peft,
            augment,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let spec = MatrixSpec {
                sizes,
                peft,
                augment,
            };
            let outcome = run_matrix(&cfg, &spec, Some(&out))?;
            print!("{}", outcome.table.to_text());
        }
        Command::Gradcheck { seed, eps, tolerance } => gradcheck(seed, eps, tolerance)?,
        Command::Params(args) => params(&args)?,
    }
    Ok(())
}

/// Rewrites relative audio paths so they stay valid from `to`'s directory.
fn rebase(entries: &[ManifestEntry], from: &Path, to: &Path) -> Vec<ManifestEntry> {
    let src = from.parent().unwrap_or(Path::new(""));
    let dst = to.parent().unwrap_or(Path::new(""));
    entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if src != dst && e.audio.is_relative() {
                let abs = src.join(&e.audio);
                e.audio = fs::canonicalize(&abs).unwrap_or(abs);
            }
            e
        })
        .collect()
}

fn augment(manifest: &Path, out_dir: &Path, method: AugmentMethod, copies: usize, seed: u64) -> peftlab::Result<()> {
    if method.wave_method() == AugmentMethod::None {
        return Err(Error::config(
            "augment.method",
            format!("`{method}` has no waveform stage; SpecAugment is applied during training"),
        ));
    }
    let policy = AugmentPolicy {
        method,
        copies,
        seed,
        ..AugmentPolicy::default()
    };
    let base = manifest.parent().unwrap_or(Path::new(""));
    fs::create_dir_all(out_dir.join("wav"))?;
    let mut out = Vec::new();
    for e in load_manifest(manifest)? {
        let wave = load_wav(&e.audio_path(base)).map_err(|err| err.in_utterance(&e.id))?;
        let mut rng = policy.rng_for(&e.id);
        for (k, (w, provenance)) in wave_copies(&wave, method, copies, &mut rng)
            .map_err(|err| err.in_utterance(&e.id))?
            .into_iter()
            .enumerate()
        {
            let id = format!("{}-{}{k}", e.id, method.wave_method());
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            save_wav(&w, &out_dir.join(&rel))?;
            out.push(ManifestEntry {
                id,
                audio: rel,
                text: e.text.clone(),
                speaker: e.speaker.clone(),
                duration_s: w.duration_s(),
                prefilter_wer: e.prefilter_wer,
                augmentation: Some(AugmentationRecord {
                    source_id: e.id.clone(),
                    provenance,
                }),
            });
        }
    }
    save_manifest(&out_dir.join("manifest.jsonl"), &out)?;
    println!("wrote {} augmented utterances", out.len());
    Ok(())
}

fn gradcheck(seed: u64, eps: f64, tolerance: f64) -> peftlab::Result<()> {
    let mut worst = 0.0f64;
    for (name, err) in check_primitives(seed, 3, eps)? {
        println!("{name:<14} {err:.3e}");
        worst = worst.max(err);
    }
    for mode in [ModelMode::Ctc, ModelMode::EncDec] {
        let mut cfg = ModelConfig::toy(mode);
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.ffn_dim = 32;
        cfg.enc_layers = 1;
        cfg.dec_layers = usize::from(mode == ModelMode::EncDec);
        cfg.n_mels = 8;
        cfg.vocab_size = 8;
        let model = apply_peft(build_model(&cfg, seed)?, &PeftConfig::toy(PeftMethod::Full))?;
        let ex = TrainExample {
            id: "check".into(),
            original: View::new(random_features(12, 8, seed)),
            copies: vec![View::new(random_features(10, 8, seed + 1))],
            target: vec![4, 5, 6],
        };
        let report = check_objective_gradients(&model, &ex, &PifConfig::enabled(), eps, Some(4), seed)?;
        println!(
            "{:<14} {:.3e} ({} coordinates, worst {}[{}])",
            format!("loss[{mode}]"),
            report.max_rel_err,
            report.coordinates,
            report.worst_param,
            report.worst_index
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst > tolerance {
        return Err(Error::Integrity(format!(
            "gradient check failed: relative error {worst:.3e} above {tolerance:.0e}"
        )));
    }
    println!("ok: max relative error {worst:.3e}");
    Ok(())
}

fn params(args: &ParamsArgs) -> peftlab::Result<()> {
    let (model, peft) = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            (cfg.model, cfg.peft)
        }
        None if args.paper_scale => {
            let mut m = ModelConfig::paper_scale();
            if args.mode == ModelMode::Ctc {
                m.mode = ModelMode::Ctc;
                m.dec_layers = 0;
            }
            (m, PeftConfig::paper_scale(args.peft))
        }
        None => (ModelConfig::toy(args.mode), PeftConfig::toy(args.peft)),
    };
    model.validate()?;
    peft.validate()?;
    let c = count_params(&model, &peft);
    println!("method\t{}", peft.method);
    println!("trainable\t{}", c.trainable);
    println!("total\t{}", c.total);
    Ok(())
}
