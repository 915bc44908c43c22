//! Command-line harness: dataset generation, experiment runs, single-stage
//! training, selection, evaluation and the gradient verification suite.
//!
//! Exit codes: 0 success, 1 configuration or runtime violation, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mobyal_core::alloop::{evaluate, extract_features, run_active_learning_with_models};
use mobyal_core::config::{DatasetKind, ExperimentConfig};
use mobyal_core::contrastive::KeyQueuePair;
use mobyal_core::data::{
    dataset_from_idx, dataset_to_idx, generate_synthetic, images_from_idx, read_idx, write_idx,
    Dataset,
};
use mobyal_core::gradcheck::run_verification_suite;
use mobyal_core::metrics::write_metrics_csv;
use mobyal_core::model::{load_checkpoint, save_checkpoint, DualModel};
use mobyal_core::select::{
    coreset_select, entropy_select, random_select, FeatureMatrix, SelectionResult,
};
use mobyal_core::tensor::Tensor;
use mobyal_core::trainer::{train_multi_stage, train_stage, TrainMode};
use mobyal_core::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "mobyal",
    version,
    about = "Joint contrastive/classification active-learning experiments"
)]
struct Cli {
    /// Experiment configuration file (TOML). Omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed(s) from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as IDX files.
    GenData,
    /// Run the full multi-cycle active-learning experiment.
    Run,
    /// Train a single stage on the initial labelled split and checkpoint it.
    Train,
    /// Select ids from an unlabelled pool using a trained checkpoint.
    Select {
        /// Model checkpoint written by `train` or `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file holding the candidate pool.
        #[arg(long)]
        pool: PathBuf,
        /// Number of ids to pick (defaults to the config's budget).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Report test accuracy of a checkpoint on an IDX image/label pair.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Run the finite-difference gradient verification suite.
    GradCheck {
        /// Random restarts per check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.synthetic.seed = seed;
        let n = cfg.al.trial_seeds.len().max(1);
        cfg.al.trial_seeds = (0..n as u64).map(|i| seed.wrapping_add(i)).collect();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => generate_synthetic(&cfg.dataset.synthetic.to_spec()),
        DatasetKind::Idx => {
            let classes = cfg.model.num_classes;
            fn get(p: &Option<PathBuf>) -> Result<&PathBuf> {
                p.as_ref()
                    .ok_or_else(|| CoreError::InvalidConfig("missing idx path".into()))
            }
            let train = dataset_from_idx(
                &read_idx(get(&cfg.dataset.train_images)?)?,
                &read_idx(get(&cfg.dataset.train_labels)?)?,
                classes,
            )?;
            let test = dataset_from_idx(
                &read_idx(get(&cfg.dataset.test_images)?)?,
                &read_idx(get(&cfg.dataset.test_labels)?)?,
                classes,
            )?;
            Ok((train, test))
        }
    }
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::Run => run(cli),
        Command::Train => train(cli),
        Command::Select {
            checkpoint,
            pool,
            budget,
        } => select(cli, checkpoint, pool, *budget),
        Command::Eval {
            checkpoint,
            images,
            labels,
        } => eval(checkpoint, images, labels),
        Command::GradCheck { seeds } => grad_check(*seeds),
    }
}

fn gen_data(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let (train, test) = generate_synthetic(&cfg.dataset.synthetic.to_spec())?;
    let out = ensure_out(&cfg)?;
    for (ds, stem) in [(&train, "train"), (&test, "test")] {
        let (images, labels) = dataset_to_idx(ds)?;
        write_idx(&images, &out.join(format!("{stem}-images.idx")))?;
        write_idx(&labels, &out.join(format!("{stem}-labels.idx")))?;
    }
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let (train, test) = load_datasets(&cfg)?;
    let results = run_active_learning_with_models::<f32>(&train, &test, &cfg.to_al_config())?;
    let out = ensure_out(&cfg)?;
    for (trial, (_, model)) in results.iter().enumerate() {
        save_checkpoint(model, &out.join(format!("trial_{trial}.ckpt")))?;
    }
    let trials: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    write_metrics_csv(&out.join("metrics.csv"), &trials)?;
    for t in &trials {
        if let Some(last) = t.metrics.last() {
            println!(
                "trial {}: final accuracy {:.4} at {} labels",
                last.trial, last.accuracy, last.labelled
            );
        }
    }
    println!("metrics written to {}", out.join("metrics.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn train(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let (train_set, test) = load_datasets(&cfg)?;
    let al = cfg.to_al_config();
    al.validate(train_set.len())?;
    let seed = cli.seed.unwrap_or(*al.trial_seeds.first().unwrap_or(&0));
    let all_ids: Vec<usize> = (0..train_set.len()).collect();
    let labelled_ids = random_select(&all_ids, al.initial_labelled, seed ^ 0x696e_6974)?.chosen;
    let is_labelled: Vec<bool> = {
        let mut v = vec![false; train_set.len()];
        for &id in &labelled_ids {
            v[id] = true;
        }
        v
    };
    let lab_images: Vec<_> = labelled_ids.iter().map(|&i| &train_set.images[i]).collect();
    let lab_labels: Vec<usize> = labelled_ids.iter().map(|&i| train_set.labels[i]).collect();
    let unlab_images: Vec<_> = (0..train_set.len())
        .filter(|&i| !is_labelled[i])
        .map(|i| &train_set.images[i])
        .collect();

    let mut model = DualModel::<f32>::new(al.model.clone(), seed);
    let mut queues = KeyQueuePair::new(al.model.embed_dim, al.train.queue_capacity);
    let report = match al.train.mode {
        TrainMode::Joint => train_stage(
            &mut model,
            &mut queues,
            &lab_images,
            &lab_labels,
            &unlab_images,
            &al.train,
            seed,
        )?,
        TrainMode::MultiStage => {
            let all_images: Vec<_> = train_set.images.iter().collect();
            train_multi_stage(
                &mut model,
                &mut queues,
                &all_images,
                &lab_images,
                &lab_labels,
                &al.train,
                seed,
            )?
        }
    };
    let (accuracy, _) = evaluate(&mut model, &test)?;
    let out = ensure_out(&cfg)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "final epoch: classification {:.4}, contrastive {:.4}",
            last.classification_loss,
            last.contrastive_loss_labelled + last.contrastive_loss_unlabelled
        );
    }
    println!("test accuracy {accuracy:.4}");
    println!("checkpoint written to {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn select(cli: &Cli, checkpoint: &Path, pool: &Path, budget: Option<usize>) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let budget = budget.unwrap_or(cfg.al.budget);
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let images = images_from_idx(&read_idx(pool)?)?;
    let refs: Vec<_> = images.iter().collect();
    let ids: Vec<usize> = (0..refs.len()).collect();
    let result: SelectionResult = match cfg.al.selector {
        mobyal_core::config::SelectorKey::Coreset => {
            let feats = extract_features(&mut model, &refs, &ids)?;
            let empty = FeatureMatrix::new(vec![], Tensor::new(vec![0, feats.dim()], vec![])?)?;
            coreset_select(&feats, &empty, budget)?
        }
        mobyal_core::config::SelectorKey::Entropy => {
            let probs = mobyal_core::alloop::class_probabilities(&mut model, &refs)?;
            entropy_select(&ids, &probs, budget)?
        }
        _ => random_select(&ids, budget, cli.seed.unwrap_or(0) ^ 0x616e_6e6f)?,
    };
    for id in &result.chosen {
        println!("{id}");
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(checkpoint: &Path, images: &Path, labels: &Path) -> Result<ExitCode> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let classes = model.cfg.num_classes;
    let test = dataset_from_idx(&read_idx(images)?, &read_idx(labels)?, classes)?;
    let (accuracy, per_class) = evaluate(&mut model, &test)?;
    println!("accuracy {accuracy:.6}");
    for (c, a) in per_class.iter().enumerate() {
        println!("class {c} accuracy {a:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(seeds: usize) -> Result<ExitCode> {
    let results = run_verification_suite(seeds);
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:40} max rel err {:.3e} (tol {:.0e})",
            r.name, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} gradient check(s) failed");
        return Ok(ExitCode::from(1));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(ExitCode::SUCCESS)
}
