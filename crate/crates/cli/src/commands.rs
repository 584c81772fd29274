//! Command implementations. Each returns the report it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gradmix::data::{CorruptionKind, CorruptionTable, ImageDataset, Split, TRIALS};
use gradmix::runner::report::{Timing, TrainTrial};
use gradmix::runner::{
    eval_corruption, eval_detection, export_maps, linear_probe, load_files, load_split, train, Checkpoint,
    DetectionSummary, ExportOptions, FileSet, Report, RunConfig, TrialDetection, DEFAULT_THRESHOLDS,
};
use gradmix::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{
    CorruptArgs, EvalArgs, ExportArgs, OodArgs, OodSource, ProbeArgs, ReportArgs, RunArgs, SourceArgs, TrainArgs,
    TrialArgs,
};
use crate::CliError;

/// A trained or loaded encoder with the split it was trained on.
struct Trial {
    config: RunConfig,
    checkpoint: Checkpoint,
    split: Split,
}

fn trial_configs(base: &RunConfig, trials: &TrialArgs) -> Result<Vec<RunConfig>, CliError> {
    match trials.trials {
        None => Ok(vec![base.clone()]),
        Some(n) if n == 0 || n > TRIALS => Err(CliError::Usage(format!("--trials must be in 1..={TRIALS}"))),
        Some(n) => Ok((0..n).map(|t| RunConfig { trial: t, ..base.clone() }).collect()),
    }
}

fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial-{trial}"))
}

/// Train each configured trial, saving `final.ckpt` under its directory.
fn train_trials(run: &RunArgs, trials: &TrialArgs, report: &mut Report) -> Result<Vec<Trial>, CliError> {
    let base = run.config()?;
    let mut out = Vec::new();
    for config in trial_configs(&base, trials)? {
        let split = load_split(&config, run.data_dir.as_deref())?;
        let dir = trial_dir(&run.out, config.trial);
        let outcome = train(&config, &split.train_known, (config.checkpoint_every > 0).then_some(dir.as_path()))?;
        std::fs::create_dir_all(&dir).map_err(|e| gradmix::Error::Io { path: dir.clone(), source: e })?;
        outcome.checkpoint.save(&dir.join("final.ckpt"))?;
        let epochs = outcome.log.epochs.clone();
        let final_loss = epochs.last().map_or(f64::NAN, |e| e.mean_loss);
        report.training.push(TrainTrial { trial: config.trial, seed: config.seed, epochs, final_loss });
        out.push(Trial { config, checkpoint: outcome.checkpoint, split });
    }
    Ok(out)
}

/// Load the given checkpoints, or train when none are given. Flags that only
/// affect evaluation (`k`) still apply to loaded checkpoints.
fn trials(run: &RunArgs, source: &SourceArgs, report: &mut Report) -> Result<Vec<Trial>, CliError> {
    let out = if source.checkpoint.is_empty() {
        train_trials(run, &source.trials, report)?
    } else {
        source
            .checkpoint
            .iter()
            .map(|path| {
                let checkpoint = Checkpoint::load(path)?;
                let mut config = checkpoint.config.clone();
                if let Some(k) = run.overrides.k {
                    config.k = k;
                }
                let split = load_split(&config, run.data_dir.as_deref())?;
                Ok(Trial { config, checkpoint, split })
            })
            .collect::<Result<Vec<_>, CliError>>()?
    };
    for t in &out {
        report.configs.push(t.config.clone());
        report.manifests.push(t.split.manifest.clone());
    }
    Ok(out)
}

fn single(mut trials: Vec<Trial>, command: &str) -> Result<Trial, CliError> {
    if trials.len() != 1 {
        return Err(CliError::Usage(format!("{command} takes exactly one checkpoint or trial")));
    }
    Ok(trials.remove(0))
}

fn finish(mut report: Report, out: &Path, stem: &str, started: Instant) -> Result<Report, CliError> {
    report.timing = Some(Timing { wall_clock_secs: started.elapsed().as_secs_f64() });
    let (json, _) = report.write(out, stem)?;
    print!("{}", report.to_table());
    println!("report: {}", json.display());
    Ok(report)
}

pub fn run_train(args: &TrainArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let mut report = Report::new("train");
    for t in train_trials(&args.run, &args.trials, &mut report)? {
        report.configs.push(t.config);
        report.manifests.push(t.split.manifest);
    }
    finish(report, &args.run.out, "train", started)
}

fn detection(
    args: &EvalArgs,
    command: &str,
    out_set: impl Fn(&Trial) -> Result<ImageDataset, CliError>,
) -> Result<Report, CliError> {
    let started = Instant::now();
    let mut report = Report::new(command);
    let mut per_trial = Vec::new();
    for t in trials(&args.run, &args.source, &mut report)? {
        let out = out_set(&t)?;
        let eval = eval_detection(
            &t.checkpoint.encoder,
            &t.split.train_known,
            &t.split.test_known,
            &out,
            args.scorer,
            t.config.k,
        )?;
        if eval.degenerate > 0 {
            report.notes.push(format!(
                "trial {}: {} degenerate kNN results ranked by their label sum",
                t.config.trial, eval.degenerate
            ));
        }
        per_trial.push(TrialDetection { trial: t.config.trial, eval });
    }
    report.detection = Some(DetectionSummary::from_trials(per_trial)?);
    finish(report, &args.run.out, command, started)
}

pub fn run_eval_osr(args: &EvalArgs) -> Result<Report, CliError> {
    detection(args, "eval-osr", |t| Ok(t.split.test_unknown.clone()))
}

fn noise_images(t: &Trial, count: usize) -> Result<ImageDataset, CliError> {
    let enc = t.checkpoint.encoder.config();
    let (c, s) = (enc.input_channels, enc.input_resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(t.config.seed);
    let data = (0..count * c * s * s).map(|_| rng.random::<f32>()).collect();
    Ok(ImageDataset::new(Tensor::new(vec![count, c, s, s], data)?, vec![0; count], None)?)
}

pub fn run_eval_ood(args: &OodArgs) -> Result<Report, CliError> {
    let files = match args.ood_source {
        OodSource::Noise => None,
        OodSource::Files => {
            let (Some(format), Some(images)) = (args.ood_format, args.ood_images.clone()) else {
                return Err(CliError::Usage("--ood-source files needs --ood-format and --ood-images".into()));
            };
            Some((format, FileSet { images, labels: args.ood_labels.clone() }))
        }
    };
    let data_dir = args.eval.run.data_dir.clone();
    detection(&args.eval, "eval-ood", |t| match &files {
        None => noise_images(t, args.ood_count),
        Some((format, set)) => Ok(load_files(&t.config, set, *format, data_dir.as_deref())?),
    })
}

pub fn run_eval_corrupt(args: &CorruptArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let mut report = Report::new("eval-corrupt");
    let t = single(trials(&args.run, &args.source, &mut report)?, "eval-corrupt")?;
    let kinds = if args.corruptions.is_empty() { CorruptionKind::ALL.to_vec() } else { args.corruptions.clone() };
    let eval = eval_corruption(
        &t.checkpoint.encoder,
        &t.split.train_known,
        &t.split.test_known,
        &kinds,
        &CorruptionTable::default(),
        t.config.k,
        t.config.seed,
    )?;
    report.corruption = Some(eval);
    finish(report, &args.run.out, "eval-corrupt", started)
}

pub fn run_probe(args: &ProbeArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let mut report = Report::new("probe");
    let t = single(trials(&args.run, &args.source, &mut report)?, "probe")?;
    let eval = linear_probe(
        &t.checkpoint.encoder,
        &t.split.train_known,
        &t.split.test_known,
        args.probe_epochs,
        args.probe_lr,
        t.config.seed,
    )?;
    if let Some(note) = &eval.note {
        report.notes.push(note.clone());
    }
    report.probe = Some(eval);
    finish(report, &args.run.out, "probe", started)
}

pub fn run_export_maps(args: &ExportArgs) -> Result<Report, CliError> {
    let started = Instant::now();
    let mut report = Report::new("export-maps");
    let t = single(trials(&args.run, &args.source, &mut report)?, "export-maps")?;
    let test = &t.split.test_known;
    let idx: Vec<usize> = (0..args.count.min(test.len())).collect();
    if idx.is_empty() {
        return Err(CliError::Usage("--count must select at least one image".into()));
    }
    let images = test.select(&idx)?;
    let opts = ExportOptions {
        layers: if args.layers.is_empty() { t.config.encoder.tap_names.clone() } else { args.layers.clone() },
        method: t.config.cam_method,
        weights: t.config.weights(),
        temperature: t.config.temperature,
        denominator: t.config.denominator,
        thresholds: if args.thresholds.is_empty() { DEFAULT_THRESHOLDS.to_vec() } else { args.thresholds.clone() },
    };
    let eval =
        export_maps(&t.checkpoint.encoder, &images.images, Some(&images.labels), &opts, &args.run.out.join("maps"))?;
    report.export = Some(eval);
    finish(report, &args.run.out, "export-maps", started)
}

pub fn run_report(args: &ReportArgs) -> Result<Report, CliError> {
    let report = Report::load(&args.input)?;
    print!("{}", report.to_table());
    for check in report.audit()? {
        println!("audit {check}: ok");
    }
    Ok(report)
}
