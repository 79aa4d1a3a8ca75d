//! Subcommand implementations.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use imgloss::gradcheck::{loss_level, network_level, GradcheckConfig};
use imgloss::image::{load_image, save_image, ImageFormat};
use imgloss::loss::LossKind;
use imgloss::metrics::{evaluate_corpus, psnr, Metric};
use imgloss::network::{
    load_checkpoint, restore_image, save_checkpoint, train_with, Architecture, ConvNet,
    EpochRecord, LossSchedule, TrainConfig, TrainingHistory,
};
use imgloss::pipeline::{
    corrupt, format_manifest, make_pair_dataset, parse_manifest, read_manifest, CorruptionKind,
    CorruptionSpec, ManifestEntry, TrainingPair,
};
use imgloss::{Error, ImageBuffer};

use crate::demo::{bias_csv, bias_sweep, default_backgrounds, edge_profile, EdgeDemo};
use crate::{
    CliError, CliResult, Command, CorruptArgs, DemoArgs, DemoName, EvalArgs, GradcheckArgs,
    RestoreArgs, TrainArgs,
};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Corrupt(a) => cmd_corrupt(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Restore(a) => cmd_restore(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Demo(a) => cmd_demo(&a),
    }
}

/// One entry of a list file: a single path, or a TAB-separated pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListEntry {
    Single(PathBuf),
    Pair(PathBuf, PathBuf),
}

/// Reads a list of image paths, one per line, or `input<TAB>target` pairs.
/// Relative paths resolve against the list's directory; blank lines and `#`
/// comments are skipped.
pub fn read_list(path: &Path) -> CliResult<Vec<ListEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read list {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let has_tab = text
        .lines()
        .any(|l| l.contains('\t') && !l.trim_start().starts_with('#'));
    if has_tab {
        let entries = parse_manifest(&text, base)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        return Ok(entries
            .into_iter()
            .map(|e| ListEntry::Pair(e.input, e.target))
            .collect());
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| ListEntry::Single(base.join(l)))
        .collect())
}

fn load(path: &Path) -> CliResult<ImageBuffer> {
    load_image(path).map_err(|e| match e {
        Error::Io { .. } => CliError::input(e.to_string()),
        other => CliError::artifact(format!("{}: {other}", path.display())),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::input(format!("cannot write to stdout: {e}")))
        }
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

fn reject_duplicate_stems(paths: &[PathBuf]) -> CliResult<()> {
    let mut seen = HashSet::new();
    for p in paths {
        if !seen.insert(stem(p)) {
            return Err(CliError::input(format!(
                "two inputs share the file name stem of {}",
                p.display()
            )));
        }
    }
    Ok(())
}

/// Corrupts every input, writing `<stem>_input` and `<stem>_target` images
/// plus `manifest.tsv`; prints `name,noisy_psnr,input_psnr` to stdout.
/// All inputs are loaded before anything is written.
pub fn cmd_corrupt(args: &CorruptArgs) -> CliResult<()> {
    let mut paths = args.inputs.clone();
    if let Some(list) = &args.input_list {
        for e in read_list(list)? {
            match e {
                ListEntry::Single(p) => paths.push(p),
                ListEntry::Pair(..) => {
                    return Err(CliError::input(format!(
                        "{}: expected one path per line",
                        list.display()
                    )))
                }
            }
        }
    }
    if paths.is_empty() {
        return Err(CliError::input("no input images given"));
    }
    if args.corruption.task == CorruptionKind::ExternalPairs {
        return Err(CliError::input(
            "external_pairs data is corrupted outside this tool; pass the pairs to `train --train-list`",
        ));
    }
    reject_duplicate_stems(&paths)?;
    let spec = args.corruption.spec(args.seed);
    spec.validate()?;
    let cleans = paths
        .iter()
        .map(|p| load(p))
        .collect::<CliResult<Vec<_>>>()?;
    let results = cleans
        .iter()
        .enumerate()
        .map(|(i, c)| corrupt(c, &spec, i))
        .collect::<imgloss::Result<Vec<_>>>()?;

    create_dir(&args.out_dir)?;
    let format: ImageFormat = args.format.into();
    let mut manifest = Vec::new();
    let mut report = String::from("name,noisy_psnr,input_psnr\n");
    for (path, r) in paths.iter().zip(&results) {
        let name = stem(path);
        let input_name = format!("{name}_input.{}", format.extension());
        let target_name = format!("{name}_target.{}", format.extension());
        save_image(&r.input, args.out_dir.join(&input_name), format)?;
        save_image(&r.clean, args.out_dir.join(&target_name), format)?;
        manifest.push(ManifestEntry {
            input: input_name.into(),
            target: target_name.into(),
        });
        let noisy = match &r.noisy {
            Some(n) => fmt_psnr(psnr(n, &r.clean)?),
            None => String::new(),
        };
        report.push_str(&format!(
            "{name},{noisy},{}\n",
            fmt_psnr(psnr(&r.input, &r.clean)?)
        ));
    }
    write_file(
        &args.out_dir.join("manifest.tsv"),
        format_manifest(&manifest),
    )?;
    emit(None, &report)
}

/// Parses `kind@epoch`.
pub fn parse_switch(s: &str) -> CliResult<(LossKind, usize)> {
    let (kind, epoch) = s.split_once('@').ok_or_else(|| {
        CliError::input(format!("--switch-loss expects <kind>@<epoch>, got {s:?}"))
    })?;
    let kind: LossKind = kind
        .parse()
        .map_err(|e: Error| CliError::input(e.to_string()))?;
    let epoch = epoch.trim().parse().map_err(|_| {
        CliError::input(format!(
            "--switch-loss epoch {epoch:?} is not a whole number"
        ))
    })?;
    Ok((kind, epoch))
}

/// Loads a list as whole-image `(input, target)` pairs: TAB pairs as given,
/// clean paths corrupted per `spec`.
fn load_pairs(list: &Path, spec: &CorruptionSpec) -> CliResult<Vec<(ImageBuffer, ImageBuffer)>> {
    let entries = read_list(list)?;
    if entries.is_empty() {
        return Err(CliError::input(format!(
            "{} lists no images",
            list.display()
        )));
    }
    let mut singles = Vec::new();
    let mut pairs = Vec::new();
    for e in &entries {
        match e {
            ListEntry::Single(p) => singles.push(load(p)?),
            ListEntry::Pair(i, t) => pairs.push((load(i)?, load(t)?)),
        }
    }
    if pairs.is_empty() {
        if spec.kind == CorruptionKind::ExternalPairs {
            return Err(CliError::input(format!(
                "{}: external_pairs needs `input<TAB>target` lines",
                list.display()
            )));
        }
        for (i, clean) in singles.iter().enumerate() {
            let c = corrupt(clean, spec, i)?;
            pairs.push((c.input, c.clean));
        }
    }
    Ok(pairs)
}

/// Trains the conv9-conv5-conv5 network. Writes `model_init.ckpt`,
/// `model.ckpt` and `history.csv`; progress goes to stderr.
pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let schedule = match &args.switch_loss {
        Some(s) => {
            let (second, at) = parse_switch(s)?;
            LossSchedule::switching(args.loss.clone(), second, at, args.epochs)?
        }
        None => LossSchedule::constant(args.loss.clone(), args.epochs)?,
    };
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        schedule,
        seed: args.seed,
        validate_every: args.validate_every,
    };
    cfg.validate()?;
    if args.width == 0 {
        return Err(CliError::input("--width must be at least 1"));
    }

    let spec = args.corruption.spec(args.corruption_seed);
    spec.validate()?;
    let train_images = load_pairs(&args.train_list, &spec)?;
    let data = make_pair_dataset(&train_images, args.patch, args.stride)?;
    let validation: Option<Vec<TrainingPair>> = match &args.val_list {
        Some(list) => {
            let val_spec = CorruptionSpec {
                seed: args.corruption_seed ^ VALIDATION_SEED_SALT,
                ..spec.clone()
            };
            Some(
                load_pairs(list, &val_spec)?
                    .into_iter()
                    .map(|(input, target)| TrainingPair { input, target })
                    .collect(),
            )
        }
        None => None,
    };

    let channels = train_images[0].0.channels();
    let mut net = ConvNet::new(&Architecture::three_layer(channels, args.width), args.seed)?;
    create_dir(&args.out_dir)?;
    save_checkpoint(&net, args.out_dir.join("model_init.ckpt"))?;
    eprintln!(
        "training on {} patches for {} epochs",
        data.len(),
        cfg.epochs()
    );

    let mut seen = TrainingHistory::default();
    let result = train_with(
        &mut net,
        &data,
        &cfg,
        validation.as_deref(),
        |r: &EpochRecord| {
            eprintln!(
                "epoch {} {} train_loss {}",
                r.epoch, r.loss_kind, r.train_loss
            );
            seen.records.push(r.clone());
        },
    );
    let history_path = args.out_dir.join("history.csv");
    match result {
        Ok(history) => {
            write_file(&history_path, history.to_csv())?;
            save_checkpoint(&net, args.out_dir.join("model.ckpt"))?;
            Ok(())
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            write_file(&history_path, seen.to_csv())?;
            Err(CliError::verify(format!("training aborted: {e}")))
        }
        Err(e) => Err(e.into()),
    }
}

/// Validation images derived from clean lists are corrupted with the
/// corruption seed XOR this value, so they never share noise with training.
pub const VALIDATION_SEED_SALT: u64 = 0x5A17_0000_0000;

/// Restores each input with the checkpoint, writing `<stem><suffix>.<ext>`.
/// A TAB manifest given as `--input-list` also yields `restored.tsv`
/// pairing each restored image with the manifest's target.
pub fn cmd_restore(args: &RestoreArgs) -> CliResult<()> {
    let net = load_checkpoint(&args.checkpoint).map_err(|e| match e {
        Error::Io { .. } => CliError::input(e.to_string()),
        other => CliError::artifact(format!("{}: {other}", args.checkpoint.display())),
    })?;
    let mut jobs: Vec<(PathBuf, Option<PathBuf>)> =
        args.inputs.iter().map(|p| (p.clone(), None)).collect();
    if let Some(list) = &args.input_list {
        for e in read_list(list)? {
            jobs.push(match e {
                ListEntry::Single(p) => (p, None),
                ListEntry::Pair(i, t) => (i, Some(t)),
            });
        }
    }
    if jobs.is_empty() {
        return Err(CliError::input("no input images given"));
    }
    let images = jobs
        .iter()
        .map(|(p, _)| load(p))
        .collect::<CliResult<Vec<_>>>()?;
    for (img, (p, _)) in images.iter().zip(&jobs) {
        if img.channels() != net.in_channels() {
            return Err(CliError::artifact(format!(
                "{} has {} channels but the network expects {}",
                p.display(),
                img.channels(),
                net.in_channels()
            )));
        }
    }
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
    }

    let mut restored_manifest = Vec::new();
    for (img, (path, target)) in images.iter().zip(&jobs) {
        let format = match args.format {
            Some(f) => f.into(),
            None => ImageFormat::from_path(path).unwrap_or(ImageFormat::Pfm),
        };
        let dir = match &args.out_dir {
            Some(d) => d.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let out = dir.join(format!(
            "{}{}.{}",
            stem(path),
            args.suffix,
            format.extension()
        ));
        save_image(&restore_image(&net, img)?, &out, format)?;
        if let Some(t) = target {
            restored_manifest.push(ManifestEntry {
                input: absolute(&out)?,
                target: absolute(t)?,
            });
        }
    }
    if !restored_manifest.is_empty() {
        let dir = match (&args.out_dir, &args.input_list) {
            (Some(d), _) => d.clone(),
            (None, Some(list)) => list.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, None) => PathBuf::new(),
        };
        write_file(
            &dir.join("restored.tsv"),
            format_manifest(&restored_manifest),
        )?;
    }
    Ok(())
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p)
        .map_err(|e| CliError::input(format!("cannot resolve {}: {e}", p.display())))
}

/// Table-style metrics CSV for restored/reference pairs.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let entries: Vec<(PathBuf, PathBuf)> =
        match (&args.pairs, &args.restored_list, &args.reference_list) {
            (Some(p), None, None) => read_manifest(p)
                .map_err(|e| CliError::input(e.to_string()))?
                .into_iter()
                .map(|e| (e.input, e.target))
                .collect(),
            (None, Some(r), Some(t)) => {
                let restored = single_paths(r)?;
                let reference = single_paths(t)?;
                if restored.len() != reference.len() {
                    return Err(CliError::input(format!(
                        "{} restored images but {} references",
                        restored.len(),
                        reference.len()
                    )));
                }
                restored.into_iter().zip(reference).collect()
            }
            _ => {
                return Err(CliError::input(
                    "give either --pairs or both --restored-list and --reference-list",
                ))
            }
        };
    if entries.is_empty() {
        return Err(CliError::input("no image pairs given"));
    }
    let mut loaded = Vec::with_capacity(entries.len());
    for (r, t) in &entries {
        let name = r.file_name().map_or_else(
            || r.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        loaded.push((name, load(r)?, load(t)?));
    }
    let report = evaluate_corpus(
        loaded.iter().map(|(n, r, t)| (n.as_str(), r, t)),
        &Metric::ALL,
    )?;
    emit(args.out.as_deref(), &report.to_csv())
}

fn single_paths(list: &Path) -> CliResult<Vec<PathBuf>> {
    read_list(list)?
        .into_iter()
        .map(|e| match e {
            ListEntry::Single(p) => Ok(p),
            ListEntry::Pair(..) => Err(CliError::input(format!(
                "{}: expected one path per line",
                list.display()
            ))),
        })
        .collect()
}

/// Prints `level,name,max_rel_error,threshold,status,worst`; fails with exit
/// 1 when any check is over its threshold.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.patches == 0 || args.patch_size == 0 {
        return Err(CliError::input(
            "--patches and --patch-size must be at least 1",
        ));
    }
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(CliError::input("--eps must be positive"));
    }
    let cfg = GradcheckConfig {
        seed: args.seed,
        patches: args.patches,
        patch_size: args.patch_size,
        eps: args.eps,
        perturb_analytic: args.perturb_analytic,
        net_samples: args.net_samples,
    };
    let mut out = String::from("level,name,max_rel_error,threshold,status,worst\n");
    let mut failures = Vec::new();
    for (level, results) in [
        ("loss", loss_level(&cfg)?),
        ("network", network_level(&cfg)?),
    ] {
        for r in results {
            let status = if r.passed() { "pass" } else { "FAIL" };
            let worst = r.worst.clone().unwrap_or_default();
            out.push_str(&format!(
                "{level},{},{:e},{:e},{status},\"{worst}\"\n",
                r.name, r.max_rel_error, r.threshold
            ));
            if !r.passed() {
                failures.push(format!(
                    "{} (error {:e} at {worst})",
                    r.name, r.max_rel_error
                ));
            }
        }
    }
    emit(None, &out)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::verify(format!(
            "gradient check failed: {}",
            failures.join("; ")
        )))
    }
}

pub fn cmd_demo(args: &DemoArgs) -> CliResult<()> {
    let csv = match args.demo {
        DemoName::Edge => {
            if args.draws == 0 {
                return Err(CliError::input("--draws must be at least 1"));
            }
            let cfg = EdgeDemo {
                draws: args.draws,
                noise_sd: args.noise_sd,
                seed: args.seed,
                ..EdgeDemo::default()
            };
            edge_profile(&cfg)?.to_csv()
        }
        DemoName::Bias => bias_csv(&bias_sweep(
            &default_backgrounds(),
            args.bias,
            imgloss::loss::DEFAULT_SSIM_SIGMA,
        )?),
    };
    emit(args.out.as_deref(), &csv)
}
