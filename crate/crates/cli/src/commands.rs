use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ufema::checkpoint::{
    load_enhancer, save_enhancer, EncoderCheckpoint, JointCheckpoint, PretrainProgress,
};
use ufema::config::{Arm, EncoderMode, ExperimentConfig};
use ufema::corpus::{write_manifest, write_wav, Condition, ManifestEntry, NoiseBank, Utterance};
use ufema::encoder::{PretrainState, Pretrainer};
use ufema::enhancement::EnhancerRegistry;
use ufema::evaluation::{make_trials, read_trials, write_trials, Evaluator};
use ufema::plot::emit_plot;
use ufema::training::{
    ablation_csv, joint_pipeline, log_line, noisy_conditions, parse_weights, run_ablation_matrix,
    sweep_interpolation, train_enhancers, Corpus, JointTrainer,
};

use crate::rundir::{data_root, run_name, RunDir};
use crate::Command;

pub fn dispatch(run: Option<&str>, command: Command) -> Result<()> {
    match command {
        Command::SynthCorpus { config, out } => synth_corpus(run, &config, out),
        Command::TrainEnhancer { config } => train_enhancer(run, &config),
        Command::PretrainEncoder { config, resume } => pretrain(run, &config, resume),
        Command::Train {
            config,
            ablate,
            resume,
        } => train(run, &config, ablate.as_deref(), resume),
        Command::Evaluate {
            ckpt,
            trials,
            conditions,
        } => evaluate(&ckpt, &trials, &conditions),
        Command::SweepInterp { ckpt, weights } => sweep(&ckpt, &weights),
        Command::Ablate { config } => ablate(run, &config),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let t = Instant::now();
    let corpus = Corpus::build(cfg)?;
    eprintln!(
        "corpus: {} train, {} eval, {} seen-eval utterances ({:.1}s)",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.eval_seen.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(corpus)
}

fn write_utterances(root: &Path, split: &str, utts: &[Utterance]) -> Result<Vec<String>> {
    fs::create_dir_all(root.join(split))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = PathBuf::from(split).join(format!("{}.wav", u.id));
        write_wav(root.join(&rel), &u.waveform)?;
        entries.push(ManifestEntry {
            utt_id: u.id.clone(),
            speaker_id: u.speaker_id,
            relative_path: rel,
        });
    }
    let manifest = format!("{split}.tsv");
    write_manifest(root.join(&manifest), &entries)?;
    let mut out: Vec<String> = entries
        .iter()
        .map(|e| e.relative_path.display().to_string())
        .collect();
    out.push(manifest);
    Ok(out)
}

fn write_noise(root: &Path, name: &str, bank: &NoiseBank) -> Result<Vec<String>> {
    let dir = PathBuf::from("noise").join(name);
    fs::create_dir_all(root.join(&dir))?;
    let mut out = Vec::new();
    for e in bank.entries() {
        let rel = dir.join(format!("{}-{}.wav", e.kind.name(), e.seed));
        write_wav(root.join(&rel), &e.waveform)?;
        out.push(rel.display().to_string());
    }
    Ok(out)
}

fn synth_corpus(run: Option<&str>, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = match out {
        Some(o) => o,
        None => data_root().join(run_name(run, config)?),
    };
    let name = run_name(run, config)?;
    let started = Instant::now();
    let mut dir = RunDir::open_at(&out, &name, &cfg)?;
    let corpus = build_corpus(&cfg)?;
    let mut artifacts = Vec::new();
    artifacts.extend(write_utterances(&out, "train", &corpus.train)?);
    artifacts.extend(write_utterances(&out, "eval", &corpus.eval)?);
    artifacts.extend(write_utterances(&out, "eval_seen", &corpus.eval_seen)?);
    artifacts.extend(write_noise(&out, "train", &corpus.train_noise)?);
    artifacts.extend(write_noise(&out, "test", &corpus.test_noise)?);
    write_trials(
        &make_trials(&corpus.eval, cfg.seed)?,
        out.join("trials.txt"),
    )?;
    write_trials(
        &make_trials(&corpus.eval_seen, cfg.seed)?,
        out.join("trials_seen.txt"),
    )?;
    artifacts.extend(["trials.txt".to_string(), "trials_seen.txt".to_string()]);
    dir.record("synth-corpus", artifacts, started)?;
    println!("{}", out.display());
    Ok(())
}

fn enhancer_path(dir: &RunDir, name: &str) -> PathBuf {
    dir.file(&format!("enhancers/{name}.ckpt"))
}

fn train_enhancer(run: Option<&str>, config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mut dir = RunDir::create(&run_name(run, config)?, &cfg)?;
    let started = Instant::now();
    let corpus = build_corpus(&cfg)?;
    let (registry, report) = train_enhancers(&cfg, &corpus)?;
    fs::create_dir_all(dir.file("enhancers"))?;
    let mut artifacts = Vec::new();
    for e in registry.iter() {
        let path = enhancer_path(&dir, e.name());
        save_enhancer(e, &path)?;
        artifacts.push(dir.relative(&path));
        println!("{} {}", e.name(), e.hash());
    }
    if let Some(r) = report {
        let mut log = format!("epoch=0 mse={}\n", r.initial_mse);
        for (i, m) in r.epoch_mse.iter().enumerate() {
            log.push_str(&format!("epoch={} mse={m}\n", i + 1));
        }
        fs::write(dir.file("enhancers.log"), log)?;
        artifacts.push("enhancers.log".into());
    }
    dir.record("train-enhancer", artifacts, started)?;
    Ok(())
}

fn load_registry(dir: &RunDir, cfg: &ExperimentConfig) -> Result<EnhancerRegistry> {
    let mut out = Vec::new();
    for name in &cfg.enhancers {
        let path = enhancer_path(dir, name);
        out.push(
            load_enhancer(&path)
                .with_context(|| format!("enhancer `{name}`; run `ufema train-enhancer` first"))?,
        );
    }
    Ok(EnhancerRegistry::new(out))
}

fn pretrain(run: Option<&str>, config: &Path, resume: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let mut dir = RunDir::create(&run_name(run, config)?, &cfg)?;
    let started = Instant::now();
    let corpus = build_corpus(&cfg)?;
    let pc = cfg.pretrain_config();
    let lr = pc.lr;
    let mut trainer = Pretrainer::new(
        &corpus.train,
        &cfg.feature_config(),
        &cfg.encoder_config(),
        cfg.aam_config(),
        pc,
    )?;
    let partial = dir.file("encoder.partial.ckpt");
    let mut log = fs::OpenOptions::new();
    log.create(true);
    if resume {
        let ck = EncoderCheckpoint::load(&partial)
            .context("no partial pretraining checkpoint to resume")?;
        let p = ck
            .progress
            .context("partial checkpoint lacks optimizer state")?;
        trainer = trainer.resume(PretrainState {
            encoder: ck.params,
            head: ck.head_params,
            encoder_opt: p.encoder_opt,
            head_opt: p.head_opt,
            step: p.step,
        })?;
        log.append(true);
    } else {
        log.write(true).truncate(true);
    }
    let mut log = log.open(dir.file("pretrain.log"))?;
    let spe = trainer.steps_per_epoch() as u64;
    let total = trainer.total_steps();
    while trainer.state.step < total {
        let target = (trainer.state.step / spe + 1) * spe;
        let mut lines = String::new();
        trainer.run_until(target, |s| {
            lines.push_str(&log_line(s, lr));
            lines.push('\n');
        })?;
        log.write_all(lines.as_bytes())?;
        checkpoint_of(&trainer, true).save(&partial)?;
        eprintln!("pretrain: step {}/{total}", trainer.state.step);
    }
    checkpoint_of(&trainer, false).save(dir.file("encoder.ckpt"))?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    dir.record(
        "pretrain-encoder",
        vec!["encoder.ckpt".into(), "pretrain.log".into()],
        started,
    )?;
    Ok(())
}

fn checkpoint_of(t: &Pretrainer<'_>, with_progress: bool) -> EncoderCheckpoint {
    EncoderCheckpoint {
        encoder: t.encoder.clone(),
        params: t.state.encoder.clone(),
        head: t.head.clone(),
        head_params: t.state.head.clone(),
        progress: with_progress.then(|| PretrainProgress {
            encoder_opt: t.state.encoder_opt.clone(),
            head_opt: t.state.head_opt.clone(),
            step: t.state.step,
        }),
    }
}

fn load_pretrained(dir: &RunDir, required: bool) -> Result<Option<EncoderCheckpoint>> {
    let path = dir.file("encoder.ckpt");
    if !required && !path.exists() {
        return Ok(None);
    }
    EncoderCheckpoint::load(&path)
        .map(Some)
        .context("pretrained encoder; run `ufema pretrain-encoder` first")
}

fn train(run: Option<&str>, config: &Path, ablate: Option<&str>, resume: bool) -> Result<()> {
    let base = load_config(config)?;
    let mut dir = RunDir::create(&run_name(run, config)?, &base)?;
    let started = Instant::now();
    let (cfg, sub) = match ablate {
        Some(a) => {
            let arm: Arm = a.parse()?;
            (arm.apply(&base)?, format!("arms/{arm}"))
        }
        None => (base.clone(), "joint".to_string()),
    };
    fs::create_dir_all(dir.file(&sub))?;
    let registry = load_registry(&dir, &base)?;
    let pretrained = load_pretrained(&dir, cfg.encoder_mode != EncoderMode::Scratch)?;
    let corpus = build_corpus(&cfg)?;
    let mut trainer = JointTrainer::new(&cfg, &corpus, &registry, pretrained.as_ref())?;
    let partial = dir.file(&format!("{sub}/joint.partial.ckpt"));
    let log_path = dir.file(&format!("{sub}/train.log"));
    let mut log = if resume {
        trainer = trainer
            .resume(JointCheckpoint::load(&partial).context("no partial checkpoint to resume")?)?;
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let spe = trainer.steps_per_epoch() as u64;
    let total = trainer.total_steps();
    while trainer.state.step < total {
        let target = (trainer.state.step / spe + 1) * spe;
        let mut lines = String::new();
        trainer.run_until(target, |s| {
            lines.push_str(&log_line(s, cfg.lr));
            lines.push('\n');
        })?;
        log.write_all(lines.as_bytes())?;
        trainer.state.save(&partial)?;
        eprintln!("train: step {}/{total}", trainer.state.step);
    }
    let final_path = dir.file(&format!("{sub}/joint.ckpt"));
    trainer.state.save(&final_path)?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    let stage = match ablate {
        Some(_) => format!("train:{sub}"),
        None => "train".to_string(),
    };
    let artifacts = vec![dir.relative(&final_path), dir.relative(&log_path)];
    dir.record(&stage, artifacts, started)?;
    println!("{}", final_path.display());
    Ok(())
}

fn parse_conditions(spec: &str, cfg: &ExperimentConfig) -> Result<Vec<Condition>> {
    if spec.trim() == "all" {
        let mut out: Vec<Condition> = cfg
            .eval_snrs
            .iter()
            .flat_map(|&s| noisy_conditions(s))
            .collect();
        out.push(Condition::clean());
        return Ok(out);
    }
    let out = spec
        .split(',')
        .map(|c| c.trim().parse::<Condition>())
        .collect::<ufema::Result<Vec<_>>>()?;
    if out.is_empty() {
        bail!("no conditions given");
    }
    Ok(out)
}

fn evaluate(ckpt_path: &Path, trials: &Path, conditions: &str) -> Result<()> {
    let ckpt = JointCheckpoint::load(ckpt_path)?;
    let mut dir = RunDir::enclosing(ckpt_path)?;
    let started = Instant::now();
    let base = ExperimentConfig::load(dir.file("config.toml"))?;
    let registry = load_registry(&dir, &base)?;
    let conditions = parse_conditions(conditions, &ckpt.config)?;
    let trials_list = read_trials(trials)?;
    let corpus = build_corpus(&ckpt.config)?;
    let utts: Vec<Utterance> = corpus
        .eval
        .iter()
        .chain(&corpus.eval_seen)
        .cloned()
        .collect();
    let evaluator = Evaluator::new(&utts, &corpus.test_noise, ckpt.config.seed)?;
    let pipeline = joint_pipeline(&ckpt, &registry)?;
    let table = evaluator.evaluate(&pipeline, &trials_list, &conditions)?;
    let csv = table.to_csv();
    let stem = trials
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let out = ckpt_path.with_file_name(format!("eer_{stem}.csv"));
    fs::write(&out, &csv)?;
    print!("{csv}");
    let rel = dir.relative(&out.canonicalize()?);
    dir.record(&format!("evaluate:{rel}"), vec![rel.clone()], started)?;
    Ok(())
}

fn sweep(ckpt_path: &Path, weights: &str) -> Result<()> {
    let weights = parse_weights(weights)?;
    let ckpt = JointCheckpoint::load(ckpt_path)?;
    let mut dir = RunDir::enclosing(ckpt_path)?;
    let started = Instant::now();
    let base = ExperimentConfig::load(dir.file("config.toml"))?;
    let registry = load_registry(&dir, &base)?;
    let pretrained = load_pretrained(&dir, true)?.expect("required");
    let corpus = build_corpus(&base)?;
    let trials = make_trials(&corpus.eval, base.seed)?;
    let result = sweep_interpolation(
        &base,
        &corpus,
        &registry,
        &pretrained,
        Some(&ckpt),
        &weights,
        &trials,
    )?;
    let out_dir = ckpt_path.parent().unwrap_or(Path::new("."));
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, result.to_csv())?;
    let mut artifacts = vec![dir.relative(&csv_path.canonicalize()?)];
    let combined = out_dir.join("sweep.svg");
    emit_plot(&result.series(), &combined)?;
    artifacts.push(dir.relative(&combined.canonicalize()?));
    for series in result.series() {
        let svg = out_dir.join(format!("sweep_{}.svg", series.label));
        emit_plot(std::slice::from_ref(&series), &svg)?;
        artifacts.push(dir.relative(&svg.canonicalize()?));
    }
    print!("{}", result.to_csv());
    dir.record("sweep-interp", artifacts, started)?;
    Ok(())
}

fn ablate(run: Option<&str>, config: &Path) -> Result<()> {
    let base = load_config(config)?;
    let mut dir = RunDir::create(&run_name(run, config)?, &base)?;
    let started = Instant::now();
    let registry = load_registry(&dir, &base)?;
    let pretrained = load_pretrained(&dir, true)?.expect("required");
    let corpus = build_corpus(&base)?;
    let trials = make_trials(&corpus.eval, base.seed)?;
    let arms = Arm::matrix(&base.enhancers);
    let rows = run_ablation_matrix(&base, &arms, &corpus, &registry, &pretrained, &trials)?;
    let csv = ablation_csv(&rows);
    fs::write(dir.file("ablation.csv"), &csv)?;
    print!("{csv}");
    dir.record("ablate", vec!["ablation.csv".into()], started)?;
    Ok(())
}
