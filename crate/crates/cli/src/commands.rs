use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tokenprint::detector::{detect, DetectionReport};
use tokenprint::evalharness::{
    derive_seed, evaluate, generate_corpora, pretrain_base, run_demo, select_percentile, Corpora,
    DemoConfig, EvalSettings, MetricReport, Schedule, RELIABILITY_LEN_RANGE, SWEEP_PERCENTILES,
};
use tokenprint::fingerprint::{build_sft_rows, load_pair, make_pair, save_pair, PairShape};
use tokenprint::tensorio::{load_corpus, load_matrix, save_corpus, save_matrix, TokenId};
use tokenprint::toylm::{
    load_checkpoint, save_checkpoint, sft_embed, SamplingConfig, SftOptions, ToyLM, TrainOptions,
    TrainStats,
};
use tokenprint::verifier::{
    verify_local, verify_remote, DecimalRenderer, DecodeMode, RemoteConfig, VerificationResult,
};

use crate::error::CliError;
use crate::{
    Cli, Command, DemoArgs, DetectArgs, EmbedArgs, EvaluateArgs, FingerprintArgs, PretrainArgs,
    VerifyArgs,
};

const CORPUS: &str = "corpus.txt";
const HELDOUT: &str = "heldout.txt";
const SCHEDULES: &str = "schedules.json";
const BASE: &str = "base.ckpt";
const UNEMBEDDING: &str = "unembedding.ufpm";
const PRETRAIN_LOSS: &str = "pretrain_loss.jsonl";
const REPORT: &str = "report.json";
const PAIR: &str = "pair.json";
const FINGERPRINTED: &str = "fingerprinted.ckpt";
const SFT_STATS: &str = "sft_stats.json";
const SFT_LOSS: &str = "sft_loss.jsonl";
const METRICS: &str = "metrics.json";
const DEMO_CONFIG: &str = "demo_config.json";

/// Returns the process exit code on success.
pub fn run(cli: &Cli) -> Result<u8, CliError> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(cli, a),
        Command::Detect(a) => cmd_detect(cli, a),
        Command::Fingerprint(a) => cmd_fingerprint(cli, a),
        Command::Embed(a) => cmd_embed(cli, a),
        Command::Verify(a) => cmd_verify(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Demo(a) => cmd_demo(cli, a),
    }
}

fn resolve(cli: &Cli, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.out_dir.join(default))
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", cli.out_dir.display())))?;
    Ok(cli.out_dir.join(name))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Prints `value` as JSON with `--json`, otherwise `human`.
fn emit<T: Serialize>(cli: &Cli, value: &T, human: &str) -> Result<(), CliError> {
    if cli.json {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        println!("{text}");
    } else {
        print!("{human}");
        if !human.ends_with('\n') {
            println!();
        }
    }
    Ok(())
}

fn demo_config(
    seed: u64,
    sequences: usize,
    heldout: usize,
    epochs: usize,
    lr: f64,
    downstream_sequences: usize,
) -> DemoConfig {
    let mut config = DemoConfig {
        seed,
        pretrain_sequences: sequences,
        heldout_sequences: heldout,
        pretrain_epochs: epochs,
        pretrain_lr: lr,
        ..DemoConfig::default()
    };
    for d in &mut config.downstream {
        d.sequences = downstream_sequences;
    }
    config
}

/// One persistence schedule as stored in `schedules.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleFile {
    name: String,
    path: String,
    epochs: usize,
    lr: f64,
}

fn downstream_file(name: &str) -> String {
    format!("downstream-{name}.txt")
}

fn save_pretrain_outputs(
    cli: &Cli,
    config: &DemoConfig,
    corpora: &Corpora,
    base: &ToyLM,
    stats: &TrainStats,
) -> Result<(), CliError> {
    save_corpus(&corpora.corpus, out_path(cli, CORPUS)?)?;
    save_corpus(&corpora.heldout, out_path(cli, HELDOUT)?)?;
    let mut schedules = Vec::new();
    for (s, d) in corpora.downstream.iter().zip(&config.downstream) {
        let file = downstream_file(&d.name);
        save_corpus(&s.corpus, out_path(cli, &file)?)?;
        schedules.push(ScheduleFile {
            name: s.name.clone(),
            path: file,
            epochs: s.epochs,
            lr: s.lr,
        });
    }
    write_json(&out_path(cli, SCHEDULES)?, &schedules)?;
    save_checkpoint(base, out_path(cli, BASE)?)?;
    save_matrix(&base.export_unembedding(), out_path(cli, UNEMBEDDING)?)?;
    write_text(&out_path(cli, PRETRAIN_LOSS)?, &stats.to_jsonl())
}

fn cmd_pretrain(cli: &Cli, a: &PretrainArgs) -> Result<u8, CliError> {
    let config = demo_config(
        cli.seed,
        a.sequences,
        a.heldout,
        a.epochs,
        a.lr,
        a.downstream_sequences,
    );
    let corpora = generate_corpora(&config)?;
    let (base, stats) = pretrain_base(&config, &corpora.corpus)?;
    save_pretrain_outputs(cli, &config, &corpora, &base, &stats)?;
    let reserved = config.model.reserved_ids();
    let summary = json!({
        "checkpoint": cli.out_dir.join(BASE),
        "unembedding": cli.out_dir.join(UNEMBEDDING),
        "losses": stats.losses(),
        "seconds": stats.seconds,
        "model_digest": base.digest(),
        "reserved_ids": [reserved[0], reserved[reserved.len() - 1]],
    });
    let human = format!(
        "pretrained {} sequences for {} epochs, final loss {:.4} ({:.1} s)\nreserved ids {}..={}\nwrote {}",
        corpora.corpus.len(),
        a.epochs,
        stats.losses().last().copied().unwrap_or(f64::NAN),
        stats.seconds,
        reserved[0].0,
        reserved[reserved.len() - 1].0,
        cli.out_dir.display()
    );
    emit(cli, &summary, &human)?;
    Ok(0)
}

fn report_summary(report: &DetectionReport, path: &Path, sidecar: &Path) -> serde_json::Value {
    json!({
        "report": path,
        "distances": sidecar,
        "percentile": report.percentile,
        "tau": report.tau,
        "flagged": report.flagged,
        "unused": report.unused_ids,
        "digest": report.digest(),
    })
}

fn cmd_detect(cli: &Cli, a: &DetectArgs) -> Result<u8, CliError> {
    let matrix = load_matrix(resolve(cli, &a.matrix, UNEMBEDDING))?;
    let unused: BTreeSet<TokenId> = a.unused.iter().map(|&i| TokenId(i)).collect();
    let mut report = detect(&matrix, &unused, a.percentile)?;
    if a.auto_percentile {
        let p = select_percentile(&report.distances, &SWEEP_PERCENTILES, a.min_flagged)
            .ok_or_else(|| {
                CliError::input(format!(
                    "no percentile up to {} flags {} tokens",
                    SWEEP_PERCENTILES[SWEEP_PERCENTILES.len() - 1],
                    a.min_flagged
                ))
            })?;
        report = detect(&matrix, &unused, p)?;
    }
    let path = resolve(cli, &a.out, REPORT);
    ensure_parent(&path)?;
    let sidecar = report.save(&path)?;
    let human = format!(
        "percentile {} (tau {:.6}): {} of {} tokens flagged\nreport {}\ndigest {}",
        report.percentile,
        report.tau,
        report.flagged.len(),
        report.rows(),
        path.display(),
        report.digest()
    );
    emit(cli, &report_summary(&report, &path, &sidecar), &human)?;
    Ok(0)
}

fn cmd_fingerprint(cli: &Cli, a: &FingerprintArgs) -> Result<u8, CliError> {
    let report = DetectionReport::load(resolve(cli, &a.report, REPORT))?;
    let shape = PairShape {
        n_range: (a.n_min, a.n_max),
        m: a.m,
    };
    let pair = make_pair(&report, cli.seed, &shape)?;
    let path = resolve(cli, &a.out, PAIR);
    ensure_parent(&path)?;
    save_pair(&pair, &path)?;
    let ids = |v: &[TokenId]| {
        v.iter()
            .map(|t| t.0.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let human = format!(
        "trigger ({}): {}\ntarget  ({}): {}\nwrote {}",
        pair.trigger.len(),
        ids(&pair.trigger),
        pair.target.len(),
        ids(&pair.target),
        path.display()
    );
    emit(cli, &pair, &human)?;
    Ok(0)
}

fn cmd_embed(cli: &Cli, a: &EmbedArgs) -> Result<u8, CliError> {
    let mut model = load_checkpoint(resolve(cli, &a.checkpoint, BASE))?;
    let pair = load_pair(resolve(cli, &a.pair, PAIR))?;
    if let Some(report_path) = &a.report {
        let report = DetectionReport::load(report_path)?;
        let shape = PairShape {
            n_range: (pair.trigger.len(), pair.trigger.len()),
            m: pair.target.len(),
        };
        pair.validate(&shape, Some(&report))?;
    }
    let rows = build_sft_rows(&pair, a.copies)?;
    let defaults = SftOptions::default();
    let options = SftOptions {
        epochs: a.epochs,
        lr: a.lr,
        lr_multiplier: a.lr_multiplier,
        max_escalations: a.max_escalations,
        loss_target: a.loss_target,
        train: TrainOptions {
            shuffle_seed: derive_seed(cli.seed, "sft-shuffle"),
            ..defaults.train
        },
    };
    let stats = sft_embed(&mut model, &rows, &options)?;
    let matched = verify_local(&model, &pair, &DecodeMode::Greedy)?.matched;
    if !matched {
        log::warn!("the fine-tuned model does not reproduce the target");
    }
    let path = resolve(cli, &a.out, FINGERPRINTED);
    ensure_parent(&path)?;
    save_checkpoint(&model, &path)?;
    write_json(&out_path(cli, SFT_STATS)?, &stats)?;
    write_text(&out_path(cli, SFT_LOSS)?, &stats.to_jsonl())?;
    let summary = json!({
        "checkpoint": path,
        "lr_used": stats.lr,
        "attempts": stats.attempts,
        "final_loss": stats.final_loss,
        "seconds": stats.seconds,
        "matched": matched,
        "model_digest": model.digest(),
    });
    let human = format!(
        "embedded after {} attempt(s) at lr {:e}, final loss {:.3e} ({:.1} s)\ngreedy check: {}\nwrote {}",
        stats.attempts,
        stats.lr,
        stats.final_loss.unwrap_or(f64::NAN),
        stats.seconds,
        if matched { "matched" } else { "NOT matched" },
        path.display()
    );
    emit(cli, &summary, &human)?;
    Ok(0)
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<u8, CliError> {
    let pair = load_pair(resolve(cli, &a.pair, PAIR))?;
    let mode = if a.sampled {
        DecodeMode::Sampled {
            config: SamplingConfig {
                top_k: a.top_k,
                top_p: a.top_p,
                temperature: a.temperature,
            },
            seed: cli.seed,
        }
    } else {
        DecodeMode::Greedy
    };
    let result: VerificationResult = match &a.endpoint {
        Some(endpoint) => {
            if !(a.timeout > 0.0 && a.timeout.is_finite()) {
                return Err(CliError::input("--timeout must be positive"));
            }
            let mut config = RemoteConfig::new(endpoint.clone());
            config.path = a.path.clone();
            config.timeout = Duration::from_secs_f64(a.timeout);
            verify_remote(&config, &pair, &DecimalRenderer, &mode)?
        }
        None => {
            let model = load_checkpoint(resolve(cli, &a.checkpoint, FINGERPRINTED))?;
            verify_local(&model, &pair, &mode)?
        }
    };
    let emitted = result
        .emitted
        .iter()
        .map(|t| t.0.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let human = format!(
        "{} (emitted: {emitted}; {:.1} ms)",
        if result.matched {
            "matched"
        } else {
            "not matched"
        },
        result.latency_ms
    );
    emit(cli, &result, &human)?;
    Ok(if result.matched { 0 } else { 3 })
}

fn parse_schedule(spec: &str, vocab_size: usize) -> Result<Schedule, CliError> {
    let bad = || CliError::input(format!("schedule {spec:?} is not NAME:PATH:EPOCHS:LR"));
    let (name, rest) = spec.split_once(':').ok_or_else(bad)?;
    let mut tail = rest.rsplitn(3, ':');
    let lr: f64 = tail.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let epochs: usize = tail.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let path = tail.next().filter(|p| !p.is_empty()).ok_or_else(bad)?;
    Ok(Schedule {
        name: name.to_string(),
        corpus: load_corpus(path, vocab_size)?,
        epochs,
        lr,
    })
}

fn load_schedules(
    cli: &Cli,
    a: &EvaluateArgs,
    vocab_size: usize,
) -> Result<Vec<Schedule>, CliError> {
    if !a.schedules.is_empty() {
        return a
            .schedules
            .iter()
            .map(|s| parse_schedule(s, vocab_size))
            .collect();
    }
    let files: Vec<ScheduleFile> = read_json(&cli.out_dir.join(SCHEDULES))?;
    files
        .into_iter()
        .map(|f| {
            Ok(Schedule {
                name: f.name,
                corpus: load_corpus(cli.out_dir.join(&f.path), vocab_size)?,
                epochs: f.epochs,
                lr: f.lr,
            })
        })
        .collect()
}

fn finish_metrics(cli: &Cli, metrics: &MetricReport) -> Result<(), CliError> {
    write_json(&out_path(cli, METRICS)?, metrics)?;
    emit(cli, metrics, &metrics.table())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<u8, CliError> {
    let base = load_checkpoint(resolve(cli, &a.base, BASE))?;
    let model = load_checkpoint(resolve(cli, &a.model, FINGERPRINTED))?;
    if base.config() != model.config() {
        return Err(CliError::input(
            "base and fingerprinted checkpoints differ in config",
        ));
    }
    let vocab_size = model.config().vocab_size;
    let pair = load_pair(resolve(cli, &a.pair, PAIR))?;
    let heldout = load_corpus(resolve(cli, &a.heldout, HELDOUT), vocab_size)?;
    let schedules = load_schedules(cli, a, vocab_size)?;
    let stats: TrainStats = read_json(&resolve(cli, &a.sft_stats, SFT_STATS))?;
    let settings = EvalSettings {
        reliability_trials: a.trials,
        reliability_len_range: RELIABILITY_LEN_RANGE,
        reliability_seed: derive_seed(cli.seed, "reliability"),
        sampling: SamplingConfig::default(),
        sampling_seeds: (0..a.sampling_seeds).collect(),
        finetune: TrainOptions {
            shuffle_seed: derive_seed(cli.seed, "finetune-shuffle"),
            ..TrainOptions::default()
        },
    };
    let mut metrics = evaluate(
        &base,
        &model,
        &pair,
        &heldout,
        &schedules,
        stats.seconds,
        &settings,
    )?;
    metrics.provenance.master_seed = Some(cli.seed);
    metrics
        .provenance
        .seeds
        .insert("finetune-shuffle".into(), settings.finetune.shuffle_seed);
    finish_metrics(cli, &metrics)?;
    Ok(0)
}

fn cmd_demo(cli: &Cli, a: &DemoArgs) -> Result<u8, CliError> {
    let defaults = DemoConfig::default();
    let mut config = demo_config(
        cli.seed,
        a.sequences,
        defaults.heldout_sequences,
        a.pretrain_epochs,
        defaults.pretrain_lr,
        a.downstream_sequences,
    );
    config.reliability_trials = a.trials;
    write_json(&out_path(cli, DEMO_CONFIG)?, &config)?;
    let started = Instant::now();
    let art = run_demo(&config)?;
    let corpora = Corpora {
        corpus: art.corpus.clone(),
        heldout: art.heldout.clone(),
        downstream: art.downstream.clone(),
    };
    save_pretrain_outputs(cli, &config, &corpora, &art.base, &art.pretrain_stats)?;
    art.report.save(out_path(cli, REPORT)?)?;
    save_pair(&art.pair, out_path(cli, PAIR)?)?;
    save_checkpoint(&art.fingerprinted, out_path(cli, FINGERPRINTED)?)?;
    write_json(&out_path(cli, SFT_STATS)?, &art.sft_stats)?;
    write_text(&out_path(cli, SFT_LOSS)?, &art.sft_stats.to_jsonl())?;
    log::info!("demo finished in {:.1} s", started.elapsed().as_secs_f64());
    if art.metrics.effectiveness_fsr < 100.0 {
        log::warn!("fingerprint was not embedded");
    }
    finish_metrics(cli, &art.metrics)?;
    Ok(0)
}
