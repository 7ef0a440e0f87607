//! Acceptance run: prints one PASS/FAIL line per criterion, 2 through 10.
//!
//! Criteria 7 and 8 train the default model on synthetic data and take
//! minutes on one core; set `AUATTN_ACCEPTANCE_QUICK=1` to skip them.
//! The process fails if any criterion fails other than those listed in
//! [`KNOWN_UNMET`], which are still reported as FAIL.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use auattn::dataio::{au_region, load_image, ordered_batches, DatasetIndex};
use auattn::model::ModelConfig;
use auattn::objective::macro_f1;
use auattn::trainer::{log_csv, Checkpoint, EpochLog, TrainConfig, Trainer};
use auattn::verify::{gradient_suite, SuiteOptions};
use auattn::{exec, Error};
use common::attention::attention_sweep;
use common::sweeps::{class_weight_sweep, f1_sweep, loss_sweep};
use common::{small_model, synthetic_index};

/// Criteria this build does not meet.
const KNOWN_UNMET: &[u32] = &[];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let entries = match gradient_suite(&SuiteOptions::default()) {
        Ok(e) => e,
        Err(e) => return Outcome::new(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let mut failed = Vec::new();
    for e in &entries {
        println!(
            "    {:<26} max rel error {:.3e} ({} checked, {} skipped) {}",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.skipped,
            if e.passed() { "ok" } else { "FAIL" }
        );
        if !e.passed() {
            failed.push(e.name);
        }
    }
    let fast = elapsed < Duration::from_secs(120);
    Outcome::new(
        failed.is_empty() && fast,
        format!(
            "{} of {} checks below 1e-4 in {:.1}s{}",
            entries.len() - failed.len(),
            entries.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_3() -> Outcome {
    let sweep = loss_sweep(3, 1000);
    Outcome::new(
        sweep.weighted <= 1e-12 && sweep.unit <= 1e-12 && sweep.unrejected == 0,
        format!(
            "1000 triples: worst vs oracle {:.1e}, unit weights vs plain BCE {:.1e}",
            sweep.weighted, sweep.unit
        ),
    )
}

fn criterion_4() -> Outcome {
    let sweep = f1_sweep(4, 1000);
    Outcome::new(
        sweep.mismatches == 0 && sweep.zero_support > 0,
        format!(
            "1000 batches: {} mismatches, {} zero-support AUs scored",
            sweep.mismatches, sweep.zero_support
        ),
    )
}

fn criterion_5() -> Outcome {
    let violations = class_weight_sweep(5, 500);
    Outcome::new(
        violations == 0,
        format!("w * 2 * positives == total: {violations} violations over 500 label sets"),
    )
}

fn criterion_6() -> Outcome {
    let s = attention_sweep(6, 500);
    Outcome::new(
        s.sum <= 1e-6 && s.bounds <= 1e-9 && s.permutation <= 1e-6 && s.identity <= 1e-12,
        format!(
            "500 trials: |sum-1| {:.1e}, bound excess {:.1e}, permutation {:.1e}, single position {:.1e}",
            s.sum, s.bounds, s.permutation, s.identity
        ),
    )
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let index = synthetic_index(dir.path(), 32, 42, 112);
    let config = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let mut trainer = match Trainer::new(ModelConfig::default(), config, &index) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, format!("setup failed: {e}")),
    };
    let batch = ordered_batches(&index, 32, 112).unwrap().next().unwrap().unwrap();
    let start = Instant::now();
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 500 && loss >= 0.05 {
        loss = trainer.train_step(&batch, 0.001).unwrap();
        steps += 1;
    }
    let elapsed = start.elapsed();
    Outcome::new(
        loss < 0.05 && elapsed < Duration::from_secs(300),
        format!("32 samples: loss {loss:.4} after {steps} steps in {:.1}s", elapsed.as_secs_f64()),
    )
}

/// Macro F1 of thresholding each AU region's mean brightness.
fn pixel_oracle(index: &DatasetIndex, size: usize) -> f64 {
    let mut decisions = Vec::with_capacity(index.len() * 12);
    for entry in index.entries() {
        let img = load_image(&entry.image, size).unwrap();
        for au in 0..12 {
            let r = au_region(size, au);
            let mut sum = 0.0;
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    sum += f64::from(img.data()[(y * size + x) * 3]);
                }
            }
            decisions.push(u8::from(sum / (r.width * r.height) as f64 > 0.7));
        }
    }
    macro_f1(&decisions, &index.labels(), index.au_names()).unwrap().macro_f1
}

fn criterion_8(log_out: &mut Vec<EpochLog>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let index = synthetic_index(dir.path(), 2500, 42, 112);
    let (train, val) = index.split_tail(500).unwrap();
    let oracle = pixel_oracle(&val, 112);
    if oracle < 0.95 {
        return Outcome::new(false, format!("pixel-region oracle only reaches {oracle:.4}"));
    }
    let config = TrainConfig {
        seed: 42,
        deterministic: true,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelConfig::default(), config, &train).unwrap();
    let start = Instant::now();
    let mut best = 0.0f64;
    while trainer.epoch() < 20 {
        let row = match trainer.run_epoch(&train, Some(&val)) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("training failed: {e}")),
        };
        let f1 = row.macro_f1.unwrap_or(0.0);
        println!(
            "    epoch {:>2}: lr {}, loss {:.4}, val macro F1 {f1:.4} ({:.0}s)",
            row.epoch,
            row.lr,
            row.loss,
            start.elapsed().as_secs_f64()
        );
        best = best.max(f1);
        if f1 >= 0.90 {
            break;
        }
    }
    log_out.extend_from_slice(trainer.log());
    Outcome::new(
        best >= 0.90,
        format!(
            "pixel oracle {oracle:.4}; val macro F1 {best:.4} after {} epochs ({:.0}s)",
            trainer.epoch(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn small_run(train: &DatasetIndex, val: &DatasetIndex, config: TrainConfig) -> Trainer {
    let mut trainer = Trainer::new(small_model(), config, train).unwrap();
    trainer.fit(train, Some(val)).unwrap();
    trainer
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed: 42,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn criterion_9(dir: &Path) -> Outcome {
    let index = synthetic_index(dir, 40, 42, 32);
    let (train, val) = index.split_tail(8).unwrap();

    let parallel = small_run(&train, &val, small_config(3));
    exec::set_sequential(true);
    let sequential = small_run(&train, &val, small_config(3));
    exec::set_sequential(false);
    let bytes = |t: &Trainer| t.checkpoint().to_bytes().unwrap();
    let same_log = log_csv(parallel.log()) == log_csv(sequential.log());
    let same_state = bytes(&parallel) == bytes(&sequential);

    let halfway = small_run(&train, &val, small_config(2)).checkpoint().to_bytes().unwrap();
    let resumed = (|| -> Result<Trainer, Error> {
        let mut t = Trainer::resume(Checkpoint::from_bytes(&halfway)?, small_config(3), &train)?;
        t.fit(&train, Some(&val))?;
        Ok(t)
    })();
    let resume_ok = match &resumed {
        Ok(t) => log_csv(t.log()) == log_csv(parallel.log()) && bytes(t) == bytes(&parallel),
        Err(_) => false,
    };
    Outcome::new(
        same_log && same_state && resume_ok,
        format!(
            "parallel vs sequential: log {}, checkpoint {}; 2+1 epochs resumed vs 3 straight: {}",
            if same_log { "identical" } else { "differs" },
            if same_state { "identical" } else { "differs" },
            if resume_ok { "bitwise identical" } else { "differs" }
        ),
    )
}

fn criterion_10(dir: &Path, long_log: &[EpochLog]) -> Outcome {
    let index = synthetic_index(dir, 24, 42, 32);
    let (train, val) = index.split_tail(4).unwrap();
    let trainer = small_run(&train, &val, small_config(7));
    let follows = |log: &[EpochLog]| {
        log.iter()
            .all(|r| r.lr == if r.epoch < 5 { 0.001 } else { 0.0001 })
    };
    let lrs: Vec<String> = trainer.log().iter().map(|r| r.lr.to_string()).collect();
    let mut detail = format!("7-epoch log lr: {}", lrs.join(" "));
    if !long_log.is_empty() {
        detail.push_str(&format!(
            "; default-model run ({} epochs) {}",
            long_log.len(),
            if follows(long_log) { "matches" } else { "differs" }
        ));
    }
    Outcome::new(follows(trainer.log()) && trainer.log().len() == 7 && follows(long_log), detail)
}

fn main() -> ExitCode {
    let quick = std::env::var("AUATTN_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let scratch = tempfile::tempdir().unwrap();
    let mut long_log = Vec::new();
    let mut unexpected = Vec::new();
    let mut met = 0;

    let mut record = |n: u32, title: &str, outcome: Option<Outcome>| {
        let Some(o) = outcome else {
            println!("criterion {n:>2} SKIP  {title}");
            return;
        };
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}  {title}: {}", o.detail);
        if o.pass {
            met += 1;
        } else if !KNOWN_UNMET.contains(&n) {
            unexpected.push(n);
        }
    };

    record(2, "gradient suite", Some(criterion_2()));
    record(3, "weighted BCE vs scalar oracle", Some(criterion_3()));
    record(4, "macro F1 vs recount", Some(criterion_4()));
    record(5, "class-weight identity", Some(criterion_5()));
    record(6, "attention pooling properties", Some(criterion_6()));
    record(7, "overfit 32 synthetic samples", (!quick).then(criterion_7));
    record(8, "synthetic end-to-end", (!quick).then(|| criterion_8(&mut long_log)));
    record(9, "determinism and resume", Some(criterion_9(&scratch.path().join("c9"))));
    record(10, "learning-rate schedule", Some(criterion_10(&scratch.path().join("c10"), &long_log)));

    println!("{met} criteria met");
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
