use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use auattn::dataio::{build_index, generate_synthetic, load_image, Policy, SyntheticSpec};
use auattn::model::{self, parse_pool_schedule, ModelConfig};
use auattn::trainer::{self, load_checkpoint, Trainer, TrainConfig, CHECKPOINT_FILE};
use auattn::verify::{gradient_suite, SuiteOptions, GRADCHECK_TOLERANCE};

use crate::{EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

/// Share of the dataset, taken from its end, held out for validation.
const VAL_FRACTION: f64 = 0.2;

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let model_config = ModelConfig {
        pool_schedule: parse_pool_schedule(&args.pool_schedule)?,
        ..ModelConfig::default()
    };
    model_config.validate()?;
    let config = TrainConfig {
        initial_lr: args.lr,
        post_lr: args.lr / 10.0,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        deterministic: args.deterministic,
        checkpoint_dir: Some(args.out.clone()),
        bn_refresh: !args.no_bn_refresh,
        ..TrainConfig::default()
    };
    config.validate()?;

    let index = build_index(&args.data, args.policy)
        .with_context(|| format!("indexing {}", args.data.display()))?;
    let val_len = ((index.len() as f64) * VAL_FRACTION).round() as usize;
    let (train_index, val_index) = index.split_tail(val_len.max(1))?;
    log::info!(
        "{} training and {} validation frames ({} policy)",
        train_index.len(),
        val_index.len(),
        args.policy
    );

    let existing = args.out.join(CHECKPOINT_FILE);
    let mut trainer = if existing.is_file() {
        let checkpoint = load_checkpoint(&existing)?;
        if checkpoint.model_config != model_config {
            bail!("{} was trained with a different model configuration", existing.display());
        }
        log::info!("resuming from {} after epoch {}", existing.display(), checkpoint.epoch);
        Trainer::resume(checkpoint, config, &train_index)?
    } else {
        Trainer::new(model_config, config, &train_index)?
    };

    let start = Instant::now();
    trainer.fit(&train_index, Some(&val_index))?;
    if let Some(last) = trainer.log().last() {
        println!(
            "epoch {} lr {} loss {:.6} macro_f1 {} ({:.1?})",
            last.epoch,
            last.lr,
            last.loss,
            last.macro_f1.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
            start.elapsed()
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let index = build_index(&args.data, Policy::Mask)
        .with_context(|| format!("indexing {}", args.data.display()))?;
    let report = trainer::evaluate(
        &checkpoint.params,
        &checkpoint.model_config,
        &index,
        args.threshold,
        checkpoint.train_config.batch_size,
    )?;
    print!("{}", report.to_text(args.verbose));
    Ok(ExitCode::SUCCESS)
}

pub fn predict(args: PredictArgs) -> Result<ExitCode> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let config = &checkpoint.model_config;
    let image = load_image(&args.image, config.input_size)?;
    let batch = image.reshape(vec![1, config.input_size, config.input_size, 3])?;
    let probs = model::infer(&checkpoint.params, config, batch)?;
    let threshold = checkpoint.train_config.threshold;
    for (name, &p) in checkpoint.au_names.iter().zip(probs.data()) {
        println!("{name} {p:.6} {}", u8::from(f64::from(p) >= threshold));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(args: SynthArgs) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        image_size: args.size,
        ..SyntheticSpec::new(args.n, args.seed)
    };
    generate_synthetic(&spec, &args.out)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let entries = gradient_suite(&SuiteOptions {
        points: args.points,
        seed: args.seed,
        ..SuiteOptions::default()
    })?;
    let mut all_passed = true;
    for e in &entries {
        let r = &e.report;
        all_passed &= e.passed();
        println!(
            "{:<26} max_rel_error {:.3e}  checked {:>6}  skipped {:>5}  {}",
            e.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {GRADCHECK_TOLERANCE:e}; {} in {:.1?}",
        if all_passed { "all passed" } else { "FAILED" },
        start.elapsed()
    );
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

