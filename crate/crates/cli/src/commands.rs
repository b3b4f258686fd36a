use std::path::Path;

use serde_json::{json, Value};
use urt_core::config::{parse_override, RunConfig};
use urt_core::eval::{ablate, attention_heatmap, average_accuracy, evaluate, head_sweep};
use urt_core::store::{generate_synthetic_store, FeatureStore};
use urt_core::train::{gradcheck, load_model, save_model, train, TrainedModel};
use urt_core::layer::Ablation;
use urt_core::{Result, UrtError};

use crate::{Command, ConfigArgs, Failure};

/// Largest accepted gradient-check error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Config file, then `--set` overrides, then dedicated flags.
fn resolve(args: &ConfigArgs, flags: &[(&str, Value)]) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend(flags.iter().map(|(k, v)| (k.to_string(), v.clone())));
    base.with_overrides(&overrides)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| UrtError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| UrtError::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn load_checked(store: &str, model: &str) -> Result<(FeatureStore, TrainedModel)> {
    let store = FeatureStore::load(Path::new(store))?;
    let model = load_model(Path::new(model))?;
    model.check_store(&store)?;
    Ok((store, model))
}

fn opt<T: Into<Value>>(key: &'static str, v: Option<T>) -> Option<(&'static str, Value)> {
    v.map(|v| (key, v.into()))
}

pub fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::GenSynth { cfg, out } => {
            let cfg = resolve(&cfg, &[("paths.store", out.clone().into())])?;
            let store = generate_synthetic_store(&cfg.synth)?;
            store.save(Path::new(&out))?;
            log::info!("wrote store with {} samples to {out}", store.len());
        }
        Command::Train { cfg, store, out } => {
            let cfg = resolve(
                &cfg,
                &[
                    ("paths.store", store.clone().into()),
                    ("paths.model", out.clone().into()),
                ],
            )?;
            let store = FeatureStore::load(Path::new(&store))?;
            let model = train(&store, &cfg.train)?;
            save_model(&model, Path::new(&out))?;
            log::info!("final training loss {:.6}", model.final_train_loss);
        }
        Command::Eval {
            cfg,
            store,
            model,
            split,
            tasks,
            report,
        } => {
            let mut flags = vec![
                ("paths.store", store.clone().into()),
                ("paths.model", model.clone().into()),
                ("paths.report", report.clone().into()),
            ];
            flags.extend(opt("eval.split", split));
            flags.extend(opt("eval.tasks_per_domain", tasks));
            let cfg = resolve(&cfg, &flags)?;
            let (store, model) = load_checked(&store, &model)?;
            let e = &cfg.eval;
            let domains = evaluate(
                &model.params,
                &store,
                e.split,
                e.tasks_per_domain,
                &cfg.sampler,
                e.seed,
            )?;
            let average = average_accuracy(&domains);
            write_json(
                Path::new(&report),
                &json!({
                    "command": "eval",
                    "config": cfg.echo(),
                    "model_fingerprint": model.fingerprint(),
                    "store_fingerprint": store.fingerprint(),
                    "split": e.split,
                    "tasks_per_domain": e.tasks_per_domain,
                    "domains": domains,
                    "average_accuracy": average,
                }),
            )?;
            log::info!("average accuracy {average:.4}");
        }
        Command::Gradcheck { seed, trials } => {
            let report = gradcheck(seed, trials)?;
            for (i, t) in report.trials.iter().enumerate() {
                println!(
                    "trial {i}: m={} d={} l={} H={} N={} shots={:?} lambda={} max_rel_err={:e}",
                    t.num_backbones,
                    t.dim,
                    t.key_dim,
                    t.heads,
                    t.num_classes,
                    t.shots,
                    t.lambda,
                    t.max_relative_error
                );
            }
            println!("max relative error: {:e}", report.max_relative_error);
            let err = report.max_relative_error;
            if err.is_nan() || err > GRADCHECK_TOLERANCE {
                return Err(Failure::Check(format!(
                    "max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_relative_error
                )));
            }
        }
        Command::SweepHeads {
            cfg,
            store,
            min,
            max,
            tasks,
            report,
        } => {
            let mut flags = vec![
                ("paths.store", store.clone().into()),
                ("paths.report", report.clone().into()),
            ];
            flags.extend(opt("eval.min_heads", min));
            flags.extend(opt("eval.max_heads", max));
            flags.extend(opt("eval.tasks_per_domain", tasks));
            let cfg = resolve(&cfg, &flags)?;
            let store = FeatureStore::load(Path::new(&store))?;
            let e = &cfg.eval;
            let heads: Vec<usize> = (e.min_heads..=e.max_heads).collect();
            let sweep = head_sweep(&store, &cfg.train, &heads, e.tasks_per_domain, e.seed)?;
            write_json(
                Path::new(&report),
                &json!({
                    "command": "sweep-heads",
                    "config": cfg.echo(),
                    "store_fingerprint": store.fingerprint(),
                    "split": "valid",
                    "rows": sweep.rows,
                    "selected_heads": sweep.selected_heads,
                }),
            )?;
            log::info!("selected H={}", sweep.selected_heads);
        }
        Command::Ablate {
            cfg,
            store,
            mode,
            tasks,
            report,
        } => {
            let mode_value: Ablation = mode.parse()?;
            if mode_value == Ablation::None {
                return Err(UrtError::Config(
                    "ablation mode must be one of no_wq, no_wk, no_setrep, no_reg".into(),
                )
                .into());
            }
            let mut flags = vec![
                ("paths.store", store.clone().into()),
                ("paths.report", report.clone().into()),
            ];
            flags.extend(opt("eval.tasks_per_domain", tasks));
            let cfg = resolve(&cfg, &flags)?;
            let store = FeatureStore::load(Path::new(&store))?;
            let e = &cfg.eval;
            let result = ablate(&store, &cfg.train, mode_value, e.split, e.tasks_per_domain, e.seed)?;
            write_json(
                Path::new(&report),
                &json!({
                    "command": "ablate",
                    "config": cfg.echo(),
                    "store_fingerprint": store.fingerprint(),
                    "split": e.split,
                    "tasks_per_domain": e.tasks_per_domain,
                    "result": result,
                }),
            )?;
            log::info!("accuracy drop {:.4}", result.accuracy_drop);
        }
        Command::Heatmap {
            cfg,
            store,
            model,
            split,
            tasks,
            out,
        } => {
            let mut flags = vec![
                ("paths.store", store.clone().into()),
                ("paths.model", model.clone().into()),
                ("paths.out", out.clone().into()),
            ];
            flags.extend(opt("eval.split", split));
            flags.extend(opt("eval.tasks_per_domain", tasks));
            let cfg = resolve(&cfg, &flags)?;
            let (store, model) = load_checked(&store, &model)?;
            let e = &cfg.eval;
            let hm = attention_heatmap(
                &model.params,
                &store,
                e.split,
                e.tasks_per_domain,
                &cfg.sampler,
                e.seed,
            )?;
            write_file(Path::new(&format!("{out}.csv")), hm.to_csv().as_bytes())?;
            for h in 0..hm.num_heads() {
                write_file(Path::new(&format!("{out}_head{h}.pgm")), &hm.to_pgm(h))?;
            }
            write_json(
                Path::new(&format!("{out}.json")),
                &json!({
                    "command": "heatmap",
                    "config": cfg.echo(),
                    "model_fingerprint": model.fingerprint(),
                    "store_fingerprint": store.fingerprint(),
                    "split": e.split,
                    "heatmap": hm,
                }),
            )?;
        }
    }
    Ok(())
}
