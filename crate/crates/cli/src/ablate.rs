use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;

use moe_health::data::write_atomic;
use moe_health::trainer::{AblationMode, TrainConfig};

use crate::{prepare, tool_meta, train_one, write_json, AblateArgs};

#[derive(Debug, Serialize)]
struct Row {
    mode: AblationMode,
    configuration: &'static str,
    auroc: Vec<f64>,
    delta: Vec<f64>,
    mean_auroc: f64,
    mean_delta: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn test_auroc(report: &serde_json::Value) -> anyhow::Result<f64> {
    report["report"]["test"]["overall"]["auroc"]
        .as_f64()
        .ok_or_else(|| anyhow::anyhow!("test AUROC undefined: the test split holds a single class"))
}

fn markdown(rows: &[Row], seeds: &[u64]) -> String {
    let mut out = String::from("| Configuration | AUROC | ΔAUROC |");
    for s in seeds {
        write!(out, " AUROC (seed {s}) | ΔAUROC (seed {s}) |").unwrap();
    }
    out.push_str("\n|---|---|---|");
    out.push_str(&"---|---|".repeat(seeds.len()));
    out.push('\n');
    for r in rows {
        write!(out, "| {} | {:.4} | {:+.4} |", r.configuration, r.mean_auroc, r.mean_delta).unwrap();
        for (a, d) in r.auroc.iter().zip(&r.delta) {
            write!(out, " {a:.4} | {d:+.4} |").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn run(args: AblateArgs) -> anyhow::Result<()> {
    if args.seeds == 0 {
        return Err(moe_health::Error::Config("--seeds must be positive".into()).into());
    }
    let prep = prepare(&args.flags)?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let out = &args.flags.out;

    let mut per_mode: Vec<(AblationMode, Vec<f64>)> = Vec::new();
    for mode in AblationMode::ALL {
        let mut aurocs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            tracing::info!(%mode, seed, "ablation run");
            let cfg = TrainConfig {
                seed,
                ablation: mode,
                ..prep.train
            };
            let (report, checkpoint) = train_one(&prep, &cfg, "ablate")?;
            let dir = out.join(format!("{mode}-seed{seed}"));
            crate::create_dir(&dir)?;
            checkpoint.save(&dir.join("checkpoint.json"))?;
            write_json(&dir.join("report.json"), &report)?;
            aurocs.push(test_auroc(&report)?);
        }
        per_mode.push((mode, aurocs));
    }

    let full = per_mode[0].1.clone();
    let rows: Vec<Row> = per_mode
        .into_iter()
        .map(|(mode, auroc)| {
            let delta: Vec<f64> = auroc.iter().zip(&full).map(|(a, f)| a - f).collect();
            Row {
                mode,
                configuration: mode.label(),
                mean_auroc: mean(&auroc),
                mean_delta: mean(&delta),
                auroc,
                delta,
            }
        })
        .collect();

    let meta = json!({
        "run": tool_meta("ablate"),
        "dataset_digest": prep.digest,
        "seeds": seeds,
        "split": prep.split_spec,
        "train": prep.train,
    });
    write_json(&out.join("ablation.json"), &json!({ "meta": meta, "rows": rows }))?;
    let table = markdown(&rows, &seeds);
    let header = format!("<!-- {} -->\n\n", serde_json::to_string(&meta)?);
    write_atomic(&out.join("ablation.md"), format!("{header}{table}").as_bytes())?;
    print!("{table}");
    Ok(())
}
