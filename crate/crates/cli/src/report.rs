//! Tables and plots folded from evaluation reports and training logs. Never
//! touches a model.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use secos_core::bwsr::PrecisionCounts;
use secos_core::evaluator::{Accuracies, EvalReport};
use secos_core::experiment::{ExperimentConfig, Preset};
use secos_core::trainer::StepMetrics;

use crate::commands::{Run, CONFIG, EVAL_REPORT, TRAIN_LOG};
use crate::plot::{line_chart, Series};

#[derive(Debug, Serialize)]
struct Row {
    run: String,
    value: String,
    classify_known: Option<f64>,
    classify_novel: Option<f64>,
    classify_all: f64,
    cluster_known: Option<f64>,
    cluster_novel: Option<f64>,
    cluster_all: f64,
    singleton_precision: Option<f64>,
    raw_precision: Option<f64>,
    pseudo_per_step: f64,
    steps: usize,
}

struct Collected {
    row: Row,
    use_dn: bool,
    use_bp: bool,
}

fn read_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.as_ref().is_ok_and(|l| l.trim().is_empty()))
        .map(|(i, l)| {
            serde_json::from_str(&l?).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn collect(run: &Run) -> Result<Collected> {
    let report_path = run.require(EVAL_REPORT, "eval")?;
    let report = EvalReport::load(&report_path).with_context(|| format!("loading {}", report_path.display()))?;
    let log = read_log(&run.require(TRAIN_LOG, "train")?)?;
    let config = ExperimentConfig::from_toml(&std::fs::read_to_string(run.require(CONFIG, "split")?)?)?;
    let mut counts = PrecisionCounts::default();
    for m in &log {
        if let Some(c) = &m.precision_counts {
            counts.add(c);
        }
    }
    let pseudo: usize = log.iter().map(|m| m.n_p).sum();
    let (c, k): (Accuracies, Accuracies) = (report.acc_classify, report.acc_cluster);
    Ok(Collected {
        row: Row {
            run: run.name.clone().unwrap_or_else(|| "run".into()),
            value: run.value.clone().unwrap_or_default(),
            classify_known: c.known,
            classify_novel: c.novel,
            classify_all: c.all,
            cluster_known: k.known,
            cluster_novel: k.novel,
            cluster_all: k.all,
            singleton_precision: counts.singleton_precision(),
            raw_precision: counts.raw_precision(),
            pseudo_per_step: if log.is_empty() { 0.0 } else { pseudo as f64 / log.len() as f64 },
            steps: log.len(),
        },
        // The training switches come from the run's own config snapshot.
        use_dn: config.train.use_dn,
        use_bp: config.train.use_bp,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{:.1}", 100.0 * v))
}

fn markdown(preset: Option<&Preset>, rows: &[Collected]) -> String {
    let mut s = String::from("# Results\n\n");
    let ablation = preset.is_some_and(|p| p.name == "ablation");
    match preset {
        Some(p) => {
            let _ = writeln!(s, "Preset `{}`, swept over `{}`. Accuracies in percent.\n", p.name, p.axis);
        }
        None => s.push_str("Single run. Accuracies in percent.\n\n"),
    }
    match preset {
        _ if ablation => table("| N | B ", rows, |r| format!("| {} | {} ", tick(r.use_dn), tick(r.use_bp)), s),
        Some(p) => table(&format!("| {} ", p.axis), rows, |r| format!("| {} ", r.row.value), s),
        None => table("| run ", rows, |r| format!("| {} ", r.row.run), s),
    }
}

fn tick(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

fn table(lead: &str, rows: &[Collected], key: impl Fn(&Collected) -> String, mut s: String) -> String {
    let lead_cols = lead.matches('|').count();
    let _ = writeln!(
        s,
        "{lead}| Known | Novel | All | Known (cl.) | Novel (cl.) | All (cl.) | Singleton prec. | Raw prec. | Pseudo/step |"
    );
    let _ = writeln!(s, "{}|", "|---".repeat(lead_cols + 9));
    for r in rows {
        let w = &r.row;
        let _ = writeln!(
            s,
            "{}| {} | {} | {} | {} | {} | {} | {} | {} | {:.1} |",
            key(r),
            pct(w.classify_known),
            pct(w.classify_novel),
            pct(Some(w.classify_all)),
            pct(w.cluster_known),
            pct(w.cluster_novel),
            pct(Some(w.cluster_all)),
            pct(w.singleton_precision),
            pct(w.raw_precision),
            w.pseudo_per_step
        );
    }
    s.push_str("\nColumns marked (cl.) use the best one-to-one relabeling of predictions; the others score predictions directly.\n");
    s
}

fn csv(rows: &[Collected]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(&r.row)?;
    }
    Ok(w.into_inner()?)
}

/// Writes `report.md` and `summary.csv` to `out`, plus accuracy and
/// precision plots along the sweep axis for presets.
pub fn write(out: &Path, preset: Option<&Preset>, runs: &[Run]) -> Result<()> {
    let rows = runs.iter().map(collect).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.md"), markdown(preset, &rows))?;
    std::fs::write(out.join("summary.csv"), csv(&rows)?)?;
    if let Some(p) = preset {
        let xs: Vec<String> = rows.iter().map(|r| r.row.value.clone()).collect();
        let acc = [
            Series { name: "All".into(), values: rows.iter().map(|r| Some(r.row.classify_all)).collect(), dashed: false },
            Series { name: "Known".into(), values: rows.iter().map(|r| r.row.classify_known).collect(), dashed: false },
            Series { name: "Novel".into(), values: rows.iter().map(|r| r.row.classify_novel).collect(), dashed: false },
            Series {
                name: "All (cluster)".into(),
                values: rows.iter().map(|r| Some(r.row.cluster_all)).collect(),
                dashed: true,
            },
        ];
        let file = format!("accuracy_vs_{}.svg", p.axis);
        std::fs::write(out.join(&file), line_chart(&format!("Test accuracy vs {}", p.axis), p.axis, "accuracy", &xs, &acc))?;
        println!("wrote {}", out.join(file).display());
        if rows.iter().any(|r| r.row.singleton_precision.is_some()) {
            let prec = [
                Series {
                    name: "singleton".into(),
                    values: rows.iter().map(|r| r.row.singleton_precision).collect(),
                    dashed: false,
                },
                Series { name: "raw intersection".into(), values: rows.iter().map(|r| r.row.raw_precision).collect(), dashed: true },
            ];
            let file = format!("precision_vs_{}.svg", p.axis);
            std::fs::write(
                out.join(&file),
                line_chart(&format!("Batch pseudo-label precision vs {}", p.axis), p.axis, "precision", &xs, &prec),
            )?;
            println!("wrote {}", out.join(file).display());
        }
    }
    println!("wrote {}", out.join("report.md").display());
    Ok(())
}
