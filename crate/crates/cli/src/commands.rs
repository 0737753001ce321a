//! One function per pipeline stage. Each reads its inputs from, and writes
//! its outputs to, the run directory under fixed file names.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use secos_core::adapter_net::checkpoint;
use secos_core::datamodel::DatasetSplit;
use secos_core::encoders::synthetic::SyntheticWorld;
use secos_core::experiment::{ExperimentConfig, SyntheticSetup};
use secos_core::ncsc::{DnDiagnostics, GlobalPseudoLabels, Origin, PseudoLabelSet};
use secos_core::trainer::{global_pseudo_labels, recapture_pass, run_training, FrozenParts, TeacherMode};

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const SPLIT: &str = "split.json";
pub const PROMPTS: &str = "prompts.json";
pub const EMBEDDINGS: &str = "class_embeddings.bin";
pub const DN: &str = "dn.jsonl";
pub const DN_DIAGNOSTICS: &str = "dn_diagnostics.json";
pub const BWSR_DEBUG: &str = "bwsr_debug.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const EMA_CHECKPOINT: &str = "ema_checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";

/// One run: a resolved config and the directory holding its artifacts.
#[derive(Debug, Clone)]
pub struct Run {
    /// Preset run name, if any.
    pub name: Option<String>,
    /// Sweep-axis value, if any.
    pub value: Option<String>,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
}

impl Run {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Path of an upstream artifact, or an error naming the command that
    /// produces it.
    pub fn require(&self, file: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if !p.is_file() {
            bail!("{} not found; run `secos {producer}` first", p.display());
        }
        Ok(p)
    }

    fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.dir.display().to_string())
    }

    /// The benchmark with the split read back from disk. The data and encoder
    /// settings must match those the split was built with.
    fn setup(&self) -> Result<SyntheticSetup> {
        let split_path = self.require(SPLIT, "split")?;
        let snapshot = ExperimentConfig::from_toml(&std::fs::read_to_string(self.require(CONFIG, "split")?)?)?;
        if snapshot.seed != self.config.seed
            || snapshot.data != self.config.data
            || snapshot.encoder != self.config.encoder
        {
            bail!(
                "{} was built with a different seed, data or encoder configuration; re-run `secos split`",
                split_path.display()
            );
        }
        let mut setup = SyntheticSetup::new(&self.config)?;
        let split = DatasetSplit::load(&split_path).with_context(|| format!("loading {}", split_path.display()))?;
        if split.label_space != setup.split.label_space {
            bail!("{} does not match the configured classes; re-run `secos split`", split_path.display());
        }
        setup.split = split;
        Ok(setup)
    }
}

fn frozen<'a>(
    setup: &'a SyntheticSetup,
    teacher: &'a dyn secos_core::encoders::ImageEncoder,
    config: &ExperimentConfig,
) -> FrozenParts<'a, SyntheticWorld> {
    FrozenParts {
        source: &setup.world,
        backbone: &setup.backbone,
        embeds: &setup.embeds,
        teacher: (config.train.teacher_mode == TeacherMode::ExternalTeacher).then_some(teacher),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn split(run: &Run) -> Result<()> {
    std::fs::create_dir_all(&run.dir).with_context(|| format!("creating {}", run.dir.display()))?;
    let setup = SyntheticSetup::new(&run.config)?;
    std::fs::write(run.path(CONFIG), run.config.to_toml()?)?;
    setup.manifest.save(&run.path(MANIFEST))?;
    setup.split.save(&run.path(SPLIT))?;
    setup.prompts.save(&run.path(PROMPTS))?;
    setup.embeds.save_cache(&run.path(EMBEDDINGS))?;
    let s = &setup.split;
    println!(
        "{}: split with {} labeled, {} unlabeled, {} test samples ({} known, {} novel classes)",
        run.label(),
        s.labeled.len(),
        s.unlabeled.len(),
        s.test.len(),
        s.label_space.num_known(),
        s.label_space.num_novel()
    );
    Ok(())
}

pub fn pseudo_global(run: &Run) -> Result<()> {
    let setup = run.setup()?;
    let teacher = setup.teacher();
    let init = setup.initial_params(&run.config)?;
    let train = run.config.seeded_train();
    let g = global_pseudo_labels(&setup.split, &frozen(&setup, &teacher, &run.config), &init, &train)?;
    g.set.save(&setup.split.label_space, &run.path(DN))?;
    std::fs::write(run.path(DN_DIAGNOSTICS), serde_json::to_string_pretty(&g.diagnostics)?)?;
    for w in &g.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    let truth = setup.split.truth_map();
    let precision = g.set.precision(|id| truth.get(id).copied());
    println!(
        "{}: {} global pseudo labels, precision {}",
        run.label(),
        g.set.len(),
        precision.map_or("n/a".into(), |p| format!("{p:.3}"))
    );
    Ok(())
}

pub fn pseudo_batch(run: &Run) -> Result<()> {
    let setup = run.setup()?;
    let teacher = setup.teacher();
    let init = setup.initial_params(&run.config)?;
    let batches =
        recapture_pass(&setup.split, &frozen(&setup, &teacher, &run.config), &init, &run.config.seeded_train())?;
    let mut out = create(&run.path(BWSR_DEBUG))?;
    let (mut picked, mut hits, mut total) = (0usize, 0usize, 0usize);
    for b in &batches {
        writeln!(out, "{}", serde_json::to_string(b)?)?;
        for s in &b.samples {
            total += 1;
            if let Some(p) = s.pseudo_label {
                picked += 1;
                hits += usize::from(s.truth == Some(p));
            }
        }
    }
    out.flush()?;
    let precision = if picked > 0 { format!("{:.3}", hits as f64 / picked as f64) } else { "n/a".into() };
    println!(
        "{}: {} batches, {picked} of {total} samples pseudo-labeled, precision {precision}",
        run.label(),
        batches.len()
    );
    Ok(())
}

pub fn train(run: &Run) -> Result<()> {
    let setup = run.setup()?;
    let labels = &setup.split.label_space;
    let global = if run.config.train.use_dn {
        let path = run.require(DN, "pseudo-global")?;
        let set = PseudoLabelSet::load(Origin::Global, labels, &path)
            .with_context(|| format!("loading {}", path.display()))?;
        let diag = run.path(DN_DIAGNOSTICS);
        let diagnostics: DnDiagnostics = if diag.is_file() {
            serde_json::from_str(&std::fs::read_to_string(&diag)?)?
        } else {
            DnDiagnostics::default()
        };
        Some(GlobalPseudoLabels { set, diagnostics })
    } else {
        None
    };
    let teacher = setup.teacher();
    let init = setup.initial_params(&run.config)?;
    let mut log = create(&run.path(TRAIN_LOG))?;
    let outcome = run_training(
        &setup.split,
        &frozen(&setup, &teacher, &run.config),
        init,
        &run.config.seeded_train(),
        global,
        Some(&mut log),
    )?;
    log.flush()?;
    checkpoint::save(&outcome.params, &run.path(CHECKPOINT))?;
    if let Some(ema) = &outcome.ema {
        checkpoint::save(ema, &run.path(EMA_CHECKPOINT))?;
    }
    let last = outcome.log.last().map_or(f64::NAN, |m| m.loss);
    println!("{}: trained {} steps, final loss {last:.4}", run.label(), outcome.log.len());
    Ok(())
}

pub fn eval(run: &Run) -> Result<()> {
    let ckpt = run.require(CHECKPOINT, "train")?;
    let setup = run.setup()?;
    let params = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let report = setup.evaluate(&params, run.config.train.logit_scale)?;
    report.save(&run.path(EVAL_REPORT))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.3}"));
    println!(
        "{}: classify all {:.3} known {} novel {} | cluster all {:.3} known {} novel {}",
        run.label(),
        report.acc_classify.all,
        fmt(report.acc_classify.known),
        fmt(report.acc_classify.novel),
        report.acc_cluster.all,
        fmt(report.acc_cluster.known),
        fmt(report.acc_cluster.novel)
    );
    Ok(())
}
