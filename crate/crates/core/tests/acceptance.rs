//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.
//!
//! The oracles here are written independently of the library: plain loops
//! and sorts over `Vec<f64>`, no shared helpers.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use secos_core::adapter_net::{
    checkpoint, logits, loss_gradients, reference_forward, visual_forward, AdapterInit, AdapterParams, BackboneConfig,
    FrozenBackbone, Projector, ViewedExample,
};
use secos_core::bwsr::{precision_counts, recapture_batch, PrecisionCounts, QuantileRule, RecaptureConfig};
use secos_core::datamodel::{DatasetSplit, LabelSpace, SampleRecord};
use secos_core::encoders::{confidence_matrix, encode_images, ClassEmbeddings, ConfidenceMatrix, InputSource, Provenance, View};
use secos_core::evaluator::{acc_classify, acc_cluster, hungarian_match, EvalReport};
use secos_core::experiment::{ExperimentConfig, SyntheticSetup};
use secos_core::ncsc::build_dn;
use secos_core::trainer::{TeacherMode, TrainOutcome};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax of small integer logits, so rows carry exact ties.
fn tied_probs(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Array2<f64> {
    let levels = rng.random_range(2..6);
    let step: f64 = rng.random_range(0.5..3.0);
    let mut m = Array2::zeros((b, k));
    for i in 0..b {
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(0..levels) as f64 * step).collect();
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..k {
            m[[i, c]] = e[c] / s;
        }
    }
    m
}

// ---------------------------------------------------------------- 1. BWSR

fn naive_quantile(values: &[f64], q: f64, rule: QuantileRule) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    match rule {
        QuantileRule::NearestRank => {
            let mut k = 1;
            while k < n && (k as f64) < q * n as f64 - 1e-9 {
                k += 1;
            }
            v[k - 1]
        }
        QuantileRule::Linear => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            if lo + 1 < n {
                v[lo] + (pos - lo as f64) * (v[lo + 1] - v[lo])
            } else {
                v[lo]
            }
        }
    }
}

struct NaiveBwsr {
    tau: f64,
    theta: Vec<f64>,
    intra: Vec<Vec<usize>>,
    inter: Vec<Vec<usize>>,
    picked: Vec<(usize, usize)>,
}

fn naive_bwsr(p: &Array2<f64>, alpha: f64, beta: f64, rule: QuantileRule) -> NaiveBwsr {
    let (b, k) = p.dim();
    let maxima: Vec<f64> = (0..b)
        .map(|i| {
            let mut row: Vec<f64> = p.row(i).to_vec();
            row.sort_by(|x, y| y.partial_cmp(x).unwrap());
            row[0]
        })
        .collect();
    let tau = naive_quantile(&maxima, alpha, rule);
    let theta: Vec<f64> = (0..k).map(|c| naive_quantile(&p.column(c).to_vec(), beta, rule)).collect();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let mut picked = Vec::new();
    for i in 0..b {
        let mut pairs: Vec<(f64, usize)> = (0..k).map(|c| (p[[i, c]], c)).collect();
        pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let mut acc = 0.0;
        let mut set = Vec::new();
        for (v, c) in pairs {
            set.push(c);
            acc += v;
            if acc > tau {
                break;
            }
        }
        let over: Vec<usize> = (0..k).filter(|&c| p[[i, c]] > theta[c]).collect();
        let both: Vec<usize> = set.iter().copied().filter(|c| over.contains(c)).collect();
        if both.len() == 1 {
            picked.push((i, both[0]));
        }
        intra.push(set);
        inter.push(over);
    }
    NaiveBwsr { tau, theta, intra, inter, picked }
}

fn bwsr_oracle() -> Check {
    let mut r = rng(101);
    let pairs: Vec<(f64, f64)> =
        (0..20).map(|_| (r.random_range(0.01..=1.0), r.random_range(0.01..=1.0))).collect();
    let mut selected = 0usize;
    for n in 0..10_000usize {
        let b = r.random_range(1..=64);
        let k = r.random_range(2..=20);
        let p = tied_probs(&mut r, b, k);
        let (alpha, beta) = if n % 2 == 0 { (0.6, 0.95) } else { pairs[n / 2 % 20] };
        let conf = ConfidenceMatrix::new(p.clone(), Provenance::Teacher).map_err(|e| e.to_string())?;
        let ids: Vec<String> = (0..b).map(|i| format!("s{n}-{i}")).collect();
        for rule in [QuantileRule::NearestRank, QuantileRule::Linear] {
            let got = recapture_batch(&ids, &conf, RecaptureConfig { alpha, beta, quantile: rule })
                .map_err(|e| e.to_string())?;
            let want = naive_bwsr(&p, alpha, beta, rule);
            let entries: Vec<(String, usize, f64)> =
                want.picked.iter().map(|&(i, c)| (ids[i].clone(), c, p[[i, c]])).collect();
            let got_entries: Vec<(String, usize, f64)> =
                got.pseudo.entries.iter().map(|e| (e.sample_id.clone(), e.label, e.confidence)).collect();
            let same = got.thresholds.tau.to_bits() == want.tau.to_bits()
                && got.thresholds.theta.iter().map(|v| v.to_bits()).eq(want.theta.iter().map(|v| v.to_bits()))
                && got.candidates.intra == want.intra
                && got.candidates.inter == want.inter
                && got_entries == entries;
            if !same {
                return Err(format!("batch {n} (B={b}, K={k}, alpha={alpha}, beta={beta}, {rule:?}) differs"));
            }
            selected += entries.len();
        }
    }
    Ok(format!("10000 batches x 2 quantile rules identical, {selected} selections"))
}

// ---------------------------------------------------------------- 2. NCSC

/// Brute force: per novel class, members by (confidence desc, id asc), keep
/// the smallest k >= 1 with 100 k >= phi m.
fn naive_dn(ids: &[String], p: &Array2<f64>, known: usize, phi: u32) -> Vec<(String, usize, f64)> {
    let (n, k) = p.dim();
    let mut out = Vec::new();
    for class in known..k {
        let mut members: Vec<(f64, &String)> = Vec::new();
        for i in 0..n {
            let mut best = 0;
            for c in 1..k {
                if p[[i, c]] > p[[i, best]] {
                    best = c;
                }
            }
            if best == class {
                members.push((p[[i, class]], &ids[i]));
            }
        }
        if members.is_empty() {
            continue;
        }
        members.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let m = members.len() as u64;
        let mut take = 1;
        while 100 * take < phi as u64 * m {
            take += 1;
        }
        out.extend(members[..take as usize].iter().map(|(v, id)| ((*id).clone(), class, *v)));
    }
    out
}

fn ncsc_split(ids: &[String], known: usize, k: usize) -> DatasetSplit {
    let names: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();
    DatasetSplit {
        label_space: LabelSpace::new(names[..known].to_vec(), names[known..].to_vec()).unwrap(),
        labeled: vec![],
        unlabeled: ids
            .iter()
            .map(|id| SampleRecord { sample_id: id.clone(), payload: id.clone(), true_label: None })
            .collect(),
        test: vec![],
        unlabeled_truth: vec![],
    }
}

fn ncsc_oracle() -> Check {
    let mut r = rng(202);
    let mut total = 0usize;
    for n in 0..1000 {
        let rows = if n < 20 { 1000 } else { r.random_range(1..=1000) };
        let k = r.random_range(2..=20);
        let known = r.random_range(1..k);
        let mut ids: Vec<String> = (0..rows).map(|i| format!("u{i:04}")).collect();
        ids.shuffle(&mut r);
        let p = tied_probs(&mut r, rows, k);
        let split = ncsc_split(&ids, known, k);
        let conf = ConfidenceMatrix::new(p.clone(), Provenance::Teacher).map_err(|e| e.to_string())?;
        let phi = r.random_range(1..=100u32);
        let got = build_dn(&split, &conf, phi as f64).map_err(|e| e.to_string())?;
        let got: Vec<(String, usize, f64)> =
            got.set.entries.iter().map(|e| (e.sample_id.clone(), e.label, e.confidence)).collect();
        if got != naive_dn(&ids, &p, known, phi) {
            return Err(format!("instance {n} ({rows}x{k}, phi={phi}) differs"));
        }
        total += got.len();

        let mut prev: Option<Vec<String>> = None;
        for phi in [10.0, 25.0, 50.0, 75.0, 90.0] {
            let set: Vec<String> =
                build_dn(&split, &conf, phi).map_err(|e| e.to_string())?.set.ids().map(str::to_owned).collect();
            if let Some(prev) = &prev {
                if !prev.iter().all(|id| set.contains(id)) {
                    return Err(format!("instance {n}: selection at phi={phi} drops earlier samples"));
                }
            }
            prev = Some(set);
        }
    }
    Ok(format!("1000 instances identical ({total} selections), nested over phi"))
}

// ---------------------------------------------------------------- 3. Hungarian

fn brute_best(pred: &[usize], truth: &[usize], m: usize) -> usize {
    fn rec(pos: usize, used: &mut Vec<bool>, perm: &mut Vec<usize>, counts: &[Vec<usize>], best: &mut usize) {
        let m = counts.len();
        if pos == m {
            *best = (*best).max((0..m).map(|p| counts[p][perm[p]]).sum());
            return;
        }
        for t in 0..m {
            if !used[t] {
                used[t] = true;
                perm.push(t);
                rec(pos + 1, used, perm, counts, best);
                perm.pop();
                used[t] = false;
            }
        }
    }
    let mut counts = vec![vec![0usize; m]; m];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut best = 0;
    rec(0, &mut vec![false; m], &mut Vec::new(), &counts, &mut best);
    best
}

fn hungarian() -> Check {
    let mut r = rng(303);
    for n in 0..1000 {
        let m = r.random_range(1..=6);
        let len = r.random_range(1..60);
        let truth: Vec<usize> = (0..len).map(|_| r.random_range(0..m)).collect();
        let pred: Vec<usize> = (0..len).map(|_| r.random_range(0..m)).collect();
        let w = hungarian_match(&pred, &truth, m).map_err(|e| e.to_string())?;
        let mut sorted = w.clone();
        sorted.sort_unstable();
        if sorted != (0..m).collect::<Vec<_>>() {
            return Err(format!("instance {n}: {w:?} is not a permutation"));
        }
        let agree = pred.iter().zip(&truth).filter(|(&p, &t)| w[p] == t).count();
        let best = brute_best(&pred, &truth, m);
        if agree != best {
            return Err(format!("instance {n}: matched {agree} agreements, brute force {best}"));
        }
    }
    for n in 0..10_000 {
        let m = r.random_range(2..=20);
        let known = r.random_range(1..m);
        let names: Vec<String> = (0..m).map(|c| format!("c{c}")).collect();
        let labels = LabelSpace::new(names[..known].to_vec(), names[known..].to_vec()).unwrap();
        let len = r.random_range(1..200);
        let shift = r.random_range(0..m);
        let noise: f64 = r.random();
        let truth: Vec<usize> = (0..len).map(|_| r.random_range(0..m)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if r.random::<f64>() < noise { r.random_range(0..m) } else { (t + shift) % m })
            .collect();
        let direct = acc_classify(&pred, &truth, &labels).map_err(|e| e.to_string())?;
        let (cluster, _) = acc_cluster(&pred, &truth, &labels).map_err(|e| e.to_string())?;
        if cluster.all < direct.all {
            return Err(format!("pair {n}: cluster {} < classify {}", cluster.all, direct.all));
        }
    }
    Ok("1000 matchings optimal, cluster >= classify on 10000 pairs".into())
}

// ---------------------------------------------------------------- 4. Gradients

fn unit_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((rows, dim), |_| r.random_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

fn gradient_check() -> Check {
    let mut r = rng(404);
    let cfg = BackboneConfig { input_dim: 6, d_model: 8, tokens: 3, blocks: 2, mlp_hidden: 12, residual_gain: 0.5 };
    let backbone = FrozenBackbone::random(cfg, 7).map_err(|e| e.to_string())?;
    let d_text = 6;
    let mut params =
        AdapterParams::init(2, 8, AdapterInit { rank: 4, scale: 1.0 }, Projector::random_orthogonal(d_text, 8, 9), 11)
            .map_err(|e| e.to_string())?;
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let embeds = ClassEmbeddings::from_rows(unit_rows(&mut r, 5, d_text)).map_err(|e| e.to_string())?;
    let examples: Vec<ViewedExample> = (0..4)
        .map(|i| ViewedExample {
            sample_id: format!("x{i}"),
            views: (0..2).map(|_| Array1::from_shape_fn(6, |_| r.random_range(-1.0..1.0))).collect(),
            label: i % 5,
        })
        .collect();
    let scale = 100.0;
    let analytic = loss_gradients(&backbone, &params, &embeds, &examples, scale).map_err(|e| e.to_string())?;
    let flat: Vec<f64> = analytic.grads.tensors().iter().flat_map(|t| t.data.to_vec()).collect();

    let loss_at = |p: &AdapterParams| -> f64 { loss_gradients(&backbone, p, &embeds, &examples, scale).unwrap().loss };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut idx = 0;
    let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
    let mut worst_at = String::new();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].data.len();
        for j in 0..len {
            let orig = params.tensors()[ti].data[j];
            params.tensors_mut()[ti].data[j] = orig + h;
            let up = loss_at(&params);
            params.tensors_mut()[ti].data[j] = orig - h;
            let down = loss_at(&params);
            params.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = flat[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{j}]");
            }
            idx += 1;
        }
    }
    let msg = format!("{idx} scalars, loss {:.4}, max relative error {worst:.2e} at {worst_at}", analytic.loss);
    if worst <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 5. Identity

fn identity_at_init(setup: &SyntheticSetup, cfg: &ExperimentConfig) -> Check {
    let params = setup.initial_params(cfg).map_err(|e| e.to_string())?;
    let scale = cfg.train.logit_scale;
    let mut worst = 0.0f64;
    let mut count = 0;
    for rec in setup.split.test.iter().chain(&setup.split.unlabeled) {
        let x = setup.world.load(rec, View::None, 0).map_err(|e| e.to_string())?;
        let full = logits(visual_forward(&setup.backbone, &params, x.view()).map_err(|e| e.to_string())?.view(), &setup.embeds, scale);
        let frozen = logits(
            reference_forward(&setup.backbone, &setup.reference, x.view()).map_err(|e| e.to_string())?.view(),
            &setup.embeds,
            scale,
        );
        worst = full.iter().zip(&frozen).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        count += 1;
    }
    let msg = format!("{count} samples, max logit difference {worst:.1e}");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 6-9. Runs

struct Run {
    outcome: TrainOutcome,
    report: EvalReport,
    elapsed: Duration,
}

fn train(setup: &SyntheticSetup, cfg: &ExperimentConfig) -> Result<Run, String> {
    let start = Instant::now();
    let outcome = setup.train(cfg, None).map_err(|e| e.to_string())?;
    let report = setup.evaluate(&outcome.params, cfg.train.logit_scale).map_err(|e| e.to_string())?;
    Ok(Run { outcome, report, elapsed: start.elapsed() })
}

fn variant(base: &ExperimentConfig, dn: bool, bp: bool) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.use_dn = dn;
    c.train.use_bp = bp;
    c
}

fn novel(run: &Run) -> f64 {
    run.report.acc_classify.novel.unwrap_or(0.0)
}

fn ablation(runs: &[(&str, &Run)]) -> Check {
    let get = |n: &str| runs.iter().find(|r| r.0 == n).unwrap().1;
    let (none, n, b, nb) = (get("none"), get("N"), get("B"), get("N+B"));
    let elapsed: Duration = runs.iter().map(|r| r.1.elapsed).sum();
    let table = runs
        .iter()
        .map(|(name, r)| format!("{name} all {:.3} novel {:.3}", r.report.acc_classify.all, novel(r)))
        .collect::<Vec<_>>()
        .join(", ");
    let msg = format!("{table}; {:.1}s on one thread", elapsed.as_secs_f64());
    let best_single = n.report.acc_classify.all.max(b.report.acc_classify.all);
    if novel(none) <= 0.30
        && novel(nb) >= 0.80
        && nb.report.acc_classify.all >= best_single
        && elapsed <= Duration::from_secs(600)
    {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn filtering_precision(setup: &SyntheticSetup, cfg: &ExperimentConfig) -> Check {
    let teacher = setup.teacher();
    let u = &setup.split.unlabeled;
    let feats = encode_images(&teacher, u, View::Weak, 5).map_err(|e| e.to_string())?;
    let conf = confidence_matrix(&feats, &setup.embeds, cfg.train.logit_scale, Provenance::Teacher)
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for b in [8usize, 16, 32, 64] {
        let mut order: Vec<usize> = (0..u.len()).collect();
        order.shuffle(&mut rng(b as u64));
        let mut totals = PrecisionCounts::default();
        for chunk in order.chunks(b) {
            let ids: Vec<String> = chunk.iter().map(|&i| u[i].sample_id.clone()).collect();
            let truth: Vec<usize> = chunk.iter().map(|&i| setup.split.unlabeled_truth[i]).collect();
            let rec = recapture_batch(&ids, &conf.select_rows(chunk), cfg.train.recapture()).map_err(|e| e.to_string())?;
            totals.add(&precision_counts(&rec.candidates, &truth).map_err(|e| e.to_string())?);
        }
        let (s, r) = (totals.singleton_precision(), totals.raw_precision());
        ok &= matches!((s, r), (Some(s), Some(r)) if s >= r);
        lines.push(format!("B={b} {:.3}/{:.3} ({} picked)", s.unwrap_or(f64::NAN), r.unwrap_or(f64::NAN), totals.singleton_total));
    }
    let msg = format!("singleton/raw: {}", lines.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn teacher_free(teacher_run: &Run, ema_run: &Run) -> Check {
    let gap = novel(teacher_run) - novel(ema_run);
    let msg = format!("teacher novel {:.3}, EMA novel {:.3}", novel(teacher_run), novel(ema_run));
    if gap.abs() <= 0.10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism(a: &Run, b: &Run) -> Check {
    let ca = checkpoint::to_bytes(&a.outcome.params).map_err(|e| e.to_string())?;
    let cb = checkpoint::to_bytes(&b.outcome.params).map_err(|e| e.to_string())?;
    let ra = serde_json::to_vec(&a.report).map_err(|e| e.to_string())?;
    let rb = serde_json::to_vec(&b.report).map_err(|e| e.to_string())?;
    let msg = format!("checkpoint {} bytes, report {} bytes", ca.len(), ra.len());
    if ca == cb && ra == rb {
        Ok(msg)
    } else {
        Err(format!("runs differ: {msg}"))
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, result: Check| {
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("[PASS] {n} {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {n} {name}: {msg} ({secs:.1}s)");
            }
        }
    };

    let t = Instant::now();
    report(1, "batch recapture matches naive oracle", t, bwsr_oracle());
    let t = Instant::now();
    report(2, "global novel selection matches brute force", t, ncsc_oracle());
    let t = Instant::now();
    report(3, "hungarian matching is optimal", t, hungarian());
    let t = Instant::now();
    report(4, "analytic gradients match finite differences", t, gradient_check());

    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let setup = match SyntheticSetup::new(&cfg) {
        Ok(s) => s,
        Err(e) => {
            println!("[FAIL] synthetic benchmark could not be built: {e}");
            return ExitCode::FAILURE;
        }
    };
    report(5, "identity at initialization", t, identity_at_init(&setup, &cfg));

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
    let t = Instant::now();
    let names = [("none", false, false), ("N", true, false), ("B", false, true), ("N+B", true, true)];
    let runs: Result<Vec<Run>, String> =
        pool.install(|| names.iter().map(|&(_, dn, bp)| train(&setup, &variant(&cfg, dn, bp))).collect());
    let runs = match runs {
        Ok(r) => r,
        Err(e) => {
            println!("[FAIL] 6 ablation runs: {e}");
            return ExitCode::FAILURE;
        }
    };
    let labeled: Vec<(&str, &Run)> = names.iter().map(|n| n.0).zip(&runs).collect();
    report(6, "ablation trend", t, ablation(&labeled));

    let t = Instant::now();
    report(7, "singleton filtering is at least as precise", t, filtering_precision(&setup, &cfg));

    let t = Instant::now();
    let mut ema_cfg = cfg.clone();
    ema_cfg.train.teacher_mode = TeacherMode::Ema;
    let result = train(&setup, &ema_cfg).and_then(|ema| teacher_free(&runs[3], &ema));
    report(8, "teacher-free mode stays close", t, result);

    let t = Instant::now();
    let result = SyntheticSetup::new(&cfg)
        .map_err(|e| e.to_string())
        .and_then(|fresh| train(&fresh, &variant(&cfg, true, true)))
        .and_then(|again| determinism(&runs[3], &again));
    report(9, "same seed gives identical artifacts", t, result);

    if failed == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
