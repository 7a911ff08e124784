//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. The expensive default-benchmark run is shared by the
//! criteria that need it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anchorfocus::benchgen::io::encode_jsonl;
use anchorfocus::benchgen::io::Provenance;
use anchorfocus::benchgen::{filter_pairs, FilterThresholds, PerturbMode, Subset};
use anchorfocus::config::RunConfig;
use anchorfocus::eval::{
    beta_grid, beta_sweep, evaluate, instance_recall_at_k, rank_gallery, recall_at_k, robustness_eval, MetricsReport, Perturbation, QueryRanking, SweepRow,
};
use anchorfocus::fusion::{modulated_attention, modulated_cross_attention};
use anchorfocus::model::{contrastive_loss_value, run_gradcheck, train, BetaSource, GradCheckConfig, ModelParams, QueryView, TrainConfig};
use anchorfocus::numerics::{Tape, Tensor};
use anchorfocus::pipeline::{eval_sets, generate_benchmark, training_samples, Benchmark};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, bad: impl FnOnce() -> String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(bad())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut rows = Vec::new();
    for _ in 0..r {
        let v: Vec<f64> = (0..c).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(v.into_iter().map(|x| x / n).collect::<Vec<_>>());
    }
    Tensor::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let cfg = GradCheckConfig::default();
    let dims = (cfg.grid.0 * cfg.grid.1, cfg.n_queries, cfg.n_probes, cfg.d_model, cfg.batch);
    if dims != (4, 2, 2, 6, 2) || cfg.eps != 1e-5 {
        return Err(format!("tiny dims drifted: (N, M, K, D, B) = {dims:?}, eps {}", cfg.eps));
    }
    let rows = run_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    // Every trainable group must be covered.
    let groups = [
        ("probes", "caam.probes"),
        ("modulator cls", "caam.ctx_cls"),
        ("representation cls", "rep_cls"),
        ("reasoning module", "caam.crm."),
        ("modulator head", "caam.head."),
        ("query head", "query_head."),
        ("image head", "image_head."),
        ("fusion weights", "fusion."),
    ];
    let missing: Vec<&str> = groups
        .iter()
        .filter(|(_, p)| !rows.iter().any(|r| r.name.starts_with(p)))
        .map(|(g, _)| *g)
        .collect();
    if !missing.is_empty() {
        return Err(format!("groups not checked: {missing:?}"));
    }
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    check(
        worst.max_rel_error < 1e-4 && rows.iter().all(|r| r.passed) && elapsed < Duration::from_secs(30),
        format!("{} tensors, worst {} at {:.2e}, {:.1?}", rows.len(), worst.name, worst.max_rel_error, elapsed),
        || format!("worst {} at {:.2e} (tolerance 1e-4), {:.1?}", worst.name, worst.max_rel_error, elapsed),
    )
}

// ---------------------------------------------------------------- 2

fn attention_reduction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_eq = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..100 {
        let r = rng.random_range(1..6);
        let n = rng.random_range(2..10);
        let d = rng.random_range(1..8);
        let q = rand_tensor(&mut rng, r, d, 1.0);
        let kv = rand_tensor(&mut rng, n, d, 1.0);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let (out0, w0) = modulated_cross_attention(&q, &kv, &mask, 0.0).map_err(|e| e.to_string())?;

        let mut tape = Tape::inference();
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let (out, w) = modulated_attention(&mut tape, qv, kvv, kvv, None).map_err(|e| e.to_string())?;
        worst_eq = worst_eq.max(out0.max_abs_diff(tape.value(out))).max(w0.max_abs_diff(tape.value(w)));

        for i in 0..r {
            worst_sum = worst_sum.max((w0.row_slice(i).iter().sum::<f64>() - 1.0).abs());
            // Independent oracle: textbook softmax of scaled dot products.
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.get(i, c) * kv.get(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                worst_oracle = worst_oracle.max(((logits[j] - m).exp() / z - w0.get(i, j)).abs());
            }
        }
    }
    check(
        worst_eq <= 1e-15 && worst_sum <= 1e-9 && worst_oracle <= 1e-12,
        format!("100 fixtures: |bias 0 - unbiased| {worst_eq:.1e}, row-sum error {worst_sum:.1e}, oracle {worst_oracle:.1e}"),
        || format!("bias 0 differs by {worst_eq:.1e} (max 1e-15), row sums off by {worst_sum:.1e}, oracle {worst_oracle:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn focus_saturation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d_k = 32usize;
    let beta = 50.0 * (d_k as f64).sqrt();
    let mut worst_mass = 1.0f64;
    let mut worst_bound = 1.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..65);
        let marked = rng.random_range(1..n);
        // Keys e_j scaled so each query-key logit after 1/sqrt(d_k) lands in [-5, 5].
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let width = n.max(d_k);
        let mut q = Tensor::zeros(1, width);
        let mut kv = Tensor::zeros(n, width);
        for (j, t) in target.iter().enumerate() {
            q.set(0, j, t * (width as f64).sqrt());
            kv.set(j, j, 1.0);
        }
        let mut cols: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        let mut mask = vec![0.0; n];
        for &c in &cols[..marked] {
            mask[c] = 1.0;
        }
        // The kernel scales by its own key width; restate beta in that scale.
        let b = 50.0 * (width as f64).sqrt();
        let (_, w) = modulated_cross_attention(&q, &kv, &mask, b).map_err(|e| e.to_string())?;
        let mass: f64 = (0..n).filter(|&j| mask[j] == 1.0).map(|j| w.get(0, j)).sum();
        // Closed form: worst case puts -5 on every marked column and +5 elsewhere.
        let bound = 1.0 / (1.0 + (n - marked) as f64 / marked as f64 * (10.0f64 - 50.0).exp());
        worst_mass = worst_mass.min(mass);
        worst_bound = worst_bound.min(bound);
        if mass + 1e-12 < bound {
            return Err(format!("mass {mass} below the closed-form bound {bound}"));
        }
    }
    check(
        worst_mass >= 0.999 && worst_bound >= 0.999,
        format!("beta = 50 sqrt(d_k) = {beta:.1}: min masked mass {worst_mass:.12}, closed-form bound {worst_bound:.12}"),
        || format!("masked mass {worst_mass} / bound {worst_bound} below 0.999"),
    )
}

// ---------------------------------------------------------------- 4

fn loss_sanity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = unit_rows(&mut rng, 1, 16);
    let other = unit_rows(&mut rng, 1, 16);
    let l1 = contrastive_loss_value(&one, &other, 0.07).map_err(|e| e.to_string())?;
    // Random cosines have variance 1/d, so the loss sits near ln B + 1/(2 d tau^2);
    // the width is that of a typical contrastive projection.
    let fq = unit_rows(&mut rng, 64, 256);
    let ft = unit_rows(&mut rng, 64, 256);
    let l64 = contrastive_loss_value(&fq, &ft, 0.07).map_err(|e| e.to_string())?;
    let ln64 = 64f64.ln();
    check(
        l1 == 0.0 && (0.9 * ln64..=1.1 * ln64).contains(&l64),
        format!("B=1 loss exactly 0, B=64 loss {l64:.4} = {:.3} ln 64", l64 / ln64),
        || format!("B=1 loss {l1} (want 0), B=64 loss {l64:.4} vs ln 64 = {ln64:.4}"),
    )
}

// ---------------------------------------------------------------- 5

#[derive(Deserialize)]
struct Fixture {
    gallery: Vec<anchorfocus::benchgen::GalleryEntry>,
    queries: Vec<FixtureQuery>,
    expected: Expected,
}

#[derive(Deserialize)]
struct FixtureQuery {
    target_image_id: u32,
    instance_id: u32,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
struct Expected {
    orders: Vec<Vec<usize>>,
    target_ranks: Vec<usize>,
    r_at_1: f64,
    r_at_5: f64,
    rid_at_1: f64,
    rid_at_5: f64,
    r_at_8: f64,
}

fn metric_oracles(shared: &Shared) -> Verdict {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics_5x8.json")).map_err(|e| e.to_string())?;
    let fx: Fixture = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let n = fx.gallery.len();
    // Basis vectors as gallery embeddings make each dot product the fixture score.
    let basis: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut rankings = Vec::new();
    for (q, want) in fx.queries.iter().zip(&fx.expected.orders) {
        let order = rank_gallery(&q.scores, &basis).map_err(|e| e.to_string())?;
        if &order != want {
            return Err(format!("fixture order {order:?} vs hand-enumerated {want:?}"));
        }
        rankings.push(QueryRanking {
            target_image_id: q.target_image_id,
            instance_id: q.instance_id,
            order,
        });
    }
    for (r, &rank) in rankings.iter().zip(&fx.expected.target_ranks) {
        let got = r.order.iter().position(|&i| fx.gallery[i].image_id == r.target_image_id).unwrap() + 1;
        if got != rank {
            return Err(format!("target rank {got} vs {rank}"));
        }
    }
    let e = &fx.expected;
    let got = [
        recall_at_k(&rankings, &fx.gallery, 1),
        recall_at_k(&rankings, &fx.gallery, 5),
        instance_recall_at_k(&rankings, &fx.gallery, 1),
        instance_recall_at_k(&rankings, &fx.gallery, 5),
        recall_at_k(&rankings, &fx.gallery, 8),
    ]
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| e.to_string())?;
    let want = [e.r_at_1, e.r_at_5, e.rid_at_1, e.rid_at_5, e.r_at_8];
    if got != want {
        return Err(format!("fixture recalls {got:?} vs hand-enumerated {want:?}"));
    }

    // Sort oracle on random galleries up to 20.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let g = rng.random_range(1..=20);
        let d = rng.random_range(1..6);
        // Coarse values make ties common.
        let gallery: Vec<Vec<f64>> = (0..g).map(|_| (0..d).map(|_| rng.random_range(-2..=2) as f64 * 0.5).collect()).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2..=2) as f64 * 0.5).collect();
        let order = rank_gallery(&q, &gallery).map_err(|e| e.to_string())?;
        let mut keyed: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().zip(&q).map(|(a, b)| a * b).sum(), i))
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
        if order != oracle {
            return Err(format!("ranking {order:?} differs from sort oracle {oracle:?}"));
        }
    }

    let mut reports: Vec<(&str, &MetricsReport)> = vec![("adaptive", &shared.adaptive), ("baseline", &shared.baseline)];
    reports.extend(shared.sweep.iter().map(|r| (r.label.as_str(), &r.report)));
    reports.extend(shared.robustness.iter().map(|(l, r)| (l.as_str(), r)));
    let bad: Vec<&str> = reports
        .iter()
        .filter(|(_, r)| r.subsets.iter().any(|s| s.recalls.r_at_1 > s.recalls.rid_at_1))
        .map(|(l, _)| *l)
        .collect();
    check(
        bad.is_empty(),
        format!(
            "fixture exact (R@1 {}, R@5 {}, R_ID@1 {}), 300 sort-oracle galleries, R@1 <= R_ID@1 on {} runs",
            e.r_at_1,
            e.r_at_5,
            e.rid_at_1,
            reports.len()
        ),
        || format!("R@1 > R_ID@1 in {bad:?}"),
    )
}

// ---------------------------------------------------------------- 6

fn mechanism_efficacy(shared: &Shared) -> Verdict {
    let shape: Vec<String> = shared
        .bench
        .subsets
        .iter()
        .map(|d| format!("{} {}q/{}g", d.subset(), d.split.eval.len(), d.gallery.entries.len()))
        .collect();
    let sized = shared.bench.subsets.len() == 4 && shared.bench.subsets.iter().all(|d| d.split.eval.len() >= 200 && d.gallery.entries.len() >= 400);
    let hard = shared.bench.subsets.iter().all(|d| {
        let targets: HashSet<u32> = d.split.eval.iter().map(|q| q.instance_id).collect();
        let cats: HashSet<u32> = d.split.eval.iter().map(|q| q.category_id).collect();
        d.gallery
            .entries
            .iter()
            .any(|e| !e.is_target && !targets.contains(&e.instance_id) && cats.contains(&e.category_id))
    });
    let a = shared.adaptive.macro_average.rid_at_1;
    let b = shared.baseline.macro_average.rid_at_1;
    let gap = 100.0 * (a - b);
    check(
        sized && hard && gap >= 10.0 && shared.elapsed < Duration::from_secs(15 * 60),
        format!(
            "R_ID@1 adaptive {:.1} vs baseline {:.1}: +{gap:.1} points; [{}]; {:.0?}",
            100.0 * a,
            100.0 * b,
            shape.join(", "),
            shared.elapsed
        ),
        || {
            format!(
                "gap {gap:.1} points (need 10), sized {sized}, hard negatives {hard}, runtime {:.0?}",
                shared.elapsed
            )
        },
    )
}

// ---------------------------------------------------------------- 7

fn sweep_shape(shared: &Shared) -> Verdict {
    let fixed: Vec<&SweepRow> = shared.sweep.iter().filter(|r| r.beta.is_some()).collect();
    let adaptive = shared.sweep.iter().find(|r| r.beta.is_none()).ok_or("no adaptive row")?;
    let rid: Vec<f64> = fixed.iter().map(|r| 100.0 * r.report.macro_average.rid_at_1).collect();
    let r1: Vec<f64> = fixed.iter().map(|r| 100.0 * r.report.macro_average.r_at_1).collect();
    let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
    let peak_rid = argmax(&rid);
    let rid_ok = (1..=peak_rid).all(|i| rid[i] >= rid[i - 1] - 2.0);
    let peak_r1 = argmax(&r1);
    let r1_interior = peak_r1 > 0 && peak_r1 < r1.len() - 1 && r1[peak_r1] > r1[0] && r1[peak_r1] > r1[r1.len() - 1];
    let best_avg = fixed.iter().map(|r| r.report.macro_average.average()).fold(f64::NEG_INFINITY, f64::max);
    let ad_avg = adaptive.report.macro_average.average();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
    check(
        rid_ok && r1_interior && 100.0 * ad_avg >= 100.0 * best_avg - 2.0,
        format!(
            "R_ID@1 [{}] peak at {}, R@1 [{}] peak at {}, adaptive avg {:.1} vs best fixed {:.1}",
            fmt(&rid),
            peak_rid,
            fmt(&r1),
            peak_r1,
            100.0 * ad_avg,
            100.0 * best_avg
        ),
        || {
            format!(
                "R_ID@1 [{}] (monotone to peak: {rid_ok}), R@1 [{}] (interior peak: {r1_interior}), adaptive avg {:.1} vs best fixed {:.1}",
                fmt(&rid),
                fmt(&r1),
                100.0 * ad_avg,
                100.0 * best_avg
            )
        },
    )
}

// ---------------------------------------------------------------- 8

/// Independent restatement of the filter: drop central images, then drop
/// near-duplicate pairs among the rest.
fn filter_oracle(f: &[Vec<f64>], t: &FilterThresholds) -> Vec<(usize, usize)> {
    let n = f.len();
    if n < t.valid {
        return vec![];
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut out = vec![];
    let central = |i: usize| (0..n).filter(|&j| j != i && cos(&f[i], &f[j]) > t.centric).count() >= t.count;
    for i in 0..n {
        for j in 0..n {
            if i != j && !central(i) && !central(j) && cos(&f[i], &f[j]) <= t.high {
                out.push((i, j));
            }
        }
    }
    out
}

fn filtering_fidelity() -> Verdict {
    let presets: BTreeMap<Subset, (usize, f64, f64, usize)> = Subset::ALL
        .into_iter()
        .map(|s| {
            let t = s.thresholds();
            (s, (t.valid, t.high, t.centric, t.count))
        })
        .collect();
    let want = BTreeMap::from([
        (Subset::Fashion, (8, 0.92, 0.88, 3)),
        (Subset::Car, (10, 0.88, 0.85, 2)),
        (Subset::Product, (20, 0.88, 0.85, 2)),
        (Subset::Landmark, (15, 0.90, 0.88, 3)),
    ]);
    if presets != want {
        return Err(format!("threshold presets {presets:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = 0;
    for set in 0..50 {
        let t = Subset::ALL[set % 4].thresholds();
        let n = rng.random_range(t.valid.saturating_sub(2)..t.valid + 12);
        // Clustered features so every threshold is exercised.
        let center: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spread = rng.random_range(0.05..0.8);
        let f: Vec<Vec<f64>> = (0..n)
            .map(|_| center.iter().map(|c| c + spread * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = filter_pairs(&f, &t).map_err(|e| e.to_string())?;
        let oracle = filter_oracle(&f, &t);
        if got != oracle {
            return Err(format!("set {set}: filter returned {} pairs, oracle {}", got.len(), oracle.len()));
        }
        pairs += got.len();
    }
    Ok(format!("presets exact; 50 random sets match the O(n^2) oracle ({pairs} pairs)"))
}

// ---------------------------------------------------------------- 9

fn gallery_invariants(shared: &Shared) -> Verdict {
    let prov = Provenance {
        format: "acceptance".into(),
        version: 1,
        seed: 0,
        config_hash: String::new(),
    };
    let again = generate_benchmark(&shared.cfg.benchmark(), &shared.cfg.encoder().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for (d, d2) in shared.bench.subsets.iter().zip(&again.subsets) {
        let g = &d.gallery;
        g.check(&d.split.eval).map_err(|e| format!("{}: {e}", d.subset()))?;
        let ids: HashSet<u32> = g.entries.iter().map(|e| e.image_id).collect();
        let targets: BTreeSet<u32> = d.split.eval.iter().map(|q| q.target_image_id).collect();
        let target_instances: HashSet<u32> = d.split.eval.iter().map(|q| q.instance_id).collect();
        let query_cats: HashSet<u32> = d.split.eval.iter().map(|q| q.category_id).collect();
        if !targets.iter().all(|t| ids.contains(t)) {
            return Err(format!("{}: a target is missing", d.subset()));
        }
        for e in g.entries.iter().filter(|e| !targets.contains(&e.image_id)) {
            if target_instances.contains(&e.instance_id) {
                return Err(format!("{}: distractor {} shares target instance {}", d.subset(), e.image_id, e.instance_id));
            }
            if !query_cats.contains(&e.category_id) {
                return Err(format!("{}: distractor category {} not queried", d.subset(), e.category_id));
            }
        }
        if encode_jsonl(&prov, &g.entries) != encode_jsonl(&prov, &d2.gallery.entries) {
            return Err(format!("{}: gallery bytes differ between identical runs", d.subset()));
        }
    }
    Ok(format!(
        "{} manifests: targets present, distractors clean, categories covered, bytes stable",
        shared.bench.subsets.len()
    ))
}

// ---------------------------------------------------------------- 10

fn robustness_ordering(shared: &Shared) -> Verdict {
    let get = |label: &str| {
        shared
            .robustness
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, r)| 100.0 * r.macro_average.rid_at_1)
    };
    let exact = get("scale iou=1.00").ok_or("no IoU 1.0 row")?;
    let scaled = get("scale iou=0.80").ok_or("no scale 0.8 row")?;
    let none = get("no bbox").ok_or("no no-bbox row")?;
    check(
        exact >= scaled && scaled >= none - 1.0 && none <= exact && none <= scaled,
        format!("R_ID@1 IoU 1.0 {exact:.1} >= scale 0.8 {scaled:.1} >= no bbox {none:.1}"),
        || format!("R_ID@1 IoU 1.0 {exact:.1}, scale 0.8 {scaled:.1}, no bbox {none:.1}"),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_anchorfocus");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let commands: [&[&str]; 8] = [
        &["gen"],
        &["train"],
        &["eval"],
        &["ablate", "beta"],
        &["ablate", "robustness"],
        &["ablate", "caam"],
        &["ablate", "roicrop"],
        &["gradcheck"],
    ];
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        for c in commands {
            let out = Command::new(bin)
                .args(c)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{c:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
    }
    let files = |root: &Path| -> Vec<std::path::PathBuf> {
        let mut v = vec![];
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    v.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        v.sort();
        v
    };
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    if a != b {
        return Err(format!("file sets differ: {a:?} vs {b:?}"));
    }
    for f in &a {
        if std::fs::read(dirs[0].path().join(f)).unwrap() != std::fs::read(dirs[1].path().join(f)).unwrap() {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    Ok(format!("{} commands twice: {} files byte-identical", commands.len(), a.len()))
}

// ---------------------------------------------------------------- shared run

struct Shared {
    cfg: RunConfig,
    bench: Benchmark,
    adaptive: MetricsReport,
    baseline: MetricsReport,
    sweep: Vec<SweepRow>,
    robustness: Vec<(String, MetricsReport)>,
    /// Generation, both trainings and both evaluations.
    elapsed: Duration,
}

fn shared_run() -> Result<Shared, anchorfocus::Error> {
    let t = Instant::now();
    let cfg = RunConfig::default().resolve()?;
    let encoder = cfg.encoder()?;
    let bench = generate_benchmark(&cfg.benchmark(), &encoder)?;
    let samples = training_samples(&bench, &encoder, &[])?;
    let sets = eval_sets(&bench, &encoder)?;
    let hash = cfg.hash();

    let mut adaptive = ModelParams::new(&cfg.model, encoder.clone(), cfg.model_seed())?;
    let rep = train(&cfg.train, &samples, &mut adaptive)?;
    eprintln!(
        "  adaptive training: loss {:.3} -> {:.3}",
        rep.initial_loss,
        rep.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    );
    let adaptive_report = evaluate(&adaptive, &sets, BetaSource::Adaptive, QueryView::Full, &hash, cfg.seed)?;

    let mut baseline = ModelParams::new(&cfg.model, encoder, cfg.model_seed())?;
    let tc = TrainConfig {
        beta_source: BetaSource::Off,
        ..cfg.train.clone()
    };
    train(&tc, &samples, &mut baseline)?;
    let baseline_report = evaluate(&baseline, &sets, BetaSource::Off, QueryView::Full, &hash, cfg.seed)?;
    let elapsed = t.elapsed();

    let sweep = beta_sweep(&adaptive, &sets, &beta_grid(&cfg.eval.beta_multipliers, cfg.model.fusion.d_k), &hash, cfg.seed)?;
    let perturbations = [
        Perturbation {
            mode: PerturbMode::Scale,
            iou: 1.0,
        },
        Perturbation {
            mode: PerturbMode::Scale,
            iou: 0.8,
        },
    ];
    let robustness = robustness_eval(&adaptive, &sets, &perturbations, &hash, cfg.eval_seed())?
        .into_iter()
        .map(|r| (r.label, r.report))
        .collect();
    Ok(Shared {
        cfg,
        bench,
        adaptive: adaptive_report,
        baseline: baseline_report,
        sweep,
        robustness,
        elapsed,
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "zero-bias reduction", attention_reduction()),
        (3, "focus saturation", focus_saturation()),
        (4, "loss sanity", loss_sanity()),
        (8, "filtering fidelity", filtering_fidelity()),
        (11, "determinism", determinism()),
    ];
    eprintln!("running the default benchmark (generation, two trainings, sweep, robustness)...");
    match shared_run() {
        Ok(shared) => {
            results.push((5, "metric oracles", metric_oracles(&shared)));
            results.push((6, "mechanism efficacy", mechanism_efficacy(&shared)));
            results.push((7, "bias sweep shape", sweep_shape(&shared)));
            results.push((9, "gallery invariants", gallery_invariants(&shared)));
            results.push((10, "robustness ordering", robustness_ordering(&shared)));
        }
        Err(e) => {
            for (n, name) in [
                (5, "metric oracles"),
                (6, "mechanism efficacy"),
                (7, "bias sweep shape"),
                (9, "gallery invariants"),
                (10, "robustness ordering"),
            ] {
                results.push((n, name, Err(format!("default run failed: {e}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, v) in &results {
        match v {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
