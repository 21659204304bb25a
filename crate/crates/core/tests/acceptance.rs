//! Acceptance checks. Each prints one `PASS`/`FAIL` line; the target exits non-zero if any
//! check fails. Runs without the libtest harness so the lines always show.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssm_prune::analysis::{flops_estimate, wall_clock_bench, BenchSpec};
use ssm_prune::harness::{
    gen_keytoken_task_with, keytask_deviation, keytoken_model, perplexity_with_context,
    prompt_label_forward, Document, EvalSpec, KeyTaskParams,
};
use ssm_prune::kernel::{leave_one_out, selective_scan};
use ssm_prune::model::{forward_dense, forward_pruned, PruneConfig, PruneRequest};
use ssm_prune::pruning::{influence_deltas, linear_schedule};
use ssm_prune::{Aggregator, Criterion, Model, ModelConfig, ScanParams};

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn check(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        println!(
            "{} [{id}] {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failed.push(id);
        }
    }
}

fn random_instance(seed: u64) -> ScanParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=64);
    let d = rng.random_range(1..=8);
    let n = rng.random_range(1..=16);
    let mut v = |cnt: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..cnt).map(|_| rng.random_range(lo..hi)).collect()
    };
    ScanParams::new(
        d,
        n,
        v(d * n, -2.0, 1.0),
        v(len * d, 0.001, 1.0),
        v(len * n, -1.0, 1.0),
        v(len * n, -1.0, 1.0),
        v(len * d, -1.0, 1.0),
    )
    .unwrap()
}

/// Largest error of the closed-form contributions against leave-one-out reruns, relative
/// to the largest contribution; and the relative error of their sum against the output.
fn oracle_errors(p: &ScanParams<f64>) -> (f64, f64) {
    let len = p.len();
    let d = p.d_inner;
    let trace = selective_scan(p).unwrap();
    let target = len - 1;
    let deltas = influence_deltas(&trace, p.c_row(target), target).unwrap();
    let y = trace.y_row(target);
    let (mut err, mut scale) = (0f64, 0f64);
    let mut sum = vec![0f64; d];
    for t in 0..len {
        let loo = leave_one_out(p, t).unwrap();
        for k in 0..d {
            let reference = y[k] - loo[k];
            let got = deltas[t * d + k];
            err = err.max((got - reference).abs());
            scale = scale.max(reference.abs());
            sum[k] += got;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = sum.iter().zip(y).map(|(a, b)| a - b).collect();
    (
        err / scale.max(f64::MIN_POSITIVE),
        norm(&diff) / norm(y).max(f64::MIN_POSITIVE),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        n_layers: rng.random_range(1..=4),
        d_model: rng.random_range(2..=16),
        expand: rng.random_range(1..=2),
        d_state: rng.random_range(1..=8),
        d_conv: rng.random_range(0..=4),
        vocab_size: rng.random_range(2..=40),
        dt_rank: 0,
    }
}

fn oracle_checks(r: &mut Report) {
    let start = Instant::now();
    let (mut worst, mut worst_sum) = (0f64, 0f64);
    for seed in 0..100 {
        let (e, s) = oracle_errors(&random_instance(seed));
        worst = worst.max(e);
        worst_sum = worst_sum.max(s);
    }
    let secs = start.elapsed().as_secs_f64();
    r.check(
        1,
        "influence equals leave-one-out difference",
        worst <= 1e-5 && secs < 10.0,
        format!("max rel err {worst:.3e} (limit 1e-5) over 100 instances in {secs:.2}s"),
    );
    r.check(
        2,
        "contributions sum to the output",
        worst_sum <= 1e-6,
        format!("max rel err {worst_sum:.3e} (limit 1e-6)"),
    );
}

fn no_prune_identity(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for i in 0..20 {
        let cfg = random_config(&mut rng);
        let model = Model::init(cfg.clone(), i).unwrap();
        let len = rng.random_range(1..=48);
        let ids: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size as u32))
            .collect();
        let dense = forward_dense(&model, &ids).unwrap();
        let schedule = linear_schedule(len, cfg.n_layers, 1.0, 1).unwrap();
        let config = PruneConfig {
            criterion: Criterion::ALL[i as usize % 3],
            ..PruneConfig::default()
        };
        let pruned = forward_pruned(
            &model,
            &ids,
            &PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[],
                target: None,
                record: false,
            },
        )
        .unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&dense.final_hidden) != bits(&pruned.final_hidden)
            || bits(&dense.logits) != bits(&pruned.logits)
        {
            mismatches += 1;
        }
    }
    r.check(
        3,
        "full keep ratio is bitwise dense",
        mismatches == 0,
        format!("{mismatches} of 20 random models differ"),
    );
}

fn schedule_checks(r: &mut Report) {
    let example = linear_schedule(100, 10, 0.1, 1).unwrap().keep;
    let want = vec![91, 82, 73, 64, 55, 46, 37, 28, 19, 10];
    let mut bad = 0;
    let mut cases = 0;
    for t in [10usize, 11, 17, 64, 100, 255, 1000, 2047, 4096] {
        for l in 1..=64 {
            for ri in 1..=10 {
                let ratio = ri as f64 / 10.0;
                let keep = linear_schedule(t, l, ratio, 1).unwrap().keep;
                let end = ((t as f64 * ratio).round() as usize).max(1);
                cases += 1;
                if keep.windows(2).any(|w| w[1] > w[0]) || keep[0] > t || keep[l - 1] != end {
                    bad += 1;
                }
            }
        }
    }
    r.check(
        4,
        "linear schedule",
        example == want && bad == 0,
        format!("T=100 L=10 r=0.1 -> {example:?}; {bad} of {cases} grid cases non-monotone or off-endpoint"),
    );
}

fn flops_trapezoid(r: &mut Report) {
    let cfg = ModelConfig {
        n_layers: 64,
        d_model: 256,
        ..ModelConfig::default()
    };
    let t = 4096;
    let dense = flops_estimate(&cfg, &vec![t; 64], t)
        .unwrap()
        .token_proportional() as f64;
    let mut worst = 0f64;
    let mut parts = Vec::new();
    for ratio in [0.1, 0.5, 0.7] {
        let keep = linear_schedule(t, 64, ratio, 1).unwrap().keep;
        let got = flops_estimate(&cfg, &keep, t).unwrap().token_proportional() as f64 / dense;
        let want = (1.0 + ratio) / 2.0;
        worst = worst.max((got / want - 1.0).abs());
        parts.push(format!("r={ratio}: {got:.4} vs {want:.4}"));
    }
    r.check(
        5,
        "FLOPs follow the trapezoid",
        worst <= 0.05,
        format!(
            "{}; max deviation {:.2}% (limit 5%)",
            parts.join(", "),
            worst * 100.0
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}

fn criterion_separation(r: &mut Report) {
    let model = keytoken_model(6, 3).unwrap();
    let params = KeyTaskParams {
        key_span: 2,
        weak_fraction: 0.25,
        ..KeyTaskParams::new(64, 3)
    };
    let mut devs = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..30 {
        let task = gen_keytoken_task_with(seed, &params).unwrap();
        for (i, c) in Criterion::ALL.iter().enumerate() {
            devs[i].push(keytask_deviation(&model, &task.ids, *c, 0.5, seed).unwrap());
        }
    }
    let eps = devs[0].iter().cloned().fold(0.0, f64::max);
    let [inf, uni, rnd] = devs.map(median);
    r.check(
        6,
        "criterion separation on the key-token task",
        rnd >= 10.0 * inf && inf <= uni && uni <= rnd,
        format!(
            "median deviation influence {inf:.3e} (eps = max {eps:.3e}), uniform {uni:.3e}, random {rnd:.3e}, random/influence {:.0}x",
            rnd / inf
        ),
    );
}

fn protection_rules(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models: Vec<Model> = (0..10)
        .map(|i| Model::init(random_config(&mut rng), 100 + i).unwrap())
        .collect();
    let mut violations = 0;
    for i in 0..1000 {
        let model = &models[i % models.len()];
        let v = model.config.vocab_size as u32;
        let p = rng.random_range(1..=40);
        let l = rng.random_range(1..=6);
        let prompt: Vec<u32> = (0..p).map(|_| rng.random_range(0..v)).collect();
        let label: Vec<u32> = (0..l).map(|_| rng.random_range(0..v)).collect();
        let config = PruneConfig {
            criterion: Criterion::ALL[i % 3],
            aggregator: if rng.random_bool(0.5) {
                Aggregator::Max
            } else {
                Aggregator::L2
            },
            exclude_bias: rng.random_bool(0.5),
            seed: i as u64,
        };
        let ratio = rng.random_range(1..=10) as f64 / 10.0;
        let (rec, _) = prompt_label_forward(model, &prompt, &label, ratio, &config).unwrap();
        for set in &rec.active {
            violations += (p - 1..p + l - 1).filter(|&q| !set.contains(q)).count();
        }
    }
    r.check(
        7,
        "final prompt token and labels are never pruned",
        violations == 0,
        format!("{violations} violations over 1000 evaluations"),
    );
}

fn perplexity_sanity(r: &mut Report) {
    let model = Model::zeros(ModelConfig {
        vocab_size: 256,
        n_layers: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let docs: Vec<Document> = (0..4u32)
        .map(|d| Document {
            name: format!("doc{d}"),
            ids: (0..1000u32)
                .map(|i| (i * 31 + d * 7 + i / 13) % 256)
                .collect(),
        })
        .collect();
    let mut worst = 0f64;
    let mut hashes = std::collections::BTreeSet::new();
    for (ratio, criterion) in [(1.0, Criterion::Influence), (0.3, Criterion::Random)] {
        let spec = EvalSpec {
            snippet_len: 100,
            context_lengths: vec![100, 200, 400, 800],
            ratio,
            prune: PruneConfig {
                criterion,
                ..PruneConfig::default()
            },
            ..EvalSpec::default()
        };
        let report = perplexity_with_context(&model, &docs, &spec).unwrap();
        for row in &report.rows {
            worst = worst.max((row.perplexity / 256.0 - 1.0).abs());
            hashes.insert(row.snippet_sha256.clone());
        }
    }
    r.check(
        8,
        "uniform logits give perplexity = vocab size; fixed snippet",
        worst <= 1e-12 && hashes.len() == 1,
        format!(
            "max rel deviation from 256: {worst:.1e}; {} distinct snippet hash(es)",
            hashes.len()
        ),
    );
}

fn speedup(r: &mut Report) {
    let start = Instant::now();
    let model = Model::init(
        ModelConfig {
            n_layers: 24,
            d_model: 512,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let rows = wall_clock_bench(
        &model,
        &BenchSpec {
            lengths: vec![4096],
            ratio: 0.1,
            prune: PruneConfig::default(),
            repetitions: 2,
            warmup: 1,
            seed: 0,
        },
    )
    .unwrap();
    let b = &rows[0];
    let secs = start.elapsed().as_secs_f64();
    r.check(
        9,
        "pruned prefill speedup",
        b.speedup >= 1.2 && secs < 120.0,
        format!(
            "d_model 512, 24 layers, T 4096, r 0.1: dense {:.3}s, pruned {:.3}s, {:.2}x (floor 1.2x); {secs:.0}s total",
            b.dense_mean_s, b.pruned_mean_s, b.speedup
        ),
    );
}

fn cli_determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let corpus = p("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for d in 0..3u32 {
        let text: String = (0..600u32)
            .map(|i| char::from(b'a' + ((i * 11 + d * 5 + i / 7) % 26) as u8))
            .collect();
        std::fs::write(dir.path().join("corpus").join(format!("{d}.txt")), text).unwrap();
    }
    let items = p("items.jsonl");
    std::fs::write(
        &items,
        "{\"prompt\": \"abcabcab\", \"candidates\": [\"c\", \"q\"], \"answer\": 0}\n\
         {\"prompt\": \"the cat sat on the\", \"candidates\": [\" mat\", \" dog\"], \"answer\": 0}\n",
    )
    .unwrap();
    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_ssm-prune"))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok(out.stdout)
    };
    let model_flags = [
        "--n-layers",
        "2",
        "--d-model",
        "16",
        "--d-state",
        "4",
        "--seed",
        "9",
    ];
    let mut init_a = vec!["init", "--out"];
    let (ma, mb) = (p("a.bin"), p("b.bin"));
    init_a.push(&ma);
    init_a.extend_from_slice(&model_flags);
    let mut init_b = init_a.clone();
    init_b[2] = &mb;
    let mut problems = Vec::new();
    if run(&init_a).is_err() || run(&init_b).is_err() {
        problems.push("init failed".to_string());
    } else if std::fs::read(&ma).unwrap() != std::fs::read(&mb).unwrap() {
        problems.push("init checkpoints differ".to_string());
    }
    let base = [
        "--model",
        ma.as_str(),
        "--corpus",
        corpus.as_str(),
        "--seed",
        "4",
    ];
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "ppl",
            "--context-lengths",
            "50,200",
            "--snippet-len",
            "40",
            "--ratio",
            "0.4",
            "--criterion",
            "random",
        ],
        vec![
            "sweep",
            "--context-lengths",
            "100",
            "--snippet-len",
            "40",
            "--ratios",
            "0.7,0.3",
        ],
        vec![
            "sweep",
            "--task",
            "prompt",
            "--items",
            items.as_str(),
            "--ratios",
            "0.5",
        ],
        vec![
            "sweep",
            "--task",
            "keytask",
            "--n-seeds",
            "5",
            "--ratios",
            "0.5",
        ],
        vec![
            "analyze",
            "--seq-len",
            "64",
            "--ratio",
            "0.5",
            "--criterion",
            "random",
        ],
        vec!["flops", "--seq-len", "300", "--ratio", "0.2"],
    ];
    let mut checked = 1;
    for cmd in &commands {
        let mut args = cmd.clone();
        args.extend_from_slice(&base);
        match (run(&args), run(&args)) {
            (Ok(a), Ok(b)) if a == b && !a.is_empty() => checked += 1,
            (Ok(_), Ok(_)) => {
                problems.push(format!("{} output differs or is empty", cmd.join(" ")))
            }
            (Err(e), _) | (_, Err(e)) => problems.push(format!("{} failed: {e}", cmd.join(" "))),
        }
    }
    r.check(
        10,
        "fixed seeds give byte-identical CLI output",
        problems.is_empty(),
        if problems.is_empty() {
            format!("{checked} commands identical across two runs (bench timings excluded)")
        } else {
            problems.join("; ")
        },
    );
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    oracle_checks(&mut r);
    no_prune_identity(&mut r);
    schedule_checks(&mut r);
    flops_trapezoid(&mut r);
    criterion_separation(&mut r);
    protection_rules(&mut r);
    perplexity_sanity(&mut r);
    speedup(&mut r);
    cli_determinism(&mut r);
    if !r.failed.is_empty() {
        eprintln!("failed checks: {:?}", r.failed);
        std::process::exit(1);
    }
}
