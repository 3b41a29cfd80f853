//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show; `cargo test --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdq_core::config::RunConfig;
use sdq_core::data::{gen_dataset, DatasetSpec};
use sdq_core::model::{build_model, ModelSpec};
use sdq_core::oracles::*;
use sdq_core::phase1::{run_phase1, Phase1Config};
use sdq_core::phase2::{run_phase2, strategy_plan_bits, summed_bin_variance, Phase2Config};
use sdq_core::pipeline::{generate_strategy, run_pipeline, METRICS_FILE, STRATEGY_FILE};
use sdq_core::tensor::Tensor;
use sdq_core::Result;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn c1_ste_identity() -> Result<Verdict> {
    let bad = ste_identity_mismatches(1000, 11)?;
    verdict(bad == 0, format!("1000 tensors x b=1..8, mismatches={bad}"))
}

fn c2_clamp_error() -> Result<Verdict> {
    let mut parts = Vec::new();
    let mut ok = true;
    for b in [2, 4, 8] {
        let r = clamp_error_ratio(b, 1_000_000, 100 + b as u64)?;
        ok &= (r - 1.0).abs() < 0.02;
        parts.push(format!("b={b}:{r:.4}"));
    }
    verdict(ok, format!("E[err^2]/range^2 / C(b): {}", parts.join(" ")))
}

fn c3_gumbel_gradient() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for tau in [0.5, 1.0, 2.0] {
        for i in 1..=9 {
            for _ in 0..5 {
                let (g0, g1) = gumbel_pair(&mut rng);
                worst = worst.max(gumbel_grad_rel_error(i as f64 / 10.0, tau, g0, g1)?);
            }
        }
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn c4_bernoulli() -> Result<Verdict> {
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, beta) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let f = bernoulli_frequency(beta, 1.0, n, 40 + i as u64)?;
        let sigma = (beta * (1.0 - beta) / n as f64).sqrt();
        let z = (f - beta) / sigma;
        ok &= z.abs() <= 3.0;
        parts.push(format!("beta={beta}:freq={f:.4}(z={z:+.2})"));
    }
    verdict(ok, parts.join(" "))
}

fn c5_expected_gradient() -> Result<Verdict> {
    let same = (0..20).map(branch_weight_grads_equal).collect::<Result<Vec<_>>>()?;
    let same = same.iter().all(|&b| b);
    let (mc, exact) = beta_gradient_mc(0.5, 0.1, 100_000, 55)?;
    let rel = (mc - exact).abs() / exact.abs();
    verdict(
        same && rel < 0.05,
        format!("branch weight grads identical={same}; beta grad mc={mc:.5} enumeration={exact:.5} rel={rel:.4} (tau=0.1)"),
    )
}

fn c6_entropy() -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [1, 2, 3, 4] {
        let (gap, fails) = entropy_bound(b, 20, 100, 60 + b as u64)?;
        ok &= gap == 0.0 && fails == 0;
        parts.push(format!("b={b}:gap={gap:e},failures={fails}"));
    }
    verdict(ok, parts.join(" "))
}

fn c7_cost() -> Result<Verdict> {
    let c = cost_constants()?;
    let e_ops = c.resnet18_bitops / 34.7e9 - 1.0;
    let e_mb = c.resnet18_size_mb / 5.8 - 1.0;
    let e_wcr = c.wcr_193 / 16.6 - 1.0;
    verdict(
        e_ops.abs() < 0.05 && e_mb.abs() < 0.03 && e_wcr.abs() < 0.005,
        format!(
            "bitops={:.2}G ({:+.2}%) size={:.3}MB ({:+.2}%) wcr={:.3} ({:+.2}%)",
            c.resnet18_bitops / 1e9,
            100.0 * e_ops,
            c.resnet18_size_mb,
            100.0 * e_mb,
            c.wcr_193,
            100.0 * e_wcr
        ),
    )
}

fn c8_qer_direction() -> Result<Verdict> {
    // fc0 (B) has 100 weights, fc1 (A) 1000; both searchable, fc1 holds
    // ten copies of fc0 so the weight distributions match exactly
    let mut spec = ModelSpec::parse("mlp:10-10-100-4")?;
    spec.layers[0].pinned = false;
    let mut model = build_model(&spec, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let base: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    model.params[0].weight = Tensor::new(base.clone(), vec![10, 10])?;
    model.params[1].weight = Tensor::new(base.repeat(10), vec![100, 10])?;

    let data = DatasetSpec {
        dim: 10,
        seed: 8,
        ..DatasetSpec::default()
    };
    let (train, _) = gen_dataset(&data)?;
    // the default pressure already moves both layers off 8 bits
    let cfg = Phase1Config {
        lambda_q: 1e-3,
        epochs: 10,
        ..Phase1Config::default()
    };
    let out = run_phase1(&mut model, &train, &cfg, true)?;

    let mut monotone = true;
    let mut ordered = true;
    let mut separated = false;
    let mut prev: Option<&Vec<u32>> = None;
    let mut traj = Vec::new();
    for e in &out.epochs {
        if let Some(p) = prev {
            monotone &= e.layer_bits.iter().zip(p).all(|(a, b)| a <= b);
        }
        prev = Some(&e.layer_bits);
        let (a, b) = (e.layer_bits[1], e.layer_bits[0]);
        ordered &= a <= b;
        separated |= a < b;
        traj.push(format!("{a}/{b}"));
    }
    let (a, b) = (out.strategy.layers[1].bits, out.strategy.layers[0].bits);
    verdict(
        a <= b && ordered && separated && monotone,
        format!(
            "final bits(A)={a} bits(B)={b}; A/B per epoch {}; A<=B every epoch={ordered}; non-increasing={monotone}",
            traj.join(" ")
        ),
    )
}

fn reference(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    cfg
}

fn c9_end_to_end() -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let dir = tempfile::tempdir().expect("tempdir");
        let s = run_pipeline(&reference(seed), dir.path())?;
        let drop = 100.0 * (s.fp_accuracy - s.quantized_accuracy);
        ok &= s.fp_accuracy >= 0.95 && s.avg_weight_bits < 8.0 && drop <= 3.0;
        parts.push(format!(
            "seed {seed}: fp={:.3} q={:.3} avg_bits={:.2}",
            s.fp_accuracy, s.quantized_accuracy, s.avg_weight_bits
        ));
    }
    verdict(ok, parts.join("; "))
}

fn c10_ebr() -> Result<Verdict> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 1..=5 {
        let cfg = reference(seed);
        let dir = tempfile::tempdir().expect("tempdir");
        let run = generate_strategy(&cfg, dir.path())?;
        let (train, _) = gen_dataset(&cfg.data)?;
        let plan = strategy_plan_bits(&run.searched, &run.outcome.strategy)?;
        let mut var = [0.0; 2];
        for (i, lambda_e) in [cfg.train.lambda_e, 0.0].into_iter().enumerate() {
            let p2 = Phase2Config {
                lambda_e,
                ..cfg.train
            };
            let mut student = run.searched.clone();
            run_phase2(&mut student, &run.teacher, &run.outcome.strategy, &train, &p2)?;
            var[i] = summed_bin_variance(&student, &plan, p2.normalize)?;
        }
        if var[0] < var[1] {
            wins += 1;
        }
        parts.push(format!("{:.3e}<{:.3e}", var[0], var[1]));
    }
    verdict(wins >= 4, format!("lower with EBR in {wins}/5 seeds: {}", parts.join(" ")))
}

fn c11_determinism() -> Result<Verdict> {
    let cfg = reference(7);
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    run_pipeline(&cfg, a.path())?;
    run_pipeline(&cfg, b.path())?;
    let same = |f: &str| std::fs::read(a.path().join(f)).ok() == std::fs::read(b.path().join(f)).ok();
    let (s, m) = (same(STRATEGY_FILE), same(METRICS_FILE));
    verdict(s && m, format!("strategy identical={s} metrics identical={m}"))
}

type Criterion = (&'static str, Duration, fn() -> Result<Verdict>);

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 ste-identity", Duration::from_secs(5), c1_ste_identity),
        ("2 clamp-error-oracle", Duration::from_secs(30), c2_clamp_error),
        ("3 gumbel-gradient", Duration::from_secs(5), c3_gumbel_gradient),
        ("4 bernoulli-fidelity", Duration::from_secs(10), c4_bernoulli),
        ("5 expected-gradient", Duration::from_secs(60), c5_expected_gradient),
        ("6 entropy-bound", Duration::from_secs(1), c6_entropy),
        ("7 cost-constants", Duration::from_secs(1), c7_cost),
        ("8 qer-direction", Duration::from_secs(120), c8_qer_direction),
        ("9 end-to-end", Duration::from_secs(600), c9_end_to_end),
        ("10 ebr-effect", Duration::from_secs(600), c10_ebr),
        // one extra pipeline run on top of the reference run
        ("11 determinism", Duration::from_secs(120), c11_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = match f() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let took = t.elapsed();
        let in_time = took <= budget;
        let tag = if passed && in_time { "PASS" } else { "FAIL" };
        if tag == "FAIL" {
            failed += 1;
        }
        let over = if in_time { "" } else { " OVER BUDGET" };
        println!("{tag} criterion {name}: {detail} [{:.2}s/{}s{over}]", took.as_secs_f64(), budget.as_secs());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
