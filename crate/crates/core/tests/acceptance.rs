//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines come out in order and unbuffered.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use selftrain::adjudicator::{unanimity, MockAgent, Outcome};
use selftrain::eval::{least_squares_slope, pseudo_label_quality};
use selftrain::loss::{pnu_loss, pnu_loss_and_gradient};
use selftrain::persist::RunDir;
use selftrain::pipeline::{run_self_training, RoundReport};
use selftrain::{Label, RunConfig};

use common::*;

struct Check {
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<String, String>,
}

fn main() {
    let checks = [
        Check {
            name: "loss components match direct summation",
            budget: Duration::from_secs(5),
            run: loss_oracle,
        },
        Check {
            name: "gradient matches finite differences",
            budget: Duration::from_secs(30),
            run: gradient_check,
        },
        Check {
            name: "gamma branch identities",
            budget: Duration::from_secs(5),
            run: gamma_identities,
        },
        Check {
            name: "non-negative clamp",
            budget: Duration::from_secs(5),
            run: clamp_instance,
        },
        Check {
            name: "unanimity rule",
            budget: Duration::from_secs(5),
            run: unanimity_rule,
        },
        Check {
            name: "pipeline safety",
            budget: Duration::from_secs(120),
            run: pipeline_safety,
        },
        Check {
            name: "self-training beats supervised-only",
            budget: Duration::from_secs(300),
            run: directional_gain,
        },
        Check {
            name: "pseudo-label quality trend",
            budget: Duration::from_secs(300),
            run: quality_trend,
        },
        Check {
            name: "termination and conservation",
            budget: Duration::from_secs(120),
            run: termination,
        },
        Check {
            name: "determinism",
            budget: Duration::from_secs(120),
            run: determinism,
        },
    ];

    let mut failed = 0;
    for (i, c) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = (c.run)();
        let elapsed = started.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {:>2}. {} ({detail}; {elapsed:.2?})", i + 1, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {} ({why}; {elapsed:.2?})", i + 1, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn loss_oracle() -> Result<String, String> {
    let mut rng = rng(11);
    let mut worst = 0.0f64;
    for n in 0..50 {
        let gamma = rand::Rng::gen_range(&mut rng, -1.0..=1.0);
        let inst = random_instance(&mut rng, 20, gamma);
        let b = pnu_loss(&inst.params(), &inst.features(), &inst.pools, &inst.cfg);
        let o = oracle(&inst);
        let pairs = [
            ("total", b.total, o.total),
            ("pn", b.pn, o.pn),
            ("soft_pn", b.soft_pn, o.soft_pn),
            ("pu", b.pu, o.pu),
            ("nu", b.nu, o.nu),
            ("pu argument", b.pu_negative_risk, o.pu_arg),
            ("nu argument", b.nu_positive_risk, o.nu_arg),
        ];
        for (what, got, want) in pairs {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-10, || format!("instance {n}: {what} = {got}, oracle {want}"))?;
        }
        ensure(b.pu_clamped == (o.pu_arg < 0.0) && b.nu_clamped == (o.nu_arg < 0.0), || {
            format!("instance {n}: clamp flags disagree with the oracle")
        })?;
    }
    Ok(format!("50 instances, max abs error {worst:.1e}"))
}

fn gradient_check() -> Result<String, String> {
    let mut rng = rng(12);
    // (positive gamma, clamped) quotas
    let mut quota = [[13usize; 2]; 2];
    quota[1][1] = 11;
    let mut done = 0;
    let mut worst = 0.0f64;
    let mut attempts = 0;
    while done < 50 {
        attempts += 1;
        if attempts > 200_000 {
            return Err(format!("only {done} usable instances found, quotas left {quota:?}"));
        }
        let positive = rand::Rng::gen_bool(&mut rng, 0.5);
        let magnitude = rand::Rng::gen_range(&mut rng, 0.05..=1.0);
        let gamma = if positive { magnitude } else { -magnitude };
        let inst = random_instance(&mut rng, 20, gamma);
        let o = oracle(&inst);
        let arg = if positive { o.pu_arg } else { o.nu_arg };
        let clamped = arg < 0.0;
        if quota[positive as usize][clamped as usize] == 0 || arg.abs() < 1e-3 {
            continue;
        }
        quota[positive as usize][clamped as usize] -= 1;
        let (_, g) = pnu_loss_and_gradient(&inst.params(), &inst.features(), &inst.pools, &inst.cfg);
        let mut analytic = g.weights.clone();
        analytic.push(g.bias);
        let fd = finite_difference(&inst, 1e-5);
        let err = relative_error(&analytic, &fd);
        worst = worst.max(err);
        ensure(err <= 1e-4, || format!("gamma {gamma:.3}, clamped {clamped}: relative error {err:.2e}"))?;
        done += 1;
    }
    Ok(format!("50 instances over both branches and clamp states, max relative error {worst:.1e}"))
}

fn gamma_identities() -> Result<String, String> {
    let mut rng = rng(13);
    let mut worst = 0.0f64;
    for n in 0..50 {
        let inst = random_instance(&mut rng, 20, 0.0);
        let (p, x) = (inst.params(), inst.features());
        let at = |g: f64| pnu_loss(&p, &x, &inst.pools, &inst.cfg.with_gamma(g));
        let zero = at(0.0);
        ensure(zero.total == zero.pn + zero.soft_pn, || format!("instance {n}: gamma = 0 total differs from pn + soft_pn"))?;
        let one = at(1.0);
        ensure(one.total == one.pu, || format!("instance {n}: gamma = 1 total differs from pu"))?;
        let minus_one = at(-1.0);
        ensure(minus_one.total == minus_one.nu, || format!("instance {n}: gamma = -1 total differs from nu"))?;
        for d in [1e-13, 1e-15, 0.0] {
            let gap = (at(d).total - at(-d).total).abs();
            worst = worst.max(gap);
            ensure(gap <= 1e-12, || format!("instance {n}: jump {gap:e} across gamma = 0"))?;
        }
        let gap = (at(-0.0).total - zero.total).abs();
        ensure(gap <= 1e-12, || format!("instance {n}: -0.0 and 0.0 disagree by {gap:e}"))?;
    }
    Ok(format!("50 instances, max jump at zero {worst:.1e}"))
}

fn clamp_instance() -> Result<String, String> {
    let inst = pu_clamp_instance(1.0);
    let (b, g) = pnu_loss_and_gradient(&inst.params(), &inst.features(), &inst.pools, &inst.cfg);
    let o = oracle(&inst);
    ensure(b.pu_clamped && o.pu_arg < 0.0, || format!("instance is not clamped: argument {}", b.pu_negative_risk))?;
    let positive = o.pu - o.pu_arg.max(0.0);
    ensure(o.pu_arg.max(0.0) == 0.0, || "clamped term is not 0".into())?;
    ensure((b.total - positive).abs() <= 1e-12, || format!("total {} vs positive terms {positive}", b.total))?;
    let pi_p = inst.cfg.pi_p;
    let expected = oracle_pool_gradient(
        &inst,
        &[(&inst.pools.labeled_pos, 1.0, pi_p), (&inst.pools.agreed_pos, inst.cfg.y_hat_p, pi_p)],
    );
    let mut analytic = g.weights.clone();
    analytic.push(g.bias);
    let diff = analytic.iter().zip(&expected).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-12, || format!("gradient differs from the positive-term gradient by {diff:e}"))?;
    Ok(format!("argument {:.3}, total {:.6}", b.pu_negative_risk, b.total))
}

fn unanimity_rule() -> Result<String, String> {
    let mut agreed = 0;
    let mut disagreed = 0;
    for c in [Label::Negative, Label::Positive] {
        for m in [Label::Negative, Label::Positive] {
            for u in [Label::Negative, Label::Positive] {
                match unanimity(c, m.into(), u.into()) {
                    Outcome::Disagreed => disagreed += 1,
                    o => {
                        agreed += 1;
                        ensure(c == m && m == u, || format!("{c:?}/{m:?}/{u:?} agreed"))?;
                        ensure((o == Outcome::AgreedPositive) == (c == Label::Positive), || "wrong agreed side".into())?;
                    }
                }
            }
        }
    }
    ensure((agreed, disagreed) == (2, 6), || format!("{agreed} agreed, {disagreed} disagreed"))?;
    Ok("2 agreed, 6 disagreed".into())
}

fn pipeline_safety() -> Result<String, String> {
    let mut reverted = 0;
    for seed in 0..5 {
        let ds = synth_dataset(2_000, seed);
        let cfg = RunConfig {
            k: 200,
            ..experiment_config(seed)
        };
        let sup = supervised(&ds, &cfg);

        // contradicts every pseudo-label, so nothing is ever agreed
        let adversarial = self_train(&ds, &cfg, &mock_adjudicator(MockAgent::adversarial()));
        ensure(adversarial.dev.macro_f1 >= sup.dev.macro_f1, || {
            format!("seed {seed}: adversarial final dev {} < supervised {}", adversarial.dev.macro_f1, sup.dev.macro_f1)
        })?;
        for r in &adversarial.reports {
            ensure(r.pools.agreed_unknown_positive == 0 && r.pools.agreed_unknown_negative == 0, || {
                format!("seed {seed}: agreed pool grew in round {}", r.round_number)
            })?;
        }

        // agrees only when the pseudo-label is wrong
        let inverted = self_train(&ds, &cfg, &oracle_adjudicator(&ds, 1.0, seed));
        ensure(inverted.dev.macro_f1 >= sup.dev.macro_f1, || {
            format!("seed {seed}: inverted-oracle final dev {} < supervised {}", inverted.dev.macro_f1, sup.dev.macro_f1)
        })?;
        reverted += inverted.reports.iter().filter(|r| !r.accepted).count();
    }
    Ok(format!("5 seeds, {reverted} rounds reverted under the inverted oracle"))
}

struct SeedRun {
    gain: f64,
    slope: Option<f64>,
}

fn directional_runs() -> &'static Vec<SeedRun> {
    static RUNS: std::sync::OnceLock<Vec<SeedRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5)
            .map(|seed| {
                let ds = synth_dataset(10_000, seed);
                let cfg = experiment_config(seed);
                let sup = supervised(&ds, &cfg);
                let st = self_train(&ds, &cfg, &oracle_adjudicator(&ds, 0.1, seed));
                let golds = selftrain::pipeline::train_golds(&ds);
                let series = pseudo_label_quality(st.transcripts.iter().map(|(r, t)| (*r, t.as_slice())), &golds);
                let (xs, ys): (Vec<f64>, Vec<f64>) = series
                    .iter()
                    .filter_map(|p| p.macro_f1.map(|f| (p.round as f64, f)))
                    .unzip();
                SeedRun {
                    gain: st.test.unwrap().macro_f1 - sup.test.unwrap().macro_f1,
                    slope: least_squares_slope(&xs, &ys),
                }
            })
            .collect()
    })
}

fn directional_gain() -> Result<String, String> {
    let runs = directional_runs();
    let mean = runs.iter().map(|r| r.gain).sum::<f64>() / runs.len() as f64;
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:+.3}", r.gain)).collect();
    ensure(mean >= 0.05, || format!("mean gain {mean:+.4} < 0.05 (per seed {})", per_seed.join(" ")))?;
    Ok(format!("mean test Macro-F1 gain {mean:+.4}, per seed {}", per_seed.join(" ")))
}

fn quality_trend() -> Result<String, String> {
    let runs = directional_runs();
    let mut slopes = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let s = r.slope.ok_or_else(|| format!("seed {seed}: fewer than two scored rounds"))?;
        ensure(s <= 0.0, || format!("seed {seed}: slope {s:+.2e} > 0"))?;
        slopes.push(format!("{s:+.1e}"));
    }
    Ok(format!("slopes {}", slopes.join(" ")))
}

fn conserved(r: &RoundReport, train: usize) -> bool {
    let p = &r.pools;
    p.labeled_positive
        + p.labeled_negative
        + p.unlabeled
        + p.agreed_unknown_positive
        + p.agreed_unknown_negative
        + p.disagreed_unknown
        + p.discarded
        == train
}

fn termination() -> Result<String, String> {
    let ds = synth_dataset(1_500, 7);
    let train = ds.split_indices(selftrain::Split::Train).len();
    let mut summary = Vec::new();
    for k in [1_000, 500, 333, 97, 1] {
        for (name, adj) in [
            ("oracle", oracle_adjudicator(&ds, 0.1, 7)),
            ("adversarial", mock_adjudicator(MockAgent::adversarial())),
        ] {
            if k == 1 && name == "adversarial" {
                continue;
            }
            let cfg = RunConfig {
                k,
                epochs: 3,
                ..experiment_config(7)
            };
            let res = self_train(&ds, &cfg, &adj);
            let u0 = res.reports[0].pools.unlabeled;
            let expected = u0.div_ceil(k);
            ensure(res.reports.len() == expected + 1, || {
                format!("k = {k}, {name}: {} rounds, expected {expected}", res.reports.len() - 1)
            })?;
            for r in &res.reports {
                ensure(conserved(r, train), || format!("k = {k}, {name}: pools do not cover the train split in round {}", r.round_number))?;
            }
            ensure(res.reports.last().unwrap().pools.unlabeled == 0, || format!("k = {k}: unlabeled left"))?;
            if name == "oracle" {
                summary.push(format!("k={k}:{expected}"));
            }
        }
    }
    Ok(format!("{train} train samples, rounds per k {}", summary.join(" ")))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Result<String, String> {
    let ds = synth_dataset(2_000, 3);
    let cfg = RunConfig {
        k: 200,
        ..experiment_config(3)
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = RunDir::create(tmp.path().join(run)).unwrap();
        let adj = oracle_adjudicator(&ds, 0.1, 3);
        run_self_training::<f64>(&ds, &cfg, &adj, Some(&dir), false, &mut |_| {}).map_err(|e| e.to_string())?;
        let root = dir.root();
        trees.push((dir_bytes(&root.join("reports")), dir_bytes(&root.join("transcripts")), dir_bytes(&root.join("pools"))));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.0 == b.0, || "round reports differ".into())?;
    ensure(a.1 == b.1, || "transcripts differ".into())?;
    ensure(a.2 == b.2, || "pool snapshots differ".into())?;
    ensure(a.0.len() > 1, || "no rounds ran".into())?;
    Ok(format!("{} reports and {} transcript files byte-identical", a.0.len(), a.1.len()))
}
