//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use slca::analysis::cka_matrices;
use slca::linalg::{Matrix, RngState, Vector};
use slca::losses::{argmax_class, logitnorm_ce, softmax_ce, LossKind};
use slca::model::{Classifier, HeadConfig, Model};
use slca::protocol::{inc_acc, last_acc, run_stream, AccuracyMatrix, Method, RunConfig};
use slca::stats::{
    collect_class_stats, sample_class_features, stats_storage_size, ClassStats, Covariance, CovarianceMode, StatsBank,
};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn logit_norm_invariance() -> Outcome {
    let mut rng = RngState::new(11);
    let mut worst = 0.0f64;
    let mut argmax_ok = true;
    for _ in 0..1000 {
        let c = 2 + (rng.uniform() * 20.0) as usize;
        let scale = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let logits: Vec<f64> = (0..c).map(|_| scale * rng.gaussian()).collect();
        let k = 10f64.powf(6.0 * rng.uniform() - 3.0);
        let tau = 0.01 + rng.uniform();
        let label = (rng.uniform() * c as f64) as usize % c;
        let scaled: Vec<f64> = logits.iter().map(|l| k * l).collect();
        let a = logitnorm_ce(&logits, label, tau).map_err(|e| e.to_string())?;
        let b = logitnorm_ce(&scaled, label, tau).map_err(|e| e.to_string())?;
        worst = worst.max((a.loss - b.loss).abs());
        argmax_ok &= argmax_class(&logits) == argmax_class(&scaled);
    }
    check(
        worst <= 1e-9 && argmax_ok,
        format!("max |Δloss| {worst:.2e} over 1000 triples, argmax preserved: {argmax_ok}"),
    )
}

fn fd_grad(f: &mut dyn FnMut(usize, f64) -> f64, n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect()
}

fn gradient_suite() -> Outcome {
    const H: f64 = 1e-6;
    let mut rng = RngState::new(12);
    let mut worst = [0.0f64; 4];

    for _ in 0..100 {
        let c = 2 + (rng.uniform() * 10.0) as usize;
        let logits: Vec<f64> = (0..c).map(|_| 3.0 * rng.gaussian()).collect();
        let label = (rng.uniform() * c as f64) as usize % c;
        let tau = 0.05 + rng.uniform();
        for (slot, kind) in [(0, LossKind::SoftmaxCe), (1, LossKind::LogitNorm { tau })] {
            let g = kind.evaluate(&logits, label).unwrap().grad;
            let fd = fd_grad(
                &mut |i, h| {
                    let mut l = logits.clone();
                    l[i] += h;
                    match kind {
                        LossKind::SoftmaxCe => softmax_ce(&l, label).unwrap().loss,
                        LossKind::LogitNorm { tau } => logitnorm_ce(&l, label, tau).unwrap().loss,
                    }
                },
                c,
                H,
            );
            worst[slot] = worst[slot].max(rel_err(&g, &fd));
        }
    }

    // Masked classifier backward: weights, bias and input features.
    for inst in 0..100 {
        let d = 2 + (rng.uniform() * 6.0) as usize;
        let n = 3 + (rng.uniform() * 6.0) as usize;
        let ids: BTreeSet<u32> = (0..n as u32).map(|i| 3 * i + 1).collect();
        let active: BTreeSet<u32> = ids.iter().copied().filter(|_| rng.uniform() < 0.6).collect();
        let active = if active.is_empty() {
            BTreeSet::from([*ids.iter().next().unwrap()])
        } else {
            active
        };
        let label = *active
            .iter()
            .nth((rng.uniform() * active.len() as f64) as usize % active.len())
            .unwrap();
        let loss = if inst % 2 == 0 {
            LossKind::SoftmaxCe
        } else {
            LossKind::LogitNorm { tau: 0.1 }
        };
        let classes: Vec<u32> = ids.iter().copied().collect();
        let weight = gaussian_matrix(n, d, &mut rng);
        let bias: Vec<f64> = (0..n).map(|_| 0.5 * rng.gaussian()).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let clf = Classifier::from_parts(classes.clone(), weight.clone(), bias.clone()).unwrap();
        let mask = clf.mask(&active).unwrap();
        let (_, [gw, gb], gx) = clf.backward(&x, label, &mask, loss).unwrap();
        let mut analytic = gw.clone();
        analytic.extend(&gb);
        analytic.extend(&gx);
        let total = n * d + n + d;
        let fd = fd_grad(
            &mut |i, h| {
                let (mut w, mut b, mut xx) = (weight.clone(), bias.clone(), x.clone());
                if i < n * d {
                    w.data_mut()[i] += h;
                } else if i < n * d + n {
                    b[i - n * d] += h;
                } else {
                    xx[i - n * d - n] += h;
                }
                let clf = Classifier::from_parts(classes.clone(), w, b).unwrap();
                clf.backward(&xx, label, &mask, loss).unwrap().0
            },
            total,
            H,
        );
        worst[2] = worst[2].max(rel_err(&analytic, &fd));
    }

    // Full model with an MLP head: every representation and classifier parameter.
    for inst in 0..100 {
        let d_in = 2 + (rng.uniform() * 5.0) as usize;
        let hidden = 2 + (rng.uniform() * 6.0) as usize;
        let out = 2 + (rng.uniform() * 4.0) as usize;
        let layers = 1 + inst % 3;
        let head = HeadConfig::Mlp {
            hidden,
            out_dim: out,
            layers,
        }
        .build(d_in, &mut rng)
        .unwrap();
        let mut model = Model::new(head);
        let ids: BTreeSet<u32> = (0..4).collect();
        model.extend_classifier(&ids, &mut rng).unwrap();
        // Zero init biases put dead units exactly on the ReLU kink, where
        // central differences are meaningless; jitter every head parameter.
        // Larger classifier weights keep the head gradient from vanishing.
        let groups = model.param_groups_mut();
        for p in groups.rep {
            p.iter_mut().for_each(|v| *v += 0.1 * rng.gaussian());
        }
        for p in groups.cls {
            p.iter_mut().for_each(|v| *v *= 20.0);
        }
        let mask = model.classifier.mask(&BTreeSet::from([0, 1, 2])).unwrap();
        let label = (inst % 3) as u32;
        let loss = if inst % 2 == 0 {
            LossKind::SoftmaxCe
        } else {
            LossKind::LogitNorm { tau: 0.5 }
        };
        let x: Vec<f64> = (0..d_in).map(|_| rng.gaussian()).collect();
        let g = model.backward(&x, label, &mask, loss).unwrap();
        let analytic: Vec<f64> = g.rep.iter().chain(&g.cls).flatten().copied().collect();
        let sizes: Vec<usize> = g.rep.iter().chain(&g.cls).map(Vec::len).collect();
        let total: usize = sizes.iter().sum();
        let fd = fd_grad(
            &mut |i, h| {
                let mut m = model.clone();
                {
                    let groups = m.param_groups_mut();
                    let mut k = i;
                    for p in groups.rep.into_iter().chain(groups.cls) {
                        if k < p.len() {
                            p[k] += h;
                            break;
                        }
                        k -= p.len();
                    }
                }
                m.backward(&x, label, &mask, loss).unwrap().loss
            },
            total,
            H,
        );
        worst[3] = worst[3].max(rel_err(&analytic, &fd));
    }

    check(
        worst.iter().all(|&w| w <= 1e-4),
        format!(
            "max rel err softmax_ce {:.1e}, logitnorm_ce {:.1e}, masked backward {:.1e}, mlp {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn sampling_round_trip() -> Outcome {
    const N: usize = 100_000;
    let mut rng = RngState::new(13);
    let mut worst_z = 0.0f64;
    let mut cases = 0;
    for d in [1usize, 2, 4, 8] {
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            let mean: Vec<f64> = (0..d).map(|_| 3.0 * rng.gaussian()).collect();
            let sigma = match mode {
                CovarianceMode::Full => random_spd(d, &mut rng),
                CovarianceMode::Diagonal => {
                    Matrix::from_diagonal(&(0..d).map(|_| 0.1 + 2.0 * rng.uniform()).collect::<Vec<_>>())
                }
            };
            let cov = match mode {
                CovarianceMode::Full => Covariance::Full(sigma.clone()),
                CovarianceMode::Diagonal => Covariance::Diagonal(sigma.diagonal()),
            };
            let stats = ClassStats {
                class_id: 0,
                count: N as u64,
                mean: Vector::new(mean.clone()).unwrap(),
                cov,
            };
            let xs: Vec<Vec<f64>> = sample_class_features(&stats, N, &mut rng)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(Vector::into_vec)
                .collect();
            let est = collect_class_stats(0, &xs, CovarianceMode::Full).map_err(|e| e.to_string())?;
            let Covariance::Full(est_cov) = &est.cov else {
                unreachable!()
            };
            let n = N as f64;
            for (i, m) in mean.iter().enumerate() {
                let se = (sigma.get(i, i) / n).sqrt();
                worst_z = worst_z.max((est.mean[i] - m).abs() / se);
                for j in 0..d {
                    let se = ((sigma.get(i, i) * sigma.get(j, j) + sigma.get(i, j).powi(2)) / n).sqrt();
                    worst_z = worst_z.max((est_cov.get(i, j) - sigma.get(i, j)).abs() / se);
                }
            }
            cases += 1;
        }
    }
    check(
        worst_z <= 4.0,
        format!("{cases} cases at n=1e5, worst deviation {worst_z:.2} standard errors"),
    )
}

fn storage_arithmetic() -> Outcome {
    let d = 768;
    let mut bank = StatsBank::new(d, CovarianceMode::Diagonal);
    for c in 0..100 {
        bank.insert(ClassStats {
            class_id: c,
            count: 1,
            mean: Vector::zeros(d),
            cov: Covariance::Diagonal(vec![0.0; d]),
        })
        .map_err(|e| e.to_string())?;
    }
    let scalars = stats_storage_size(&bank);
    let pct = format!("{:.2}", 100.0 * scalars as f64 / 86e6);
    check(
        scalars == 153_600 && bank.storage_size() == scalars && pct == "0.18",
        format!("{scalars} scalars = {pct}% of 86M"),
    )
}

fn separable_end_to_end() -> Outcome {
    let stream = separable_stream();
    let slca = run_stream(&stream, &RunConfig::default()).map_err(|e| e.to_string())?;
    let joint = run_stream(
        &stream,
        &RunConfig {
            method: Method::Joint,
            ..RunConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (a, j) = (last_acc(&slca.accuracy).unwrap(), last_acc(&joint.accuracy).unwrap());
    check(
        a >= 0.98 && j >= 0.99,
        format!("sl_ca_ln Last-Acc {a:.4}, joint {j:.4}"),
    )
}

fn ablation_ordering() -> Outcome {
    let stream = stressed_stream();
    let mean_last = |m: Method| -> Result<f64, String> {
        let mut total = 0.0;
        for seed in 0..3 {
            let out = run_stream(
                &stream,
                &RunConfig {
                    seed,
                    ..stressed_config(m)
                },
            )
            .map_err(|e| e.to_string())?;
            total += last_acc(&out.accuracy).unwrap();
        }
        Ok(total / 3.0)
    };
    let ft = mean_last(Method::SeqFtUniform)?;
    let sl = mean_last(Method::Sl)?;
    let ca = mean_last(Method::SlCa)?;
    let ln = mean_last(Method::SlCaLn)?;
    check(
        ln >= ca && ca >= sl && sl >= ft && sl - ft >= 0.10,
        format!(
            "sl_ca_ln {ln:.4} ≥ sl_ca {ca:.4} ≥ sl {sl:.4} ≥ seq_ft_uniform {ft:.4}, sl − seq_ft {:.4}",
            sl - ft
        ),
    )
}

fn alignment_isolation() -> Outcome {
    let stream = stressed_stream();
    let config = stressed_config(Method::SlCaLn);
    let with = run_stream(&stream, &config).map_err(|e| e.to_string())?;
    let without = run_stream(
        &stream,
        &RunConfig {
            evaluate: false,
            ..config
        },
    )
    .map_err(|e| e.to_string())?;
    let bits = |m: &Model| -> Vec<u64> {
        let w = m.classifier.weight_matrix();
        w.data()
            .iter()
            .chain(m.classifier.bias())
            .map(|v| v.to_bits())
            .collect()
    };
    let same_cls = bits(&with.model) == bits(&without.model)
        && with.model.classifier.classes() == without.model.classifier.classes();
    let same_head = with.model.head == without.model.head;
    check(
        same_cls && same_head && with.accuracy.entries.len() == 5 && without.accuracy.entries.is_empty(),
        format!("classifier bit-identical: {same_cls}, head identical: {same_head}"),
    )
}

fn cka_properties() -> Outcome {
    let mut self_worst = 0.0f64;
    let mut orth_worst = 0.0f64;
    let mut indep_worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = RngState::new(100 + seed);
        let x = gaussian_matrix(1000, 10, &mut rng);
        let y = gaussian_matrix(1000, 12, &mut rng);
        let q = orthogonal(10, &mut rng);
        let xq = x.matmul(&q).map_err(|e| e.to_string())?;
        let cka = |a: &Matrix, b: &Matrix| cka_matrices(a, b).map_err(|e| e.to_string());
        self_worst = self_worst.max((cka(&x, &x)? - 1.0).abs());
        orth_worst = orth_worst.max((cka(&x, &xq)? - 1.0).abs());
        orth_worst = orth_worst.max((cka(&xq, &y)? - cka(&x, &y)?).abs());
        indep_worst = indep_worst.max(cka(&x, &y)?);
    }
    check(
        self_worst <= 1e-12 && orth_worst <= 1e-9 && indep_worst < 0.1,
        format!("|cka(X,X)−1| {self_worst:.1e}, orthogonal {orth_worst:.1e}, independent max {indep_worst:.4}"),
    )
}

fn metrics_arithmetic() -> Outcome {
    let m = AccuracyMatrix::new(vec![0.9, 0.8, 0.7]);
    let (l, i) = (last_acc(&m).unwrap(), inc_acc(&m).unwrap());
    let single = AccuracyMatrix::new(vec![0.625]);
    let ok = l == 0.7
        && i == (0.9 + 0.8 + 0.7) / 3.0
        && (i - 0.8).abs() < 1e-15
        && last_acc(&single).unwrap() == 0.625
        && inc_acc(&single).unwrap() == 0.625
        && last_acc(&AccuracyMatrix::new(vec![])).is_err();
    check(ok, format!("[0.9, 0.8, 0.7] → last {l}, inc {i}"))
}

fn slca(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_slca"))
        .args(args)
        .current_dir(dir)
        .env("SLCA_THREADS", "4")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "slca {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

/// Runs every command in a fresh directory and returns each artifact.
fn cli_artifacts() -> Result<Vec<(String, Vec<u8>)>, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut arts = Vec::new();
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));

    arts.push((
        "gen-synth stdout".into(),
        slca(
            dir,
            &[
                "gen-synth",
                "--classes",
                "10",
                "--dim",
                "8",
                "--sep",
                "3",
                "--seed",
                "4",
                "--out",
                "d.slcf",
            ],
        )?,
    ));
    arts.push(("d.slcf".into(), read("d.slcf")?));
    arts.push((
        "run stdout".into(),
        slca(
            dir,
            &[
                "run",
                "--data",
                "d.slcf",
                "--method",
                "sl_ca_ln",
                "--tasks",
                "5",
                "--seed",
                "7",
                "--head",
                "mlp",
                "--hidden",
                "16",
                "--out-dim",
                "8",
                "--epochs",
                "5",
                "--output",
                "r.json",
                "--model-out",
                "m.slcm",
                "--stats-out",
                "s.slcs",
            ],
        )?,
    ));
    let report = String::from_utf8(read("r.json")?).map_err(|e| e.to_string())?;
    let stripped: String = report
        .lines()
        .filter(|l| !l.contains("\"wall_time_secs\""))
        .collect::<Vec<_>>()
        .join("\n");
    arts.push(("r.json".into(), stripped.into_bytes()));
    arts.push(("m.slcm".into(), read("m.slcm")?));
    arts.push(("s.slcs".into(), read("s.slcs")?));
    arts.push((
        "align-only stdout".into(),
        slca(
            dir,
            &["align-only", "--model", "m.slcm", "--stats", "s.slcs", "--seed", "2"],
        )?,
    ));
    arts.push(("m.aligned.slcm".into(), read("m.aligned.slcm")?));
    arts.push((
        "snapshot stdout".into(),
        slca(
            dir,
            &["snapshot", "--model", "m.slcm", "--data", "d.slcf", "--out", "p.slcp"],
        )?,
    ));
    arts.push(("p.slcp".into(), read("p.slcp")?));
    arts.push((
        "probe stdout".into(),
        slca(dir, &["probe", "--data", "p.slcp", "--seed", "3"])?,
    ));
    arts.push((
        "cka stdout".into(),
        slca(dir, &["cka", "--a", "p.slcp", "--b", "d.slcf"])?,
    ));
    Ok(arts)
}

fn cli_determinism() -> Outcome {
    let a = cli_artifacts()?;
    let b = cli_artifacts()?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "logit-norm scale and argmax invariance",
            Duration::from_secs(1),
            logit_norm_invariance,
        ),
        (
            "gradient suite vs central differences",
            Duration::from_secs(30),
            gradient_suite,
        ),
        (
            "statistics sample/collect round trip",
            Duration::from_secs(30),
            sampling_round_trip,
        ),
        (
            "diagonal storage arithmetic",
            Duration::from_secs(1),
            storage_arithmetic,
        ),
        ("separable end-to-end", Duration::from_secs(60), separable_end_to_end),
        (
            "ablation ordering on stressed stream",
            Duration::from_secs(300),
            ablation_ordering,
        ),
        ("alignment isolation", Duration::from_secs(60), alignment_isolation),
        ("CKA properties", Duration::from_secs(10), cka_properties),
        ("metrics arithmetic", Duration::from_secs(1), metrics_arithmetic),
        ("CLI determinism", Duration::from_secs(120), cli_determinism),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget {budget:?}")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.2}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
