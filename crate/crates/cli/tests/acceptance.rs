//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aqinfer::avgae::{self, gcn_layer, kl_divergence, smoothness_penalty, Activation, AvgaeConfig, Reduction};
use aqinfer::baselines::{fit_variogram, krige_column, Variogram, VariogramKind};
use aqinfer::eval::{self, run_benchmark, Completer, EvalReport, Method, SplitSpec};
use aqinfer::geo::GeoPoint;
use aqinfer::graph::{build_graph, normalize, Edge, PropagationOperator, StreetGraph};
use aqinfer::ingest::{aggregate, discretize_locations, ObservationMatrix};
use aqinfer::numcore::Tensor2;
use aqinfer::synth::{self, SynthConfig, SynthOutput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok_or<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Desk {
    out: SynthOutput,
    obs: ObservationMatrix,
    op: PropagationOperator,
}

fn desk(seed: u64) -> Result<Desk, String> {
    let cfg = SynthConfig::desk_scale(seed);
    let out = ok_or(synth::generate(&cfg))?;
    let locs = ok_or(discretize_locations(&out.records, 100.0))?;
    let obs = ok_or(aggregate(&out.records, &locs, &cfg.aggregation()))?.matrix;
    let g = ok_or(build_graph(obs.locations(), Some(&out.network), 200.0))?;
    let op = normalize(&g);
    Ok(Desk { out, obs, op })
}

fn line_of_locations(n: usize, spacing_m: f64) -> Vec<GeoPoint> {
    let o = GeoPoint::new(51.2, 4.4).unwrap();
    (0..n).map(|i| o.offset(0.0, spacing_m * i as f64).unwrap()).collect()
}

fn c1_gradient() -> Outcome {
    let started = Instant::now();
    let (n, t, d) = (12, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let locs = line_of_locations(n, 120.0);
    let values = Tensor2::from_fn(n, t, |i, j| 25.0 + 6.0 * ((j as f64) * 0.5 + i as f64 * 0.2).sin());
    let mut mask: Vec<bool> = (0..n * t).map(|_| rng.random_bool(0.4)).collect();
    mask[0] = true;
    let obs = ok_or(ObservationMatrix::new(
        values,
        mask,
        locs,
        (0..t as i64).map(|j| j * 3600).collect(),
    ))?;
    let op = normalize(&ok_or(build_graph(obs.locations(), None, 200.0))?);
    let config = AvgaeConfig {
        latent_dim: d,
        ..AvgaeConfig::default()
    };
    let err = ok_or(avgae::loss_gradient_error(&obs, &op, &config, 5, 1e-6))?;
    let elapsed = started.elapsed();
    ensure(err < 1e-4, || format!("max relative error {err:.3e} ≥ 1e-4"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {err:.2e} in {:.2}s", elapsed.as_secs_f64()))
}

fn c2_kl() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (rows, cols) = (3, 4);
        let mu = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5));
        let sigma = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(0.3..1.8));
        let closed = ok_or(kl_divergence(&mu, &sigma))?;
        // E_q[log q(z) - log p(z)], summed over the latent dims, averaged over rows
        let mut total = 0.0;
        for _ in 0..samples {
            let mut s = 0.0;
            for (&m, &sd) in mu.data().iter().zip(sigma.data()) {
                let e: f64 = rng.sample(StandardNormal);
                let z = m + sd * e;
                s += -sd.ln() - 0.5 * e * e + 0.5 * z * z;
            }
            total += s;
        }
        let mc = total / samples as f64 / rows as f64;
        let rel = (closed - mc).abs() / mc.abs();
        worst = worst.max(rel);
        ensure(rel < 0.01, || {
            format!("closed {closed:.5} vs MC {mc:.5}: relative error {rel:.4}")
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "worst relative error {:.3}% in {:.1}s",
        100.0 * worst,
        elapsed.as_secs_f64()
    ))
}

fn c3_gcn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let acts = [Activation::Identity, Activation::Relu, Activation::Sigmoid];
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = rng.random_range(1..=15);
        let p_edge = rng.random_range(0.0..0.6);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p_edge) {
                    edges.push(Edge {
                        i,
                        j,
                        weight: rng.random_range(0.05..3.0),
                    });
                }
            }
        }
        let graph = StreetGraph {
            n,
            edges,
            node_segment: vec![None; n],
        };
        let op = normalize(&graph);
        let (f_in, f_out) = (rng.random_range(1..6), rng.random_range(1..6));
        let h = Tensor2::from_fn(n, f_in, |_, _| rng.random_range(-2.0..2.0));
        let w = Tensor2::from_fn(f_in, f_out, |_, _| rng.random_range(-1.0..1.0));
        let act = acts[case % 3];
        let got = ok_or(gcn_layer(&op, &h, &w, act))?;

        // dense Ã = A + I, D̃ its row sums, σ(D̃^{-1/2} Ã D̃^{-1/2} H W)
        let mut a = vec![vec![0.0; n]; n];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for e in &graph.edges {
            a[e.i][e.j] += e.weight;
            a[e.j][e.i] += e.weight;
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        for i in 0..n {
            for k in 0..f_out {
                let mut s = 0.0;
                for (j, &aij) in a[i].iter().enumerate() {
                    let hw: f64 = (0..f_in).map(|l| h.get(j, l) * w.get(l, k)).sum();
                    s += aij / (deg[i] * deg[j]).sqrt() * hw;
                }
                let want = match act {
                    Activation::Identity => s,
                    Activation::Relu => s.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                };
                let diff = (got.get(i, k) - want).abs();
                worst = worst.max(diff);
                ensure(diff <= 1e-10, || {
                    format!("graph {case}: entry ({i},{k}) off by {diff:.3e}")
                })?;
            }
        }
    }
    Ok(format!("20 graphs, worst abs error {worst:.2e}"))
}

fn c4_kriging() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let o = GeoPoint::new(51.2, 4.4).unwrap();
    let mut worst: f64 = 0.0;
    for col in 0..10 {
        let k = rng.random_range(6..30);
        let known: Vec<(GeoPoint, f64)> = (0..k)
            .map(|_| {
                let p = o
                    .offset(rng.random_range(-600.0..600.0), rng.random_range(-600.0..600.0))
                    .unwrap();
                (p, rng.random_range(5.0..80.0))
            })
            .collect();
        let kind = if col % 2 == 0 {
            VariogramKind::Linear
        } else {
            VariogramKind::Exponential
        };
        let fitted = ok_or(fit_variogram(&known, kind))?;
        let v = match fitted {
            Variogram::Linear { slope, .. } => Variogram::Linear {
                nugget: 0.0,
                slope: slope.max(1e-3),
            },
            Variogram::Exponential { sill, range, .. } => Variogram::Exponential {
                nugget: 0.0,
                sill: sill.max(1e-3),
                range,
            },
        };
        let targets: Vec<GeoPoint> = known.iter().map(|k| k.0).collect();
        let pred = ok_or(krige_column(&known, &targets, &v))?;
        for ((_, want), got) in known.iter().zip(&pred) {
            let rel = (got - want).abs() / want.abs();
            worst = worst.max(rel);
            ensure(rel <= 1e-6, || format!("column {col}: {got} vs {want}"))?;
        }
    }
    Ok(format!("10 columns, worst relative error {worst:.2e}"))
}

fn c5_smoothness() -> Outcome {
    let x = ok_or(Tensor2::from_rows(&[vec![1.0, 2.0, 3.0]]))?;
    let sum = ok_or(smoothness_penalty(&x, 1, Reduction::Sum))?;
    let mean = ok_or(smoothness_penalty(&x, 1, Reduction::Mean))?;
    let e1 = (-1.0f64).exp();
    ensure((sum - 4.0 * e1).abs() <= 1e-12, || {
        format!("sum mode {sum} vs {}", 4.0 * e1)
    })?;
    ensure((mean - e1).abs() <= 1e-12, || format!("mean mode {mean} vs {e1}"))?;
    Ok(format!("sum {sum:.12}, mean {mean:.12}"))
}

fn c6_benchmark() -> Outcome {
    let started = Instant::now();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let d = desk(seed)?;
        let methods = [
            Method::Avgae(AvgaeConfig::desk_scale()),
            Method::KrigingExp,
            Method::KrigingLinear,
            Method::GlobalMean,
        ];
        let refs: Vec<&dyn Completer> = methods.iter().map(|m| m as &dyn Completer).collect();
        let spec = SplitSpec {
            seed,
            ..SplitSpec::default()
        };
        let report = ok_or(run_benchmark("desk", &d.obs, &d.op, &refs, &spec))?;
        let m = |name: &str| report.method(name).map(|r| r.mae_mean).unwrap_or(f64::NAN);
        let (av, ke, kl, gm) = (m("avgae"), m("kriging-exp"), m("kriging-linear"), m("global-mean"));
        let ok = av < ke && ke < kl && av <= 0.7 * gm;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: avgae {av:.3} < exp {ke:.3} < lin {kl:.3}; global {gm:.3} [{}]",
            if ok { "ok" } else { "miss" }
        ));
    }
    let elapsed = started.elapsed();
    for l in &lines {
        println!("    {l}");
    }
    ensure(passed >= 4, || format!("ordering held on {passed}/5 seeds"))?;
    ensure(elapsed < Duration::from_secs(1800), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "ordering held on {passed}/5 seeds in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn c7_roughness() -> Outcome {
    let d = desk(0)?;
    let rough = |gamma: f64| -> Result<f64, String> {
        let cfg = AvgaeConfig {
            smooth_weight: gamma,
            ..AvgaeConfig::desk_scale()
        };
        let model = ok_or(avgae::train(&d.obs, &d.op, &cfg))?;
        Ok(eval::temporal_roughness(&ok_or(avgae::infer(&model, &d.obs, &d.op))?))
    };
    let (smooth, plain) = (rough(0.8)?, rough(0.0)?);
    ensure(smooth < plain, || {
        format!("gamma 0.8: {smooth:.1}, gamma 0: {plain:.1}")
    })?;
    Ok(format!("roughness {smooth:.1} (gamma 0.8) < {plain:.1} (gamma 0)"))
}

fn c8_cold_rows() -> Outcome {
    let d = desk(0)?;
    let (cold, rows) = ok_or(eval::blank_rows(&d.obs, 0.1, 0))?;
    ensure(!rows.is_empty(), || "no rows blanked".into())?;
    let model = ok_or(avgae::train(&cold, &d.op, &AvgaeConfig::desk_scale()))?;
    let pred = ok_or(avgae::infer(&model, &cold, &d.op))?;
    let truth = d.out.field.truth_for(&d.obs);
    let t = d.obs.n_slots();
    let mut mask = vec![false; pred.len()];
    for &i in &rows {
        mask[i * t..(i + 1) * t].fill(true);
        ensure(pred.row(i).iter().all(|v| v.is_finite()), || {
            format!("row {i} not finite")
        })?;
    }
    let global = Tensor2::filled(pred.rows(), t, cold.known_mean());
    let (e_model, e_global) = (
        ok_or(eval::mae(&pred, &truth, &mask))?,
        ok_or(eval::mae(&global, &truth, &mask))?,
    );
    ensure(e_model < e_global, || {
        format!("cold-row MAE {e_model:.3} vs global mean {e_global:.3}")
    })?;
    Ok(format!(
        "{} cold rows: MAE {e_model:.3} < global mean {e_global:.3}",
        rows.len()
    ))
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_aqinfer"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "aqinfer {} failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// synth → aggregate → build-graph → train → evaluate, run inside `dir`.
fn cli_chain(dir: &Path, seed: u64) -> Result<(), String> {
    let s = seed.to_string();
    cli(
        dir,
        &["synth", "--preset", "desk-scale", "--seed", &s, "--out-dir", "synth"],
    )?;
    cli(dir, &["aggregate", "--input", "synth/trace.csv", "--out", "obs.json"])?;
    cli(
        dir,
        &[
            "build-graph",
            "--obs",
            "obs.json",
            "--network",
            "synth/network.json",
            "--out",
            "graph.json",
        ],
    )?;
    cli(
        dir,
        &[
            "train",
            "--obs",
            "obs.json",
            "--graph",
            "graph.json",
            "--desk-scale",
            "--seed",
            &s,
            "--out",
            "model.json",
        ],
    )?;
    cli(
        dir,
        &[
            "evaluate",
            "--obs",
            "obs.json",
            "--graph",
            "graph.json",
            "--desk-scale",
            "--seed",
            &s,
            "--out",
            "report.json",
        ],
    )?;
    Ok(())
}

fn c9_protocol() -> Outcome {
    let dir = ok_or(tempfile::tempdir())?;
    cli_chain(dir.path(), 0)?;
    let obs = ok_or(ObservationMatrix::load(dir.path().join("obs.json")))?;
    let report = ok_or(EvalReport::from_json(&ok_or(std::fs::read_to_string(
        dir.path().join("report.json"),
    ))?))?;
    let known = obs.known_count();
    let n_train = (0.9 * known as f64).floor() as usize;
    let expected = ["avgae", "kriging-linear", "kriging-exp", "knn", "svd", "nmf"];
    let names: Vec<&str> = report.methods.iter().map(|m| m.name.as_str()).collect();
    ensure(names == expected, || format!("methods {names:?}"))?;
    for m in &report.methods {
        ensure(m.repeats.len() == 5, || {
            format!("{}: {} repeats", m.name, m.repeats.len())
        })?;
        for (k, r) in m.repeats.iter().enumerate() {
            ensure(r.repeat == k, || format!("{}: repeat index {}", m.name, r.repeat))?;
            ensure(r.n_train == n_train && r.n_test == known - n_train, || {
                format!("{}: split {}/{} of {known}", m.name, r.n_train, r.n_test)
            })?;
            ensure(r.mae.is_finite() && r.rmse.is_finite() && r.rmse >= r.mae, || {
                format!("{}: mae {} rmse {}", m.name, r.mae, r.rmse)
            })?;
        }
        let mean = m.repeats.iter().map(|r| r.mae).sum::<f64>() / 5.0;
        ensure((mean - m.mae_mean).abs() < 1e-9, || {
            format!("{}: mae_mean mismatch", m.name)
        })?;
        let rmean = m.repeats.iter().map(|r| r.rmse).sum::<f64>() / 5.0;
        ensure((rmean - m.rmse_mean).abs() < 1e-9, || {
            format!("{}: rmse_mean mismatch", m.name)
        })?;
    }
    Ok(format!(
        "{} methods × 5 repeats, {n_train}/{} train/test of {known}",
        names.len(),
        known - n_train
    ))
}

fn c10_determinism() -> Outcome {
    let (a, b) = (ok_or(tempfile::tempdir())?, ok_or(tempfile::tempdir())?);
    cli_chain(a.path(), 3)?;
    cli_chain(b.path(), 3)?;
    let mut compared = 0;
    let mut stack = vec![a.path().to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in ok_or(std::fs::read_dir(&dir))? {
            let path = ok_or(entry)?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(a.path()).unwrap();
            let (x, y) = (ok_or(std::fs::read(&path))?, ok_or(std::fs::read(b.path().join(rel)))?);
            let name = rel.to_string_lossy();
            if name.ends_with("manifest.json") {
                // identical apart from the wall-clock duration
                let strip = |bytes: &[u8]| -> Result<serde_json::Value, String> {
                    let mut v: serde_json::Value = ok_or(serde_json::from_slice(bytes))?;
                    v.as_object_mut().map(|o| o.remove("duration_s"));
                    Ok(v)
                };
                ensure(strip(&x)? == strip(&y)?, || format!("{name} differs beyond duration"))?;
            } else {
                ensure(x == y, || format!("{name} differs between runs"))?;
            }
            compared += 1;
        }
    }
    ensure(compared >= 10, || format!("only {compared} files produced"))?;
    Ok(format!("{compared} files identical across two runs"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient check of the full loss", c1_gradient),
        ("KL closed form vs Monte Carlo", c2_kl),
        ("GCN layer vs dense evaluation", c3_gcn),
        ("kriging exactness at zero nugget", c4_kriging),
        ("smoothness penalty hand values", c5_smoothness),
        ("desk-scale benchmark ordering", c6_benchmark),
        ("temporal smoothness effect", c7_roughness),
        ("cold-row inference", c8_cold_rows),
        ("evaluate protocol fidelity", c9_protocol),
        ("pipeline determinism", c10_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {id:>2}: {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  criterion {id:>2}: {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
