//! Acceptance suite. One line per criterion; non-zero exit on any failure.

use std::collections::BTreeMap;
use std::panic::catch_unwind;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use raymap_core::datahub::{
    aggregate_fields, bin_measurements, BinKey, Dataset, Los, ObservationRecord, ObservationSet, PipelineConfig,
    QueryRole, RawSample, Scenario, ScenarioConfig,
};
use raymap_core::encoders::Net;
use raymap_core::hgat::{
    build_scaffold, encode_pair, encode_pair_counted, global_stage, head_direct, init_model, local_stage,
    neighbor_lists, GlobalBatch, LocalBatch, ModelConfig, SiteContext, Target,
};
use raymap_core::kriging_prior::{
    ok_predict, prior_table_for_dataset, uk_predict, PriorConfig, VariogramModel, KRIGING_JITTER,
};
use raymap_core::numcore::{finite_diff_check, LossKind};
use raymap_core::regimes::{
    build_gate_table, error_stats, fit_gate, oracle_gamma, predict_all, prior_predictions, recompose, train,
    train_residual, BatchInfo, GateConfig, GateRow, GateTable, Models, PairPrediction, Regime, Setup, Standardizer,
    TrainConfig, TrainRegime,
};
use raymap_core::{PairGeometry, Point2};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn obs_set(site: u32, n: usize, extent: f64, rng: &mut ChaCha8Rng) -> ObservationSet {
    ObservationSet {
        site,
        records: (0..n)
            .map(|i| ObservationRecord {
                bin: BinKey { row: i as i64, col: 0 },
                location: Point2::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent)),
                rss_dbm: rng.random_range(-110.0..-40.0),
                los: if rng.random_bool(0.5) { Los::L } else { Los::N },
            })
            .collect(),
    }
}

fn context(obs: &ObservationSet, seed: u64) -> SiteContext {
    SiteContext {
        site: obs.site,
        tx: Point2::new(20.0, 35.0),
        r0: 70.7,
        scaffold: build_scaffold(obs, obs.len(), seed).unwrap(),
        standardizer: Standardizer::new(-75.0, 12.0).unwrap(),
    }
}

fn target(rng: &mut ChaCha8Rng, extent: f64) -> Target {
    Target {
        location: Point2::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent)),
        los: if rng.random_bool(0.5) { Los::L } else { Los::N },
    }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = init_model(&ModelConfig::default(), seed).unwrap();
        let obs = obs_set(1, rng.random_range(20..60), 100.0, &mut rng);
        let ctx = context(&obs, seed);
        let targets: Vec<Target> = (0..4).map(|_| target(&mut rng, 100.0)).collect();
        let labels: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let points: Vec<Point2> = targets.iter().map(|t| t.location).collect();
        let lists = neighbor_lists(&points, 2, ctx.r0).unwrap();
        let items: Vec<_> = targets.iter().map(|t| (&ctx, *t)).collect();
        let batch = LocalBatch::build(&items, 16, 256).unwrap();
        let gb = GlobalBatch::build(&lists, 256).unwrap();
        let report = finite_diff_check(
            |p| {
                let mut net = Net::new(p);
                let local = local_stage(&mut net, &batch);
                let global = global_stage(&mut net, local.z, local.z, &gb);
                let s = net.tape.concat(&[local.z, global.z]);
                let y = head_direct(&mut net, s);
                let root = net.tape.loss(y, labels.clone(), None, LossKind::Huber(1.0));
                net.tape.backward(root)?;
                Ok((net.tape.value(root).item(), net.tape.param_grads()))
            },
            &params,
            1e-5,
            4,
            seed,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
    }
    check(worst <= 1e-4, format!("5 instances, max relative error {worst:.3e} (bound 1e-4)"))
}

/// Dense-solver kriging with raw-coordinate drift; the reference for `ok_predict`/`uk_predict`.
fn oracle_kriging(points: &[Point2], values: &[f64], model: &VariogramModel, q: &Point2, universal: bool) -> f64 {
    let n = points.len();
    let extra = if universal { 3 } else { 1 };
    let m = n + extra;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = if i == j {
                KRIGING_JITTER
            } else {
                model.gamma(points[i].dist(&points[j]))
            };
        }
        let drift = [1.0, points[i].x, points[i].y];
        for c in 0..extra {
            a[(i, n + c)] = drift[c];
            a[(n + c, i)] = drift[c];
        }
        b[i] = model.gamma(points[i].dist(q));
    }
    let qd = [1.0, q.x, q.y];
    for c in 0..extra {
        b[n + c] = qd[c];
    }
    let sol = a.lu().solve(&b).expect("oracle system is regular");
    (0..n).map(|i| sol[i] * values[i]).sum()
}

fn kriging() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact_err = 0.0f64;
    let mut sum_err = 0.0f64;
    for _ in 0..5 {
        let obs = obs_set(1, 40, 100.0, &mut rng);
        let model = VariogramModel::exponential(0.0, rng.random_range(5.0..40.0), rng.random_range(10.0..80.0)).unwrap();
        for r in &obs.records {
            let ok = ok_predict(&obs, &model, &r.location, 16).unwrap();
            let uk = uk_predict(&obs, &model, &r.location, 16).unwrap();
            if ok.fallback || uk.fallback {
                return Err("kriging fell back to IDW on a regular instance".into());
            }
            exact_err = exact_err.max((ok.value - r.rss_dbm).abs());
            for est in [&ok, &uk] {
                sum_err = sum_err.max((est.weights.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut oracle_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(3..=8);
        let obs = obs_set(1, n, 100.0, &mut rng);
        let nugget = rng.random_range(0.0..2.0);
        let model = VariogramModel::exponential(nugget, nugget + rng.random_range(1.0..30.0), rng.random_range(10.0..80.0))
            .unwrap();
        let q = Point2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let (pts, vals) = (obs.locations(), obs.values());
        let ok = ok_predict(&obs, &model, &q, n).unwrap();
        let uk = uk_predict(&obs, &model, &q, n).unwrap();
        for est in [&ok, &uk] {
            sum_err = sum_err.max((est.weights.iter().sum::<f64>() - 1.0).abs());
        }
        oracle_err = oracle_err
            .max((ok.value - oracle_kriging(&pts, &vals, &model, &q, false)).abs())
            .max((uk.value - oracle_kriging(&pts, &vals, &model, &q, true)).abs());
    }
    check(
        exact_err <= 1e-6 && sum_err <= 1e-10 && oracle_err <= 1e-8,
        format!("exactness {exact_err:.2e} dB, weight-sum {sum_err:.2e}, oracle {oracle_err:.2e} dB"),
    )
}

fn gate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let std = Standardizer::new(-80.0, 10.0).unwrap();
    let eps = GateConfig::default().eps_e;
    let rows: Vec<GateRow> = (0..10_000)
        .map(|i| {
            let prior = rng.random_range(-120.0..-30.0);
            let label = prior + rng.random_range(-15.0..15.0);
            let ehat = if i % 50 == 0 { rng.random_range(-5e-3..5e-3) } else { rng.random_range(-20.0..20.0) };
            let gamma_star = oracle_gamma(std.scale_residual(label - prior), std.scale_residual(ehat), eps);
            GateRow {
                site: 1,
                target_id: i,
                prior,
                ehat,
                abs_ehat: ehat.abs(),
                grad_mag: 0.0,
                local_std: 0.0,
                label,
                gamma_star,
                gamma_fit: f64::NAN,
            }
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("gate.csv");
    GateTable { rows }.save_csv(&path).map_err(|e| e.to_string())?;
    let table = GateTable::load_csv(&path).map_err(|e| e.to_string())?;
    let sq = |r: &GateRow, g: f64| (recompose(r.prior, r.ehat, g) - r.label).powi(2);
    let (mut checked, mut violations, mut identity) = (0, 0, 0.0f64);
    for r in &table.rows {
        identity = identity.max((recompose(r.prior, r.ehat, r.gamma_star) - (r.prior + r.gamma_star * r.ehat)).abs());
        identity = identity.max((recompose(r.prior, r.label - r.prior, 1.0) - r.label).abs());
        if std.scale_residual(r.ehat).abs() <= eps {
            continue;
        }
        checked += 1;
        let at = sq(r, r.gamma_star);
        if at > sq(r, 0.0) || at > sq(r, 1.0) {
            violations += 1;
        }
    }
    check(
        table.rows.len() == 10_000 && violations == 0 && identity <= 1e-9,
        format!("{checked} rows with |ehat| > eps, {violations} violations, identity error {identity:.2e}"),
    )
}

struct ReferenceRun {
    seconds: f64,
    prior_eval: f64,
    residual_eval: (f64, f64),
    residual_fit: f64,
    gated_eval: (f64, f64),
    gated_fit: f64,
}

fn stats(preds: &[PairPrediction], seen: &[u32], role: QueryRole) -> (f64, f64) {
    let s = error_stats(
        preds
            .iter()
            .filter(|p| seen.contains(&p.site) && p.role == role)
            .map(|p| (p.pred, p.label)),
    )
    .unwrap();
    (s.rmse, s.mae)
}

fn reference_run() -> Result<ReferenceRun, String> {
    let start = Instant::now();
    let committed = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json"))
        .map_err(|e| e.to_string())?;
    let scenario = ScenarioConfig::from_json(&committed).map_err(|e| e.to_string())?;
    if scenario != ScenarioConfig::reference() {
        return Err("configs/reference.json differs from the built-in reference scenario".into());
    }
    let pipe = PipelineConfig::default();
    let ds = Dataset::prepare(&Scenario::new(scenario.clone()).unwrap(), &pipe).map_err(|e| e.to_string())?;
    let prior = prior_table_for_dataset(&ds, &PriorConfig::default()).map_err(|e| e.to_string())?;
    let setup = Setup::new(&ds, &scenario, None, pipe.seed).map_err(|e| e.to_string())?;
    let trained = train_residual(&setup, &ds, &prior, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let mut models = Models {
        residual: Some(trained.params),
        ..Default::default()
    };
    let residual = predict_all(Regime::Residual, &setup, &ds, Some(&prior), &models).map_err(|e| e.to_string())?;
    let gcfg = GateConfig::default();
    let table = build_gate_table(&residual, &prior, &setup.standardizer, gcfg.eps_e).map_err(|e| e.to_string())?;
    models.gate = Some(fit_gate(&table, &setup.standardizer, &gcfg).map_err(|e| e.to_string())?);
    let gated = predict_all(Regime::Gated, &setup, &ds, Some(&prior), &models).map_err(|e| e.to_string())?;
    let base = prior_predictions(&ds, &prior).map_err(|e| e.to_string())?;
    let seen = &setup.seen;
    Ok(ReferenceRun {
        seconds: start.elapsed().as_secs_f64(),
        prior_eval: stats(&base, seen, QueryRole::Eval).0,
        residual_eval: stats(&residual, seen, QueryRole::Eval),
        residual_fit: stats(&residual, seen, QueryRole::Train).0,
        gated_eval: stats(&gated, seen, QueryRole::Eval),
        gated_fit: stats(&gated, seen, QueryRole::Train).0,
    })
}

fn gate_calibration(r: &ReferenceRun) -> Outcome {
    check(
        r.gated_fit <= r.residual_fit + 0.05 && r.gated_eval.1 <= r.residual_eval.1 + 0.05,
        format!(
            "fit RMSE gated {:.4} vs residual {:.4}; seen-eval MAE gated {:.4} vs residual {:.4}",
            r.gated_fit, r.residual_fit, r.gated_eval.1, r.residual_eval.1
        ),
    )
}

fn residual_direction(r: &ReferenceRun) -> Outcome {
    check(
        r.residual_eval.0 < r.prior_eval && r.seconds <= 600.0,
        format!(
            "seen-eval RMSE residual {:.4} vs prior {:.4}; reference run {:.0} s (limit 600)",
            r.residual_eval.0, r.prior_eval, r.seconds
        ),
    )
}

fn encoder_invariants() -> Outcome {
    let mut perm = 0.0f64;
    let mut wsum = 0.0f64;
    let mut single = 0.0f64;
    let mut empty = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let params = init_model(&ModelConfig::default(), seed).unwrap();
        let obs = obs_set(1, rng.random_range(2..60), 100.0, &mut rng);
        let ctx = context(&obs, seed);
        let t = target(&mut rng, 100.0);
        let batch = LocalBatch::build(&[(&ctx, t)], 16, 256).unwrap();
        let mut order: Vec<usize> = (0..batch.pages.len()).collect();
        order.shuffle(&mut rng);
        let mut shuffled = batch.clone();
        shuffled.page_ref = order.iter().map(|&i| batch.page_ref[i]).collect();
        shuffled.pages = order.iter().map(|&i| batch.pages[i]).collect();
        let run = |b: &LocalBatch| {
            let mut net = Net::new(&params);
            let out = local_stage(&mut net, b);
            let w: f64 = net.tape.value(out.weights).data().iter().sum();
            (net.tape.value(out.z).data().to_vec(), w)
        };
        let (za, wa) = run(&batch);
        let (zb, wb) = run(&shuffled);
        for (x, y) in za.iter().zip(&zb) {
            perm = perm.max((x - y).abs());
        }
        wsum = wsum.max((wa - 1.0).abs()).max((wb - 1.0).abs());

        // global weights over a random same-site neighbourhood
        let k = rng.random_range(1..6);
        let mut net = Net::new(&params);
        let center = net.tape.constant(raymap_core::numcore::Array::from_vec(1, 128, za.clone()));
        let source = net.tape.constant(raymap_core::numcore::Array::from_vec(
            k,
            128,
            (0..k * 128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let list: Vec<(usize, PairGeometry)> = (0..k)
            .map(|j| {
                let g = PairGeometry {
                    distance: rng.random_range(0.0..2.0),
                    bearing: rng.random_range(-3.1..3.1),
                };
                (j, g)
            })
            .collect();
        let gb = GlobalBatch::build(&[list], 256).unwrap();
        let out = global_stage(&mut net, center, source, &gb);
        let beta: f64 = net.tape.value(out.weights).data().iter().sum();
        wsum = wsum.max((beta - 1.0).abs());

        let lone = ObservationSet {
            site: 1,
            records: vec![obs.records[0]],
        };
        let lone_ctx = context(&lone, seed);
        let b1 = LocalBatch::build(&[(&lone_ctx, t)], 16, 256).unwrap();
        let mut net = Net::new(&params);
        let out = local_stage(&mut net, &b1);
        single = single.max((net.tape.value(out.weights).data()[0] - 1.0).abs());

        let enc = encode_pair(&ctx, &t, &[], &params).unwrap();
        empty = empty.max(enc.z_global.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    check(
        perm <= 1e-12 && wsum <= 1e-12 && single == 0.0 && empty == 0.0,
        format!(
            "100 instances: permutation {perm:.1e}, weight-sum {wsum:.1e}, single-page |alpha-1| {single:.1e}, empty z_global {empty:.1e}"
        ),
    )
}

fn complexity() -> Outcome {
    let params = init_model(&ModelConfig::default(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let small = context(&obs_set(1, 1_000, 200.0, &mut rng), 7);
    let large = context(&obs_set(1, 10_000, 200.0, &mut rng), 7);
    let z: Vec<Vec<f64>> = (0..4).map(|i| (0..128).map(|j| ((i * 128 + j) as f64).sin() * 0.3).collect()).collect();
    let queries: Vec<Target> = (0..40).map(|_| target(&mut rng, 200.0)).collect();
    let nbs: Vec<(Point2, &[f64])> = z
        .iter()
        .enumerate()
        .map(|(i, v)| (Point2::new(10.0 * i as f64, 5.0), v.as_slice()))
        .collect();
    for q in &queries {
        let (_, a) = encode_pair_counted(&small, q, &nbs, &params).unwrap();
        let (_, b) = encode_pair_counted(&large, q, &nbs, &params).unwrap();
        if a != b {
            return Err(format!("op counts differ: {a:?} vs {b:?}"));
        }
    }
    let time = |ctx: &SiteContext| {
        (0..5)
            .map(|_| {
                let t0 = Instant::now();
                for q in &queries {
                    encode_pair_counted(ctx, q, &nbs, &params).unwrap();
                }
                t0.elapsed().as_secs_f64() / queries.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
    };
    time(&small);
    let (ts, tl) = (time(&small), time(&large));
    let ratio = ts.max(tl) / ts.min(tl);
    let (_, count) = encode_pair_counted(&small, &queries[0], &nbs, &params).unwrap();
    check(
        ratio < 2.0,
        format!(
            "ops {} macs {} for both scaffolds; per query {:.3} ms vs {:.3} ms (ratio {ratio:.2})",
            count.ops,
            count.macs,
            ts * 1e3,
            tl * 1e3
        ),
    )
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 5] = [
        &["gen", "--seed", "7", "--out", "data.csv"],
        &["prior", "--dataset", "data.csv", "--out", "prior.csv"],
        &[
            "train", "--dataset", "data.csv", "--prior", "prior.csv", "--regime", "residual", "--set", "epochs=2",
            "--out", "res.json",
        ],
        &["gate", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--out", "gate.json"],
        &[
            "eval", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--gate", "gate.json",
            "--regime", "gated", "--out", "metrics.csv",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_raymap"))
            .args(args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let names: Vec<&String> = fa.keys().collect();
    let differing: Vec<&&String> = names.iter().filter(|n| fb.get(**n) != fa.get(**n)).collect();
    let csv_json = names.iter().filter(|n| n.ends_with(".csv") || n.ends_with(".json")).count();
    check(
        fa.len() == fb.len() && differing.is_empty() && csv_json >= 5,
        format!("{} artifacts compared byte for byte, {} differ {differing:?}", fa.len(), differing.len()),
    )
}

fn arithmetic() -> Outcome {
    let raw = [-80.0, -90.0].map(|v| RawSample {
        site: 1,
        location: Point2::new(1.0, 1.0),
        rss_dbm: v,
        los: Los::L,
    });
    let grid = bin_measurements(&raw, 2.0).map_err(|e| e.to_string())?;
    let binned = grid.site(1).unwrap()[&BinKey { row: 0, col: 0 }].rss_dbm;
    let closed = 10.0 * ((1e-8 + 1e-9) / 2.0f64).log10();
    let agg = aggregate_fields(&[-80.0, -80.0]).map_err(|e| e.to_string())?;
    check(
        (binned - closed).abs() <= 1e-6
            && (binned - -82.5964).abs() <= 5e-5
            && (agg - -76.9897).abs() <= 1e-4
            && (agg - (-80.0 + 10.0 * 2.0f64.log10())).abs() <= 1e-12,
        format!("bin {binned:.6} dBm (closed form {closed:.6}), aggregate {agg:.6} dBm"),
    )
}

fn minibatch_rule() -> Outcome {
    let scenario = ScenarioConfig::reference();
    let pipe = PipelineConfig::default();
    let ds = Dataset::prepare(&Scenario::new(scenario.clone()).unwrap(), &pipe).map_err(|e| e.to_string())?;
    let setup = Setup::new(&ds, &scenario, None, pipe.seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let k = cfg.model.hgat.k_g;
    let (mut batches, mut lists, mut bad) = (0usize, 0usize, Vec::new());
    let mut observer = |b: &BatchInfo| {
        batches += 1;
        for (i, nb) in b.neighbors.iter().enumerate() {
            lists += 1;
            let same: Vec<usize> = (0..b.sites.len()).filter(|&j| j != i && b.sites[j] == b.sites[i]).collect();
            let subset = nb.iter().all(|j| same.contains(j));
            // brute-force k nearest same-site batch members, ties by position
            let loc = |j: usize| ds.queries[&b.sites[j]].records[b.target_ids[j]].location;
            let mut want = same.clone();
            want.sort_by(|&x, &y| {
                let (dx, dy) = (loc(x).dist2(&loc(i)), loc(y).dist2(&loc(i)));
                dx.total_cmp(&dy).then(x.cmp(&y))
            });
            want.truncate(k);
            if !subset || *nb != want {
                bad.push((b.epoch, i));
            }
        }
    };
    train(TrainRegime::Direct, &setup, &ds, None, &cfg, &mut observer).map_err(|e| e.to_string())?;
    check(
        bad.is_empty() && batches > 0,
        format!("{batches} batches, {lists} neighbourhoods, {} outside the same-site batch", bad.len()),
    )
}

fn report(n: usize, outcome: std::thread::Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (
            false,
            format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        ),
    };
    println!("criterion {n:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut ok = true;
    let simple: [(usize, fn() -> Outcome); 3] = [(1, gradients), (2, kriging), (3, gate_oracle)];
    for (n, f) in simple {
        ok &= report(n, catch_unwind(f));
    }
    match catch_unwind(reference_run) {
        Ok(Ok(run)) => {
            ok &= report(4, Ok(gate_calibration(&run)));
            ok &= report(5, Ok(residual_direction(&run)));
        }
        Ok(Err(e)) => {
            ok &= report(4, Ok(Err(e.clone())));
            ok &= report(5, Ok(Err(e)));
        }
        Err(p) => {
            ok &= report(4, Err(p));
            ok &= report(5, Ok(Err("reference run panicked".into())));
        }
    }
    let rest: [(usize, fn() -> Outcome); 5] = [
        (6, encoder_invariants),
        (7, complexity),
        (8, determinism),
        (9, arithmetic),
        (10, minibatch_rule),
    ];
    for (n, f) in rest {
        ok &= report(n, catch_unwind(f));
    }
    if !ok {
        std::process::exit(1);
    }
}
