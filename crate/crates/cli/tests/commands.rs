use std::path::{Path, PathBuf};
use std::process::Command;

use raymap_core::datahub::{Dataset, QueryRole};
use raymap_core::kriging_prior::{ok_predict, PriorTable};
use raymap_core::numcore::{Array, ParamStore};
use raymap_core::regimes::{oracle_gamma, GateTable, Standardizer};

const SMALL: &str = r#"{
  "bounding_box": [0.0, 0.0, 60.0, 60.0],
  "transmitters": [
    {"site": 1, "x": 12.0, "y": 15.0, "tx_power_dbm": 20.0},
    {"site": 2, "x": 46.0, "y": 20.0, "tx_power_dbm": 20.0},
    {"site": 3, "x": 30.0, "y": 49.0, "tx_power_dbm": 20.0}
  ],
  "blockers": [[20.0, 7.0, 28.0, 18.0], [35.0, 31.0, 45.0, 38.0]]
}"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Run {
        let r = Run {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(r.p("scenario.json"), SMALL).unwrap();
        r
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn raymap(&self, args: &[&str]) -> i32 {
        let out = Command::new(env!("CARGO_BIN_EXE_raymap"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap();
        if !out.status.success() {
            eprintln!("{}", String::from_utf8_lossy(&out.stderr));
        }
        out.status.code().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        assert_eq!(self.raymap(args), 0, "{args:?}");
    }

    fn gen(&self) {
        self.ok(&["gen", "--config", "scenario.json", "--out", "data.csv"]);
        self.ok(&["prior", "--dataset", "data.csv", "--out", "prior.csv"]);
    }

    fn train_residual(&self, epochs: usize) {
        let set = format!("epochs={epochs}");
        self.ok(&[
            "train", "--dataset", "data.csv", "--prior", "prior.csv", "--regime", "residual", "--set", &set, "--out",
            "res.json",
        ]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn metric_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_applies_budgets_and_split_rule() {
    let r = Run::new();
    r.gen();
    let ds = Dataset::load_csv(&r.p("data.csv")).unwrap();
    for c in ds.counts() {
        assert_eq!(c.obs, (0.05 * c.bins as f64).round() as usize);
        if c.site % 2 == 1 {
            assert_eq!(c.train, (0.15 * (c.bins - c.obs) as f64).round() as usize);
        } else {
            assert_eq!(c.train, 0);
        }
        assert_eq!(c.obs + c.train + c.eval, c.bins);
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&read(&r.p("data.csv.provenance.json"))).unwrap();
    assert_eq!(prov["details"]["seen"], serde_json::json!([1, 3]));
    assert_eq!(prov["details"]["held_out"], serde_json::json!([2]));
    let first = read(&r.p("data.csv"));
    r.ok(&["gen", "--config", "scenario.json", "--out", "again.csv"]);
    assert_eq!(first, read(&r.p("again.csv")));
}

#[test]
fn prior_rows_match_direct_kriging() {
    let r = Run::new();
    r.gen();
    let ds = Dataset::load_csv(&r.p("data.csv")).unwrap();
    let table = PriorTable::load_csv(&r.p("prior.csv")).unwrap();
    let pairs: usize = ds.queries.values().map(|q| q.len()).sum();
    assert_eq!(table.rows.len(), pairs);
    let first = read(&r.p("prior.csv"));
    r.ok(&["prior", "--dataset", "data.csv", "--out", "prior2.csv"]);
    assert_eq!(first, read(&r.p("prior2.csv")));
    let cfg = raymap_core::kriging_prior::PriorConfig::default();
    for site in [1, 2] {
        let obs = &ds.observations[&site];
        let model = raymap_core::kriging_prior::fit_site_variogram(obs, &cfg).unwrap();
        for id in [0usize, 7, 40] {
            let q = &ds.queries[&site].records[id];
            let direct = ok_predict(obs, &model, &q.location, cfg.neighborhood).unwrap();
            let row = table.get(site, id).unwrap();
            assert!((row.prior_dbm - direct.value).abs() < 1e-9);
        }
    }
}

#[test]
fn train_gate_eval_map_flow() {
    let r = Run::new();
    r.gen();
    r.train_residual(2);
    let trace = std::fs::read_to_string(r.p("res.json.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let ck = read(&r.p("res.json"));
    r.train_residual(2);
    assert_eq!(ck, read(&r.p("res.json")));

    r.ok(&[
        "gate", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--out", "gate.json",
    ]);
    let table = GateTable::load_csv(&r.p("gate.json.table.csv")).unwrap();
    let ds = Dataset::load_csv(&r.p("data.csv")).unwrap();
    let train_pairs: usize = ds.queries.values().map(|q| q.ids_with_role(QueryRole::Train).len()).sum();
    assert_eq!(table.rows.len(), train_pairs);
    let params = ParamStore::load(&r.p("res.json")).unwrap();
    let std = Standardizer::new(params.expect("meta.y_mean").item(), params.expect("meta.y_std").item()).unwrap();
    for row in &table.rows {
        let g = oracle_gamma(std.scale_residual(row.label - row.prior), std.scale_residual(row.ehat), 1e-3);
        assert_eq!(g, row.gamma_star);
        assert!((0.0..=1.0).contains(&row.gamma_fit));
    }
    let gate = read(&r.p("gate.json"));
    r.ok(&[
        "gate", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--out", "gate.json",
    ]);
    assert_eq!(gate, read(&r.p("gate.json")));

    r.ok(&[
        "eval", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--gate", "gate.json",
        "--regime", "gated", "--out", "metrics.csv",
    ]);
    let rows = metric_rows(&r.p("metrics.csv"));
    for (site, split) in [("1", "train"), ("1", "eval"), ("2", "eval"), ("3", "train"), ("3", "eval")] {
        for regime in ["prior", "gated"] {
            assert!(rows.iter().any(|x| x[0] == site && x[1] == split && x[2] == regime));
        }
    }
    for x in &rows {
        let (rmse, mae): (f64, f64) = (x[3].parse().unwrap(), x[4].parse().unwrap());
        assert!(rmse >= mae);
    }

    r.ok(&[
        "map", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--regime", "residual",
        "--site", "3", "--out", "map3",
    ]);
    let pgm = read(&r.p("map3.pgm"));
    assert!(pgm.starts_with(b"P5\n30 30\n255\n"));
    assert_eq!(pgm.len(), b"P5\n30 30\n255\n".len() + 900);
    let obs: std::collections::BTreeSet<(i64, i64)> = ds.observations[&3]
        .records
        .iter()
        .map(|o| (o.bin.row, o.bin.col))
        .collect();
    let csv = metric_rows(&r.p("map3.csv"));
    let c3 = ds.counts().into_iter().find(|c| c.site == 3).unwrap();
    assert_eq!(csv.len(), c3.bins);
    for row in csv {
        let v: Vec<f64> = row.iter().map(|s| s.parse().unwrap()).collect();
        assert!((v[6] - (v[5] - v[4])).abs() < 1e-9);
        if obs.contains(&(v[0] as i64, v[1] as i64)) {
            assert_eq!(v[5], v[4]);
        }
    }
}

#[test]
fn zeroed_residual_head_reproduces_prior_metrics() {
    let r = Run::new();
    r.gen();
    r.train_residual(1);
    let mut params = ParamStore::load(&r.p("res.json")).unwrap();
    params.insert("head.residual.l2.w", Array::zeros(1, 128));
    params.insert("head.residual.l2.b", Array::zeros(1, 1));
    params.save(&r.p("zero.json")).unwrap();
    r.ok(&[
        "eval", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "zero.json", "--regime", "residual",
        "--out", "m.csv",
    ]);
    let rows = metric_rows(&r.p("m.csv"));
    let prior: Vec<_> = rows.iter().filter(|x| x[2] == "prior").collect();
    let resid: Vec<_> = rows.iter().filter(|x| x[2] == "residual").collect();
    assert_eq!(prior.len(), resid.len());
    for (a, b) in prior.iter().zip(&resid) {
        assert_eq!((&a[0], &a[1], &a[3], &a[4], &a[5]), (&b[0], &b[1], &b[3], &b[4], &b[5]));
    }
}

#[test]
fn exit_codes() {
    let r = Run::new();
    r.gen();
    // gate without a residual checkpoint
    assert_eq!(
        r.raymap(&["gate", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "none.json", "--out", "g.json"]),
        4
    );
    assert_eq!(r.raymap(&["prior", "--dataset", "missing.csv", "--out", "p.csv"]), 3);
    assert_eq!(r.raymap(&["train", "--dataset", "data.csv", "--regime", "sideways", "--out", "x.json"]), 2);
    assert_eq!(r.raymap(&["train", "--dataset", "data.csv", "--regime", "residual", "--out", "x.json"]), 2);
    std::fs::write(r.p("bad.json"), "{\"bin_size_m\": -1}").unwrap();
    assert_eq!(r.raymap(&["gen", "--config", "bad.json", "--out", "x.csv"]), 2);
    assert_eq!(r.raymap(&["gen", "--bogus-flag", "--out", "x.csv"]), 2);
    r.train_residual(1);
    assert_eq!(
        r.raymap(&[
            "map", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--regime", "residual",
            "--site", "9", "--out", "m",
        ]),
        2
    );
    assert_eq!(
        r.raymap(&[
            "eval", "--dataset", "data.csv", "--prior", "prior.csv", "--checkpoint", "res.json", "--regime", "gated",
            "--out", "m.csv",
        ]),
        4
    );
}
