//! `raymap` command implementations. Every command is a pure function of its
//! inputs and seed, and writes a provenance record beside each artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use raymap_core::datahub::{split_sites, Dataset, PipelineConfig, Scenario, ScenarioConfig, SiteCounts, SiteId};
use raymap_core::kriging_prior::{prior_table_for_dataset, PriorConfig, PriorTable};
use raymap_core::numcore::ParamStore;
use raymap_core::regimes::{
    annotate_gate_table, build_gate_table, checkpoint_budget, checkpoint_regime, evaluate, fit_gate, metrics_csv,
    predict_all, predict_site, prior_predictions, train, GateConfig, Models, Regime, Setup, TrainConfig, TrainRegime,
};
use raymap_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_STATE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::InvalidState(_) => EXIT_STATE,
        Error::InvalidArgument(_) | Error::NotFound(_) | Error::Parse { .. } | Error::Json(_) => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(name = "raymap", version, about = "Transmitter-resolved radio map estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a scenario and write the dataset CSV
    Gen(RunArgs),
    /// Ordinary-kriging prior for every query pair
    Prior(RunArgs),
    /// Train the direct or residual regime
    Train(RunArgs),
    /// Fit the post-hoc gate on a frozen residual model
    Gate(RunArgs),
    /// RMSE / MAE per site and split
    Eval(RunArgs),
    /// Export a heatmap (CSV + PGM) for one site
    Map(RunArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct RunArgs {
    /// JSON config (scenario for gen, prior/train/gate settings otherwise)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model checkpoint (residual for gate; regime model for eval/map)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// direct | residual | gated
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Prior table CSV
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Gate checkpoint
    #[arg(long)]
    pub gate: Option<PathBuf>,
    #[arg(long)]
    pub site: Option<SiteId>,
    /// Config override `key.path=value`, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub const DEFAULT_SEED: u64 = 7;

/// Runs one command and returns the paths it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Prior(a) => cmd_prior(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Gate(a) => cmd_gate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Map(a) => cmd_map(&a),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input file name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub details: Value,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_provenance(
    artifact: &Path,
    command: &str,
    config: &impl Serialize,
    seed: u64,
    inputs: &[&Path],
    details: Value,
) -> Result<PathBuf> {
    let cfg = serde_json::to_vec(config)?;
    let mut hashes = BTreeMap::new();
    for p in inputs {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        hashes.insert(name, sha256_hex(&read_bytes(p)?));
    }
    let prov = Provenance {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        git_describe: env!("RAYMAP_GIT_DESCRIBE").to_string(),
        config_hash: sha256_hex(&cfg),
        seed,
        inputs: hashes,
        details,
    };
    let path = sidecar_path(artifact);
    write_file(&path, serde_json::to_string_pretty(&prov)?)?;
    Ok(path)
}

/// Sets `a.b.c=value` in a JSON object; values parse as JSON, else as strings.
pub fn apply_overrides(target: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override {o:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *target;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::invalid(format!("override {key}: {part} is not inside an object")))?;
            if i + 1 == parts.len() {
                if !obj.contains_key(*part) {
                    return Err(Error::invalid(format!("override {key}: unknown key {part}")));
                }
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj
                .get_mut(*part)
                .ok_or_else(|| Error::invalid(format!("override {key}: unknown key {part}")))?;
        }
    }
    Ok(())
}

/// Default config, then the optional JSON file, then `--set` overrides.
fn load_config<T: Serialize + DeserializeOwned>(base: T, args: &RunArgs) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file: Value = serde_json::from_str(&text)?;
        merge(&mut v, file);
    }
    apply_overrides(&mut v, &args.overrides)?;
    Ok(serde_json::from_value(v)?)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::invalid(format!("--{flag} is required")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenDetails {
    scenario: ScenarioConfig,
    pipeline: PipelineConfig,
    counts: Vec<SiteCounts>,
    seen: Vec<SiteId>,
    held_out: Vec<SiteId>,
}

/// Scenario and pipeline settings recorded beside a dataset by `gen`.
pub fn dataset_context(dataset: &Path) -> Result<(ScenarioConfig, PipelineConfig)> {
    let side = sidecar_path(dataset);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let prov: Provenance = serde_json::from_str(&text)?;
    let d: GenDetails = serde_json::from_value(prov.details)?;
    Ok((d.scenario, d.pipeline))
}

pub fn cmd_gen(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let scenario: ScenarioConfig = load_config(ScenarioConfig::reference(), args)?;
    scenario.validate()?;
    let pipeline = PipelineConfig {
        seed: args.seed.unwrap_or(DEFAULT_SEED),
        ..PipelineConfig::default()
    };
    let ds = Dataset::prepare(&Scenario::new(scenario.clone())?, &pipeline)?;
    write_file(&args.out, ds.to_csv_string())?;
    let (seen, held_out) = split_sites(&ds.sites());
    let details = GenDetails {
        scenario: scenario.clone(),
        pipeline,
        counts: ds.counts(),
        seen,
        held_out,
    };
    let side = write_provenance(
        &args.out,
        "gen",
        &(&scenario, &pipeline),
        pipeline.seed,
        &[],
        serde_json::to_value(details)?,
    )?;
    Ok(vec![args.out.clone(), side])
}

pub fn cmd_prior(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let dpath = required(&args.dataset, "dataset")?;
    let ds = Dataset::load_csv(dpath)?;
    let cfg: PriorConfig = load_config(PriorConfig::default(), args)?;
    let table = prior_table_for_dataset(&ds, &cfg)?;
    write_file(&args.out, table.to_csv_string())?;
    let side = write_provenance(
        &args.out,
        "prior",
        &cfg,
        0,
        &[dpath],
        serde_json::json!({ "rows": table.rows.len() }),
    )?;
    Ok(vec![args.out.clone(), side])
}

fn parse_regime(args: &RunArgs) -> Result<Regime> {
    Regime::parse(
        args.regime
            .as_deref()
            .ok_or_else(|| Error::invalid("--regime is required"))?,
    )
}

struct Loaded {
    dataset: Dataset,
    scenario: ScenarioConfig,
    pipeline: PipelineConfig,
}

fn load_dataset(args: &RunArgs) -> Result<Loaded> {
    let dpath = required(&args.dataset, "dataset")?;
    let dataset = Dataset::load_csv(dpath)?;
    let (scenario, pipeline) = dataset_context(dpath)?;
    Ok(Loaded {
        dataset,
        scenario,
        pipeline,
    })
}

fn load_prior(path: &Option<PathBuf>, need: bool) -> Result<Option<PriorTable>> {
    match path {
        Some(p) => Ok(Some(PriorTable::load_csv(p)?)),
        None if need => Err(Error::invalid("--prior is required for this regime")),
        None => Ok(None),
    }
}

/// Missing model files are a state problem (an earlier stage has not run).
fn load_model(path: &Option<PathBuf>, what: &str) -> Result<ParamStore> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::InvalidState(format!("{what} checkpoint not given")))?;
    if !p.exists() {
        return Err(Error::InvalidState(format!("{what} checkpoint {} does not exist", p.display())));
    }
    ParamStore::load(p)
}

pub fn cmd_train(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let regime = match parse_regime(args)? {
        Regime::Direct => TrainRegime::Direct,
        Regime::Residual => TrainRegime::Residual,
        Regime::Gated => return Err(Error::invalid("the gated regime is fitted with `raymap gate`")),
    };
    let l = load_dataset(args)?;
    let prior = load_prior(&args.prior, regime == TrainRegime::Residual)?;
    let mut cfg: TrainConfig = load_config(TrainConfig::default(), args)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let setup = Setup::new(&l.dataset, &l.scenario, cfg.scaffold_budget, l.pipeline.seed)?;
    let out = train(regime, &setup, &l.dataset, prior.as_ref(), &cfg, &mut |_| {})?;
    write_file(&args.out, out.params.to_json()?)?;
    let mut trace = String::from("epoch,loss\n");
    for (i, v) in out.trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{}", i + 1, v);
    }
    let tpath = suffixed(&args.out, ".trace.csv");
    write_file(&tpath, trace)?;
    let mut inputs = vec![required(&args.dataset, "dataset")?];
    if let Some(p) = &args.prior {
        inputs.push(p);
    }
    let side = write_provenance(
        &args.out,
        "train",
        &cfg,
        cfg.seed,
        &inputs,
        serde_json::json!({ "regime": format!("{regime:?}").to_lowercase(), "final_loss": out.trace.last() }),
    )?;
    Ok(vec![args.out.clone(), tpath, side])
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn setup_for(l: &Loaded, model: &ParamStore) -> Result<Setup> {
    Setup::new(&l.dataset, &l.scenario, checkpoint_budget(model), l.pipeline.seed)
}

pub fn cmd_gate(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let residual = load_model(&args.checkpoint, "residual")?;
    if checkpoint_regime(&residual) != Some(TrainRegime::Residual) {
        return Err(Error::InvalidState("gate fitting needs a residual-regime checkpoint".into()));
    }
    let l = load_dataset(args)?;
    let prior = load_prior(&args.prior, true)?.expect("required above");
    let mut cfg: GateConfig = load_config(GateConfig::default(), args)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let setup = setup_for(&l, &residual)?;
    let models = Models {
        residual: Some(residual),
        ..Default::default()
    };
    let preds = predict_all(Regime::Residual, &setup, &l.dataset, Some(&prior), &models)?;
    let mut table = build_gate_table(&preds, &prior, &setup.standardizer, cfg.eps_e)?;
    let gate = fit_gate(&table, &setup.standardizer, &cfg)?;
    annotate_gate_table(&mut table, &gate, &setup.standardizer);
    write_file(&args.out, gate.to_json()?)?;
    let tpath = suffixed(&args.out, ".table.csv");
    write_file(&tpath, table.to_csv_string())?;
    let inputs = [
        required(&args.dataset, "dataset")?,
        required(&args.prior, "prior")?,
        required(&args.checkpoint, "checkpoint")?,
    ];
    let side = write_provenance(
        &args.out,
        "gate",
        &cfg,
        cfg.seed,
        &inputs,
        serde_json::json!({ "rows": table.rows.len() }),
    )?;
    Ok(vec![args.out.clone(), tpath, side])
}

fn models_for(regime: Regime, args: &RunArgs) -> Result<(Models, ParamStore)> {
    let main = load_model(&args.checkpoint, regime.as_str())?;
    let want = match regime {
        Regime::Direct => TrainRegime::Direct,
        _ => TrainRegime::Residual,
    };
    if checkpoint_regime(&main) != Some(want) {
        return Err(Error::InvalidState(format!(
            "checkpoint was not trained for the {} regime",
            regime.as_str()
        )));
    }
    let mut models = Models::default();
    match regime {
        Regime::Direct => models.direct = Some(main.clone()),
        Regime::Residual => models.residual = Some(main.clone()),
        Regime::Gated => {
            models.residual = Some(main.clone());
            models.gate = Some(load_model(&args.gate, "gate")?);
        }
    }
    Ok((models, main))
}

pub fn cmd_eval(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let regime = parse_regime(args)?;
    let (models, main) = models_for(regime, args)?;
    let l = load_dataset(args)?;
    let prior = load_prior(&args.prior, regime != Regime::Direct)?;
    let setup = setup_for(&l, &main)?;
    let mut rows = Vec::new();
    if let Some(p) = &prior {
        rows.extend(evaluate(&prior_predictions(&l.dataset, p)?, "prior", &setup.seen)?);
    }
    let preds = predict_all(regime, &setup, &l.dataset, prior.as_ref(), &models)?;
    rows.extend(evaluate(&preds, regime.as_str(), &setup.seen)?);
    write_file(&args.out, metrics_csv(&rows))?;
    let mut inputs = vec![required(&args.dataset, "dataset")?, required(&args.checkpoint, "checkpoint")?];
    for p in [&args.prior, &args.gate].into_iter().flatten() {
        inputs.push(p);
    }
    let side = write_provenance(
        &args.out,
        "eval",
        &regime,
        0,
        &inputs,
        serde_json::json!({ "rows": rows.len() }),
    )?;
    Ok(vec![args.out.clone(), side])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub site: SiteId,
    pub regime: String,
    pub width: usize,
    pub height: usize,
    pub min_dbm: f64,
    pub max_dbm: f64,
    pub row_min: i64,
    pub col_min: i64,
    pub bin_size_m: f64,
    /// Pixel `(i, j)` holds bin `(row_min + height - 1 - i, col_min + j)`.
    pub orientation: String,
}

pub fn cmd_map(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let regime = parse_regime(args)?;
    let site = args.site.ok_or_else(|| Error::invalid("--site is required"))?;
    let l = load_dataset(args)?;
    let cells = l
        .dataset
        .grid
        .site(site)
        .ok_or_else(|| Error::NotFound(format!("site {site}")))?;
    let (models, main) = models_for(regime, args)?;
    let prior = load_prior(&args.prior, regime != Regime::Direct)?;
    let setup = setup_for(&l, &main)?;
    let preds = predict_site(regime, &setup, &l.dataset, site, prior.as_ref(), &models)?;
    let queries = &l.dataset.queries[&site];
    let mut pred_of = BTreeMap::new();
    for p in &preds {
        pred_of.insert(queries.records[p.target_id].bin, p.pred);
    }
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for k in cells.keys() {
        rmin = rmin.min(k.row);
        rmax = rmax.max(k.row);
        cmin = cmin.min(k.col);
        cmax = cmax.max(k.col);
    }
    let (height, width) = ((rmax - rmin + 1) as usize, (cmax - cmin + 1) as usize);
    let mut csv = String::from("row,col,x,y,truth,pred,error\n");
    let mut values = vec![f64::NAN; width * height];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, c) in cells {
        // observed bins keep their ground truth
        let pred = pred_of.get(k).copied().unwrap_or(c.rss_dbm);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            k.row,
            k.col,
            c.center.x,
            c.center.y,
            c.rss_dbm,
            pred,
            pred - c.rss_dbm
        );
        let i = (rmax - k.row) as usize;
        let j = (k.col - cmin) as usize;
        values[i * width + j] = pred;
        lo = lo.min(pred);
        hi = hi.max(pred);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pgm = format!("P5\n{width} {height}\n255\n").into_bytes();
    pgm.extend(values.iter().map(|v| {
        if v.is_nan() {
            0
        } else {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }));
    let csv_path = suffixed(&args.out, ".csv");
    let pgm_path = suffixed(&args.out, ".pgm");
    let json_path = suffixed(&args.out, ".json");
    write_file(&csv_path, csv)?;
    write_file(&pgm_path, pgm)?;
    let meta = MapSidecar {
        site,
        regime: regime.as_str().to_string(),
        width,
        height,
        min_dbm: lo,
        max_dbm: hi,
        row_min: rmin,
        col_min: cmin,
        bin_size_m: l.dataset.grid.bin_size,
        orientation: "top row is the largest bin row; gray = round(255 (dBm - min) / (max - min))".into(),
    };
    write_file(&json_path, serde_json::to_string_pretty(&meta)?)?;
    let mut inputs = vec![required(&args.dataset, "dataset")?, required(&args.checkpoint, "checkpoint")?];
    for p in [&args.prior, &args.gate].into_iter().flatten() {
        inputs.push(p);
    }
    let side = write_provenance(&pgm_path, "map", &meta, 0, &inputs, serde_json::to_value(&meta)?)?;
    Ok(vec![csv_path, pgm_path, json_path, side])
}
