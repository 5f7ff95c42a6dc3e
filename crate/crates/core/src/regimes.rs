//! Direct and residual training, mini-batch global neighbourhoods, the
//! post-hoc gate and unified inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::{Dataset, QueryRole, ScenarioConfig, SiteId};
use crate::encoders::Net;
use crate::error::{Error, Result};
use crate::geo_index::{pair_geometry, PairGeometry, Point2};
use crate::hgat::{
    build_scaffold, config_from_params, encode_targets, global_stage, head_direct, head_residual, init_model,
    local_stage, GlobalBatch, LocalBatch, ModelConfig, SiteContext, Target,
};
use crate::kriging_prior::PriorTable;
use crate::numcore::{adam_step, AdamConfig, AdamState, Array, LossKind, ParamStore};

/// Affine map between dBm and the unit-scale training space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::invalid(format!("invalid standardizer ({mean}, {std})")));
        }
        Ok(Standardizer { mean, std })
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("standardizer needs at least two values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Residuals carry no offset, only scale.
    pub fn scale_residual(&self, e: f64) -> f64 {
        e / self.std
    }

    pub fn unscale_residual(&self, e: f64) -> f64 {
        e * self.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Direct,
    Residual,
    Gated,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Direct => "direct",
            Regime::Residual => "residual",
            Regime::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "direct" => Ok(Regime::Direct),
            "residual" => Ok(Regime::Residual),
            "gated" => Ok(Regime::Gated),
            _ => Err(Error::invalid(format!("unknown regime {s:?} (direct|residual|gated)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub huber_delta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    /// Reference budget per site; `None` keeps every observation.
    pub scaffold_budget: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 128,
            huber_delta: 1.0,
            adam: AdamConfig::default(),
            seed: 7,
            model: ModelConfig::default(),
            scaffold_budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber delta must be positive"));
        }
        self.model.hgat.validate()
    }
}

/// Site contexts and standardization shared by training and inference.
#[derive(Debug, Clone)]
pub struct Setup {
    pub contexts: BTreeMap<SiteId, SiteContext>,
    pub standardizer: Standardizer,
    pub seen: Vec<SiteId>,
}

impl Setup {
    /// Standardization uses seen-site observations only.
    pub fn new(dataset: &Dataset, scenario: &ScenarioConfig, budget: Option<usize>, seed: u64) -> Result<Setup> {
        let seen: Vec<SiteId> = dataset
            .queries
            .iter()
            .filter(|(_, q)| q.records.iter().any(|r| r.role == QueryRole::Train))
            .map(|(s, _)| *s)
            .collect();
        let values: Vec<f64> = seen
            .iter()
            .filter_map(|s| dataset.observations.get(s))
            .flat_map(|o| o.values())
            .collect();
        let standardizer = Standardizer::from_values(&values)?;
        let r0 = scenario.r0();
        let mut contexts = BTreeMap::new();
        for (site, obs) in &dataset.observations {
            let tx = scenario
                .transmitter(*site)
                .ok_or_else(|| Error::NotFound(format!("transmitter for site {site}")))?;
            let scaffold = build_scaffold(obs, budget.unwrap_or(obs.len()).max(1), seed)?;
            contexts.insert(
                *site,
                SiteContext {
                    site: *site,
                    tx: tx.position(),
                    r0,
                    scaffold,
                    standardizer,
                },
            );
        }
        Ok(Setup {
            contexts,
            standardizer,
            seen,
        })
    }

    pub fn context(&self, site: SiteId) -> Result<&SiteContext> {
        self.contexts
            .get(&site)
            .ok_or_else(|| Error::NotFound(format!("site {site}")))
    }
}

/// One supervised pair `(site, target id)` with its target location.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pair {
    site: SiteId,
    target_id: usize,
    target: Target,
    label: f64,
}

fn train_pairs(dataset: &Dataset) -> Vec<Pair> {
    let mut out = Vec::new();
    for (site, q) in &dataset.queries {
        for (id, r) in q.records.iter().enumerate() {
            if r.role == QueryRole::Train {
                out.push(Pair {
                    site: *site,
                    target_id: id,
                    target: Target {
                        location: r.location,
                        los: r.los,
                    },
                    label: r.label_dbm,
                });
            }
        }
    }
    out
}

/// Global neighbourhoods of one mini-batch, as positions within the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInfo {
    pub epoch: usize,
    pub sites: Vec<SiteId>,
    pub target_ids: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

/// The `k` nearest same-site members of the batch, excluding the member itself.
pub fn batch_neighbors(sites: &[SiteId], points: &[Point2], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i && sites[j] == sites[i])
                .map(|j| (points[i].dist2(&points[j]), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamStore,
    /// Mean training loss per epoch.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRegime {
    Direct,
    Residual,
}

pub fn train_direct(setup: &Setup, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train(TrainRegime::Direct, setup, dataset, None, cfg, &mut |_| {})
}

pub fn train_residual(setup: &Setup, dataset: &Dataset, prior: &PriorTable, cfg: &TrainConfig) -> Result<TrainOutput> {
    train(TrainRegime::Residual, setup, dataset, Some(prior), cfg, &mut |_| {})
}

/// Seeded mini-batch training; `observer` sees each batch's neighbourhoods.
pub fn train(
    regime: TrainRegime,
    setup: &Setup,
    dataset: &Dataset,
    prior: Option<&PriorTable>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&BatchInfo),
) -> Result<TrainOutput> {
    let params = init_model(&cfg.model, cfg.seed)?;
    train_from(regime, setup, dataset, prior, cfg, params, observer)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    regime: TrainRegime,
    setup: &Setup,
    dataset: &Dataset,
    prior: Option<&PriorTable>,
    cfg: &TrainConfig,
    mut params: ParamStore,
    observer: &mut dyn FnMut(&BatchInfo),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let pairs = train_pairs(dataset);
    if pairs.is_empty() {
        return Err(Error::invalid("dataset has no train queries"));
    }
    let std = setup.standardizer;
    // per-pair regression target and prior input
    let mut targets = Vec::with_capacity(pairs.len());
    let mut prior_in = Vec::with_capacity(pairs.len());
    for p in &pairs {
        match regime {
            TrainRegime::Direct => {
                targets.push(std.standardize(p.label));
                prior_in.push(0.0);
            }
            TrainRegime::Residual => {
                let table = prior.ok_or_else(|| Error::invalid("residual training needs a prior table"))?;
                let row = table.get(p.site, p.target_id).ok_or_else(|| {
                    Error::invalid(format!("prior table lacks pair (site {}, target {})", p.site, p.target_id))
                })?;
                targets.push(std.scale_residual(p.label - row.prior_dbm));
                prior_in.push(std.standardize(row.prior_dbm));
            }
        }
    }
    let model = config_from_params(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let sites: Vec<SiteId> = chunk.iter().map(|&i| pairs[i].site).collect();
            let points: Vec<Point2> = chunk.iter().map(|&i| pairs[i].target.location).collect();
            let nbrs = batch_neighbors(&sites, &points, model.hgat.k_g);
            for (i, list) in nbrs.iter().enumerate() {
                for &j in list {
                    assert!(j < chunk.len() && j != i && sites[j] == sites[i], "neighbour outside batch");
                }
            }
            observer(&BatchInfo {
                epoch,
                sites: sites.clone(),
                target_ids: chunk.iter().map(|&i| pairs[i].target_id).collect(),
                neighbors: nbrs.clone(),
            });
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                items.push((setup.context(pairs[i].site)?, pairs[i].target));
            }
            let mut geo: Vec<Vec<(usize, PairGeometry)>> = Vec::with_capacity(chunk.len());
            for (i, list) in nbrs.iter().enumerate() {
                let r0 = items[i].0.r0;
                let mut row = Vec::with_capacity(list.len());
                for &j in list {
                    let g = pair_geometry(&points[i], &points[j])?;
                    row.push((
                        j,
                        PairGeometry {
                            distance: g.distance / r0,
                            bearing: g.bearing,
                        },
                    ));
                }
                geo.push(row);
            }
            let local = LocalBatch::build(&items, model.hgat.k_ref, model.encoder.bins)?;
            let global = GlobalBatch::build(&geo, model.encoder.bins)?;
            let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let grads = {
                let mut net = Net::new(&params);
                let l = local_stage(&mut net, &local);
                let g = global_stage(&mut net, l.z, l.z, &global);
                let s = net.tape.concat(&[l.z, g.z]);
                let y = match regime {
                    TrainRegime::Direct => head_direct(&mut net, s),
                    TrainRegime::Residual => {
                        let p: Vec<f64> = chunk.iter().map(|&i| prior_in[i]).collect();
                        head_residual(&mut net, s, &p)
                    }
                };
                let loss = net.tape.loss(y, batch_targets, None, LossKind::Huber(cfg.huber_delta));
                net.tape.backward(loss)?;
                total += net.tape.value(loss).item() * chunk.len() as f64;
                net.tape.param_grads()
            };
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
        }
        let mean = total / pairs.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    params.insert("meta.y_mean", Array::scalar(std.mean));
    params.insert("meta.y_std", Array::scalar(std.std));
    params.insert("meta.scaffold_budget", Array::scalar(cfg.scaffold_budget.unwrap_or(0) as f64));
    params.insert(
        "meta.regime",
        Array::scalar(match regime {
            TrainRegime::Direct => 0.0,
            TrainRegime::Residual => 1.0,
        }),
    );
    Ok(TrainOutput { params, trace })
}

/// Regime a checkpoint was trained for, if recorded.
pub fn checkpoint_regime(params: &ParamStore) -> Option<TrainRegime> {
    match params.get("meta.regime")?.item() as i64 {
        0 => Some(TrainRegime::Direct),
        1 => Some(TrainRegime::Residual),
        _ => None,
    }
}

/// Scaffold budget recorded at training time; `None` means every observation.
pub fn checkpoint_budget(params: &ParamStore) -> Option<usize> {
    params
        .get("meta.scaffold_budget")
        .map(|a| a.item() as usize)
        .filter(|b| *b > 0)
}

/// Closed-form per-sample attenuation minimizing `(ybar + g*ehat - y)^2` over `g` in `[0, 1]`.
pub fn oracle_gamma(e: f64, ehat: f64, eps_e: f64) -> f64 {
    if ehat.abs() <= eps_e {
        0.0
    } else {
        (e / ehat).clamp(0.0, 1.0)
    }
}

pub fn recompose(prior: f64, ehat: f64, gamma: f64) -> f64 {
    prior + gamma * ehat
}

/// Gate input `[ybar, ehat, |ehat|, grad_mag, local_std]`; the first two standardized.
pub fn gate_features(prior_std: f64, ehat_std: f64, grad_mag: f64, local_std: f64) -> [f64; 5] {
    [prior_std, ehat_std, ehat_std.abs(), grad_mag / GRAD_UNIT, local_std / STD_UNIT]
}

/// dB per metre
const GRAD_UNIT: f64 = 1.0;
/// dB
const STD_UNIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateLoss {
    WeightedHuber,
    RecompositionMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Threshold on `|ehat|` in standardized units.
    pub eps_e: f64,
    pub huber_delta: f64,
    pub step_h: f64,
    pub hidden: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub loss: GateLoss,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            eps_e: 1e-3,
            huber_delta: 0.25,
            step_h: 2.0,
            hidden: 32,
            steps: 600,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            loss: GateLoss::WeightedHuber,
            seed: 7,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_e > 0.0) || !(self.huber_delta > 0.0) || self.hidden == 0 {
            return Err(Error::invalid("gate config: eps_e, delta and width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub site: SiteId,
    pub target_id: usize,
    pub prior: f64,
    pub ehat: f64,
    pub abs_ehat: f64,
    pub grad_mag: f64,
    pub local_std: f64,
    pub label: f64,
    pub gamma_star: f64,
    pub gamma_fit: f64,
}

/// Supervised pairs reused for gate fitting; values in dBm / dB.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateTable {
    pub rows: Vec<GateRow>,
}

const GATE_HEADER: &str = "site,target_id,prior,ehat,abs_ehat,grad_mag,local_std,label,gamma_star,gamma_fit";

impl GateTable {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(GATE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.site, r.target_id, r.prior, r.ehat, r.abs_ehat, r.grad_mag, r.local_std, r.label, r.gamma_star, r.gamma_fit
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<GateTable> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize().enumerate() {
            rows.push(rec.map_err(|e: csv::Error| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })?);
        }
        Ok(GateTable { rows })
    }

    pub fn features(&self, std: &Standardizer) -> Vec<[f64; 5]> {
        self.rows
            .iter()
            .map(|r| gate_features(std.standardize(r.prior), std.scale_residual(r.ehat), r.grad_mag, r.local_std))
            .collect()
    }
}

pub fn init_gate(cfg: &GateConfig) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.init("gate.l1.w", cfg.hidden, 5, 5, cfg.seed)?;
    s.init("gate.l1.b", 1, cfg.hidden, 5, cfg.seed)?;
    s.init("gate.l2.w", 1, cfg.hidden, cfg.hidden, cfg.seed)?;
    s.init("gate.l2.b", 1, 1, cfg.hidden, cfg.seed)?;
    Ok(s)
}

fn gate_forward(net: &mut Net<'_>, feats: &[[f64; 5]]) -> crate::numcore::Var {
    let x = net
        .tape
        .constant(Array::from_vec(feats.len(), 5, feats.iter().flatten().copied().collect()));
    let h = net.linear(x, "gate.l1");
    let h = net.tape.tanh(h);
    let o = net.linear(h, "gate.l2");
    net.tape.sigmoid(o)
}

pub fn gate_apply(gate: &ParamStore, feats: &[[f64; 5]]) -> Vec<f64> {
    let mut net = Net::new(gate);
    let g = gate_forward(&mut net, feats);
    net.tape.value(g).data().to_vec()
}

/// Fits the gate MLP on a table whose encoder and residual head are already
/// frozen; only `gate.*` parameters are created or updated here.
pub fn fit_gate(table: &GateTable, std: &Standardizer, cfg: &GateConfig) -> Result<ParamStore> {
    cfg.validate()?;
    if table.rows.is_empty() {
        return Err(Error::invalid("gate table is empty"));
    }
    let feats = table.features(std);
    let mut target = Vec::with_capacity(table.rows.len());
    let mut weight = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let e = std.scale_residual(r.label - r.prior);
        let eh = std.scale_residual(r.ehat);
        let active = eh.abs() > cfg.eps_e;
        match cfg.loss {
            GateLoss::WeightedHuber => {
                target.push(oracle_gamma(e, eh, cfg.eps_e));
                weight.push(eh * eh);
            }
            GateLoss::RecompositionMse => {
                target.push(if active { e / eh } else { 0.0 });
                weight.push(if active { eh * eh } else { 0.0 });
            }
        }
    }
    if weight.iter().all(|w| *w == 0.0) {
        weight.iter_mut().for_each(|w| *w = 1.0);
    }
    let kind = match cfg.loss {
        GateLoss::WeightedHuber => LossKind::Huber(cfg.huber_delta),
        GateLoss::RecompositionMse => LossKind::Squared,
    };
    let mut params = init_gate(cfg)?;
    let mut adam = AdamState::new();
    for _ in 0..cfg.steps {
        let grads = {
            let mut net = Net::new(&params);
            let g = gate_forward(&mut net, &feats);
            let loss = net.tape.loss(g, target.clone(), Some(weight.clone()), kind);
            net.tape.backward(loss)?;
            net.tape.param_grads()
        };
        adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
    }
    Ok(params)
}

/// Trained parameter sets available to inference.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub direct: Option<ParamStore>,
    pub residual: Option<ParamStore>,
    pub gate: Option<ParamStore>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPrediction {
    pub site: SiteId,
    pub target_id: usize,
    pub role: QueryRole,
    pub location: Point2,
    pub label: f64,
    pub prior: Option<f64>,
    pub ehat: Option<f64>,
    pub gamma: Option<f64>,
    pub pred: f64,
}

fn prior_row(prior: &PriorTable, site: SiteId, id: usize) -> Result<&crate::kriging_prior::PriorRow> {
    prior
        .get(site, id)
        .ok_or_else(|| Error::invalid(format!("prior table lacks pair (site {site}, target {id})")))
}

/// Predictions for every query pair of `site`. Global neighbours come from
/// the site's full target set.
pub fn predict_site(
    regime: Regime,
    setup: &Setup,
    dataset: &Dataset,
    site: SiteId,
    prior: Option<&PriorTable>,
    models: &Models,
) -> Result<Vec<PairPrediction>> {
    let ctx = setup.context(site)?;
    let queries = dataset
        .queries
        .get(&site)
        .ok_or_else(|| Error::NotFound(format!("queries for site {site}")))?;
    let targets: Vec<Target> = queries
        .records
        .iter()
        .map(|r| Target {
            location: r.location,
            los: r.los,
        })
        .collect();
    let need_prior = || prior.ok_or_else(|| Error::InvalidState(format!("{} regime needs a prior table", regime.as_str())));
    let std = setup.standardizer;
    let mut out = Vec::with_capacity(targets.len());
    let base = |id: usize, pred: f64| {
        let r = &queries.records[id];
        PairPrediction {
            site,
            target_id: id,
            role: r.role,
            location: r.location,
            label: r.label_dbm,
            prior: None,
            ehat: None,
            gamma: None,
            pred,
        }
    };
    match regime {
        Regime::Direct => {
            let params = models
                .direct
                .as_ref()
                .ok_or_else(|| Error::InvalidState("direct regime needs a direct checkpoint".into()))?;
            let s = encode_targets(ctx, &targets, params)?;
            let y = crate::hgat::apply_head(params, &s, None);
            for (id, v) in y.into_iter().enumerate() {
                out.push(base(id, std.destandardize(v)));
            }
        }
        Regime::Residual | Regime::Gated => {
            let table = need_prior()?;
            let params = models
                .residual
                .as_ref()
                .ok_or_else(|| Error::InvalidState("residual checkpoint missing".into()))?;
            let gate = match regime {
                Regime::Gated => Some(
                    models
                        .gate
                        .as_ref()
                        .ok_or_else(|| Error::InvalidState("gated regime needs a fitted gate".into()))?,
                ),
                _ => None,
            };
            let rows = (0..targets.len())
                .map(|id| prior_row(table, site, id))
                .collect::<Result<Vec<_>>>()?;
            let prior_std: Vec<f64> = rows.iter().map(|r| std.standardize(r.prior_dbm)).collect();
            let s = encode_targets(ctx, &targets, params)?;
            let ehat_std = crate::hgat::apply_head(params, &s, Some(&prior_std));
            let gammas = gate.map(|g| {
                let feats: Vec<[f64; 5]> = rows
                    .iter()
                    .zip(&ehat_std)
                    .map(|(r, e)| gate_features(std.standardize(r.prior_dbm), *e, r.grad_mag, r.local_std))
                    .collect();
                gate_apply(g, &feats)
            });
            for (id, row) in rows.iter().enumerate() {
                let ehat = std.unscale_residual(ehat_std[id]);
                let gamma = gammas.as_ref().map_or(1.0, |g| g[id]);
                let mut p = base(id, recompose(row.prior_dbm, ehat, gamma));
                p.prior = Some(row.prior_dbm);
                p.ehat = Some(ehat);
                p.gamma = gammas.as_ref().map(|g| g[id]);
                out.push(p);
            }
        }
    }
    Ok(out)
}

pub fn predict_all(
    regime: Regime,
    setup: &Setup,
    dataset: &Dataset,
    prior: Option<&PriorTable>,
    models: &Models,
) -> Result<Vec<PairPrediction>> {
    let mut out = Vec::new();
    for site in dataset.queries.keys() {
        out.extend(predict_site(regime, setup, dataset, *site, prior, models)?);
    }
    Ok(out)
}

/// Gate table over train pairs from residual-regime predictions.
pub fn build_gate_table(preds: &[PairPrediction], prior: &PriorTable, std: &Standardizer, eps_e: f64) -> Result<GateTable> {
    let mut rows = Vec::new();
    for p in preds.iter().filter(|p| p.role == QueryRole::Train) {
        let row = prior_row(prior, p.site, p.target_id)?;
        let ehat = p
            .ehat
            .ok_or_else(|| Error::InvalidState("gate table needs residual predictions".into()))?;
        let e = p.label - row.prior_dbm;
        rows.push(GateRow {
            site: p.site,
            target_id: p.target_id,
            prior: row.prior_dbm,
            ehat,
            abs_ehat: ehat.abs(),
            grad_mag: row.grad_mag,
            local_std: row.local_std,
            label: p.label,
            gamma_star: oracle_gamma(std.scale_residual(e), std.scale_residual(ehat), eps_e),
            gamma_fit: f64::NAN,
        });
    }
    Ok(GateTable { rows })
}

/// Fills `gamma_fit` from a fitted gate.
pub fn annotate_gate_table(table: &mut GateTable, gate: &ParamStore, std: &Standardizer) {
    let g = gate_apply(gate, &table.features(std));
    for (r, v) in table.rows.iter_mut().zip(g) {
        r.gamma_fit = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// RMSE and MAE of `pred - truth` pairs.
pub fn error_stats(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<ErrorStats> {
    let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
    for (pred, truth) in pairs {
        let e = pred - truth;
        sq += e * e;
        ab += e.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    Ok(ErrorStats {
        rmse: (sq / n as f64).sqrt(),
        mae: ab / n as f64,
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub site: String,
    pub split: String,
    pub regime: String,
    pub stats: ErrorStats,
}

/// Per-site rows for each split present, then pooled rows over seen and held-out sites.
pub fn evaluate(preds: &[PairPrediction], regime: &str, seen: &[SiteId]) -> Result<Vec<MetricRow>> {
    if preds.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut groups: BTreeMap<(String, &'static str), Vec<(f64, f64)>> = BTreeMap::new();
    for p in preds {
        let split = p.role.as_str();
        let pool = if seen.contains(&p.site) { "seen" } else { "held_out" };
        groups.entry((p.site.to_string(), split)).or_default().push((p.pred, p.label));
        groups.entry((pool.to_string(), split)).or_default().push((p.pred, p.label));
    }
    let mut rows = Vec::new();
    // numeric site ids first, pooled rows after
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort_by_key(|(s, sp)| (s.parse::<u64>().map_or(1, |_| 0), s.parse::<u64>().unwrap_or(0), s.clone(), *sp));
    for k in keys {
        let stats = error_stats(groups[&k].iter().copied())?;
        rows.push(MetricRow {
            site: k.0,
            split: k.1.to_string(),
            regime: regime.to_string(),
            stats,
        });
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("site,split,regime,rmse_db,mae_db,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.site, r.split, r.regime, r.stats.rmse, r.stats.mae, r.stats.n);
    }
    s
}

/// Prior-only predictions, for baseline metric rows.
pub fn prior_predictions(dataset: &Dataset, prior: &PriorTable) -> Result<Vec<PairPrediction>> {
    let mut out = Vec::new();
    for (site, q) in &dataset.queries {
        for (id, r) in q.records.iter().enumerate() {
            let row = prior_row(prior, *site, id)?;
            out.push(PairPrediction {
                site: *site,
                target_id: id,
                role: r.role,
                location: r.location,
                label: r.label_dbm,
                prior: Some(row.prior_dbm),
                ehat: None,
                gamma: None,
                pred: row.prior_dbm,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::from_values(&[-60.0, -70.0, -95.0]).unwrap();
        for y in [-120.0, -71.3, 0.0] {
            assert!((s.destandardize(s.standardize(y)) - y).abs() <= 1e-12);
        }
        assert!(Standardizer::new(0.0, 0.0).is_err());
        assert!(Standardizer::from_values(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn oracle_gamma_examples() {
        assert_eq!(oracle_gamma(2.0, 4.0, 1e-3), 0.5);
        assert_eq!(oracle_gamma(-1.0, 2.0, 1e-3), 0.0);
        assert_eq!(oracle_gamma(5.0, 2.0, 1e-3), 1.0);
        assert_eq!(oracle_gamma(5.0, 1e-4, 1e-3), 0.0);
    }

    #[test]
    fn gate_feature_assembly() {
        assert_eq!(gate_features(0.3, 0.0, 1.0, 2.0)[2], 0.0);
        let a = gate_features(0.3, 1.5, 1.0, 2.0);
        let b = gate_features(0.3, -1.5, 1.0, 2.0);
        assert_eq!(a[1], -b[1]);
        assert_eq!(a[2], b[2]);
        let flat = crate::kriging_prior::prior_variation(|_| Ok(-70.0), &Point2::new(3.0, 3.0), 2.0).unwrap();
        let f = gate_features(0.0, 1.0, flat.grad_mag, flat.local_std);
        assert_eq!((f[3], f[4]), (0.0, 0.0));
    }

    #[test]
    fn recomposition_examples() {
        assert_eq!(recompose(-70.0, 4.0, 0.25), -69.0);
        assert_eq!(recompose(-70.0, 4.0, 0.0), -70.0);
        assert_eq!(recompose(-70.0, 4.0, 1.0), -66.0);
    }

    #[test]
    fn error_stat_examples() {
        let z = error_stats([(1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert_eq!((z.rmse, z.mae), (0.0, 0.0));
        let s = error_stats([(3.0, 0.0), (-3.0, 0.0)]).unwrap();
        assert_eq!((s.rmse, s.mae), (3.0, 3.0));
        let t = error_stats([(0.0, 0.0), (4.0, 0.0)]).unwrap();
        assert!((t.rmse - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.mae, 2.0);
        assert!(error_stats(std::iter::empty()).is_err());
    }

    #[test]
    fn batch_neighbours_stay_in_batch_and_site() {
        let sites = [1, 1, 3, 1, 3, 1];
        let pts: Vec<Point2> = (0..6).map(|i| Point2::new(i as f64, 0.0)).collect();
        let n = batch_neighbors(&sites, &pts, 4);
        assert_eq!(n[0], vec![1, 3, 5]);
        assert_eq!(n[2], vec![4]);
        for (i, l) in n.iter().enumerate() {
            assert!(l.iter().all(|&j| j != i && sites[j] == sites[i]));
        }
    }

    fn table(gamma: f64, n: usize) -> GateTable {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        GateTable {
            rows: (0..n)
                .map(|i| {
                    let prior = rng.random_range(-100.0..-60.0);
                    let ehat: f64 = rng.random_range(1.0..6.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
                    let label = prior + gamma * ehat;
                    GateRow {
                        site: 1,
                        target_id: i,
                        prior,
                        ehat,
                        abs_ehat: ehat.abs(),
                        grad_mag: rng.random_range(0.0..2.0),
                        local_std: rng.random_range(0.0..3.0),
                        label,
                        gamma_star: gamma,
                        gamma_fit: f64::NAN,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn gate_fits_saturated_tables() {
        let std = Standardizer::new(-80.0, 10.0).unwrap();
        let cfg = GateConfig::default();
        let ones = table(1.0, 200);
        let g = fit_gate(&ones, &std, &cfg).unwrap();
        assert!(gate_apply(&g, &ones.features(&std)).iter().all(|v| *v >= 0.9));
        let zeros = table(0.0, 200);
        let g = fit_gate(&zeros, &std, &cfg).unwrap();
        assert!(gate_apply(&g, &zeros.features(&std)).iter().all(|v| *v <= 0.1));
        assert!(fit_gate(&GateTable::default(), &std, &cfg).is_err());
    }

    #[test]
    fn gate_fit_is_deterministic_and_bounded() {
        let std = Standardizer::new(-80.0, 10.0).unwrap();
        let t = table(0.4, 50);
        let a = fit_gate(&t, &std, &GateConfig::default()).unwrap();
        let b = fit_gate(&t, &std, &GateConfig::default()).unwrap();
        assert_eq!(a, b);
        let mse = GateConfig {
            loss: GateLoss::RecompositionMse,
            ..GateConfig::default()
        };
        let c = fit_gate(&t, &std, &mse).unwrap();
        let wild: Vec<[f64; 5]> = (0..20).map(|i| [i as f64 * 50.0 - 500.0; 5]).collect();
        for g in [a, c] {
            assert!(gate_apply(&g, &wild).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gate_table_csv_round_trip() {
        let mut t = table(0.5, 5);
        for r in &mut t.rows {
            r.gamma_fit = 0.25;
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gate.csv");
        t.save_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with(GATE_HEADER));
        assert_eq!(GateTable::load_csv(&p).unwrap(), t);
    }

    proptest::proptest! {
        #[test]
        fn oracle_gamma_minimizes_recomposition(e in -20.0f64..20.0, eh in -20.0f64..20.0, prior in -110.0f64..-40.0) {
            let g = oracle_gamma(e, eh, 1e-3);
            proptest::prop_assert!((0.0..=1.0).contains(&g));
            if eh.abs() > 1e-3 {
                let y = prior + e;
                let err = |gamma: f64| (recompose(prior, eh, gamma) - y).powi(2);
                proptest::prop_assert!(err(g) <= err(0.0) + 1e-9);
                proptest::prop_assert!(err(g) <= err(1.0) + 1e-9);
                let ident = eh * eh * (g - e / eh).powi(2);
                proptest::prop_assert!((err(g) - ident).abs() <= 1e-9 * (1.0 + ident));
            }
        }
    }
}
