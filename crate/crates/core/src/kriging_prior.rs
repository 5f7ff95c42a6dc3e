//! Classical spatial priors: empirical variogram, exponential fit, ordinary
//! and universal kriging, inverse-distance weighting and the local variation
//! descriptors consumed by the gate.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datahub::{Dataset, ObservationSet, QuerySet, SiteId};
use crate::error::{Error, Result};
use crate::geo_index::{Point2, SpatialIndex};

/// Diagonal jitter added to the semivariance block before solving.
pub const KRIGING_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagBin {
    pub center: f64,
    pub semivariance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagTable {
    pub max_lag: f64,
    pub bins: Vec<LagBin>,
}

/// Mean half squared difference per distance bin; empty bins are omitted.
pub fn empirical_variogram(obs: &ObservationSet, n_lags: usize, max_lag: f64) -> Result<LagTable> {
    empirical_variogram_points(&obs.locations(), &obs.values(), n_lags, max_lag)
}

pub fn empirical_variogram_points(
    points: &[Point2],
    values: &[f64],
    n_lags: usize,
    max_lag: f64,
) -> Result<LagTable> {
    if n_lags == 0 {
        return Err(Error::invalid("n_lags must be >= 1"));
    }
    if !(max_lag > 0.0) {
        return Err(Error::invalid("max_lag must be positive"));
    }
    if points.len() < 2 || points.len() != values.len() {
        return Err(Error::invalid("variogram needs >= 2 observations"));
    }
    let width = max_lag / n_lags as f64;
    let mut sums = vec![0.0; n_lags];
    let mut counts = vec![0usize; n_lags];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].dist(&points[j]);
            if d > max_lag {
                continue;
            }
            let b = ((d / width).floor() as usize).min(n_lags - 1);
            let diff = values[i] - values[j];
            sums[b] += 0.5 * diff * diff;
            counts[b] += 1;
        }
    }
    let bins = (0..n_lags)
        .filter(|&b| counts[b] > 0)
        .map(|b| LagBin {
            center: (b as f64 + 0.5) * width,
            semivariance: sums[b] / counts[b] as f64,
            pairs: counts[b],
        })
        .collect();
    Ok(LagTable { max_lag, bins })
}

/// Exponential variogram with nugget: `nugget + (sill - nugget)(1 - exp(-3h/range))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl VariogramModel {
    pub fn exponential(nugget: f64, sill: f64, range: f64) -> Result<Self> {
        if !(nugget >= 0.0 && sill >= nugget && range > 0.0) {
            return Err(Error::invalid(format!(
                "invalid variogram nugget={nugget} sill={sill} range={range}"
            )));
        }
        Ok(VariogramModel {
            nugget,
            sill,
            range,
            degenerate: false,
        })
    }

    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        self.nugget + (self.sill - self.nugget) * (1.0 - (-3.0 * h / self.range).exp())
    }
}

/// Weighted least-squares fit for a fixed range: returns (nugget, partial sill, sse).
fn fit_fixed_range(bins: &[LagBin], range: f64) -> (f64, f64, f64) {
    let (mut sw, mut sf, mut sff, mut sg, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in bins {
        let w = b.pairs as f64;
        let f = 1.0 - (-3.0 * b.center / range).exp();
        sw += w;
        sf += w * f;
        sff += w * f * f;
        sg += w * b.semivariance;
        sfg += w * f * b.semivariance;
    }
    let det = sw * sff - sf * sf;
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(4);
    if det.abs() > 1e-12 * sw * sff.max(1e-300) {
        candidates.push(((sff * sg - sf * sfg) / det, (sw * sfg - sf * sg) / det));
    }
    if sff > 0.0 {
        candidates.push((0.0, (sfg / sff).max(0.0)));
    }
    candidates.push(((sg / sw).max(0.0), 0.0));
    let sse = |n: f64, c: f64| {
        bins.iter()
            .map(|b| {
                let f = 1.0 - (-3.0 * b.center / range).exp();
                let r = n + c * f - b.semivariance;
                b.pairs as f64 * r * r
            })
            .sum::<f64>()
    };
    candidates
        .into_iter()
        .filter(|(n, c)| *n >= 0.0 && *c >= 0.0)
        .map(|(n, c)| (n, c, sse(n, c)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap_or((0.0, 0.0, sse(0.0, 0.0)))
}

/// Pair-count weighted least-squares fit of the exponential model under
/// `nugget >= 0`, `sill >= nugget`, `range > 0`.
pub fn fit_variogram(table: &LagTable) -> Result<VariogramModel> {
    if table.bins.len() < 3 {
        return Err(Error::invalid(format!(
            "variogram fit needs >= 3 nonempty lag bins, got {}",
            table.bins.len()
        )));
    }
    if table.bins.iter().all(|b| b.semivariance == 0.0) {
        return Ok(VariogramModel {
            nugget: 0.0,
            sill: f64::EPSILON,
            range: table.max_lag,
            degenerate: true,
        });
    }
    let lo = (table.max_lag / 200.0).ln();
    let hi = (table.max_lag * 10.0).ln();
    let steps = 240;
    let eval = |ln_a: f64| fit_fixed_range(&table.bins, ln_a.exp()).2;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
        .collect();
    let sse: Vec<f64> = grid.iter().map(|&g| eval(g)).collect();
    let min = sse.iter().copied().fold(f64::INFINITY, f64::min);
    let scale: f64 = table.bins.iter().map(|b| b.pairs as f64 * b.semivariance.powi(2)).sum();
    // flat tables fit equally well at many ranges; prefer the longest one, which
    // attributes a constant semivariance to the nugget
    let best = (0..grid.len())
        .rev()
        .find(|&i| sse[i] <= min + 1e-12 * scale)
        .unwrap();
    // golden-section refinement inside the neighbouring grid cells
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (eval(c), eval(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d);
        }
    }
    let ln_range = if eval(0.5 * (a + b)) <= eval(grid[best]) {
        0.5 * (a + b)
    } else {
        grid[best]
    };
    let range = ln_range.exp();
    let (nugget, psill, _) = fit_fixed_range(&table.bins, range);
    Ok(VariogramModel {
        nugget,
        sill: nugget + psill,
        range,
        degenerate: false,
    })
}

/// Gaussian elimination with partial pivoting. `a` is row-major `n x n`.
/// Returns `None` when a pivot vanishes relative to the matrix scale.
pub(crate) fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingEstimate {
    pub value: f64,
    pub variance: f64,
    /// Kriging weights over `neighbors` (empty after an IDW fallback).
    pub weights: Vec<f64>,
    pub neighbors: Vec<usize>,
    /// True when the system was singular and IDW was used instead.
    pub fallback: bool,
}

/// Observation support with a spatial index, reused across many queries.
#[derive(Debug, Clone)]
pub struct KrigingSupport {
    index: SpatialIndex,
    values: Vec<f64>,
}

impl KrigingSupport {
    pub fn new(points: Vec<Point2>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::invalid("points and values differ in length"));
        }
        Ok(KrigingSupport {
            index: SpatialIndex::new(points)?,
            values,
        })
    }

    pub fn from_observations(obs: &ObservationSet) -> Result<Self> {
        Self::new(obs.locations(), obs.values())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, id: usize) -> Point2 {
        self.index.point(id)
    }

    pub fn value(&self, id: usize) -> f64 {
        self.values[id]
    }

    pub fn neighbors(&self, query: &Point2, k: usize) -> Vec<usize> {
        self.index.knn(query, k, None)
    }

    pub fn ordinary(&self, model: &VariogramModel, query: &Point2, k: usize) -> Result<KrigingEstimate> {
        if k == 0 {
            return Err(Error::invalid("kriging neighbourhood k must be >= 1"));
        }
        let nb = self.neighbors(query, k);
        let n = nb.len();
        let m = n + 1;
        let mut a = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..n {
            let pi = self.point(nb[i]);
            for j in 0..n {
                a[i * m + j] = if i == j {
                    KRIGING_JITTER
                } else {
                    model.gamma(pi.dist(&self.point(nb[j])))
                };
            }
            a[i * m + n] = 1.0;
            a[n * m + i] = 1.0;
            rhs[i] = model.gamma(pi.dist(query));
        }
        rhs[n] = 1.0;
        match solve_dense(a, rhs.clone(), m) {
            Some(sol) => {
                let weights = sol[..n].to_vec();
                let value = weights.iter().zip(&nb).map(|(w, &id)| w * self.values[id]).sum();
                let variance = weights.iter().zip(&rhs).map(|(w, g)| w * g).sum::<f64>() + sol[n];
                Ok(KrigingEstimate {
                    value,
                    variance: variance.max(0.0),
                    weights,
                    neighbors: nb,
                    fallback: false,
                })
            }
            None => Ok(self.idw_fallback(query, k)),
        }
    }

    pub fn universal(&self, model: &VariogramModel, query: &Point2, k: usize) -> Result<KrigingEstimate> {
        if k == 0 {
            return Err(Error::invalid("kriging neighbourhood k must be >= 1"));
        }
        let nb = self.neighbors(query, k);
        let n = nb.len();
        if n < 3 {
            return Ok(self.idw_fallback(query, k));
        }
        // drift {1, x, y} expressed in query-centred, rescaled coordinates
        let scale = nb
            .iter()
            .map(|&id| self.point(id).dist(query))
            .fold(0.0f64, f64::max)
            .max(1.0);
        let drift = |p: &Point2| [1.0, (p.x - query.x) / scale, (p.y - query.y) / scale];
        let m = n + 3;
        let mut a = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..n {
            let pi = self.point(nb[i]);
            for j in 0..n {
                a[i * m + j] = if i == j {
                    KRIGING_JITTER
                } else {
                    model.gamma(pi.dist(&self.point(nb[j])))
                };
            }
            for (c, f) in drift(&pi).into_iter().enumerate() {
                a[i * m + n + c] = f;
                a[(n + c) * m + i] = f;
            }
            rhs[i] = model.gamma(pi.dist(query));
        }
        rhs[n..].copy_from_slice(&drift(query));
        match solve_dense(a, rhs.clone(), m) {
            Some(sol) => {
                let weights = sol[..n].to_vec();
                let value = weights.iter().zip(&nb).map(|(w, &id)| w * self.values[id]).sum();
                let variance = sol.iter().zip(&rhs).map(|(w, g)| w * g).sum::<f64>();
                Ok(KrigingEstimate {
                    value,
                    variance: variance.max(0.0),
                    weights,
                    neighbors: nb,
                    fallback: false,
                })
            }
            None => Ok(self.idw_fallback(query, k)),
        }
    }

    pub fn idw(&self, query: &Point2, power: f64, k: usize) -> f64 {
        let nb = self.neighbors(query, k.max(1));
        let mut num = 0.0;
        let mut den = 0.0;
        for &id in &nb {
            let d = self.point(id).dist(query);
            if d == 0.0 {
                return self.values[id];
            }
            let w = d.powf(-power);
            num += w * self.values[id];
            den += w;
        }
        num / den
    }

    fn idw_fallback(&self, query: &Point2, k: usize) -> KrigingEstimate {
        KrigingEstimate {
            value: self.idw(query, 2.0, k),
            variance: f64::NAN,
            weights: Vec::new(),
            neighbors: self.neighbors(query, k),
            fallback: true,
        }
    }
}

pub fn ok_predict(
    obs: &ObservationSet,
    variogram: &VariogramModel,
    query: &Point2,
    k: usize,
) -> Result<KrigingEstimate> {
    if obs.is_empty() {
        return Err(Error::invalid("ordinary kriging needs >= 1 observation"));
    }
    KrigingSupport::from_observations(obs)?.ordinary(variogram, query, k)
}

pub fn uk_predict(
    obs: &ObservationSet,
    variogram: &VariogramModel,
    query: &Point2,
    k: usize,
) -> Result<KrigingEstimate> {
    if obs.is_empty() {
        return Err(Error::invalid("universal kriging needs >= 1 observation"));
    }
    KrigingSupport::from_observations(obs)?.universal(variogram, query, k)
}

pub fn idw_predict(obs: &ObservationSet, query: &Point2, power: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("idw neighbourhood k must be >= 1"));
    }
    Ok(KrigingSupport::from_observations(obs)?.idw(query, power, k))
}

/// Gradient magnitude (dB/m) and 3x3 stencil standard deviation (dB) of a prior field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorVariation {
    pub grad_mag: f64,
    pub local_std: f64,
}

pub fn prior_variation<F>(prior: F, query: &Point2, step: f64) -> Result<PriorVariation>
where
    F: Fn(&Point2) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("prior variation step must be positive"));
    }
    let mut stencil = [0.0; 9];
    for (i, v) in stencil.iter_mut().enumerate() {
        let dx = (i % 3) as f64 - 1.0;
        let dy = (i / 3) as f64 - 1.0;
        *v = prior(&Point2::new(query.x + dx * step, query.y + dy * step))?;
    }
    Ok(variation_from_stencil(&stencil, step))
}

/// Stencil laid out row-major from `(-h, -h)` to `(+h, +h)`, x fastest.
pub fn variation_from_stencil(stencil: &[f64; 9], step: f64) -> PriorVariation {
    let gx = (stencil[5] - stencil[3]) / (2.0 * step);
    let gy = (stencil[7] - stencil[1]) / (2.0 * step);
    let mean = stencil.iter().sum::<f64>() / 9.0;
    let var = stencil.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
    PriorVariation {
        grad_mag: gx.hypot(gy),
        local_std: var.sqrt(),
    }
}

/// Settings of the kriging prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub n_lags: usize,
    /// Maximum lag as a fraction of the observation bounding-box diagonal.
    pub max_lag_frac: f64,
    pub neighborhood: usize,
    pub variation_step: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            n_lags: 15,
            max_lag_frac: 0.5,
            neighborhood: 32,
            variation_step: 2.0,
        }
    }
}

/// Empirical variogram plus fit for one site's observations.
pub fn fit_site_variogram(obs: &ObservationSet, cfg: &PriorConfig) -> Result<VariogramModel> {
    let pts = obs.locations();
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    let max_lag = (cfg.max_lag_frac * lo.dist(&hi)).max(1.0);
    let table = empirical_variogram(obs, cfg.n_lags, max_lag)?;
    fit_variogram(&table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorRow {
    pub site: SiteId,
    pub target_id: usize,
    pub x: f64,
    pub y: f64,
    pub prior_dbm: f64,
    pub krig_var: f64,
    pub grad_mag: f64,
    pub local_std: f64,
    #[serde(default)]
    pub fallback: bool,
}

/// One row per (target, site) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorTable {
    pub rows: Vec<PriorRow>,
}

pub struct SitePrior {
    pub support: KrigingSupport,
    pub model: VariogramModel,
    pub cfg: PriorConfig,
}

impl SitePrior {
    pub fn new(obs: &ObservationSet, cfg: PriorConfig) -> Result<Self> {
        let model = fit_site_variogram(obs, &cfg)?;
        Ok(SitePrior {
            support: KrigingSupport::from_observations(obs)?,
            model,
            cfg,
        })
    }

    pub fn with_model(obs: &ObservationSet, model: VariogramModel, cfg: PriorConfig) -> Result<Self> {
        Ok(SitePrior {
            support: KrigingSupport::from_observations(obs)?,
            model,
            cfg,
        })
    }

    pub fn predict(&self, query: &Point2) -> Result<KrigingEstimate> {
        self.support.ordinary(&self.model, query, self.cfg.neighborhood)
    }

    pub fn row(&self, site: SiteId, target_id: usize, at: &Point2) -> Result<PriorRow> {
        let est = self.predict(at)?;
        let var = prior_variation(|p| Ok(self.predict(p)?.value), at, self.cfg.variation_step)?;
        Ok(PriorRow {
            site,
            target_id,
            x: at.x,
            y: at.y,
            prior_dbm: est.value,
            krig_var: if est.fallback { 0.0 } else { est.variance },
            grad_mag: var.grad_mag,
            local_std: var.local_std,
            fallback: est.fallback,
        })
    }
}

pub fn build_prior_table(
    queries: &QuerySet,
    obs: &ObservationSet,
    variogram: &VariogramModel,
    cfg: &PriorConfig,
) -> Result<PriorTable> {
    let prior = SitePrior::with_model(obs, *variogram, *cfg)?;
    let rows = queries
        .records
        .iter()
        .enumerate()
        .map(|(id, q)| prior.row(queries.site, id, &q.location))
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorTable { rows })
}

/// Prior rows for every query pair of every site, each site with its own fitted variogram.
pub fn prior_table_for_dataset(dataset: &Dataset, cfg: &PriorConfig) -> Result<PriorTable> {
    let mut tables = Vec::new();
    for (site, queries) in &dataset.queries {
        let obs = dataset
            .observations
            .get(site)
            .ok_or_else(|| Error::NotFound(format!("observations for site {site}")))?;
        let model = fit_site_variogram(obs, cfg)?;
        tables.push(build_prior_table(queries, obs, &model, cfg)?);
    }
    Ok(PriorTable::merge(tables))
}

impl PriorTable {
    pub fn get(&self, site: SiteId, target_id: usize) -> Option<&PriorRow> {
        // rows are sorted by (site, target_id) once built through `merge`
        self.rows
            .binary_search_by(|r| (r.site, r.target_id).cmp(&(site, target_id)))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn merge(tables: impl IntoIterator<Item = PriorTable>) -> PriorTable {
        let mut rows: Vec<PriorRow> = tables.into_iter().flat_map(|t| t.rows).collect();
        rows.sort_by_key(|r| (r.site, r.target_id));
        PriorTable { rows }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("site,target_id,x,y,prior_dbm,krig_var,grad_mag,local_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.site, r.target_id, r.x, r.y, r.prior_dbm, r.krig_var, r.grad_mag, r.local_std
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<PriorTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| perr(e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != 8 {
                return Err(perr(line, format!("expected 8 fields, found {}", rec.len())));
            }
            let f = |i: usize| -> Result<f64> {
                rec[i].trim().parse().map_err(|_| perr(line, format!("bad number {:?}", &rec[i])))
            };
            rows.push(PriorRow {
                site: rec[0].trim().parse().map_err(|_| perr(line, "bad site".into()))?,
                target_id: rec[1].trim().parse().map_err(|_| perr(line, "bad target id".into()))?,
                x: f(2)?,
                y: f(3)?,
                prior_dbm: f(4)?,
                krig_var: f(5)?,
                grad_mag: f(6)?,
                local_std: f(7)?,
                fallback: false,
            });
        }
        Ok(PriorTable::merge([PriorTable { rows }]))
    }
}
