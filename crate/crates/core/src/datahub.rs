//! Scenario data model: synthetic ground-truth fields, 2 m binning, site
//! partitioning, observation / query budgets and the dataset CSV format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_index::Point2;

pub type SiteId = u32;

/// Per-link line-of-sight flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Los {
    L,
    N,
}

impl Los {
    pub fn as_str(self) -> &'static str {
        match self {
            Los::L => "L",
            Los::N => "N",
        }
    }

    pub fn parse(s: &str) -> Option<Los> {
        match s {
            "L" => Some(Los::L),
            "N" => Some(Los::N),
            _ => None,
        }
    }
}

impl fmt::Display for Los {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned rectangle `[min_x, min_y, max_x, max_y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect(pub [f64; 4]);

impl Rect {
    pub fn min(&self) -> Point2 {
        Point2::new(self.0[0], self.0[1])
    }

    pub fn max(&self) -> Point2 {
        Point2::new(self.0[2], self.0[3])
    }

    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.0[0] && p.x <= self.0[2] && p.y >= self.0[1] && p.y <= self.0[3]
    }

    /// Liang-Barsky clip: does the closed segment `a -> b` touch the rectangle?
    pub fn intersects_segment(&self, a: &Point2, b: &Point2) -> bool {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        let checks = [
            (-dx, a.x - self.0[0]),
            (dx, self.0[2] - a.x),
            (-dy, a.y - self.0[1]),
            (dy, self.0[3] - a.y),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitterConfig {
    pub site: SiteId,
    pub x: f64,
    pub y: f64,
    pub tx_power_dbm: f64,
}

impl TransmitterConfig {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

fn default_bin_size() -> f64 {
    2.0
}
fn default_pathloss() -> f64 {
    3.0
}
fn default_wall_loss() -> f64 {
    20.0
}
fn default_shadow_std() -> f64 {
    6.0
}
fn default_shadow_corr() -> f64 {
    20.0
}
fn default_ues_per_bin() -> usize {
    2
}

/// JSON scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub bounding_box: Rect,
    #[serde(default = "default_bin_size")]
    pub bin_size_m: f64,
    pub transmitters: Vec<TransmitterConfig>,
    #[serde(default)]
    pub blockers: Vec<Rect>,
    #[serde(default = "default_shadow_std")]
    pub shadow_std_db: f64,
    #[serde(default = "default_shadow_corr")]
    pub shadow_corr_m: f64,
    #[serde(default = "default_pathloss")]
    pub pathloss_exp: f64,
    #[serde(default = "default_wall_loss")]
    pub wall_loss_db: f64,
    #[serde(default)]
    pub seed: u64,
    /// Simulated user equipments dropped per 2 m bin before binning.
    #[serde(default = "default_ues_per_bin")]
    pub ues_per_bin: usize,
}

impl ScenarioConfig {
    /// The seeded three-site reference scenario used by the acceptance suite.
    pub fn reference() -> Self {
        ScenarioConfig {
            bounding_box: Rect([0.0, 0.0, 120.0, 120.0]),
            bin_size_m: 2.0,
            transmitters: vec![
                TransmitterConfig { site: 1, x: 24.0, y: 30.0, tx_power_dbm: 20.0 },
                TransmitterConfig { site: 2, x: 92.0, y: 40.0, tx_power_dbm: 20.0 },
                TransmitterConfig { site: 3, x: 60.0, y: 98.0, tx_power_dbm: 20.0 },
            ],
            blockers: vec![
                Rect([40.0, 14.0, 56.0, 36.0]),
                Rect([70.0, 62.0, 90.0, 76.0]),
                Rect([14.0, 64.0, 30.0, 84.0]),
                Rect([46.0, 52.0, 58.0, 66.0]),
                Rect([96.0, 92.0, 110.0, 108.0]),
            ],
            shadow_std_db: 6.0,
            shadow_corr_m: 20.0,
            pathloss_exp: 3.0,
            wall_loss_db: 20.0,
            seed: 20240611,
            ues_per_bin: 2,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bb = &self.bounding_box;
        if !(bb.width() > 0.0 && bb.height() > 0.0) {
            return Err(Error::invalid("bounding box must have positive extent"));
        }
        if !(self.bin_size_m > 0.0) {
            return Err(Error::invalid("bin size must be positive"));
        }
        if !(self.shadow_std_db >= 0.0) {
            return Err(Error::invalid("shadowing std dev must be >= 0"));
        }
        if !(self.shadow_corr_m > 0.0) {
            return Err(Error::invalid("shadowing correlation length must be positive"));
        }
        let mut seen = BTreeSet::new();
        for tx in &self.transmitters {
            if !seen.insert(tx.site) {
                return Err(Error::invalid(format!("duplicate site id {}", tx.site)));
            }
        }
        if self.transmitters.is_empty() {
            return Err(Error::invalid("scenario has no transmitters"));
        }
        Ok(())
    }

    pub fn transmitter(&self, site: SiteId) -> Option<&TransmitterConfig> {
        self.transmitters.iter().find(|t| t.site == site)
    }

    /// Coordinate normalization scale: half the bounding-box diagonal.
    pub fn r0(&self) -> f64 {
        0.5 * self.bounding_box.width().hypot(self.bounding_box.height())
    }
}

/// Shadowing lattice for one site: Gaussian draws at spacing `corr`,
/// bilinearly interpolated.
#[derive(Debug, Clone)]
struct ShadowLattice {
    origin: Point2,
    spacing: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl ShadowLattice {
    fn new(cfg: &ScenarioConfig, site: SiteId) -> Self {
        let bb = &cfg.bounding_box;
        let spacing = cfg.shadow_corr_m;
        let nx = (bb.width() / spacing).ceil() as usize + 2;
        let ny = (bb.height() / spacing).ceil() as usize + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (u64::from(site).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let values = (0..nx * ny)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * cfg.shadow_std_db
            })
            .collect();
        ShadowLattice {
            origin: bb.min(),
            spacing,
            nx,
            ny,
            values,
        }
    }

    fn at(&self, p: &Point2) -> f64 {
        let fx = ((p.x - self.origin.x) / self.spacing).max(0.0);
        let fy = ((p.y - self.origin.y) / self.spacing).max(0.0);
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let v = |i: usize, j: usize| self.values[j * self.nx + i];
        (1.0 - tx) * (1.0 - ty) * v(ix, iy)
            + tx * (1.0 - ty) * v(ix + 1, iy)
            + (1.0 - tx) * ty * v(ix, iy + 1)
            + tx * ty * v(ix + 1, iy + 1)
    }
}

/// A validated scenario with its shadowing lattices precomputed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    shadows: BTreeMap<SiteId, ShadowLattice>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let shadows = config
            .transmitters
            .iter()
            .map(|t| (t.site, ShadowLattice::new(&config, t.site)))
            .collect();
        Ok(Scenario { config, shadows })
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.config.transmitters.iter().map(|t| t.site).collect()
    }

    /// Number of blockers crossed by the segment from the transmitter.
    pub fn blocker_crossings(&self, tx: &Point2, location: &Point2) -> usize {
        self.config
            .blockers
            .iter()
            .filter(|b| b.intersects_segment(tx, location))
            .count()
    }

    /// Ground-truth RSS (dBm) and LoS flag of `site` at `location`.
    pub fn sample_field(&self, site: SiteId, location: &Point2) -> Result<(f64, Los)> {
        let tx = self
            .config
            .transmitter(site)
            .ok_or_else(|| Error::NotFound(format!("site {site}")))?;
        if !location.is_finite() || !self.config.bounding_box.contains(location) {
            return Err(Error::invalid(format!(
                "location ({}, {}) outside the bounding box",
                location.x, location.y
            )));
        }
        let p_tx = tx.position();
        let d = p_tx.dist(location).max(1.0);
        let walls = self.blocker_crossings(&p_tx, location);
        let shadow = if self.config.shadow_std_db > 0.0 {
            self.shadows[&site].at(location)
        } else {
            0.0
        };
        let rss = tx.tx_power_dbm - 10.0 * self.config.pathloss_exp * d.log10()
            - self.config.wall_loss_db * walls as f64
            + shadow;
        Ok((rss, if walls == 0 { Los::L } else { Los::N }))
    }

    /// Drops `ues_per_bin` seeded UEs into every bin of the bounding box,
    /// skipping UEs that land inside a blocker.
    pub fn sample_raw(&self) -> Result<Vec<RawSample>> {
        let cfg = &self.config;
        let bb = &cfg.bounding_box;
        let b = cfg.bin_size_m;
        let cols = (bb.width() / b).floor() as i64;
        let rows = (bb.height() / b).floor() as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
        let mut out = Vec::new();
        for row in 0..rows {
            for col in 0..cols {
                for _ in 0..cfg.ues_per_bin {
                    let x = bb.0[0] + (col as f64 + rng.random::<f64>()) * b;
                    let y = bb.0[1] + (row as f64 + rng.random::<f64>()) * b;
                    let p = Point2::new(x, y);
                    if cfg.blockers.iter().any(|r| r.contains(&p)) {
                        continue;
                    }
                    for tx in &cfg.transmitters {
                        let (rss, los) = self.sample_field(tx.site, &p)?;
                        out.push(RawSample {
                            site: tx.site,
                            location: p,
                            rss_dbm: rss,
                            los,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub site: SiteId,
    pub location: Point2,
    pub rss_dbm: f64,
    pub los: Los,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinKey {
    pub row: i64,
    pub col: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub rss_dbm: f64,
    pub center: Point2,
    pub los: Los,
}

/// Binned ground truth: one record per `(site, row, col)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub bin_size: f64,
    pub cells: BTreeMap<SiteId, BTreeMap<BinKey, GridCell>>,
}

impl GridTable {
    pub fn site(&self, site: SiteId) -> Option<&BTreeMap<BinKey, GridCell>> {
        self.cells.get(&site)
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.cells.keys().copied().collect()
    }

    pub fn bin_center(&self, key: BinKey) -> Point2 {
        Point2::new(
            (key.col as f64 + 0.5) * self.bin_size,
            (key.row as f64 + 0.5) * self.bin_size,
        )
    }
}

pub fn db_to_linear(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn linear_to_db(power: f64) -> f64 {
    10.0 * power.log10()
}

/// Averages linear-scale powers per `bin_size` bin (bins anchored at the
/// coordinate origin). LoS flag by majority vote with ties going to `N`.
pub fn bin_measurements(raw: &[RawSample], bin_size: f64) -> Result<GridTable> {
    if !(bin_size > 0.0) {
        return Err(Error::invalid("bin size must be positive"));
    }
    let mut acc: BTreeMap<(SiteId, BinKey), Vec<(f64, Los)>> = BTreeMap::new();
    for s in raw {
        let key = BinKey {
            row: (s.location.y / bin_size).floor() as i64,
            col: (s.location.x / bin_size).floor() as i64,
        };
        acc.entry((s.site, key)).or_default().push((s.rss_dbm, s.los));
    }
    let mut table = GridTable {
        bin_size,
        cells: BTreeMap::new(),
    };
    for ((site, key), mut samples) in acc {
        // fixed summation order keeps the result independent of input order
        samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mean = samples.iter().map(|(v, _)| db_to_linear(*v)).sum::<f64>() / samples.len() as f64;
        let n_los = samples.iter().filter(|(_, l)| *l == Los::L).count();
        let los = if 2 * n_los > samples.len() { Los::L } else { Los::N };
        let cell = GridCell {
            rss_dbm: linear_to_db(mean),
            center: Point2::new(
                (key.col as f64 + 0.5) * bin_size,
                (key.row as f64 + 0.5) * bin_size,
            ),
            los,
        };
        table.cells.entry(site).or_default().insert(key, cell);
    }
    Ok(table)
}

/// Odd site ids are seen (supervised), even ids are held out.
pub fn split_sites(sites: &[SiteId]) -> (Vec<SiteId>, Vec<SiteId>) {
    let mut seen: Vec<SiteId> = sites.iter().copied().filter(|s| s % 2 == 1).collect();
    let mut held: Vec<SiteId> = sites.iter().copied().filter(|s| s % 2 == 0).collect();
    seen.sort_unstable();
    seen.dedup();
    held.sort_unstable();
    held.dedup();
    if seen.is_empty() {
        log::warn!("no odd-numbered site: the seen set is empty and no supervision exists");
    }
    (seen, held)
}

/// `round(fraction * n)` with halves rounded up.
pub fn budget_count(fraction: f64, n: usize) -> usize {
    // the 1e-9 slack absorbs binary representation error in e.g. 0.15 * 950
    (fraction * n as f64 + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationRecord {
    pub bin: BinKey,
    pub location: Point2,
    pub rss_dbm: f64,
    pub los: Los,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub site: SiteId,
    pub records: Vec<ObservationRecord>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn locations(&self) -> Vec<Point2> {
        self.records.iter().map(|r| r.location).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rss_dbm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryRole {
    Train,
    Eval,
}

impl QueryRole {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryRole::Train => "train",
            QueryRole::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRecord {
    pub bin: BinKey,
    pub location: Point2,
    pub label_dbm: f64,
    pub los: Los,
    pub role: QueryRole,
}

/// Target locations of one site. A record's target id is its position.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub site: SiteId,
    pub records: Vec<QueryRecord>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids_with_role(&self, role: QueryRole) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.role == role)
            .map(|(i, _)| i)
            .collect()
    }
}

fn stratum_of(p: &Point2, lo: &Point2, hi: &Point2, g: usize) -> (usize, usize) {
    let cell = |v: f64, a: f64, b: f64| {
        if b <= a {
            0
        } else {
            (((v - a) / (b - a) * g as f64).floor() as usize).min(g - 1)
        }
    };
    (cell(p.x, lo.x, hi.x), cell(p.y, lo.y, hi.y))
}

/// Grid-stratified seeded subsample of exactly `count` keys.
pub(crate) fn stratified_pick(
    keys: &[BinKey],
    centers: &[Point2],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = keys.len();
    if count >= n {
        return (0..n).collect();
    }
    let g = (count as f64).sqrt().ceil().max(1.0) as usize;
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in centers {
        lo.x = lo.x.min(c.x);
        lo.y = lo.y.min(c.y);
        hi.x = hi.x.max(c.x);
        hi.y = hi.y.max(c.y);
    }
    // nudge the upper edge so the last row/column of bins is not clamped
    let pad_x = if hi.x > lo.x { 1e-9 * (hi.x - lo.x) } else { 0.0 };
    let pad_y = if hi.y > lo.y { 1e-9 * (hi.y - lo.y) } else { 0.0 };
    hi.x += pad_x;
    hi.y += pad_y;
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, c) in centers.iter().enumerate() {
        strata.entry(stratum_of(c, &lo, &hi, g)).or_default().push(i);
    }
    let mut picked: Vec<usize> = strata
        .values()
        .map(|members| members[rng.random_range(0..members.len())])
        .collect();
    if picked.len() > count {
        picked.shuffle(rng);
        picked.truncate(count);
    } else if picked.len() < count {
        let chosen: BTreeSet<usize> = picked.iter().copied().collect();
        let mut rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(rng);
        picked.extend(rest.into_iter().take(count - picked.len()));
    }
    picked.sort_unstable_by_key(|&i| keys[i]);
    picked
}

/// Spatially uniform (grid-stratified) observation sample for one site.
pub fn sample_observations(
    grid: &GridTable,
    site: SiteId,
    fraction: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("observation fraction {fraction} not in (0, 1)")));
    }
    let cells = grid
        .site(site)
        .ok_or_else(|| Error::NotFound(format!("site {site} has no grid cells")))?;
    let count = budget_count(fraction, cells.len());
    if count == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} bins yields no observations",
            cells.len()
        )));
    }
    let keys: Vec<BinKey> = cells.keys().copied().collect();
    let centers: Vec<Point2> = cells.values().map(|c| c.center).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(site).wrapping_mul(0xA24B_AED4_963E_E407));
    let picked = stratified_pick(&keys, &centers, count, &mut rng);
    let records = picked
        .into_iter()
        .map(|i| {
            let c = &cells[&keys[i]];
            ObservationRecord {
                bin: keys[i],
                location: c.center,
                rss_dbm: c.rss_dbm,
                los: c.los,
            }
        })
        .collect();
    Ok(ObservationSet { site, records })
}

/// Assigns `round(fraction * remaining)` train roles by a seeded uniform draw;
/// every other non-observed bin becomes an eval query.
pub fn allocate_queries(
    grid: &GridTable,
    obs: &ObservationSet,
    fraction: f64,
    seed: u64,
) -> Result<QuerySet> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("query fraction {fraction} not in [0, 1)")));
    }
    let cells = grid
        .site(obs.site)
        .ok_or_else(|| Error::NotFound(format!("site {} has no grid cells", obs.site)))?;
    let taken: BTreeSet<BinKey> = obs.records.iter().map(|r| r.bin).collect();
    let remaining: Vec<(&BinKey, &GridCell)> =
        cells.iter().filter(|(k, _)| !taken.contains(k)).collect();
    if remaining.is_empty() {
        return Err(Error::invalid(format!("site {} has no bins left for queries", obs.site)));
    }
    let n_train = budget_count(fraction, remaining.len());
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ u64::from(obs.site).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    order.shuffle(&mut rng);
    let train: BTreeSet<usize> = order.into_iter().take(n_train).collect();
    let records = remaining
        .into_iter()
        .enumerate()
        .map(|(i, (k, c))| QueryRecord {
            bin: *k,
            location: c.center,
            label_dbm: c.rss_dbm,
            los: c.los,
            role: if train.contains(&i) { QueryRole::Train } else { QueryRole::Eval },
        })
        .collect();
    Ok(QuerySet {
        site: obs.site,
        records,
    })
}

/// Power superposition of per-transmitter RSS values.
pub fn aggregate_fields(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("aggregate_fields needs at least one value"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("aggregate_fields needs finite values"));
    }
    // factor out the strongest term: the remaining sum is >= 1, so the result never drops below it
    let rel: f64 = values.iter().map(|v| db_to_linear(v - max)).sum();
    Ok(max + linear_to_db(rel))
}

/// Rounds to the 6-decimal representation used by every CSV export.
pub fn quantize6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

/// Full per-scenario dataset: binned grid plus per-site roles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub grid: GridTable,
    pub observations: BTreeMap<SiteId, ObservationSet>,
    pub queries: BTreeMap<SiteId, QuerySet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub site: SiteId,
    pub bins: usize,
    pub obs: usize,
    pub train: usize,
    pub eval: usize,
}

/// Budget fractions and seed of the data preparation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub obs_fraction: f64,
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            obs_fraction: 0.05,
            query_fraction: 0.15,
            seed: 7,
        }
    }
}

impl Dataset {
    /// Sample, bin, split and budget a scenario. Held-out sites receive no
    /// train queries: all of their non-observed bins are eval targets.
    pub fn prepare(scenario: &Scenario, pipe: &PipelineConfig) -> Result<Dataset> {
        let raw = scenario.sample_raw()?;
        let mut grid = bin_measurements(&raw, scenario.config.bin_size_m)?;
        for cells in grid.cells.values_mut() {
            for c in cells.values_mut() {
                c.rss_dbm = quantize6(c.rss_dbm);
                c.center = Point2::new(quantize6(c.center.x), quantize6(c.center.y));
            }
        }
        let (seen, _held) = split_sites(&grid.sites());
        let mut ds = Dataset {
            grid,
            ..Default::default()
        };
        for site in ds.grid.sites() {
            let obs = sample_observations(&ds.grid, site, pipe.obs_fraction, pipe.seed)?;
            let frac = if seen.contains(&site) { pipe.query_fraction } else { 0.0 };
            let q = allocate_queries(&ds.grid, &obs, frac, pipe.seed)?;
            ds.observations.insert(site, obs);
            ds.queries.insert(site, q);
        }
        Ok(ds)
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.grid.sites()
    }

    pub fn counts(&self) -> Vec<SiteCounts> {
        self.sites()
            .into_iter()
            .map(|site| {
                let q = self.queries.get(&site);
                let role_count = |role| {
                    q.map(|q| q.records.iter().filter(|r| r.role == role).count())
                        .unwrap_or(0)
                };
                SiteCounts {
                    site,
                    bins: self.grid.site(site).map(|c| c.len()).unwrap_or(0),
                    obs: self.observations.get(&site).map(|o| o.len()).unwrap_or(0),
                    train: role_count(QueryRole::Train),
                    eval: role_count(QueryRole::Eval),
                }
            })
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("site,role,x,y,rss_dbm,los,bin_row,bin_col\n");
        for (site, cells) in &self.grid.cells {
            let obs: BTreeSet<BinKey> = self
                .observations
                .get(site)
                .map(|o| o.records.iter().map(|r| r.bin).collect())
                .unwrap_or_default();
            let roles: BTreeMap<BinKey, QueryRole> = self
                .queries
                .get(site)
                .map(|q| q.records.iter().map(|r| (r.bin, r.role)).collect())
                .unwrap_or_default();
            for (key, cell) in cells {
                let role = if obs.contains(key) {
                    "obs"
                } else if let Some(r) = roles.get(key) {
                    r.as_str()
                } else {
                    "grid"
                };
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{},{},{}\n",
                    site, role, cell.center.x, cell.center.y, cell.rss_dbm, cell.los, key.row, key.col
                ));
            }
        }
        out
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
        let expected = ["site", "role", "x", "y", "rss_dbm", "los", "bin_row", "bin_col"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(perr(1, format!("unexpected header, want {}", expected.join(","))));
        }
        let mut grid = GridTable {
            bin_size: 0.0,
            cells: BTreeMap::new(),
        };
        let mut obs: BTreeMap<SiteId, Vec<ObservationRecord>> = BTreeMap::new();
        let mut queries: BTreeMap<SiteId, Vec<QueryRecord>> = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                perr(line, e.to_string())
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != expected.len() {
                return Err(perr(line, format!("expected {} fields, found {}", expected.len(), rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                let v: f64 = rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| perr(line, format!("bad number in column {}: {:?}", expected[i], &rec[i])))?;
                if !v.is_finite() {
                    return Err(perr(line, format!("non-finite {}", expected[i])));
                }
                Ok(v)
            };
            let int = |i: usize| -> Result<i64> {
                rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| perr(line, format!("bad integer in column {}: {:?}", expected[i], &rec[i])))
            };
            let site: SiteId = rec[0]
                .trim()
                .parse()
                .map_err(|_| perr(line, format!("bad site id {:?}", &rec[0])))?;
            let (x, y, rss) = (num(2)?, num(3)?, num(4)?);
            let los = Los::parse(rec[5].trim()).ok_or_else(|| perr(line, format!("bad los flag {:?}", &rec[5])))?;
            let key = BinKey {
                row: int(6)?,
                col: int(7)?,
            };
            let location = Point2::new(x, y);
            if grid.bin_size == 0.0 {
                grid.bin_size = quantize6(x / (key.col as f64 + 0.5));
            }
            let cell = GridCell {
                rss_dbm: rss,
                center: location,
                los,
            };
            if grid.cells.entry(site).or_default().insert(key, cell).is_some() {
                return Err(perr(line, format!("duplicate bin ({}, {}) for site {site}", key.row, key.col)));
            }
            match rec[1].trim() {
                "obs" => obs.entry(site).or_default().push(ObservationRecord {
                    bin: key,
                    location,
                    rss_dbm: rss,
                    los,
                }),
                r @ ("train" | "eval") => queries.entry(site).or_default().push(QueryRecord {
                    bin: key,
                    location,
                    label_dbm: rss,
                    los,
                    role: if r == "train" { QueryRole::Train } else { QueryRole::Eval },
                }),
                "grid" => {}
                other => return Err(perr(line, format!("unknown role {other:?}"))),
            }
        }
        let mut ds = Dataset {
            grid,
            ..Default::default()
        };
        for (site, mut records) in obs {
            records.sort_by_key(|r| r.bin);
            ds.observations.insert(site, ObservationSet { site, records });
        }
        for (site, mut records) in queries {
            records.sort_by_key(|r| r.bin);
            ds.queries.insert(site, QuerySet { site, records });
        }
        Ok(ds)
    }
}
