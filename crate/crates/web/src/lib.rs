//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Map arrays are row-major with the northernmost row first, NaN where a
//! bin holds no measurement.

use raymap_core::datahub::{sample_observations, Dataset, ObservationSet, PipelineConfig, Scenario, ScenarioConfig};
use raymap_core::kriging_prior::{PriorConfig, SitePrior};
use raymap_core::{Point2, Result};
use wasm_bindgen::prelude::*;

/// Synthetic field plus the kriging prior of one observation budget.
pub struct Session {
    dataset: Dataset,
    cols: usize,
    rows: usize,
    obs: Vec<ObservationSet>,
    priors: Vec<SitePrior>,
}

impl Session {
    pub fn build(scenario_seed: u64, obs_fraction: f64) -> Result<Session> {
        let scenario = ScenarioConfig {
            seed: scenario_seed,
            ..ScenarioConfig::reference()
        };
        let bin = scenario.bin_size_m;
        let cols = (scenario.bounding_box.width() / bin).ceil() as usize;
        let rows = (scenario.bounding_box.height() / bin).ceil() as usize;
        let pipe = PipelineConfig::default();
        let dataset = Dataset::prepare(&Scenario::new(scenario)?, &pipe)?;
        let mut obs = Vec::new();
        let mut priors = Vec::new();
        for site in dataset.sites() {
            let o = sample_observations(&dataset.grid, site, obs_fraction, pipe.seed)?;
            priors.push(SitePrior::new(&o, PriorConfig::default())?);
            obs.push(o);
        }
        Ok(Session {
            dataset,
            cols,
            rows,
            obs,
            priors,
        })
    }

    fn slot(&self, site: u32) -> Result<usize> {
        self.dataset
            .sites()
            .iter()
            .position(|s| *s == site)
            .ok_or_else(|| raymap_core::Error::NotFound(format!("site {site}")))
    }

    fn cell_center(&self, r: usize, c: usize) -> Point2 {
        let b = self.dataset.grid.bin_size;
        Point2::new((c as f64 + 0.5) * b, ((self.rows - 1 - r) as f64 + 0.5) * b)
    }

    pub fn truth_map(&self, site: u32) -> Result<Vec<f64>> {
        self.slot(site)?;
        let cells = self.dataset.grid.site(site).expect("site checked");
        let mut out = vec![f64::NAN; self.rows * self.cols];
        for (k, cell) in cells {
            let r = self.rows as i64 - 1 - k.row;
            if (0..self.rows as i64).contains(&r) && (0..self.cols as i64).contains(&k.col) {
                out[r as usize * self.cols + k.col as usize] = cell.rss_dbm;
            }
        }
        Ok(out)
    }

    pub fn prior_map(&self, site: u32) -> Result<Vec<f64>> {
        let prior = &self.priors[self.slot(site)?];
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(prior.predict(&self.cell_center(r, c))?.value);
            }
        }
        Ok(out)
    }

    /// RMSE of the prior over measured, non-observed bins.
    pub fn prior_rmse(&self, site: u32) -> Result<f64> {
        let i = self.slot(site)?;
        let observed: std::collections::BTreeSet<_> = self.obs[i].records.iter().map(|r| r.bin).collect();
        let (mut sq, mut n) = (0.0, 0usize);
        for (k, cell) in self.dataset.grid.site(site).expect("site checked") {
            if observed.contains(k) {
                continue;
            }
            let e = self.priors[i].predict(&cell.center)?.value - cell.rss_dbm;
            sq += e * e;
            n += 1;
        }
        Ok((sq / n.max(1) as f64).sqrt())
    }

    /// `[value, variance, then x, y, weight per neighbour]`.
    pub fn query(&self, site: u32, x: f64, y: f64) -> Result<Vec<f64>> {
        let prior = &self.priors[self.slot(site)?];
        let est = prior.predict(&Point2::new(x, y))?;
        let mut out = vec![est.value, est.variance];
        for (id, w) in est.neighbors.iter().zip(&est.weights) {
            let p = prior.support.point(*id);
            out.extend([p.x, p.y, *w]);
        }
        Ok(out)
    }

    pub fn observation_points(&self, site: u32) -> Result<Vec<f64>> {
        Ok(self.obs[self.slot(site)?]
            .locations()
            .iter()
            .flat_map(|p| [p.x, p.y])
            .collect())
    }
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(scenario_seed: u32, obs_fraction: f64) -> std::result::Result<Demo, JsError> {
        js(Session::build(u64::from(scenario_seed), obs_fraction)).map(Demo)
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn bin_size(&self) -> f64 {
        self.0.dataset.grid.bin_size
    }

    pub fn sites(&self) -> Vec<u32> {
        self.0.dataset.sites()
    }

    pub fn truth_map(&self, site: u32) -> std::result::Result<Vec<f64>, JsError> {
        js(self.0.truth_map(site))
    }

    pub fn prior_map(&self, site: u32) -> std::result::Result<Vec<f64>, JsError> {
        js(self.0.prior_map(site))
    }

    pub fn prior_rmse(&self, site: u32) -> std::result::Result<f64, JsError> {
        js(self.0.prior_rmse(site))
    }

    pub fn query(&self, site: u32, x: f64, y: f64) -> std::result::Result<Vec<f64>, JsError> {
        js(self.0.query(site, x, y))
    }

    pub fn observation_points(&self, site: u32) -> std::result::Result<Vec<f64>, JsError> {
        js(self.0.observation_points(site))
    }
}
