//! Hierarchical encoder: pair-conditioned local attention over reference
//! pages, same-transmitter global attention, and the two readout heads.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::{stratified_pick, Los, ObservationRecord, ObservationSet, SiteId};
use crate::encoders::{
    f_edge_global_batch, f_edge_local_batch, f_ref_batch, f_tx_batch, init_encoder_params,
    EdgeCodes, EncoderConfig, Net, PageCodes, PageDescriptor, RefFeature,
};
use crate::error::{Error, Result};
use crate::geo_index::{pair_geometry, PairGeometry, Point2, SpatialIndex};
use crate::numcore::{Array, OpCount, ParamStore, Var, LEAKY_SLOPE};
use crate::regimes::Standardizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HgatConfig {
    pub d: usize,
    pub k_ref: usize,
    pub k_g: usize,
    pub heads: usize,
    pub head_hidden: usize,
}

impl Default for HgatConfig {
    fn default() -> Self {
        HgatConfig {
            d: 128,
            k_ref: 16,
            k_g: 4,
            heads: 1,
            head_hidden: 128,
        }
    }
}

impl HgatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_ref == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("hgat dimensions must be positive"));
        }
        if self.heads != 1 {
            return Err(Error::invalid("only single-head attention is supported"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hgat: HgatConfig,
}

/// Seeded initial parameters for encoders, both attention stages and both heads.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.hgat.validate()?;
    if cfg.encoder.latent != cfg.hgat.d {
        return Err(Error::invalid("encoder latent width must equal d"));
    }
    let d = cfg.hgat.d;
    let eo = cfg.encoder.edge_out;
    let hh = cfg.hgat.head_hidden;
    let mut s = ParamStore::new();
    init_encoder_params(&mut s, &cfg.encoder, seed)?;
    s.init("hgat.local.w_b", d, d, d, seed)?;
    s.init("hgat.local.w_att", d, d + eo, d + eo, seed)?;
    s.init("hgat.local.a_att", 1, d, d, seed)?;
    s.init("hgat.local.w_msg", d, d + eo, d + eo, seed)?;
    s.init("hgat.global.w_att", d, 2 * d + eo, 2 * d + eo, seed)?;
    s.init("hgat.global.a_att", 1, d, d, seed)?;
    s.init("hgat.global.w_msg", d, d + eo, d + eo, seed)?;
    for (head, extra) in [("direct", 0), ("residual", 1)] {
        let n_in = 2 * d + extra;
        s.init(&format!("head.{head}.l1.w"), hh, n_in, n_in, seed)?;
        s.init(&format!("head.{head}.l1.b"), 1, hh, n_in, seed)?;
        s.init(&format!("head.{head}.l2.w"), 1, hh, hh, seed)?;
        s.init(&format!("head.{head}.l2.b"), 1, 1, hh, seed)?;
    }
    s.insert("meta.k_ref", Array::scalar(cfg.hgat.k_ref as f64));
    s.insert("meta.k_g", Array::scalar(cfg.hgat.k_g as f64));
    Ok(s)
}

/// Recovers the configuration from parameter shapes and `meta.*` entries.
pub fn config_from_params(params: &ParamStore) -> Result<ModelConfig> {
    let get = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))
    };
    let d = get("hgat.local.w_b")?.rows();
    let codebook = get("hgat.global.edge.dist")?;
    let fuse1 = get("hgat.local.edge.fuse1.w")?;
    let ref_pos = get("hgat.local.ref.pos.w")?;
    let encoder = EncoderConfig {
        latent: d,
        edge_dim: codebook.cols(),
        bins: codebook.rows(),
        ref_branch: ref_pos.rows(),
        ref_hidden: get("hgat.local.ref.fuse1.w")?.rows(),
        edge_hidden: fuse1.rows(),
        edge_out: get("hgat.local.edge.fuse2.w")?.rows(),
    };
    let hgat = HgatConfig {
        d,
        k_ref: get("meta.k_ref")?.item() as usize,
        k_g: get("meta.k_g")?.item() as usize,
        heads: 1,
        head_hidden: get("head.direct.l1.w")?.rows(),
    };
    hgat.validate()?;
    Ok(ModelConfig { encoder, hgat })
}

/// Bounded per-transmitter reference set with its spatial index.
#[derive(Debug, Clone)]
pub struct ReferenceScaffold {
    pub site: SiteId,
    pub refs: Vec<ObservationRecord>,
    pub index: SpatialIndex,
    pub budget: usize,
}

pub fn build_scaffold(obs: &ObservationSet, budget: usize, seed: u64) -> Result<ReferenceScaffold> {
    if budget == 0 {
        return Err(Error::invalid("scaffold budget must be >= 1"));
    }
    if obs.is_empty() {
        return Err(Error::invalid(format!("site {} has no observations", obs.site)));
    }
    let keys: Vec<_> = obs.records.iter().map(|r| r.bin).collect();
    let centers = obs.locations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(obs.site) << 32));
    let picked = stratified_pick(&keys, &centers, budget.min(obs.len()), &mut rng);
    let refs: Vec<ObservationRecord> = picked.into_iter().map(|i| obs.records[i]).collect();
    let index = SpatialIndex::new(refs.iter().map(|r| r.location).collect())?;
    Ok(ReferenceScaffold {
        site: obs.site,
        refs,
        index,
        budget,
    })
}

/// Everything about one transmitter that encoding needs.
#[derive(Debug, Clone)]
pub struct SiteContext {
    pub site: SiteId,
    pub tx: Point2,
    pub r0: f64,
    pub scaffold: ReferenceScaffold,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub location: Point2,
    pub los: Los,
}

fn scaled(g: PairGeometry, r0: f64) -> PairGeometry {
    PairGeometry {
        distance: g.distance / r0,
        bearing: g.bearing,
    }
}

impl SiteContext {
    /// Indices of the references forming the pages of `target`, nearest first.
    pub fn page_refs(&self, target: &Point2, k_ref: usize) -> Vec<usize> {
        self.scaffold.index.knn(target, k_ref, None)
    }

    pub fn page_descriptor(&self, target: &Target, r: usize) -> Result<PageDescriptor> {
        let rec = &self.scaffold.refs[r];
        Ok(PageDescriptor {
            target_ref: scaled(pair_geometry(&target.location, &rec.location)?, self.r0),
            ref_tx: scaled(pair_geometry(&rec.location, &self.tx)?, self.r0),
            target_tx: scaled(pair_geometry(&target.location, &self.tx)?, self.r0),
            s_t: target.los,
            s_r: rec.los,
        })
    }

    pub fn ref_feature(&self, r: usize) -> RefFeature {
        let rec = &self.scaffold.refs[r];
        RefFeature {
            offset: rec.location.sub(&self.tx).scale(1.0 / self.r0),
            rss: self.standardizer.standardize(rec.rss_dbm),
        }
    }
}

/// Tape-free inputs of the local stage for a batch of targets.
#[derive(Debug, Clone, Default)]
pub struct LocalBatch {
    pub tx: Vec<Point2>,
    pub refs: Vec<RefFeature>,
    pub page_ref: Vec<usize>,
    pub pages: Vec<PageCodes>,
    pub offsets: Vec<usize>,
}

impl LocalBatch {
    pub fn build(items: &[(&SiteContext, Target)], k_ref: usize, bins: usize) -> Result<Self> {
        let mut b = LocalBatch {
            offsets: vec![0],
            ..Default::default()
        };
        let mut ref_slot: BTreeMap<(SiteId, usize), usize> = BTreeMap::new();
        for (ctx, target) in items {
            b.tx.push(ctx.tx.scale(1.0 / ctx.r0));
            for r in ctx.page_refs(&target.location, k_ref) {
                let slot = *ref_slot.entry((ctx.site, r)).or_insert_with(|| {
                    b.refs.push(ctx.ref_feature(r));
                    b.refs.len() - 1
                });
                b.page_ref.push(slot);
                b.pages.push(PageCodes::new(&ctx.page_descriptor(target, r)?, bins)?);
            }
            b.offsets.push(b.pages.len());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }
}

pub struct StageOut {
    pub z: Var,
    pub weights: Var,
}

/// Local attention: `z_local = tanh(W_b h_b + sum_r alpha_r W_m u_r)`.
pub fn local_stage(net: &mut Net<'_>, batch: &LocalBatch) -> StageOut {
    let h_b = f_tx_batch(net, &batch.tx);
    let h_ref = f_ref_batch(net, &batch.refs);
    let h_r = net.tape.gather(h_ref, Rc::new(batch.page_ref.clone()));
    let g = f_edge_local_batch(net, &batch.pages);
    let u = net.tape.concat(&[h_r, g]);
    let w_att = net.p("hgat.local.w_att");
    let a_att = net.p("hgat.local.a_att");
    let hidden = net.tape.matmul_t(u, w_att);
    let hidden = net.tape.leaky_relu(hidden, LEAKY_SLOPE);
    let scores = net.tape.matmul_t(hidden, a_att);
    let offsets = Rc::new(batch.offsets.clone());
    let alpha = net.tape.segment_softmax(scores, offsets.clone());
    let w_msg = net.p("hgat.local.w_msg");
    let msg = net.tape.matmul_t(u, w_msg);
    let agg = net.tape.segment_weighted_sum(alpha, msg, offsets);
    let w_b = net.p("hgat.local.w_b");
    let self_term = net.tape.matmul_t(h_b, w_b);
    let pre = net.tape.add(self_term, agg);
    StageOut {
        z: net.tape.tanh(pre),
        weights: alpha,
    }
}

/// Global edges for a batch: neighbour rows of a source embedding matrix.
#[derive(Debug, Clone, Default)]
pub struct GlobalBatch {
    pub owner: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub edges: Vec<EdgeCodes>,
    pub offsets: Vec<usize>,
}

impl GlobalBatch {
    /// `neighbors[i]` lists `(source row, relative geometry already over R0)`.
    pub fn build(neighbors: &[Vec<(usize, PairGeometry)>], bins: usize) -> Result<Self> {
        let mut g = GlobalBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for (i, list) in neighbors.iter().enumerate() {
            for (j, geom) in list {
                g.owner.push(i);
                g.neighbor.push(*j);
                g.edges.push(EdgeCodes::new(geom, bins)?);
            }
            g.offsets.push(g.owner.len());
        }
        Ok(g)
    }
}

/// Global attention over same-transmitter neighbours. Messages carry only
/// the neighbour embedding and edge; the centre enters through scores.
pub fn global_stage(net: &mut Net<'_>, center: Var, source: Var, batch: &GlobalBatch) -> StageOut {
    let zc = net.tape.gather(center, Rc::new(batch.owner.clone()));
    let zn = net.tape.gather(source, Rc::new(batch.neighbor.clone()));
    let g = f_edge_global_batch(net, &batch.edges);
    let carried = net.tape.concat(&[zn, g]);
    let u = net.tape.concat(&[zc, carried]);
    let w_att = net.p("hgat.global.w_att");
    let a_att = net.p("hgat.global.a_att");
    let hidden = net.tape.matmul_t(u, w_att);
    let hidden = net.tape.leaky_relu(hidden, LEAKY_SLOPE);
    let scores = net.tape.matmul_t(hidden, a_att);
    let offsets = Rc::new(batch.offsets.clone());
    let beta = net.tape.segment_softmax(scores, offsets.clone());
    let w_msg = net.p("hgat.global.w_msg");
    let msg = net.tape.matmul_t(carried, w_msg);
    StageOut {
        z: net.tape.segment_weighted_sum(beta, msg, offsets),
        weights: beta,
    }
}

pub fn head_direct(net: &mut Net<'_>, s: Var) -> Var {
    let h = net.linear(s, "head.direct.l1");
    let h = net.tape.tanh(h);
    net.linear(h, "head.direct.l2")
}

/// Residual head over `s` plus the standardized prior as one extra input column.
pub fn head_residual(net: &mut Net<'_>, s: Var, prior: &[f64]) -> Var {
    let p = net.tape.constant(Array::column(prior.to_vec()));
    let x = net.tape.concat(&[s, p]);
    let h = net.linear(x, "head.residual.l1");
    let h = net.tape.tanh(h);
    net.linear(h, "head.residual.l2")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z_local: Vec<f64>,
    pub z_global: Vec<f64>,
    pub s: Vec<f64>,
}

/// Local embeddings of a target set, each computed by exactly one local-stage pass.
#[derive(Debug, Clone)]
pub struct LocalCache {
    pub z: Array,
    pub evaluations: usize,
}

const CHUNK: usize = 256;

pub fn cache_local_embeddings(ctx: &SiteContext, targets: &[Target], params: &ParamStore) -> Result<LocalCache> {
    let cfg = config_from_params(params)?;
    let d = cfg.hgat.d;
    let mut z = Array::zeros(targets.len(), d);
    let mut evaluations = 0;
    for (c, chunk) in targets.chunks(CHUNK).enumerate() {
        let items: Vec<_> = chunk.iter().map(|t| (ctx, *t)).collect();
        let batch = LocalBatch::build(&items, cfg.hgat.k_ref, cfg.encoder.bins)?;
        let mut net = Net::new(params);
        let out = local_stage(&mut net, &batch);
        let zv = net.tape.value(out.z);
        for i in 0..chunk.len() {
            z.row_slice_mut(c * CHUNK + i).copy_from_slice(zv.row_slice(i));
        }
        evaluations += chunk.len();
    }
    Ok(LocalCache { z, evaluations })
}

/// The `k` nearest other members of `points` for every member, ties broken by index.
pub fn neighbor_lists(points: &[Point2], k: usize, r0: f64) -> Result<Vec<Vec<(usize, PairGeometry)>>> {
    if points.is_empty() || k == 0 {
        return Ok(vec![Vec::new(); points.len()]);
    }
    let index = SpatialIndex::new(points.to_vec())?;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn(p, k, Some(i))
                .into_iter()
                .map(|j| Ok((j, scaled(pair_geometry(p, &points[j])?, r0))))
                .collect()
        })
        .collect()
}

/// Encodes one query against precomputed neighbour embeddings and reports
/// the primitive-operation count of the pass.
pub fn encode_pair_counted(
    ctx: &SiteContext,
    target: &Target,
    neighbors: &[(Point2, &[f64])],
    params: &ParamStore,
) -> Result<(EncoderOutput, OpCount)> {
    let cfg = config_from_params(params)?;
    let batch = LocalBatch::build(&[(ctx, *target)], cfg.hgat.k_ref, cfg.encoder.bins)?;
    let mut net = Net::new(params);
    let local = local_stage(&mut net, &batch);
    let d = cfg.hgat.d;
    let mut src = Array::zeros(neighbors.len(), d);
    let mut list = Vec::with_capacity(neighbors.len());
    for (j, (p, z)) in neighbors.iter().enumerate() {
        if z.len() != d {
            return Err(Error::invalid(format!("neighbour embedding has width {}, expected {d}", z.len())));
        }
        src.row_slice_mut(j).copy_from_slice(z);
        list.push((j, scaled(pair_geometry(&target.location, p)?, ctx.r0)));
    }
    let source = net.tape.constant(src);
    let gb = GlobalBatch::build(&[list], cfg.encoder.bins)?;
    let global = global_stage(&mut net, local.z, source, &gb);
    let z_local = net.tape.value(local.z).data().to_vec();
    let z_global = net.tape.value(global.z).data().to_vec();
    let s = [z_local.as_slice(), z_global.as_slice()].concat();
    Ok((EncoderOutput { z_local, z_global, s }, net.tape.op_count()))
}

pub fn encode_pair(
    ctx: &SiteContext,
    target: &Target,
    neighbors: &[(Point2, &[f64])],
    params: &ParamStore,
) -> Result<EncoderOutput> {
    Ok(encode_pair_counted(ctx, target, neighbors, params)?.0)
}

/// Full encoder state `s` for every target of one site, global neighbours
/// drawn from the same target set.
pub fn encode_targets(ctx: &SiteContext, targets: &[Target], params: &ParamStore) -> Result<Array> {
    let cfg = config_from_params(params)?;
    let d = cfg.hgat.d;
    let cache = cache_local_embeddings(ctx, targets, params)?;
    let points: Vec<Point2> = targets.iter().map(|t| t.location).collect();
    let lists = neighbor_lists(&points, cfg.hgat.k_g, ctx.r0)?;
    let mut out = Array::zeros(targets.len(), 2 * d);
    for start in (0..targets.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(targets.len());
        let mut net = Net::new(params);
        let center = net.tape.constant(rows_of(&cache.z, start..end));
        let source = net.tape.constant(cache.z.clone());
        let gb = GlobalBatch::build(&lists[start..end], cfg.encoder.bins)?;
        let global = global_stage(&mut net, center, source, &gb);
        let zg = net.tape.value(global.z);
        for i in start..end {
            let row = out.row_slice_mut(i);
            row[..d].copy_from_slice(cache.z.row_slice(i));
            row[d..].copy_from_slice(zg.row_slice(i - start));
        }
    }
    Ok(out)
}

pub fn rows_of(a: &Array, range: std::ops::Range<usize>) -> Array {
    let cols = a.cols();
    Array::from_vec(range.len(), cols, a.data()[range.start * cols..range.end * cols].to_vec())
}

/// Scalar head outputs for precomputed encoder states.
pub fn apply_head(params: &ParamStore, s: &Array, prior: Option<&[f64]>) -> Vec<f64> {
    let mut net = Net::new(params);
    let sv = net.tape.constant(s.clone());
    let y = match prior {
        Some(p) => head_residual(&mut net, sv, p),
        None => head_direct(&mut net, sv),
    };
    net.tape.value(y).data().to_vec()
}
