//! Learnable lifting of raw quantities into latent space: distance
//! codebooks, circular bearing embeddings, LoS agreement prototypes, the
//! transmitter / reference encoders and the local / global edge encoders.
//!
//! Every encoder has a batched tape form used for training and a small
//! single-item helper returning plain vectors.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::datahub::Los;
use crate::error::{Error, Result};
use crate::geo_index::{wrap_unchecked, PairGeometry, Point2};
use crate::numcore::{Array, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub latent: usize,
    pub edge_dim: usize,
    pub bins: usize,
    pub ref_branch: usize,
    pub ref_hidden: usize,
    pub edge_hidden: usize,
    pub edge_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent: 128,
            edge_dim: 16,
            bins: 256,
            ref_branch: 64,
            ref_hidden: 128,
            edge_hidden: 64,
            edge_out: 32,
        }
    }
}

/// Linear interpolation between two codebook anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interp {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

const SNAP: f64 = 1e-9;

fn interp_at(pos: f64, bins: usize, circular: bool) -> Interp {
    let mut base = pos.floor();
    let mut frac = pos - base;
    if frac < SNAP {
        frac = 0.0;
    } else if frac > 1.0 - SNAP {
        frac = 0.0;
        base += 1.0;
    }
    let mut lo = base as usize;
    if circular {
        lo %= bins;
        Interp {
            lo,
            hi: (lo + 1) % bins,
            w_lo: 1.0 - frac,
            w_hi: frac,
        }
    } else {
        if lo >= bins - 1 {
            lo = bins - 1;
            frac = 0.0;
        }
        Interp {
            lo,
            hi: (lo + 1).min(bins - 1),
            w_lo: 1.0 - frac,
            w_hi: frac,
        }
    }
}

/// Squash `d -> d / (1 + d)` and locate the bracketing pair of uniform anchors on `[0, 1]`.
pub fn distance_code(d: f64, bins: usize) -> Result<Interp> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::invalid(format!("distance must be finite and >= 0, got {d}")));
    }
    let s = d / (1.0 + d);
    Ok(interp_at(s * (bins - 1) as f64, bins, false))
}

/// Anchors sit at `-pi + 2 pi i / bins`; interpolation wraps around.
pub fn bearing_code(theta: f64, bins: usize) -> Interp {
    let t = wrap_unchecked(theta);
    interp_at((t + PI) / (2.0 * PI) * bins as f64, bins, true)
}

pub fn squash(d: f64) -> f64 {
    d / (1.0 + d)
}

fn blend(codebook: &Array, c: Interp) -> Vec<f64> {
    codebook
        .row_slice(c.lo)
        .iter()
        .zip(codebook.row_slice(c.hi))
        .map(|(a, b)| c.w_lo * a + c.w_hi * b)
        .collect()
}

pub fn encode_distance(d: f64, codebook: &Array) -> Result<Vec<f64>> {
    Ok(blend(codebook, distance_code(d, codebook.rows())?))
}

pub fn encode_bearing(theta: f64, codebook: &Array) -> Result<Vec<f64>> {
    if !theta.is_finite() {
        return Err(Error::invalid("bearing must be finite"));
    }
    Ok(blend(codebook, bearing_code(theta, codebook.rows())))
}

/// Row of the LoS prototype table for an agreement state: LL, NN, LN, NL.
pub fn los_state(s_t: Los, s_r: Los) -> usize {
    match (s_t, s_r) {
        (Los::L, Los::L) => 0,
        (Los::N, Los::N) => 1,
        (Los::L, Los::N) => 2,
        (Los::N, Los::L) => 3,
    }
}

pub fn los_embed(s_t: Los, s_r: Los, prototypes: &Array) -> Vec<f64> {
    prototypes.row_slice(los_state(s_t, s_r)).to_vec()
}

/// Triad geometry of one reference page: (t,r), (r,b), (t,b) plus LoS states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageDescriptor {
    pub target_ref: PairGeometry,
    pub ref_tx: PairGeometry,
    pub target_tx: PairGeometry,
    pub s_t: Los,
    pub s_r: Los,
}

pub const LOCAL_SLOTS: [&str; 3] = ["tr", "rb", "tb"];

/// Parameter names and initialisation for all encoders.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    let e = cfg.edge_dim;
    store.init("hgat.local.tx.w", cfg.latent, 2, 2, seed)?;
    store.init("hgat.local.ref.pos.w", cfg.ref_branch, 2, 2, seed)?;
    store.init("hgat.local.ref.pos.b", 1, cfg.ref_branch, 2, seed)?;
    store.init("hgat.local.ref.rss.w", cfg.ref_branch, 1, 1, seed)?;
    store.init("hgat.local.ref.rss.b", 1, cfg.ref_branch, 1, seed)?;
    store.init("hgat.local.ref.fuse1.w", cfg.ref_hidden, 2 * cfg.ref_branch, 2 * cfg.ref_branch, seed)?;
    store.init("hgat.local.ref.fuse1.b", 1, cfg.ref_hidden, 2 * cfg.ref_branch, seed)?;
    store.init("hgat.local.ref.fuse2.w", cfg.latent, cfg.ref_hidden, cfg.ref_hidden, seed)?;
    store.init("hgat.local.ref.fuse2.b", 1, cfg.latent, cfg.ref_hidden, seed)?;
    for slot in LOCAL_SLOTS {
        store.init(&format!("hgat.local.edge.{slot}.dist"), cfg.bins, e, 1, seed)?;
        store.init(&format!("hgat.local.edge.{slot}.bear"), cfg.bins, e, 1, seed)?;
    }
    store.init("hgat.local.edge.los", 4, e, 1, seed)?;
    let local_in = 7 * e;
    store.init("hgat.local.edge.fuse1.w", cfg.edge_hidden, local_in, local_in, seed)?;
    store.init("hgat.local.edge.fuse1.b", 1, cfg.edge_hidden, local_in, seed)?;
    store.init("hgat.local.edge.fuse2.w", cfg.edge_out, cfg.edge_hidden, cfg.edge_hidden, seed)?;
    store.init("hgat.local.edge.fuse2.b", 1, cfg.edge_out, cfg.edge_hidden, seed)?;
    store.init("hgat.global.edge.dist", cfg.bins, e, 1, seed)?;
    store.init("hgat.global.edge.bear", cfg.bins, e, 1, seed)?;
    store.init("hgat.global.edge.fuse1.w", cfg.edge_hidden, 2 * e, 2 * e, seed)?;
    store.init("hgat.global.edge.fuse1.b", 1, cfg.edge_hidden, 2 * e, seed)?;
    store.init("hgat.global.edge.fuse2.w", cfg.edge_out, cfg.edge_hidden, cfg.edge_hidden, seed)?;
    store.init("hgat.global.edge.fuse2.b", 1, cfg.edge_out, cfg.edge_hidden, seed)?;
    Ok(())
}

/// A tape bound to a parameter snapshot; parameters are registered lazily.
pub struct Net<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Net {
            tape: Tape::new(),
            params,
        }
    }

    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.tape.param_var(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.tape.param(name, value)
    }

    /// `x W^T + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let y = self.tape.matmul_t(x, w);
        let bias = format!("{prefix}.b");
        if self.params.contains(&bias) {
            let b = self.p(&bias);
            self.tape.add_row(y, b)
        } else {
            y
        }
    }

    /// Sum of the two bracketing codebook rows, weighted per item.
    pub fn codebook(&mut self, name: &str, codes: &[Interp]) -> Var {
        let cb = self.p(name);
        let lo = self.tape.gather(cb, Rc::new(codes.iter().map(|c| c.lo).collect()));
        let lo = self.tape.row_scale(lo, Rc::new(codes.iter().map(|c| c.w_lo).collect()));
        let hi = self.tape.gather(cb, Rc::new(codes.iter().map(|c| c.hi).collect()));
        let hi = self.tape.row_scale(hi, Rc::new(codes.iter().map(|c| c.w_hi).collect()));
        self.tape.add(lo, hi)
    }
}

/// Linear projection of R0-normalised transmitter coordinates (no bias).
pub fn f_tx_batch(net: &mut Net<'_>, positions: &[Point2]) -> Var {
    let x = net.tape.constant(points_array(positions));
    let w = net.p("hgat.local.tx.w");
    net.tape.matmul_t(x, w)
}

/// Reference features: displacement `p_r - p_b` over R0 and standardized RSS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefFeature {
    pub offset: Point2,
    pub rss: f64,
}

pub fn f_ref_batch(net: &mut Net<'_>, feats: &[RefFeature]) -> Var {
    let pos = net
        .tape
        .constant(points_array(&feats.iter().map(|f| f.offset).collect::<Vec<_>>()));
    let rss = net
        .tape
        .constant(Array::column(feats.iter().map(|f| f.rss).collect()));
    let hp = net.linear(pos, "hgat.local.ref.pos");
    let hp = net.tape.tanh(hp);
    let hr = net.linear(rss, "hgat.local.ref.rss");
    let hr = net.tape.tanh(hr);
    let h = net.tape.concat(&[hp, hr]);
    let h = net.linear(h, "hgat.local.ref.fuse1");
    let h = net.tape.tanh(h);
    let h = net.linear(h, "hgat.local.ref.fuse2");
    net.tape.tanh(h)
}

/// Codebook indices of one local page, precomputed outside the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageCodes {
    /// `[tr.dist, tr.bear, rb.dist, rb.bear, tb.dist, tb.bear]`
    pub slots: [Interp; 6],
    pub los: usize,
}

impl PageCodes {
    /// Distances in the descriptor must already be divided by R0.
    pub fn new(desc: &PageDescriptor, bins: usize) -> Result<Self> {
        let rel = [desc.target_ref, desc.ref_tx, desc.target_tx];
        let mut slots = [Interp { lo: 0, hi: 0, w_lo: 1.0, w_hi: 0.0 }; 6];
        for (i, g) in rel.iter().enumerate() {
            slots[2 * i] = distance_code(g.distance, bins)?;
            slots[2 * i + 1] = bearing_code(g.bearing, bins);
        }
        Ok(PageCodes {
            slots,
            los: los_state(desc.s_t, desc.s_r),
        })
    }
}

pub fn f_edge_local_batch(net: &mut Net<'_>, pages: &[PageCodes]) -> Var {
    let mut parts = Vec::with_capacity(7);
    for (i, slot) in LOCAL_SLOTS.iter().enumerate() {
        let d: Vec<Interp> = pages.iter().map(|p| p.slots[2 * i]).collect();
        let b: Vec<Interp> = pages.iter().map(|p| p.slots[2 * i + 1]).collect();
        parts.push(net.codebook(&format!("hgat.local.edge.{slot}.dist"), &d));
        parts.push(net.codebook(&format!("hgat.local.edge.{slot}.bear"), &b));
    }
    let los = net.p("hgat.local.edge.los");
    parts.push(net.tape.gather(los, Rc::new(pages.iter().map(|p| p.los).collect())));
    let x = net.tape.concat(&parts);
    let h = net.linear(x, "hgat.local.edge.fuse1");
    let h = net.tape.tanh(h);
    net.linear(h, "hgat.local.edge.fuse2")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCodes {
    pub dist: Interp,
    pub bear: Interp,
}

impl EdgeCodes {
    /// `geom.distance` must already be divided by R0.
    pub fn new(geom: &PairGeometry, bins: usize) -> Result<Self> {
        Ok(EdgeCodes {
            dist: distance_code(geom.distance, bins)?,
            bear: bearing_code(geom.bearing, bins),
        })
    }
}

pub fn f_edge_global_batch(net: &mut Net<'_>, edges: &[EdgeCodes]) -> Var {
    let d: Vec<Interp> = edges.iter().map(|e| e.dist).collect();
    let b: Vec<Interp> = edges.iter().map(|e| e.bear).collect();
    let dv = net.codebook("hgat.global.edge.dist", &d);
    let bv = net.codebook("hgat.global.edge.bear", &b);
    let x = net.tape.concat(&[dv, bv]);
    let h = net.linear(x, "hgat.global.edge.fuse1");
    let h = net.tape.tanh(h);
    net.linear(h, "hgat.global.edge.fuse2")
}

pub fn points_array(points: &[Point2]) -> Array {
    Array::from_vec(
        points.len(),
        2,
        points.iter().flat_map(|p| [p.x, p.y]).collect(),
    )
}

/// Transmitter embedding of a raw position.
pub fn f_tx(position: &Point2, r0: f64, params: &ParamStore) -> Vec<f64> {
    let mut net = Net::new(params);
    let v = f_tx_batch(&mut net, &[position.scale(1.0 / r0)]);
    net.tape.value(v).data().to_vec()
}

pub fn f_ref(feature: RefFeature, params: &ParamStore) -> Vec<f64> {
    let mut net = Net::new(params);
    let v = f_ref_batch(&mut net, &[feature]);
    net.tape.value(v).data().to_vec()
}

pub fn f_edge_local(desc: &PageDescriptor, params: &ParamStore, bins: usize) -> Result<Vec<f64>> {
    let mut net = Net::new(params);
    let v = f_edge_local_batch(&mut net, &[PageCodes::new(desc, bins)?]);
    Ok(net.tape.value(v).data().to_vec())
}

pub fn f_edge_global(geom: &PairGeometry, params: &ParamStore, bins: usize) -> Result<Vec<f64>> {
    let mut net = Net::new(params);
    let v = f_edge_global_batch(&mut net, &[EdgeCodes::new(geom, bins)?]);
    Ok(net.tape.value(v).data().to_vec())
}
