//! Encoder, latent approximator and query decoder.
//!
//! One step maps the normalised state `(u^t, c^{t+1})` on all `K` nodes to
//! `u^{t+1}`:
//!
//! 1. `[u, c]` (K×6) → linear embed → + sinusoidal encoding of the node
//!    coordinates.
//! 2. Each of `n_S` supernodes averages MLP messages from its `k` nearest
//!    nodes, conditioned on the relative position.
//! 3. Pre-norm transformer blocks over the supernode tokens.
//! 4. Projection to the latent width, then cross-attention blocks from
//!    learned latent queries onto the tokens.
//! 5. Self-attention approximator blocks over the latent tokens.
//! 6. Node coordinates → encoding → MLP queries that cross-attend to the
//!    latent tokens, followed by a three-component output head.
//!
//! Collision vectors are scaled by the displacement standard deviation but
//! not shifted, so nodes out of contact stay exactly zero.

use crate::tape::{Mat, Tape, Var};
use nd_core::dataset::NormStats;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Relative positions in messages are divided by this many scaled units.
const MP_REL_SCALE: f64 = 20.0;
const PE_BASE: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{n_supernodes} supernodes requested for {n_nodes} nodes")]
    TooManySupernodes { n_supernodes: usize, n_nodes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model produced non-finite values")]
    NonFinite,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_supernodes: usize,
    pub d_embed: usize,
    pub n_latent_tokens: usize,
    pub d_latent: usize,
    pub encoder_depth: usize,
    pub perceiver_depth: usize,
    pub approximator_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mp_neighbors: usize,
    pub drop_path_prob: f64,
    /// Predict `u^{t+1} − u^t` instead of `u^{t+1}`.
    #[serde(default)]
    pub residual: bool,
    /// Seed of the weight initialisation.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn full() -> Self {
        Self {
            n_supernodes: 2048,
            d_embed: 128,
            n_latent_tokens: 256,
            d_latent: 256,
            encoder_depth: 4,
            perceiver_depth: 1,
            approximator_depth: 4,
            decoder_depth: 1,
            heads: 4,
            mlp_ratio: 2,
            mp_neighbors: 32,
            drop_path_prob: 0.15,
            residual: false,
            init_seed: 0,
        }
    }

    /// Desk-scale model used by the experiments and the server.
    pub fn desk() -> Self {
        Self {
            n_supernodes: 128,
            d_embed: 32,
            n_latent_tokens: 32,
            d_latent: 64,
            encoder_depth: 1,
            perceiver_depth: 1,
            approximator_depth: 2,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            mp_neighbors: 16,
            drop_path_prob: 0.0,
            residual: false,
            init_seed: 0,
        }
    }

    /// Smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_supernodes: 8,
            d_embed: 12,
            n_latent_tokens: 4,
            d_latent: 8,
            encoder_depth: 1,
            perceiver_depth: 1,
            approximator_depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            mp_neighbors: 4,
            drop_path_prob: 0.0,
            residual: false,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        let dims = [
            self.n_supernodes,
            self.d_embed,
            self.n_latent_tokens,
            self.d_latent,
            self.decoder_depth,
            self.perceiver_depth,
            self.heads,
            self.mlp_ratio,
            self.mp_neighbors,
        ];
        if dims.contains(&0) {
            return bad("dimensions must be positive");
        }
        if self.d_embed < 6 {
            return bad("d_embed must be at least 6");
        }
        if self.d_embed % self.heads != 0 || self.d_latent % self.heads != 0 {
            return bad("heads must divide d_embed and d_latent");
        }
        if !(0.0..1.0).contains(&self.drop_path_prob) {
            return bad("drop_path_prob must lie in [0, 1)");
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let d = self.d_embed;
        let w = self.d_latent;
        let r = self.mlp_ratio;
        let mut lin = |name: &str, i: usize, o: usize, init: Init| {
            out.push((format!("{name}.w"), Shape(i, o, init)));
            out.push((format!("{name}.b"), Shape(1, o, Init::Zeros)));
        };
        lin("embed", 6, d, Init::Fan(1.0));
        lin("mp.l1", d + 3, d, Init::Fan(1.0));
        lin("mp.l2", d, d, Init::Fan(1.0));
        drop(lin);
        for i in 0..self.encoder_depth {
            block_layout(&mut out, &format!("enc.{i}"), d, r, false);
        }
        out.push(("perc.proj.w".into(), Shape(d, w, Init::Fan(1.0))));
        out.push(("perc.proj.b".into(), Shape(1, w, Init::Zeros)));
        out.push(("perc.queries".into(), Shape(self.n_latent_tokens, w, Init::Std(1.0))));
        for i in 0..self.perceiver_depth {
            block_layout(&mut out, &format!("perc.{i}"), w, r, true);
        }
        for i in 0..self.approximator_depth {
            block_layout(&mut out, &format!("approx.{i}"), w, r, false);
        }
        out.push(("dec.query.l1.w".into(), Shape(d, w, Init::Fan(1.0))));
        out.push(("dec.query.l1.b".into(), Shape(1, w, Init::Zeros)));
        out.push(("dec.query.l2.w".into(), Shape(w, w, Init::Fan(1.0))));
        out.push(("dec.query.l2.b".into(), Shape(1, w, Init::Zeros)));
        for i in 0..self.decoder_depth {
            block_layout(&mut out, &format!("dec.{i}"), w, r, true);
        }
        out.push(("dec.ln.g".into(), Shape(1, w, Init::Ones)));
        out.push(("dec.ln.b".into(), Shape(1, w, Init::Zeros)));
        out.push(("dec.head.w".into(), Shape(w, 3, Init::Fan(0.1))));
        out.push(("dec.head.b".into(), Shape(1, 3, Init::Zeros)));
        out
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, s)| s.0 * s.1).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Normal with this multiple of `1/sqrt(fan_in)` as std.
    Fan(f64),
    Std(f64),
}

#[derive(Debug, Clone, Copy)]
struct Shape(usize, usize, Init);

fn block_layout(out: &mut Vec<(String, Shape)>, p: &str, w: usize, ratio: usize, cross: bool) {
    let mut push = |name: String, s: Shape| out.push((name, s));
    let norms: &[&str] = if cross { &["ln_q", "ln_kv", "ln2"] } else { &["ln1", "ln2"] };
    for n in norms {
        push(format!("{p}.{n}.g"), Shape(1, w, Init::Ones));
        push(format!("{p}.{n}.b"), Shape(1, w, Init::Zeros));
    }
    for (n, scale) in [("q", 1.0), ("k", 1.0), ("v", 1.0), ("o", 0.5)] {
        push(format!("{p}.attn.{n}.w"), Shape(w, w, Init::Fan(scale)));
        push(format!("{p}.attn.{n}.b"), Shape(1, w, Init::Zeros));
    }
    push(format!("{p}.mlp.l1.w"), Shape(w, ratio * w, Init::Fan(1.0)));
    push(format!("{p}.mlp.l1.b"), Shape(1, ratio * w, Init::Zeros));
    push(format!("{p}.mlp.l2.w"), Shape(ratio * w, w, Init::Fan(0.5)));
    push(format!("{p}.mlp.l2.b"), Shape(1, w, Init::Zeros));
}

/// Named weight blocks in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_blocks(names: Vec<String>, values: Vec<Mat>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, values, index }
    }

    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, Shape(r, c, init)) in config.blocks() {
            let data = match init {
                Init::Zeros => vec![0.0; r * c],
                Init::Ones => vec![1.0; r * c],
                Init::Fan(s) | Init::Std(s) => {
                    let std = match init {
                        Init::Fan(_) => s / (r as f64).sqrt(),
                        _ => s,
                    };
                    let normal = Normal::new(0.0, std).unwrap();
                    (0..r * c).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            values.push(Mat::from_vec(r, c, data));
        }
        Self::from_blocks(names, values)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sinusoidal features per axis: for each of x, y, z the block
/// `[sin(ω_f x) | cos(ω_f x)]` with `F = d/6` frequencies `ω_f = 10000^(−f/F)`.
/// Columns beyond `6F` are zero.
pub fn positional_encoding(coords: &[[f64; 3]], d_embed: usize) -> Mat {
    let n_freq = d_embed / 6;
    let mut out = Mat::zeros(coords.len(), d_embed);
    for (r, p) in coords.iter().enumerate() {
        let row = &mut out.data[r * d_embed..(r + 1) * d_embed];
        for a in 0..3 {
            for f in 0..n_freq {
                let w = PE_BASE.powf(-(f as f64) / n_freq as f64);
                row[a * 2 * n_freq + f] = (p[a] * w).sin();
                row[a * 2 * n_freq + n_freq + f] = (p[a] * w).cos();
            }
        }
    }
    out
}

/// Node coordinates in the scaled frame plus their encoding.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub coords: Vec<[f64; 3]>,
    pub pe: Mat,
    id: u64,
}

static GEOMETRY_IDS: AtomicU64 = AtomicU64::new(0);

impl Geometry {
    pub fn new(coords: Vec<[f64; 3]>, d_embed: usize) -> Self {
        let pe = positional_encoding(&coords, d_embed);
        let id = GEOMETRY_IDS.fetch_add(1, Ordering::Relaxed);
        Self { coords, pe, id }
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }
}

/// Uniform sample of `n_s` distinct node ids, sorted.
pub fn sample_supernodes<R: Rng + ?Sized>(n_nodes: usize, n_s: usize, rng: &mut R) -> Result<Vec<u32>, ModelError> {
    if n_s > n_nodes {
        return Err(ModelError::TooManySupernodes {
            n_supernodes: n_s,
            n_nodes,
        });
    }
    let mut idx: Vec<u32> = sample(rng, n_nodes, n_s).into_iter().map(|i| i as u32).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Supernodes with their neighbourhoods.
#[derive(Debug, Clone)]
pub struct Supernodes {
    pub indices: Vec<u32>,
    /// `k` neighbour ids per supernode, nearest first.
    pub neighbors: Arc<[u32]>,
    pub k: usize,
    rel: Mat,
    indices_arc: Arc<[u32]>,
}

impl Supernodes {
    /// Neighbourhoods of the `k` nearest nodes (the supernode included).
    /// Distance ties break on coordinates so the result does not depend on
    /// node numbering.
    pub fn new(geo: &Geometry, indices: Vec<u32>, k: usize) -> Result<Self, ModelError> {
        let n = geo.n_nodes();
        if indices.len() > n {
            return Err(ModelError::TooManySupernodes {
                n_supernodes: indices.len(),
                n_nodes: n,
            });
        }
        if indices.iter().any(|&i| i as usize >= n) {
            return Err(ModelError::Shape("supernode index out of range".into()));
        }
        let k = k.min(n);
        let mut neighbors = Vec::with_capacity(indices.len() * k);
        let mut rel = Vec::with_capacity(indices.len() * k * 3);
        let mut order: Vec<(f64, [f64; 3], u32)> = Vec::with_capacity(n);
        for &s in &indices {
            let ps = geo.coords[s as usize];
            order.clear();
            order.extend(geo.coords.iter().enumerate().map(|(j, p)| {
                let d = (0..3).map(|a| (p[a] - ps[a]).powi(2)).sum::<f64>();
                (d, *p, j as u32)
            }));
            let cmp = |a: &(f64, [f64; 3], u32), b: &(f64, [f64; 3], u32)| {
                a.0.total_cmp(&b.0)
                    .then(a.1[0].total_cmp(&b.1[0]))
                    .then(a.1[1].total_cmp(&b.1[1]))
                    .then(a.1[2].total_cmp(&b.1[2]))
            };
            if k < n {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            order[..k].sort_by(cmp);
            for &(_, p, j) in &order[..k] {
                neighbors.push(j);
                rel.extend((0..3).map(|a| (p[a] - ps[a]) / MP_REL_SCALE));
            }
        }
        let n_rows = neighbors.len();
        Ok(Self {
            indices_arc: Arc::from(indices.clone()),
            indices,
            neighbors: Arc::from(neighbors),
            k,
            rel: Mat::from_vec(n_rows, 3, rel),
        })
    }

    pub fn sample<R: Rng + ?Sized>(geo: &Geometry, config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let idx = sample_supernodes(geo.n_nodes(), config.n_supernodes, rng)?;
        Self::new(geo, idx, config.mp_neighbors)
    }
}

/// Random drop of residual branches; inactive without an rng or at p = 0.
pub struct DropPath<'r> {
    pub prob: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl DropPath<'_> {
    pub fn off() -> DropPath<'static> {
        DropPath { prob: 0.0, rng: None }
    }

    /// `None` drops the branch, otherwise the factor to scale it by.
    fn draw(&mut self) -> Option<f64> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.prob > 0.0 => {
                if rng.gen::<f64>() < self.prob {
                    None
                } else {
                    Some(1.0 / (1.0 - self.prob))
                }
            }
            _ => Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: NormStats,
}

/// One forward graph: a tape plus the parameter leaves bound on it.
pub struct Ctx<'m> {
    pub tape: Tape,
    model: &'m Surrogate,
    vars: Vec<Option<Var>>,
    track: bool,
    query: Option<(u64, Var)>,
}

impl Surrogate {
    pub fn new(config: ModelConfig, norm: NormStats) -> Result<Self, ModelError> {
        config.validate()?;
        norm.validate()
            .map_err(|e| ModelError::InvalidConfig(format!("normalisation: {e}")))?;
        Ok(Self {
            params: ParamStore::init(&config),
            config,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// A graph whose parameter leaves receive gradients when `track` is set.
    pub fn ctx(&self, track: bool) -> Ctx<'_> {
        Ctx {
            tape: Tape::new(),
            model: self,
            vars: vec![None; self.params.len()],
            track,
            query: None,
        }
    }

    pub fn normalize_u(&self, u: &[[f64; 3]]) -> Mat {
        let s = &self.norm;
        Mat::from_vec(
            u.len(),
            3,
            u.iter()
                .flat_map(|v| (0..3).map(move |a| (v[a] - s.mean[a]) / s.std[a]))
                .collect(),
        )
    }

    pub fn normalize_c(&self, c: &[[f64; 3]]) -> Mat {
        let s = &self.norm;
        Mat::from_vec(
            c.len(),
            3,
            c.iter().flat_map(|v| (0..3).map(move |a| v[a] / s.std[a])).collect(),
        )
    }

    pub fn denormalize(&self, m: &Mat) -> Vec<[f64; 3]> {
        let s = &self.norm;
        m.data
            .chunks_exact(3)
            .map(|v| std::array::from_fn(|a| v[a] * s.std[a] + s.mean[a]))
            .collect()
    }

    /// `u^{t+1}` in mm from `u^t` and `c^{t+1}` in mm, without drop path.
    pub fn forward_step(
        &self,
        u: &[[f64; 3]],
        c: &[[f64; 3]],
        geo: &Geometry,
        sn: &Supernodes,
    ) -> Result<Vec<[f64; 3]>, ModelError> {
        let n = geo.n_nodes();
        if u.len() != n || c.len() != n {
            return Err(ModelError::Shape(format!(
                "fields have {} and {} nodes, geometry has {n}",
                u.len(),
                c.len()
            )));
        }
        let mut ctx = self.ctx(false);
        let un = ctx.tape.constant(self.normalize_u(u));
        let cn = ctx.tape.constant(self.normalize_c(c));
        let out = ctx.step(geo, sn, un, cn, &mut DropPath::off());
        let m = ctx.tape.value(out);
        if !m.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(self.denormalize(m))
    }
}

/// Inference on a fixed geometry with frozen supernodes and cached decoder
/// query features.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub model: Arc<Surrogate>,
    pub geo: Arc<Geometry>,
    pub supernodes: Arc<Supernodes>,
    query: Mat,
}

impl Stepper {
    pub fn new(model: Arc<Surrogate>, geo: Arc<Geometry>, supernodes: Arc<Supernodes>) -> Self {
        let mut ctx = model.ctx(false);
        let q = ctx.query_features(&geo);
        let query = ctx.tape.value(q).clone();
        Self {
            model,
            geo,
            supernodes,
            query,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.geo.n_nodes()
    }

    /// Same mapping as [`Surrogate::forward_step`].
    pub fn step(&self, u: &[[f64; 3]], c: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, ModelError> {
        let n = self.n_nodes();
        if u.len() != n || c.len() != n {
            return Err(ModelError::Shape(format!(
                "fields have {} and {} nodes, geometry has {n}",
                u.len(),
                c.len()
            )));
        }
        let m = &*self.model;
        let mut ctx = m.ctx(false);
        ctx.bind_query_features(&self.geo, self.query.clone());
        let un = ctx.tape.constant(m.normalize_u(u));
        let cn = ctx.tape.constant(m.normalize_c(c));
        let out = ctx.step(&self.geo, &self.supernodes, un, cn, &mut DropPath::off());
        let v = ctx.tape.value(out);
        if !v.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(m.denormalize(v))
    }
}

impl<'m> Ctx<'m> {
    pub fn model(&self) -> &'m Surrogate {
        self.model
    }

    /// Leaf for the named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let value = self.model.params.values[i].clone();
        let v = if self.track {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.vars[i] = Some(v);
        v
    }

    /// Parameter leaves bound so far, by parameter index.
    pub fn bound_params(&self) -> &[Option<Var>] {
        &self.vars
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.linear(x, w, b)
    }

    fn ln(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn attn(&mut self, xq: Var, xkv: Var, p: &str) -> Var {
        let heads = self.model.config.heads;
        let q = self.linear(xq, &format!("{p}.attn.q"));
        let k = self.linear(xkv, &format!("{p}.attn.k"));
        let v = self.linear(xkv, &format!("{p}.attn.v"));
        let o = self.tape.attention(q, k, v, heads);
        self.linear(o, &format!("{p}.attn.o"))
    }

    fn mlp(&mut self, x: Var, p: &str) -> Var {
        let h = self.linear(x, &format!("{p}.l1"));
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{p}.l2"))
    }

    fn residual(&mut self, x: Var, branch: Var, factor: f64) -> Var {
        let b = if factor == 1.0 { branch } else { self.tape.scale(branch, factor) };
        self.tape.add(x, b)
    }

    fn self_block(&mut self, mut x: Var, p: &str, drop: &mut DropPath) -> Var {
        if let Some(f) = drop.draw() {
            let h = self.ln(x, &format!("{p}.ln1"));
            let a = self.attn(h, h, p);
            x = self.residual(x, a, f);
        }
        if let Some(f) = drop.draw() {
            let h = self.ln(x, &format!("{p}.ln2"));
            let m = self.mlp(h, &format!("{p}.mlp"));
            x = self.residual(x, m, f);
        }
        x
    }

    fn cross_block(&mut self, x: Var, kv: Var, p: &str) -> Var {
        let h = self.ln(x, &format!("{p}.ln_q"));
        let m = self.ln(kv, &format!("{p}.ln_kv"));
        let a = self.attn(h, m, p);
        let x = self.tape.add(x, a);
        let h = self.ln(x, &format!("{p}.ln2"));
        let m = self.mlp(h, &format!("{p}.mlp"));
        self.tape.add(x, m)
    }

    /// Latent tokens (`n_latent × d_latent`) from normalised `u` and `c`.
    pub fn encode(&mut self, geo: &Geometry, sn: &Supernodes, u: Var, c: Var, drop: &mut DropPath) -> Var {
        let cfg = self.model.config;
        let x = self.tape.concat_cols(u, c);
        let h = self.linear(x, "embed");
        let pe = self.tape.constant(geo.pe.clone());
        let h = self.tape.add(h, pe);
        let g = self.tape.gather(h, sn.neighbors.clone());
        let rel = self.tape.constant(sn.rel.clone());
        let g = self.tape.concat_cols(g, rel);
        let m = self.linear(g, "mp.l1");
        let m = self.tape.gelu(m);
        let m = self.linear(m, "mp.l2");
        let mut tokens = self.tape.mean_groups(m, sn.k);
        let sup_pe = self.tape.gather(pe, sn.indices_arc.clone());
        tokens = self.tape.add(tokens, sup_pe);
        for i in 0..cfg.encoder_depth {
            tokens = self.self_block(tokens, &format!("enc.{i}"), drop);
        }
        let t = self.linear(tokens, "perc.proj");
        let mut z = self.p("perc.queries");
        for i in 0..cfg.perceiver_depth {
            z = self.cross_block(z, t, &format!("perc.{i}"));
        }
        z
    }

    pub fn approximate(&mut self, mut z: Var, drop: &mut DropPath) -> Var {
        for i in 0..self.model.config.approximator_depth {
            z = self.self_block(z, &format!("approx.{i}"), drop);
        }
        z
    }

    /// Uses precomputed query features for `geo` instead of recomputing them.
    pub fn bind_query_features(&mut self, geo: &Geometry, features: Mat) {
        let v = self.tape.constant(features);
        self.query = Some((geo.id, v));
    }

    /// Decoder query features for `geo`, shared by every decode on this graph.
    pub fn query_features(&mut self, geo: &Geometry) -> Var {
        let key = geo.id;
        if let Some((k, v)) = self.query {
            if k == key {
                return v;
            }
        }
        let pe = self.tape.constant(geo.pe.clone());
        let v = self.mlp(pe, "dec.query");
        self.query = Some((key, v));
        v
    }

    /// Normalised displacement at every node of `geo`.
    pub fn decode(&mut self, z: Var, geo: &Geometry) -> Var {
        let mut y = self.query_features(geo);
        for i in 0..self.model.config.decoder_depth {
            y = self.cross_block(y, z, &format!("dec.{i}"));
        }
        let y = self.ln(y, "dec.ln");
        self.linear(y, "dec.head")
    }

    /// One model application in normalised units.
    pub fn step(&mut self, geo: &Geometry, sn: &Supernodes, u: Var, c: Var, drop: &mut DropPath) -> Var {
        let z = self.encode(geo, sn, u, c, drop);
        let z = self.approximate(z, drop);
        let out = self.decode(z, geo);
        if self.model.config.residual {
            self.tape.add(out, u)
        } else {
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0), rng.gen_range(0.0..100.0)])
            .collect()
    }

    fn model(cfg: ModelConfig) -> Surrogate {
        Surrogate::new(
            cfg,
            NormStats {
                mean: [0.1, -0.2, 0.3],
                std: [1.5, 2.0, 0.7],
            },
        )
        .unwrap()
    }

    #[test]
    fn full_config_size() {
        let n = ModelConfig::full().param_count();
        assert!((2_700_000..=4_100_000).contains(&n), "{n}");
        assert_eq!(n, 3_926_531);
        assert_eq!(ModelConfig::desk().param_count(), 155_875);
        let mut big = ModelConfig::desk();
        let small = big.param_count();
        big.d_embed *= 2;
        big.d_latent *= 2;
        assert!(big.param_count() > 2 * small);
        assert_eq!(ParamStore::init(&ModelConfig::tiny()).count(), ModelConfig::tiny().param_count());
    }

    #[test]
    fn encoding_at_origin() {
        let pe = positional_encoding(&[[0.0; 3]], 12);
        assert_eq!(pe.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let pad = positional_encoding(&[[3.0, 4.0, 5.0]], 14);
        assert_eq!(&pad.row(0)[12..], &[0.0, 0.0]);
        let a = positional_encoding(&[[3.0, 4.0, 5.0], [9.0, 4.0, 5.0]], 18);
        for c in 0..18 {
            let differs = a.get(0, c) != a.get(1, c);
            assert_eq!(differs, c < 6, "column {c}");
        }
    }

    #[test]
    fn supernode_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_supernodes(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_supernodes(5, 6, &mut rng).is_err());
        let a = sample_supernodes(100, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_supernodes(100, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_shapes_and_determinism() {
        let m = model(ModelConfig::tiny());
        let geo = Geometry::new(cloud(50, 1), 12);
        let sn = Supernodes::sample(&geo, &m.config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let u = cloud(50, 3);
        let c = vec![[0.0; 3]; 50];
        let a = m.forward_step(&u, &c, &geo, &sn).unwrap();
        let b = m.forward_step(&u, &c, &geo, &sn).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        let mut ctx = m.ctx(false);
        let un = ctx.tape.constant(m.normalize_u(&u));
        let cn = ctx.tape.constant(m.normalize_c(&c));
        let z = ctx.encode(&geo, &sn, un, cn, &mut DropPath::off());
        assert_eq!(ctx.tape.value(z).shape(), (4, 8));
    }

    #[test]
    fn normalisation_round_trip() {
        let m = model(ModelConfig::tiny());
        let u = cloud(10, 5);
        let back = m.denormalize(&m.normalize_u(&u));
        for (a, b) in u.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert!(m.normalize_c(&[[0.0; 3]]).data.iter().all(|&x| x == 0.0));
    }
}
