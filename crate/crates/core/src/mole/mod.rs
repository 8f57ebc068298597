//! Mixture-of-laugh-experts linear layer.
//!
//! A frozen base map `W₀ ∈ ℝ^{m×n}` is augmented by `T` low-rank experts
//! `Eᵢ = (α/r)·BᵢAᵢx` mixed by a softmax router:
//!
//! ```text
//! R = softmax(W_g x)            W_g ∈ ℝ^{T×n}
//! h = W₀x + Σᵢ Rᵢ · (α/r) BᵢAᵢx
//! ```
//!
//! Routing is per token: in the sequence API every row of the input gets
//! its own routing vector. Experts start with `B = 0` and the router with
//! `W_g = 0`, so a fresh layer is exactly `W₀x` with uniform routing.

pub mod checkpoint;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{
    axpy, gemm, seeded_rng, softmax_in_place, softmax_jvp_into, Rng, Shape, Tensor1D,
    Tensor2D,
};
use rand::Rng as _;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

/// One LoRA adapter: `A ∈ ℝ^{r×n}`, `B ∈ ℝ^{m×r}`, scaling `α/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    a: Tensor2D,
    b: Tensor2D,
    alpha: f64,
}

impl LoraExpert {
    /// `A` uniform in `±1/√n`, `B` zero.
    pub fn init(out_dim: usize, in_dim: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::from_parts(
            Tensor2D::random_uniform(rank, in_dim, bound, rng),
            Tensor2D::zeros(out_dim, rank),
            alpha,
        )
    }

    pub fn from_parts(a: Tensor2D, b: Tensor2D, alpha: f64) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(Error::shape("LoraExpert", format!("A {}", a.shape()), format!("B {}", b.shape())));
        }
        if rank == 0 || rank > a.cols().min(b.rows()) {
            return Err(Error::validation(
                "LoraExpert.rank",
                format!("rank {rank} must be in 1..=min(m={}, n={})", b.rows(), a.cols()),
            ));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::validation("LoraExpert.alpha", format!("{alpha} is not positive")));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Tensor2D {
        &self.a
    }

    pub fn b(&self) -> &Tensor2D {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(α/r)·B·A·x` with no routing weight applied.
    pub fn apply(&self, x: &Tensor1D) -> Result<Tensor1D> {
        let mut e = self.b.matvec(&self.a.matvec(x)?)?;
        e.data_mut().iter_mut().for_each(|v| *v *= self.scaling());
        Ok(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    w_g: Tensor2D,
}

impl Router {
    pub fn zeros(num_experts: usize, in_dim: usize) -> Self {
        Self {
            w_g: Tensor2D::zeros(num_experts, in_dim),
        }
    }

    pub fn from_weights(w_g: Tensor2D) -> Self {
        Self { w_g }
    }

    pub fn weights(&self) -> &Tensor2D {
        &self.w_g
    }

    pub fn route(&self, x: &Tensor1D) -> Result<Tensor1D> {
        let mut z = self.w_g.matvec(x).map_err(|_| {
            Error::shape("route", format!("W_g {}", self.w_g.shape()), format!("x of {}", x.len()))
        })?;
        softmax_in_place(z.data_mut());
        Ok(z)
    }
}

/// Dimensions shared by every expert of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoleDims {
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub num_experts: usize,
}

/// Frozen base weight plus softly-routed LoRA experts.
#[derive(Debug)]
pub struct MoleLinear {
    w0: Tensor2D,
    experts: Vec<LoraExpert>,
    router: Router,
    id: u64,
    generation: u64,
}

impl Clone for MoleLinear {
    fn clone(&self) -> Self {
        Self {
            w0: self.w0.clone(),
            experts: self.experts.clone(),
            router: self.router.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for MoleLinear {
    fn eq(&self, other: &Self) -> bool {
        self.w0 == other.w0 && self.experts == other.experts && self.router == other.router
    }
}

/// Gradients for one layer. `X` is `Tensor1D` for the single-vector API
/// and `Tensor2D` (one row per token) for the sequence API. There is no
/// slot for `W₀`: it never receives a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleGradients<X = Tensor1D> {
    pub d_a: Vec<Tensor2D>,
    pub d_b: Vec<Tensor2D>,
    pub d_wg: Tensor2D,
    pub d_x: X,
}

impl<X> MoleGradients<X> {
    /// Parameter gradients in the same order as [`MoleLinear::params_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.d_a.len() + 1);
        for (a, b) in self.d_a.iter().zip(&self.d_b) {
            out.push(a.data());
            out.push(b.data());
        }
        out.push(self.d_wg.data());
        out
    }

    pub fn drop_input(self) -> MoleGradients<()> {
        MoleGradients {
            d_a: self.d_a,
            d_b: self.d_b,
            d_wg: self.d_wg,
            d_x: (),
        }
    }
}

impl MoleGradients<()> {
    pub fn zeros_like(layer: &MoleLinear) -> Self {
        MoleGradients {
            d_a: layer.experts.iter().map(|e| Tensor2D::zeros(e.a.rows(), e.a.cols())).collect(),
            d_b: layer.experts.iter().map(|e| Tensor2D::zeros(e.b.rows(), e.b.cols())).collect(),
            d_wg: Tensor2D::zeros(layer.router.w_g.rows(), layer.router.w_g.cols()),
            d_x: (),
        }
    }

    pub fn accumulate<X>(&mut self, other: &MoleGradients<X>) {
        for (dst, src) in self.d_a.iter_mut().zip(&other.d_a) {
            axpy(1.0, src.data(), dst.data_mut());
        }
        for (dst, src) in self.d_b.iter_mut().zip(&other.d_b) {
            axpy(1.0, src.data(), dst.data_mut());
        }
        axpy(1.0, other.d_wg.data(), self.d_wg.data_mut());
    }
}

/// Forward record kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MoleCache {
    layer_id: u64,
    generation: u64,
    x: Tensor2D,
    /// Input fed to the experts (differs from `x` only under dropout).
    x_experts: Option<Tensor2D>,
    dropout_mask: Option<Vec<f64>>,
    routes: Tensor2D,
    /// `A_all · x` per token, unscaled (L × T·r).
    u: Tensor2D,
}

impl MoleCache {
    pub fn routes(&self) -> &Tensor2D {
        &self.routes
    }
}

/// Inverted-dropout on the expert input path only.
pub struct ExpertDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl MoleLinear {
    /// New layer around a frozen base weight, with freshly initialized
    /// experts and a zero router.
    pub fn new(w0: Tensor2D, num_experts: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::validation("MoleLinear.num_experts", "need at least one expert"));
        }
        let experts = (0..num_experts)
            .map(|_| LoraExpert::init(w0.rows(), w0.cols(), rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        let router = Router::zeros(num_experts, w0.cols());
        Self::from_parts(w0, experts, router)
    }

    /// Convenience constructor: random frozen base from `seed`.
    pub fn random(dims: MoleDims, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let w0 = Tensor2D::random_uniform(dims.out_dim, dims.in_dim, 1.0 / (dims.in_dim as f64).sqrt(), &mut rng);
        Self::new(w0, dims.num_experts, dims.rank, dims.alpha, &mut rng)
    }

    pub fn from_parts(w0: Tensor2D, experts: Vec<LoraExpert>, router: Router) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::validation("MoleLinear.experts", "need at least one expert"));
        };
        let (rank, alpha) = (first.rank(), first.alpha());
        for (i, e) in experts.iter().enumerate() {
            if e.a.cols() != w0.cols() || e.b.rows() != w0.rows() || e.rank() != rank || e.alpha() != alpha {
                return Err(Error::validation(
                    format!("MoleLinear.experts[{i}]"),
                    format!(
                        "expert ({}x{} rank {} alpha {}) does not match W0 {} rank {rank} alpha {alpha}",
                        e.b.rows(),
                        e.a.cols(),
                        e.rank(),
                        e.alpha(),
                        w0.shape()
                    ),
                ));
            }
        }
        if router.w_g.shape() != Shape(experts.len(), w0.cols()) {
            return Err(Error::shape(
                "MoleLinear router",
                router.w_g.shape(),
                Shape(experts.len(), w0.cols()),
            ));
        }
        Ok(Self {
            w0,
            experts,
            router,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn dims(&self) -> MoleDims {
        MoleDims {
            out_dim: self.w0.rows(),
            in_dim: self.w0.cols(),
            rank: self.experts[0].rank(),
            alpha: self.experts[0].alpha(),
            num_experts: self.experts.len(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// The frozen base weight. There is deliberately no mutable accessor.
    pub fn base(&self) -> &Tensor2D {
        &self.w0
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    /// Trainable parameter count: `T·(m·r + r·n) + T·n`.
    pub fn trainable_count(&self) -> usize {
        let d = self.dims();
        d.num_experts * (d.out_dim * d.rank + d.rank * d.in_dim) + d.num_experts * d.in_dim
    }

    /// Mutable views of every trainable parameter (`A₁, B₁, …, A_T, B_T,
    /// W_g`). Taking them invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &mut self.experts {
            out.push(e.a.data_mut());
            out.push(e.b.data_mut());
        }
        out.push(self.router.w_g.data_mut());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &self.experts {
            out.push(e.a.data());
            out.push(e.b.data());
        }
        out.push(self.router.w_g.data());
        out
    }

    pub fn route(&self, x: &Tensor1D) -> Result<Tensor1D> {
        self.router.route(x)
    }

    pub fn forward(&self, x: &Tensor1D) -> Result<(Tensor1D, MoleCache)> {
        if x.len() != self.w0.cols() {
            return Err(Error::shape("mole_forward", self.w0.shape(), format!("x of {}", x.len())));
        }
        // Plain sequential dot products here (the sequence path uses GEMM),
        // so a fresh layer reproduces a scalar W₀x bit for bit.
        let routes = self.router.route(x)?;
        let mut h = self.w0.matvec(x)?;
        let mut u = Vec::with_capacity(self.experts.len() * self.experts[0].rank());
        for (e, &r) in self.experts.iter().zip(routes.data()) {
            let ax = e.a.matvec(x)?;
            let out = e.b.matvec(&ax)?;
            axpy(r * e.scaling(), out.data(), h.data_mut());
            u.extend_from_slice(ax.data());
        }
        let cache = MoleCache {
            layer_id: self.id,
            generation: self.generation,
            x: x.as_row(),
            x_experts: None,
            dropout_mask: None,
            u: Tensor2D::from_vec(1, u.len(), u)?,
            routes: routes.as_row(),
        };
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MoleCache, upstream: &Tensor1D) -> Result<MoleGradients> {
        if cache.x.rows() != 1 {
            return Err(Error::Contract("sequence cache passed to the single-vector backward".into()));
        }
        let g = self.backward_seq(cache, &upstream.as_row())?;
        Ok(MoleGradients {
            d_a: g.d_a,
            d_b: g.d_b,
            d_wg: g.d_wg,
            d_x: Tensor1D::from_vec(g.d_x.into_vec())?,
        })
    }

    fn stack_a(&self) -> Tensor2D {
        let d = self.dims();
        let mut data = Vec::with_capacity(d.num_experts * d.rank * d.in_dim);
        for e in &self.experts {
            data.extend_from_slice(e.a.data());
        }
        Tensor2D::from_vec(d.num_experts * d.rank, d.in_dim, data).expect("stacked A shape")
    }

    fn stack_b(&self) -> Tensor2D {
        let d = self.dims();
        let width = d.num_experts * d.rank;
        let mut out = Tensor2D::zeros(d.out_dim, width);
        for (i, e) in self.experts.iter().enumerate() {
            for r in 0..d.out_dim {
                out.row_mut(r)[i * d.rank..(i + 1) * d.rank].copy_from_slice(e.b.row(r));
            }
        }
        out
    }

    fn routes_for(&self, x: &Tensor2D) -> Tensor2D {
        let mut z = Tensor2D::zeros(x.rows(), self.experts.len());
        gemm(1.0, x.view(), self.router.w_g.view().t(), 0.0, &mut z);
        for r in 0..z.rows() {
            softmax_in_place(z.row_mut(r));
        }
        z
    }

    /// Per-token routing weights for a sequence (L × T).
    pub fn route_seq(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_seq_input("route_seq", x)?;
        Ok(self.routes_for(x))
    }

    fn check_seq_input(&self, op: &'static str, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.w0.cols() {
            return Err(Error::shape(op, self.w0.shape(), x.shape()));
        }
        Ok(())
    }

    /// Inference-only sequence forward. Returns outputs and routing weights.
    pub fn infer_seq(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
        self.check_seq_input("mole_forward", x)?;
        let routes = self.routes_for(x);
        let h = self.combine(x, x, &routes).0;
        Ok((h, routes))
    }

    /// `(h, u)` where `u = x_experts · A_allᵀ`.
    fn combine(&self, x: &Tensor2D, x_experts: &Tensor2D, routes: &Tensor2D) -> (Tensor2D, Tensor2D) {
        let d = self.dims();
        let width = d.num_experts * d.rank;
        let mut h = Tensor2D::zeros(x.rows(), d.out_dim);
        gemm(1.0, x.view(), self.w0.view().t(), 0.0, &mut h);
        let a_all = self.stack_a();
        let mut u = Tensor2D::zeros(x.rows(), width);
        gemm(1.0, x_experts.view(), a_all.view().t(), 0.0, &mut u);
        let scaled = self.scale_blocks(&u, routes);
        let b_all = self.stack_b();
        gemm(1.0, scaled.view(), b_all.view().t(), 1.0, &mut h);
        (h, u)
    }

    /// Block `i` of every row multiplied by `(α/r)·R[row, i]`.
    fn scale_blocks(&self, u: &Tensor2D, routes: &Tensor2D) -> Tensor2D {
        let d = self.dims();
        let s = d.alpha / d.rank as f64;
        let mut out = u.clone();
        for row in 0..u.rows() {
            let r = routes.row(row);
            for (i, block) in out.row_mut(row).chunks_exact_mut(d.rank).enumerate() {
                let w = s * r[i];
                block.iter_mut().for_each(|v| *v *= w);
            }
        }
        out
    }

    /// Training forward over a sequence (one token per row).
    pub fn forward_seq(&self, x: &Tensor2D, dropout: Option<ExpertDropout<'_>>) -> Result<(Tensor2D, MoleCache)> {
        self.check_seq_input("mole_forward", x)?;
        let routes = self.routes_for(x);
        let (x_experts, dropout_mask) = match dropout {
            Some(ExpertDropout { rate, rng }) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.data().len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut xd = x.clone();
                xd.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                (Some(xd), Some(mask))
            }
            _ => (None, None),
        };
        let (h, u) = self.combine(x, x_experts.as_ref().unwrap_or(x), &routes);
        let cache = MoleCache {
            layer_id: self.id,
            generation: self.generation,
            x: x.clone(),
            x_experts,
            dropout_mask,
            routes,
            u,
        };
        Ok((h, cache))
    }

    pub fn backward_seq(&self, cache: &MoleCache, upstream: &Tensor2D) -> Result<MoleGradients<Tensor2D>> {
        if cache.layer_id != self.id {
            return Err(Error::Contract("forward cache belongs to a different layer".into()));
        }
        if cache.generation != self.generation {
            return Err(Error::Contract(
                "forward cache is stale: layer parameters changed since the forward pass".into(),
            ));
        }
        let dims = self.dims();
        if upstream.shape() != Shape(cache.x.rows(), dims.out_dim) {
            return Err(Error::shape(
                "mole_backward",
                upstream.shape(),
                Shape(cache.x.rows(), dims.out_dim),
            ));
        }
        let (t, rank) = (dims.num_experts, dims.rank);
        let s = dims.alpha / rank as f64;
        let width = t * rank;
        let rows = cache.x.rows();
        let x_experts = cache.x_experts.as_ref().unwrap_or(&cache.x);

        let b_all = self.stack_b();
        // v = G · B_all; block i of row l is Bᵢᵀ g_l
        let mut v = Tensor2D::zeros(rows, width);
        gemm(1.0, upstream.view(), b_all.view(), 0.0, &mut v);

        let mut d_z = Tensor2D::zeros(rows, t);
        let mut d_r = vec![0.0; t];
        for l in 0..rows {
            let (vl, ul) = (v.row(l), cache.u.row(l));
            for (i, dr) in d_r.iter_mut().enumerate() {
                let span = i * rank..(i + 1) * rank;
                *dr = s * vl[span.clone()].iter().zip(&ul[span]).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_jvp_into(cache.routes.row(l), &d_r, d_z.row_mut(l));
        }

        let d_u = self.scale_blocks(&v, &cache.routes);
        let scaled_u = self.scale_blocks(&cache.u, &cache.routes);

        let mut d_a_all = Tensor2D::zeros(width, dims.in_dim);
        gemm(1.0, d_u.view().t(), x_experts.view(), 0.0, &mut d_a_all);
        let mut d_b_all = Tensor2D::zeros(dims.out_dim, width);
        gemm(1.0, upstream.view().t(), scaled_u.view(), 0.0, &mut d_b_all);
        let mut d_wg = Tensor2D::zeros(t, dims.in_dim);
        gemm(1.0, d_z.view().t(), cache.x.view(), 0.0, &mut d_wg);

        let mut d_x = Tensor2D::zeros(rows, dims.in_dim);
        gemm(1.0, upstream.view(), self.w0.view(), 0.0, &mut d_x);
        let a_all = self.stack_a();
        match &cache.dropout_mask {
            None => gemm(1.0, d_u.view(), a_all.view(), 1.0, &mut d_x),
            Some(mask) => {
                let mut d_xe = Tensor2D::zeros(rows, dims.in_dim);
                gemm(1.0, d_u.view(), a_all.view(), 0.0, &mut d_xe);
                for ((dx, de), m) in d_x.data_mut().iter_mut().zip(d_xe.data()).zip(mask) {
                    *dx += de * m;
                }
            }
        }
        gemm(1.0, d_z.view(), self.router.w_g.view(), 1.0, &mut d_x);

        let d_a = (0..t)
            .map(|i| {
                let block = d_a_all.data()[i * rank * dims.in_dim..(i + 1) * rank * dims.in_dim].to_vec();
                Tensor2D::from_vec(rank, dims.in_dim, block).expect("dA block")
            })
            .collect();
        let d_b = (0..t)
            .map(|i| {
                let mut blk = Tensor2D::zeros(dims.out_dim, rank);
                for r in 0..dims.out_dim {
                    blk.row_mut(r).copy_from_slice(&d_b_all.row(r)[i * rank..(i + 1) * rank]);
                }
                blk
            })
            .collect();
        Ok(MoleGradients { d_a, d_b, d_wg, d_x })
    }

    /// Copy of this layer keeping only expert `index` (router collapses to
    /// a single always-on expert).
    pub fn single_expert(&self, index: usize) -> Result<Self> {
        let expert = self
            .experts
            .get(index)
            .ok_or_else(|| Error::Range(format!("expert {index} of {}", self.experts.len())))?
            .clone();
        Self::from_parts(self.w0.clone(), vec![expert], Router::zeros(1, self.w0.cols()))
    }
}

/// Mean routing vector per group.
///
/// For every record, the routing weights are averaged over tokens and then
/// over layers; records are then averaged within their group.
/// `layer_inputs(record)` yields the `L × n` input that reached each of
/// `layers` for that record, in order; it is called once per record so
/// activations never have to be held for a whole corpus.
pub fn mean_router_weights<K, R, F>(
    layers: &[&MoleLinear],
    groups: &[(K, Vec<R>)],
    mut layer_inputs: F,
) -> Result<Vec<(K, Vec<f64>)>>
where
    K: Clone,
    F: FnMut(&R) -> Result<Vec<Tensor2D>>,
{
    let t = layers
        .first()
        .map(|l| l.num_experts())
        .ok_or_else(|| Error::Degenerate("no layers to analyse".into()))?;
    if layers.iter().any(|l| l.num_experts() != t) {
        return Err(Error::validation("layers", "layers disagree on expert count"));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, records) in groups {
        if records.is_empty() {
            return Err(Error::Degenerate("empty record group in router analysis".into()));
        }
        let mut acc = vec![0.0; t];
        for record in records {
            let inputs = layer_inputs(record)?;
            if inputs.len() != layers.len() {
                return Err(Error::shape(
                    "mean_router_weights",
                    format!("{} layer inputs", inputs.len()),
                    format!("{} layers", layers.len()),
                ));
            }
            let mut rec = vec![0.0; t];
            for (layer, x) in layers.iter().zip(&inputs) {
                if x.rows() == 0 {
                    return Err(Error::Degenerate("record with no tokens".into()));
                }
                let routes = layer.route_seq(x)?;
                let mut tok = vec![0.0; t];
                for row in routes.rows_iter() {
                    axpy(1.0, row, &mut tok);
                }
                axpy(1.0 / x.rows() as f64, &tok, &mut rec);
            }
            axpy(1.0 / layers.len() as f64, &rec, &mut acc);
        }
        acc.iter_mut().for_each(|v| *v /= records.len() as f64);
        out.push((key.clone(), acc));
    }
    Ok(out)
}
