//! Pre-norm decoder blocks: RMSNorm, rotary multi-head causal attention,
//! GELU MLP, tied output embedding. Forward, backward, and cached decoding.

use super::{ModelGrads, TinyLM, Token, EOS};
use crate::error::{Error, Result};
use crate::mole::{ExpertDropout, MoleCache};
use crate::numerics::{argmax, axpy, cross_entropy_with_grad, dot, gemm, gemm_raw, softmax_in_place, MatView, Rng, Tensor2D};

const NORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl Rope {
    pub(crate) fn new(max_len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for j in 0..half {
                let angle = p as f64 * ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { cos, sin, half }
    }

    /// Rotate every head of every row in place; `inverse` applies the
    /// transpose rotation (used for gradients).
    fn apply(&self, x: &mut Tensor2D, offset: usize, inverse: bool) {
        let d = x.cols();
        let hd = 2 * self.half;
        let sign = if inverse { -1.0 } else { 1.0 };
        for i in 0..x.rows() {
            let base = (offset + i) * self.half;
            let row = x.row_mut(i);
            for h in 0..d / hd {
                for j in 0..self.half {
                    let (c, s) = (self.cos[base + j], sign * self.sin[base + j]);
                    let idx = h * hd + 2 * j;
                    let (a, b) = (row[idx], row[idx + 1]);
                    row[idx] = a * c - b * s;
                    row[idx + 1] = a * s + b * c;
                }
            }
        }
    }
}

fn rmsnorm(x: &Tensor2D) -> (Tensor2D, Vec<f64>) {
    let mut y = x.clone();
    let n = x.cols() as f64;
    let mut rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let r = (dot(row, row) / n + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= r);
        rms.push(r);
    }
    (y, rms)
}

fn rmsnorm_backward(y: &Tensor2D, rms: &[f64], dy: &Tensor2D) -> Tensor2D {
    let n = y.cols() as f64;
    let mut dx = dy.clone();
    for (i, &r) in rms.iter().enumerate() {
        let yr = y.row(i);
        let m = dot(dy.row(i), yr) / n;
        for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
            *d = (*d - yv * m) / r;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn map(x: &Tensor2D, f: impl Fn(f64) -> f64) -> Tensor2D {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = f(*v));
    y
}

/// Causal multi-head attention of `q` (rows at absolute positions
/// `offset..`) against the first `keys` rows of `k` / `v`.
fn attention(
    heads: usize,
    q: &Tensor2D,
    k: &[f64],
    v: &[f64],
    keys: usize,
    offset: usize,
    keep_probs: bool,
) -> (Tensor2D, Vec<Tensor2D>) {
    let (l, d) = (q.rows(), q.cols());
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor2D::zeros(l, d);
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut s = Tensor2D::zeros(l, keys);
        let qh = MatView::col_block(q.data(), l, d, h * hd, hd);
        let kh = MatView::col_block(k, keys, d, h * hd, hd);
        gemm(scale, qh, kh.t(), 0.0, &mut s);
        for i in 0..l {
            let row = s.row_mut(i);
            row[offset + i + 1..].fill(f64::NEG_INFINITY);
            softmax_in_place(row);
        }
        let vh = MatView::col_block(v, keys, d, h * hd, hd);
        gemm_raw(1.0, s.view(), vh, 0.0, &mut out.data_mut()[h * hd..], l, hd, d);
        if keep_probs {
            probs.push(s);
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] at offset 0 with `keys == rows`.
fn attention_backward(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    probs: &[Tensor2D],
    d_out: &Tensor2D,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (l, d) = (q.rows(), q.cols());
    let heads = probs.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (Tensor2D::zeros(l, d), Tensor2D::zeros(l, d), Tensor2D::zeros(l, d));
    for (h, p) in probs.iter().enumerate() {
        fn head(t: &Tensor2D, h: usize, hd: usize) -> MatView<'_> {
            MatView::col_block(t.data(), t.rows(), t.cols(), h * hd, hd)
        }
        let block = |t| head(t, h, hd);
        let mut ds = Tensor2D::zeros(l, l);
        gemm(1.0, block(d_out), block(v).t(), 0.0, &mut ds);
        gemm_raw(1.0, p.view().t(), block(d_out), 0.0, &mut dv.data_mut()[h * hd..], l, hd, d);
        for i in 0..l {
            let pr = p.row(i);
            let row = ds.row_mut(i);
            let s = dot(pr, row);
            for (g, &pv) in row.iter_mut().zip(pr) {
                *g = pv * (*g - s);
            }
        }
        gemm_raw(scale, ds.view(), block(k), 0.0, &mut dq.data_mut()[h * hd..], l, hd, d);
        gemm_raw(scale, ds.view().t(), block(q), 0.0, &mut dk.data_mut()[h * hd..], l, hd, d);
    }
    (dq, dk, dv)
}

struct BlockTrace {
    n1: Tensor2D,
    r1: Vec<f64>,
    cq: MoleCache,
    ck: MoleCache,
    cv: MoleCache,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: Vec<Tensor2D>,
    co: MoleCache,
    n2: Tensor2D,
    r2: Vec<f64>,
    cup: MoleCache,
    u: Tensor2D,
    cdown: MoleCache,
}

/// Incremental decoding state: per-layer rotated keys and values of every
/// position seen so far.
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn with_dropout<'a>(d: &'a mut Option<(f64, &mut Rng)>) -> Option<ExpertDropout<'a>> {
    d.as_mut().map(|(rate, rng)| ExpertDropout { rate: *rate, rng })
}

impl TinyLM {
    fn embed(&self, tokens: &[Token]) -> Result<Tensor2D> {
        let d = self.config.embed_dim;
        let mut x = Tensor2D::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Range(format!("token {t} >= vocabulary size {}", self.config.vocab_size)));
            }
            x.row_mut(i).copy_from_slice(self.tok_emb.row(t as usize));
        }
        Ok(x)
    }

    fn check_length(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::Range(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Mean next-token cross-entropy over the targets selected by
    /// `score_mask` (`score_mask[i]` scores the prediction of `tokens[i]`
    /// from `tokens[..i]`), with gradients for every trainable parameter.
    /// Returns `(loss, scored_count, grads)`.
    pub fn loss_and_grads(
        &self,
        tokens: &[Token],
        score_mask: &[bool],
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<(f64, usize, ModelGrads)> {
        if tokens.len() != score_mask.len() {
            return Err(Error::shape(
                "loss_and_grads",
                format!("{} tokens", tokens.len()),
                format!("{} mask entries", score_mask.len()),
            ));
        }
        if tokens.len() < 2 || score_mask[0] {
            return Err(Error::Degenerate("need at least two tokens and an unscored first token".into()));
        }
        self.check_length(tokens.len())?;
        let inputs = &tokens[..tokens.len() - 1];
        let l = inputs.len();
        let heads = self.config.num_heads;

        let mut x = self.embed(inputs)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (n1, r1) = rmsnorm(&x);
            let (mut q, cq) = b.q.forward_seq(&n1, with_dropout(&mut dropout))?;
            let (mut k, ck) = b.k.forward_seq(&n1, with_dropout(&mut dropout))?;
            let (v, cv) = b.v.forward_seq(&n1, with_dropout(&mut dropout))?;
            self.rope.apply(&mut q, 0, false);
            self.rope.apply(&mut k, 0, false);
            let (att, probs) = attention(heads, &q, k.data(), v.data(), l, 0, true);
            let (o, co) = b.o.forward_seq(&att, with_dropout(&mut dropout))?;
            x.add_assign(&o)?;
            let (n2, r2) = rmsnorm(&x);
            let (u, cup) = b.up.forward_seq(&n2, with_dropout(&mut dropout))?;
            let (mlp, cdown) = b.down.forward_seq(&map(&u, gelu), with_dropout(&mut dropout))?;
            x.add_assign(&mlp)?;
            traces.push(BlockTrace {
                n1,
                r1,
                cq,
                ck,
                cv,
                q,
                k,
                v,
                probs,
                co,
                n2,
                r2,
                cup,
                u,
                cdown,
            });
        }
        let (f, rf) = rmsnorm(&x);

        let rows: Vec<usize> = (0..l).filter(|&p| score_mask[p + 1]).collect();
        if rows.is_empty() {
            return Err(Error::Degenerate("score mask selects no targets".into()));
        }
        let d = self.config.embed_dim;
        let mut f_sel = Tensor2D::zeros(rows.len(), d);
        for (j, &p) in rows.iter().enumerate() {
            f_sel.row_mut(j).copy_from_slice(f.row(p));
        }
        let mut logits = Tensor2D::zeros(rows.len(), self.config.vocab_size);
        gemm(1.0, f_sel.view(), self.tok_emb.view().t(), 0.0, &mut logits);
        let targets: Vec<usize> = rows.iter().map(|&p| tokens[p + 1] as usize).collect();
        let (loss, dlogits) = cross_entropy_with_grad(&logits, &targets, &vec![true; rows.len()])?;

        let mut grads = ModelGrads::zeros_like(self);
        gemm(1.0, dlogits.view().t(), f_sel.view(), 0.0, &mut grads.tok_emb);
        let mut df_sel = Tensor2D::zeros(rows.len(), d);
        gemm(1.0, dlogits.view(), self.tok_emb.view(), 0.0, &mut df_sel);
        let mut df = Tensor2D::zeros(l, d);
        for (j, &p) in rows.iter().enumerate() {
            df.row_mut(p).copy_from_slice(df_sel.row(j));
        }
        let mut dx = rmsnorm_backward(&f, &rf, &df);

        for (bi, (b, t)) in self.blocks.iter().zip(&traces).enumerate().rev() {
            let g = &mut grads.layers[bi * 6..bi * 6 + 6];
            let gd = b.down.backward_seq(&t.cdown, &dx)?;
            let mut du = gd.d_x.clone();
            du.data_mut()
                .iter_mut()
                .zip(t.u.data())
                .for_each(|(d, &u)| *d *= gelu_grad(u));
            g[5].accumulate(&gd);
            let gu = b.up.backward_seq(&t.cup, &du)?;
            g[4].accumulate(&gu);
            dx.add_assign(&rmsnorm_backward(&t.n2, &t.r2, &gu.d_x))?;

            let go = b.o.backward_seq(&t.co, &dx)?;
            g[3].accumulate(&go);
            let (mut dq, mut dk, dv) = attention_backward(&t.q, &t.k, &t.v, &t.probs, &go.d_x);
            self.rope.apply(&mut dq, 0, true);
            self.rope.apply(&mut dk, 0, true);
            let gq = b.q.backward_seq(&t.cq, &dq)?;
            let gk = b.k.backward_seq(&t.ck, &dk)?;
            let gv = b.v.backward_seq(&t.cv, &dv)?;
            let mut dn1 = gq.d_x.clone();
            dn1.add_assign(&gk.d_x)?;
            dn1.add_assign(&gv.d_x)?;
            g[0].accumulate(&gq);
            g[1].accumulate(&gk);
            g[2].accumulate(&gv);
            dx.add_assign(&rmsnorm_backward(&t.n1, &t.r1, &dn1))?;
        }
        for (i, &tok) in inputs.iter().enumerate() {
            axpy(1.0, dx.row(i), grads.tok_emb.row_mut(tok as usize));
        }
        Ok((loss, rows.len(), grads))
    }

    pub fn decode_state(&self) -> DecodeState {
        let n = self.blocks.len();
        DecodeState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feed `tokens` after the cached prefix. Returns the final normalized
    /// hidden state of each new position. When `record` is given, the
    /// input of every projection is appended to it in layer order.
    fn advance(
        &self,
        state: &mut DecodeState,
        tokens: &[Token],
        mut record: Option<&mut Vec<Tensor2D>>,
    ) -> Result<Tensor2D> {
        if tokens.is_empty() {
            return Err(Error::Degenerate("no tokens to decode".into()));
        }
        self.check_length(state.len + tokens.len())?;
        let offset = state.len;
        let keys = offset + tokens.len();
        let mut rec = |t: &Tensor2D| {
            if let Some(r) = record.as_deref_mut() {
                r.push(t.clone());
            }
        };
        let mut x = self.embed(tokens)?;
        for (bi, b) in self.blocks.iter().enumerate() {
            let (n1, _) = rmsnorm(&x);
            let (mut q, _) = b.q.infer_seq(&n1)?;
            let (mut k, _) = b.k.infer_seq(&n1)?;
            let (v, _) = b.v.infer_seq(&n1)?;
            self.rope.apply(&mut q, offset, false);
            self.rope.apply(&mut k, offset, false);
            state.keys[bi].extend_from_slice(k.data());
            state.values[bi].extend_from_slice(v.data());
            let (att, _) = attention(self.config.num_heads, &q, &state.keys[bi], &state.values[bi], keys, offset, false);
            let (o, _) = b.o.infer_seq(&att)?;
            x.add_assign(&o)?;
            let (n2, _) = rmsnorm(&x);
            let (u, _) = b.up.infer_seq(&n2)?;
            let a = map(&u, gelu);
            let (mlp, _) = b.down.infer_seq(&a)?;
            x.add_assign(&mlp)?;
            for t in [&n1, &n1, &n1, &att, &n2, &a] {
                rec(t);
            }
        }
        state.len = keys;
        Ok(rmsnorm(&x).0)
    }

    fn project(&self, hidden: &Tensor2D) -> Tensor2D {
        let mut logits = Tensor2D::zeros(hidden.rows(), self.config.vocab_size);
        gemm(1.0, hidden.view(), self.tok_emb.view().t(), 0.0, &mut logits);
        logits
    }

    /// Next-token logits at every position, computed from scratch.
    pub fn logits(&self, tokens: &[Token]) -> Result<Tensor2D> {
        let h = self.advance(&mut self.decode_state(), tokens, None)?;
        Ok(self.project(&h))
    }

    /// Feed `tokens` and return the logits after the last one.
    pub fn next_logits(&self, state: &mut DecodeState, tokens: &[Token]) -> Result<Vec<f64>> {
        let h = self.advance(state, tokens, None)?;
        let last = Tensor2D::from_vec(1, h.cols(), h.row(h.rows() - 1).to_vec())?;
        Ok(self.project(&last).into_vec())
    }

    /// Greedy decoding. Returns the prompt followed by up to
    /// `max_new_tokens` generated tokens; an emitted EOS ends the sequence
    /// and is kept.
    pub fn generate(&self, prompt: &[Token], max_new_tokens: usize) -> Result<Vec<Token>> {
        self.decode_greedy(prompt, max_new_tokens, true)
    }

    /// Greedy decoding of exactly `budget` tokens (or up to the length
    /// limit), ignoring EOS. Used for latency measurement.
    pub fn generate_fixed(&self, prompt: &[Token], budget: usize) -> Result<Vec<Token>> {
        self.decode_greedy(prompt, budget, false)
    }

    fn decode_greedy(&self, prompt: &[Token], max_new: usize, stop_at_eos: bool) -> Result<Vec<Token>> {
        if prompt.is_empty() {
            return Err(Error::Degenerate("generation needs a nonempty prompt".into()));
        }
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return Ok(out);
        }
        let mut state = self.decode_state();
        let mut logits = self.next_logits(&mut state, prompt)?;
        for step in 1..=max_new {
            let tok = argmax(&logits) as Token;
            out.push(tok);
            if (stop_at_eos && tok == EOS) || step == max_new || state.len() >= self.config.max_seq_len {
                break;
            }
            logits = self.next_logits(&mut state, &[tok])?;
        }
        Ok(out)
    }

    /// Input of every projection for `tokens`, in [`TinyLM::mole_layers`]
    /// order.
    pub fn projection_inputs(&self, tokens: &[Token]) -> Result<Vec<Tensor2D>> {
        let mut rec = Vec::with_capacity(6 * self.blocks.len());
        self.advance(&mut self.decode_state(), tokens, Some(&mut rec))?;
        Ok(rec)
    }
}
