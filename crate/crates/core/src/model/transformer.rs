//! A small pre-norm GPT-style transformer with hand-written forward and
//! backward passes, used as the offline reference backbone.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::history::{HistoryState, KvLayer, KvTensors, Perturbation};
use super::{softmax, softmax_backward, LanguageModel, LossGradient, ProbabilityLoss, StepOutput};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenizerVocabulary};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ReferenceLmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            context: 64,
            vocab_size: 4000,
            seed: 0,
        }
    }
}

impl ReferenceLmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("context", self.context),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "dim",
                format!("{} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn hidden(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    w_qkv: Array2<f64>,
    b_qkv: Array1<f64>,
    w_o: Array2<f64>,
    b_o: Array1<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w_fc: Array2<f64>,
    b_fc: Array1<f64>,
    w_proj: Array2<f64>,
    b_proj: Array1<f64>,
}

/// All trainable tensors. Also used for their gradients and optimizer moments.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    blocks: Vec<Block>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_head: Array2<f64>,
}

impl Params {
    pub(crate) fn zeros(cfg: &ReferenceLmConfig) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden();
        let block = Block {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc: Array2::zeros((d, h)),
            b_fc: Array1::zeros(h),
            w_proj: Array2::zeros((h, d)),
            b_proj: Array1::zeros(d),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.context, d)),
            blocks: vec![block; cfg.layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_head: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    pub(crate) fn init<R: Rng>(cfg: &ReferenceLmConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.layers as f64).sqrt();
        let mut fill = |a: &mut [f64], s: f64| {
            let n = Normal::new(0.0, s).expect("positive std");
            a.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        fill(p.tok_emb.as_slice_mut().unwrap(), std);
        fill(p.pos_emb.as_slice_mut().unwrap(), std);
        for b in &mut p.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            fill(b.w_qkv.as_slice_mut().unwrap(), std);
            fill(b.w_o.as_slice_mut().unwrap(), resid_std);
            fill(b.w_fc.as_slice_mut().unwrap(), std);
            fill(b.w_proj.as_slice_mut().unwrap(), resid_std);
        }
        p.lnf_g.fill(1.0);
        fill(p.w_head.as_slice_mut().unwrap(), std);
        p
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice().unwrap(), self.pos_emb.as_slice().unwrap()];
        for b in &self.blocks {
            out.extend([
                b.ln1_g.as_slice().unwrap(),
                b.ln1_b.as_slice().unwrap(),
                b.w_qkv.as_slice().unwrap(),
                b.b_qkv.as_slice().unwrap(),
                b.w_o.as_slice().unwrap(),
                b.b_o.as_slice().unwrap(),
                b.ln2_g.as_slice().unwrap(),
                b.ln2_b.as_slice().unwrap(),
                b.w_fc.as_slice().unwrap(),
                b.b_fc.as_slice().unwrap(),
                b.w_proj.as_slice().unwrap(),
                b.b_proj.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.w_head.as_slice().unwrap(),
        ]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.ln1_g.as_slice_mut().unwrap(),
                b.ln1_b.as_slice_mut().unwrap(),
                b.w_qkv.as_slice_mut().unwrap(),
                b.b_qkv.as_slice_mut().unwrap(),
                b.w_o.as_slice_mut().unwrap(),
                b.b_o.as_slice_mut().unwrap(),
                b.ln2_g.as_slice_mut().unwrap(),
                b.ln2_b.as_slice_mut().unwrap(),
                b.w_fc.as_slice_mut().unwrap(),
                b.b_fc.as_slice_mut().unwrap(),
                b.w_proj.as_slice_mut().unwrap(),
                b.b_proj.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.w_head.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub(crate) fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        rstd[i] = r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xh = cache.xhat.row(i);
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        let r = cache.rstd[i];
        row.zip_mut_with(&xh, |v, &x| *v = r * (*v - m1 - x * m2));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k_full: Array2<f64>,
    v_full: Array2<f64>,
    attn: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
}

/// Activations of one forward pass over a block of new tokens.
pub(crate) struct BlockCache {
    tokens: Vec<TokenId>,
    past: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    h_final: Array2<f64>,
}

pub(crate) struct BlockOutput {
    pub cache: BlockCache,
    pub logits: Array2<f64>,
    pub next_history: Option<HistoryState>,
}

/// Reference transformer with its vocabulary.
#[derive(Debug, Clone)]
pub struct ReferenceLm {
    config: ReferenceLmConfig,
    pub(crate) params: Params,
    vocab: TokenizerVocabulary,
    id: String,
}

impl ReferenceLm {
    /// Randomly initialized model over `vocab`; `config.vocab_size` is reset
    /// to the vocabulary size.
    pub fn new(mut config: ReferenceLmConfig, vocab: TokenizerVocabulary) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self::from_parts(config, params, vocab))
    }

    pub(crate) fn from_parts(config: ReferenceLmConfig, params: Params, vocab: TokenizerVocabulary) -> Self {
        let mut m = Self {
            config,
            params,
            vocab,
            id: String::new(),
        };
        m.refresh_id();
        m
    }

    pub(crate) fn refresh_id(&mut self) {
        // FNV-1a over the parameter bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params.tensors() {
            for x in t {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        let c = &self.config;
        self.id = format!("reference-l{}-d{}-v{}-{:08x}", c.layers, c.dim, c.vocab_size, h as u32);
    }

    pub fn config(&self) -> &ReferenceLmConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Makes every next-token distribution uniform by zeroing the output
    /// projection.
    pub fn zero_output_projection(&mut self) {
        self.params.w_head.fill(0.0);
        self.refresh_id();
    }

    /// Adds `N(0, std)` noise to every parameter, drawn from `seed`.
    pub fn jitter_parameters(&mut self, std: f64, seed: u64) -> Result<()> {
        let noise = Normal::new(0.0, std).map_err(|e| Error::config("std", e.to_string()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            t.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        self.refresh_id();
        Ok(())
    }

    fn check_step(&self, tokens: &[TokenId], history: &HistoryState) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        let kv = history.kv();
        if kv.num_layers() != self.config.layers || kv.width() != self.config.dim {
            return Err(Error::Shape(format!(
                "history has {} layers of width {}, model expects {} of width {}",
                kv.num_layers(),
                kv.width(),
                self.config.layers,
                self.config.dim
            )));
        }
        if history.len() + tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                length: history.len() + tokens.len(),
                capacity: self.config.context,
            });
        }
        Ok(())
    }

    pub(crate) fn forward_block(
        &self,
        tokens: &[TokenId],
        history: &HistoryState,
        build_history: bool,
    ) -> Result<BlockOutput> {
        self.check_step(tokens, history)?;
        let cfg = &self.config;
        let (d, t_new, past) = (cfg.dim, tokens.len(), history.len());
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;

        let mut x = Array2::zeros((t_new, d));
        for (i, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&p.tok_emb.row(tok as usize));
            row += &p.pos_emb.row(past + i);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        let mut new_rows: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
        for (l, blk) in p.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
            let qkv = a.dot(&blk.w_qkv) + &blk.b_qkv;
            let q = qkv.slice(s![.., 0..d]).to_owned();
            let k_new = qkv.slice(s![.., d..2 * d]);
            let v_new = qkv.slice(s![.., 2 * d..3 * d]);
            let cached = &history.kv().layers()[l];
            let k_past = ArrayView2::from_shape((past, d), &cached.keys).expect("history shape");
            let v_past = ArrayView2::from_shape((past, d), &cached.values).expect("history shape");
            let k_full = concatenate(Axis(0), &[k_past, k_new]).expect("key concat");
            let v_full = concatenate(Axis(0), &[v_past, v_new]).expect("value concat");
            if build_history {
                new_rows.push((k_new.to_owned(), v_new.to_owned()));
            }

            let mut att = Array2::zeros((t_new, d));
            let mut attn = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k_full.slice(cols).t());
                sc *= scale;
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    let visible = past + i + 1;
                    row.slice_mut(s![visible..]).fill(f64::NEG_INFINITY);
                    let max = row.slice(s![..visible]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                att.slice_mut(cols).assign(&sc.dot(&v_full.slice(cols)));
                attn.push(sc);
            }
            let x1 = &x + &(att.dot(&blk.w_o) + &blk.b_o);
            let (c, ln2) = layer_norm(&x1, &blk.ln2_g, &blk.ln2_b);
            let f = c.dot(&blk.w_fc) + &blk.b_fc;
            let g = f.mapv(gelu);
            x = &x1 + &(g.dot(&blk.w_proj) + &blk.b_proj);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k_full,
                v_full,
                attn,
                att,
                ln2,
                c,
                f,
                g,
            });
        }
        let (h_final, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        let logits = h_final.dot(&p.w_head);

        let next_history = build_history.then(|| {
            let mut kv = history.kv().clone();
            for i in 0..t_new {
                let rows: Vec<(&[f64], &[f64])> = new_rows
                    .iter()
                    .map(|(k, v)| {
                        (
                            k.row(i).to_slice().expect("contiguous row"),
                            v.row(i).to_slice().expect("contiguous row"),
                        )
                    })
                    .collect();
                kv.push_rows(&rows);
            }
            HistoryState::new(kv)
        });
        Ok(BlockOutput {
            cache: BlockCache {
                tokens: tokens.to_vec(),
                past,
                layers,
                lnf,
                h_final,
            },
            logits,
            next_history,
        })
    }

    /// Back-propagates `dlogits` through a cached forward pass. Returns the
    /// gradient with respect to the past history; parameter gradients are
    /// accumulated into `grads` when given.
    pub(crate) fn backward_block(
        &self,
        cache: &BlockCache,
        dlogits: &Array2<f64>,
        mut grads: Option<&mut Params>,
    ) -> KvTensors {
        let cfg = &self.config;
        let p = &self.params;
        let (d, past) = (cfg.dim, cache.past);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        if let Some(g) = grads.as_deref_mut() {
            g.w_head += &cache.h_final.t().dot(dlogits);
        }
        let dh_final = dlogits.dot(&p.w_head.t());
        let mut dx = layer_norm_backward(
            &dh_final,
            &p.lnf_g,
            &cache.lnf,
            grads.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
        );

        let mut past_layers = vec![
            KvLayer {
                keys: Vec::new(),
                values: Vec::new()
            };
            cfg.layers
        ];
        for l in (0..cfg.layers).rev() {
            let blk = &p.blocks[l];
            let lc = &cache.layers[l];
            let mut gb = grads.as_deref_mut().map(|g| &mut g.blocks[l]);

            // MLP branch.
            if let Some(gb) = gb.as_deref_mut() {
                gb.w_proj += &lc.g.t().dot(&dx);
                gb.b_proj += &dx.sum_axis(Axis(0));
            }
            let mut df = dx.dot(&blk.w_proj.t());
            df.zip_mut_with(&lc.f, |v, &f| *v *= gelu_grad(f));
            if let Some(gb) = gb.as_deref_mut() {
                gb.w_fc += &lc.c.t().dot(&df);
                gb.b_fc += &df.sum_axis(Axis(0));
            }
            let dc = df.dot(&blk.w_fc.t());
            let dx1 = &dx
                + &layer_norm_backward(
                    &dc,
                    &blk.ln2_g,
                    &lc.ln2,
                    gb.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
                );

            // Attention branch.
            if let Some(gb) = gb.as_deref_mut() {
                gb.w_o += &lc.att.t().dot(&dx1);
                gb.b_o += &dx1.sum_axis(Axis(0));
            }
            let datt = dx1.dot(&blk.w_o.t());
            let n = lc.k_full.nrows();
            let t_new = datt.nrows();
            let mut dq = Array2::zeros((t_new, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &lc.attn[h];
                let d_out = datt.slice(cols);
                dv.slice_mut(cols).assign(&a.t().dot(&d_out));
                let da = d_out.dot(&lc.v_full.slice(cols).t());
                let mut ds = a * &da;
                let row_sums = ds.sum_axis(Axis(1));
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let rs = row_sums[i];
                    row.zip_mut_with(&a.row(i), |v, &w| *v -= w * rs);
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k_full.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let dqkv = concatenate(
                Axis(1),
                &[dq.view(), dk.slice(s![past.., ..]), dv.slice(s![past.., ..])],
            )
            .expect("qkv gradient concat");
            if let Some(gb) = gb.as_deref_mut() {
                gb.w_qkv += &lc.a.t().dot(&dqkv);
                gb.b_qkv += &dqkv.sum_axis(Axis(0));
            }
            let da = dqkv.dot(&blk.w_qkv.t());
            dx = &dx1 + &layer_norm_backward(&da, &blk.ln1_g, &lc.ln1, gb.map(|g| (&mut g.ln1_g, &mut g.ln1_b)));

            past_layers[l] = KvLayer {
                keys: dk.slice(s![..past, ..]).iter().copied().collect(),
                values: dv.slice(s![..past, ..]).iter().copied().collect(),
            };
        }

        if let Some(g) = grads {
            for (i, &tok) in cache.tokens.iter().enumerate() {
                let row = dx.row(i);
                let mut e = g.tok_emb.row_mut(tok as usize);
                e += &row;
                let mut pe = g.pos_emb.row_mut(past + i);
                pe += &row;
            }
        }
        KvTensors::from_layers(d, past, past_layers).expect("gradient shape matches history")
    }
}

impl LanguageModel for ReferenceLm {
    fn vocabulary(&self) -> &TokenizerVocabulary {
        &self.vocab
    }

    fn context_len(&self) -> usize {
        self.config.context
    }

    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn empty_history(&self) -> HistoryState {
        HistoryState::empty(self.config.layers, self.config.dim)
    }

    fn forward(&self, token: TokenId, history: &HistoryState) -> Result<StepOutput> {
        let out = self.forward_block(&[token], history, true)?;
        Ok(StepOutput {
            output_embedding: out.cache.h_final.row(0).to_vec(),
            logits: out.logits.row(0).to_vec(),
            next_history: out.next_history.expect("history requested"),
        })
    }

    fn loss_and_gradient(
        &self,
        history: &HistoryState,
        perturbation: &Perturbation,
        token: TokenId,
        loss: &dyn ProbabilityLoss,
    ) -> Result<LossGradient> {
        let perturbed = history.perturbed(perturbation)?;
        let out = self.forward_block(&[token], &perturbed, false)?;
        let p = softmax(out.logits.row(0).as_slice().expect("contiguous logits"));
        let (value, grad_p) = loss.evaluate(&p)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "loss".into() });
        }
        if grad_p.len() != p.len() {
            return Err(Error::Shape(format!(
                "loss gradient has {} entries for {} probabilities",
                grad_p.len(),
                p.len()
            )));
        }
        let dz = softmax_backward(&p, &grad_p);
        let dlogits = Array2::from_shape_vec((1, dz.len()), dz).expect("row vector");
        let gradient = self.backward_block(&out.cache, &dlogits, None);
        if !gradient.all_finite() {
            return Err(Error::NonFinite {
                term: "history gradient".into(),
            });
        }
        Ok(LossGradient {
            value,
            probabilities: p,
            gradient,
        })
    }

    fn prefill(&self, tokens: &[TokenId], history: &HistoryState) -> Result<HistoryState> {
        if tokens.is_empty() {
            return Ok(history.clone());
        }
        Ok(self
            .forward_block(tokens, history, true)?
            .next_history
            .expect("history requested"))
    }
}
