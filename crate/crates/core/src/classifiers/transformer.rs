//! Transformer encoder with a linear classification head.
//!
//! Post-norm encoder blocks (self-attention, residual, LayerNorm, GELU
//! feed-forward, residual, LayerNorm) over token plus learned position
//! embeddings. The head maps the final start-token state to two logits and is
//! trained with cross-entropy. Gradients are derived by hand.
//!
//! Padding only occupies the tail of a [`TokenSequence`] and padded keys are
//! masked out of attention, so padded positions never influence real ones.
//! The forward pass therefore runs on the unpadded prefix only, which is
//! exactly equivalent to the masked computation over the full length.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{check_both_classes, Prediction};
use crate::annotation::Class;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, standard_normal, StageRng};
use crate::text_prep::TokenSequence;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
}

impl TransformerConfig {
    /// Two layers, 64 hidden units, two heads.
    pub fn toy(vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            hidden: 64,
            heads: 2,
            ff_dim: 256,
            vocab_size,
            max_len: crate::text_prep::DEFAULT_MAX_LEN,
            pretrained_weights: None,
        }
    }

    /// The base-size encoder (12 layers, 768 hidden, 12 heads).
    pub fn base(vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ff_dim: 3072,
            vocab_size,
            max_len: 512,
            pretrained_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < 4 || self.max_len < 2 {
            return Err(Error::Config("vocabulary or max_len too small".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Missing fields take their defaults when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train only the classification head.
    pub freeze_encoder: bool,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            batch_size: 16,
            learning_rate: 5e-5,
            epochs: 2,
            epsilon: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.epochs == 0
            || self.learning_rate <= 0.0
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("hyperparameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
}

/// All trainable tensors. Dense weights are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    emb_ln_g: Array1<f64>,
    emb_ln_b: Array1<f64>,
    layers: Vec<LayerParams>,
    cls_w: Array2<f64>,
    cls_b: Array1<f64>,
}

/// One named tensor view; `role` decides weight decay and freezing.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn randn2(rng: &mut StageRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || INIT_STD * standard_normal(rng))
}

impl Params {
    fn init(cfg: &TransformerConfig, seed: u64) -> Params {
        let mut rng = rng_from_seed(derive_seed(seed, "transformer-init"));
        let h = cfg.hidden;
        let f = cfg.ff_dim;
        let zeros = |n| Array1::<f64>::zeros(n);
        let ones = |n| Array1::<f64>::ones(n);
        let tok_emb = randn2(&mut rng, cfg.vocab_size, h);
        let pos_emb = randn2(&mut rng, cfg.max_len, h);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: randn2(&mut rng, h, h),
                bq: zeros(h),
                wk: randn2(&mut rng, h, h),
                bk: zeros(h),
                wv: randn2(&mut rng, h, h),
                bv: zeros(h),
                wo: randn2(&mut rng, h, h),
                bo: zeros(h),
                ln1_g: ones(h),
                ln1_b: zeros(h),
                w1: randn2(&mut rng, h, f),
                b1: zeros(f),
                w2: randn2(&mut rng, f, h),
                b2: zeros(h),
                ln2_g: ones(h),
                ln2_b: zeros(h),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            emb_ln_g: ones(h),
            emb_ln_b: zeros(h),
            layers,
            cls_w: randn2(&mut rng, h, 2),
            cls_b: zeros(2),
        }
    }

    fn zeros_like(&self) -> Params {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Params {
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            emb_ln_g: z1(&self.emb_ln_g),
            emb_ln_b: z1(&self.emb_ln_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z2(&l.wq),
                    bq: z1(&l.bq),
                    wk: z2(&l.wk),
                    bk: z1(&l.bk),
                    wv: z2(&l.wv),
                    bv: z1(&l.bv),
                    wo: z2(&l.wo),
                    bo: z1(&l.bo),
                    ln1_g: z1(&l.ln1_g),
                    ln1_b: z1(&l.ln1_b),
                    w1: z2(&l.w1),
                    b1: z1(&l.b1),
                    w2: z2(&l.w2),
                    b2: z1(&l.b2),
                    ln2_g: z1(&l.ln2_g),
                    ln2_b: z1(&l.ln2_b),
                })
                .collect(),
            cls_w: z2(&self.cls_w),
            cls_b: z1(&self.cls_b),
        }
    }

    /// Tensors in a fixed order, named after the usual BERT checkpoint keys.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn t2<'a>(name: String, a: &'a Array2<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn t1<'a>(name: String, a: &'a Array1<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![
            t2("embeddings.word_embeddings.weight".into(), &self.tok_emb),
            t2(
                "embeddings.position_embeddings.weight".into(),
                &self.pos_emb,
            ),
            t1("embeddings.LayerNorm.weight".into(), &self.emb_ln_g),
            t1("embeddings.LayerNorm.bias".into(), &self.emb_ln_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            out.extend([
                t2(format!("{p}.attention.self.query.weight"), &l.wq),
                t1(format!("{p}.attention.self.query.bias"), &l.bq),
                t2(format!("{p}.attention.self.key.weight"), &l.wk),
                t1(format!("{p}.attention.self.key.bias"), &l.bk),
                t2(format!("{p}.attention.self.value.weight"), &l.wv),
                t1(format!("{p}.attention.self.value.bias"), &l.bv),
                t2(format!("{p}.attention.output.dense.weight"), &l.wo),
                t1(format!("{p}.attention.output.dense.bias"), &l.bo),
                t1(format!("{p}.attention.output.LayerNorm.weight"), &l.ln1_g),
                t1(format!("{p}.attention.output.LayerNorm.bias"), &l.ln1_b),
                t2(format!("{p}.intermediate.dense.weight"), &l.w1),
                t1(format!("{p}.intermediate.dense.bias"), &l.b1),
                t2(format!("{p}.output.dense.weight"), &l.w2),
                t1(format!("{p}.output.dense.bias"), &l.b2),
                t1(format!("{p}.output.LayerNorm.weight"), &l.ln2_g),
                t1(format!("{p}.output.LayerNorm.bias"), &l.ln2_b),
            ]);
        }
        out.push(t2("classifier.weight".into(), &self.cls_w));
        out.push(t1("classifier.bias".into(), &self.cls_b));
        out
    }

    /// Mutable slices in the same order as [`Params::tensors`].
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<&mut [f64]> = vec![
            m2(&mut self.tok_emb),
            m2(&mut self.pos_emb),
            m1(&mut self.emb_ln_g),
            m1(&mut self.emb_ln_b),
        ];
        for l in &mut self.layers {
            out.push(m2(&mut l.wq));
            out.push(m1(&mut l.bq));
            out.push(m2(&mut l.wk));
            out.push(m1(&mut l.bk));
            out.push(m2(&mut l.wv));
            out.push(m1(&mut l.bv));
            out.push(m2(&mut l.wo));
            out.push(m1(&mut l.bo));
            out.push(m1(&mut l.ln1_g));
            out.push(m1(&mut l.ln1_b));
            out.push(m2(&mut l.w1));
            out.push(m1(&mut l.b1));
            out.push(m2(&mut l.w2));
            out.push(m1(&mut l.b2));
            out.push(m1(&mut l.ln2_g));
            out.push(m1(&mut l.ln2_b));
        }
        out.push(m2(&mut self.cls_w));
        out.push(m1(&mut self.cls_b));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Per-entry (decay, frozen_when_encoder_frozen) masks in flat order.
    fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        let mut decay = Vec::new();
        let mut encoder = Vec::new();
        for t in self.tensors() {
            let no_decay = t.name.ends_with(".bias") || t.name.contains("LayerNorm");
            let is_encoder = !t.name.starts_with("classifier.");
            decay.extend(std::iter::repeat_n(!no_decay, t.data.len()));
            encoder.extend(std::iter::repeat_n(is_encoder, t.data.len()));
        }
        (decay, encoder)
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.ncols() as f64;
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dxh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum = dxh.sum();
        let sum_xh = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
        let inv = cache.inv_std[r];
        for c in 0..dy.ncols() {
            dx[[r, c]] = inv / n * (n * dxh[c] - sum - xh[c] * sum_xh);
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let th = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LayerNormCache,
    x1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LayerNormCache,
}

struct ForwardCache {
    ids: Vec<usize>,
    emb_ln: LayerNormCache,
    layers: Vec<LayerCache>,
    cls: Array1<f64>,
    logits: [f64; 2],
}

/// Softmax over the two logits.
fn two_way_softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean cross-entropy per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerClassifier {
    pub config: TransformerConfig,
    pub hyperparams: TrainingHyperparams,
    pub log: TrainingLog,
    params: Params,
}

impl TransformerClassifier {
    pub fn new(
        config: TransformerConfig,
        hyperparams: TrainingHyperparams,
    ) -> Result<TransformerClassifier> {
        config.validate()?;
        hyperparams.validate()?;
        let mut params = Params::init(&config, hyperparams.seed);
        if let Some(path) = &config.pretrained_weights {
            load_pretrained(&mut params, &config, path)?;
        }
        Ok(TransformerClassifier {
            config,
            hyperparams,
            log: TrainingLog::default(),
            params,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        self.params.set_flat(flat);
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() != self.config.max_len || seq.attention_mask.len() != self.config.max_len {
            return Err(Error::BadInput(format!(
                "sequence length {} does not match max_len {}",
                seq.ids.len(),
                self.config.max_len
            )));
        }
        if seq.real_len() == 0 {
            return Err(Error::BadInput("sequence has no unmasked positions".into()));
        }
        if let Some(&bad) = seq
            .ids
            .iter()
            .find(|&&i| i as usize >= self.config.vocab_size)
        {
            return Err(Error::BadInput(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        Ok(())
    }

    fn forward(&self, seq: &TokenSequence) -> ForwardCache {
        let p = &self.params;
        let cfg = &self.config;
        let len = seq.real_len();
        let ids: Vec<usize> = seq.ids[..len].iter().map(|&i| i as usize).collect();
        let mut emb = Array2::zeros((len, cfg.hidden));
        for (r, &id) in ids.iter().enumerate() {
            let row = &p.tok_emb.row(id) + &p.pos_emb.row(r);
            emb.row_mut(r).assign(&row);
        }
        let (mut x, emb_ln) = layer_norm(&emb, &p.emb_ln_g, &p.emb_ln_b);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &p.layers {
            let q = add_bias(x.dot(&lp.wq), &lp.bq);
            let k = add_bias(x.dot(&lp.wk), &lp.bk);
            let v = add_bias(x.dot(&lp.wv), &lp.bv);
            let mut ctx = Array2::zeros((len, cfg.hidden));
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let attn_out = add_bias(ctx.dot(&lp.wo), &lp.bo);
            let (x1, ln1) = layer_norm(&(&x + &attn_out), &lp.ln1_g, &lp.ln1_b);
            let ff_pre = add_bias(x1.dot(&lp.w1), &lp.b1);
            let ff_act = ff_pre.mapv(gelu);
            let ff_out = add_bias(ff_act.dot(&lp.w2), &lp.b2);
            let (x2, ln2) = layer_norm(&(&x1 + &ff_out), &lp.ln2_g, &lp.ln2_b);
            layers.push(LayerCache {
                x_in: x,
                q,
                k,
                v,
                probs,
                ctx,
                ln1,
                x1,
                ff_pre,
                ff_act,
                ln2,
            });
            x = x2;
        }
        let cls = x.row(0).to_owned();
        let l = cls.dot(&p.cls_w) + &p.cls_b;
        ForwardCache {
            ids,
            emb_ln,
            layers,
            cls,
            logits: [l[0], l[1]],
        }
    }

    /// Accumulates `weight * d(cross_entropy)/d(params)` into `grads` and
    /// returns the cross-entropy of this item.
    fn backward(&self, cache: &ForwardCache, label: Class, weight: f64, grads: &mut Params) -> f64 {
        let p = &self.params;
        let cfg = &self.config;
        let probs = two_way_softmax(cache.logits);
        let y = usize::from(label.is_target());
        let loss = -(probs[y].max(f64::MIN_POSITIVE)).ln();
        let mut dlogits = Array1::from(vec![probs[0], probs[1]]);
        dlogits[y] -= 1.0;
        dlogits *= weight;

        // head
        for i in 0..cfg.hidden {
            for j in 0..2 {
                grads.cls_w[[i, j]] += cache.cls[i] * dlogits[j];
            }
        }
        grads.cls_b += &dlogits;
        let len = cache.ids.len();
        let mut dx = Array2::zeros((len, cfg.hidden));
        dx.row_mut(0).assign(&p.cls_w.dot(&dlogits));

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let lg = &mut grads.layers[li];

            let (dh2, dg, db) = layer_norm_backward(&dx, &lc.ln2, &lp.ln2_g);
            lg.ln2_g += &dg;
            lg.ln2_b += &db;
            let mut dx1 = dh2.clone();
            lg.w2 += &lc.ff_act.t().dot(&dh2);
            lg.b2 += &dh2.sum_axis(Axis(0));
            let dff_act = dh2.dot(&lp.w2.t());
            let dff_pre = &dff_act * &lc.ff_pre.mapv(gelu_grad);
            lg.w1 += &lc.x1.t().dot(&dff_pre);
            lg.b1 += &dff_pre.sum_axis(Axis(0));
            dx1 += &dff_pre.dot(&lp.w1.t());

            let (dh1, dg, db) = layer_norm_backward(&dx1, &lc.ln1, &lp.ln1_g);
            lg.ln1_g += &dg;
            lg.ln1_b += &db;
            let mut dx_in = dh1.clone();
            lg.wo += &lc.ctx.t().dot(&dh1);
            lg.bo += &dh1.sum_axis(Axis(0));
            let dctx = dh1.dot(&lp.wo.t());

            let mut dq = Array2::zeros((len, cfg.hidden));
            let mut dk = Array2::zeros((len, cfg.hidden));
            let mut dv = Array2::zeros((len, cfg.hidden));
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &lc.probs[h];
                let dctx_h = dctx.slice(cols);
                let da = dctx_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
                let mut ds = Array2::zeros(a.raw_dim());
                for r in 0..len {
                    let dot: f64 = da
                        .row(r)
                        .iter()
                        .zip(a.row(r).iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    for c in 0..len {
                        ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            lg.wq += &lc.x_in.t().dot(&dq);
            lg.bq += &dq.sum_axis(Axis(0));
            lg.wk += &lc.x_in.t().dot(&dk);
            lg.bk += &dk.sum_axis(Axis(0));
            lg.wv += &lc.x_in.t().dot(&dv);
            lg.bv += &dv.sum_axis(Axis(0));
            dx_in += &dq.dot(&lp.wq.t());
            dx_in += &dk.dot(&lp.wk.t());
            dx_in += &dv.dot(&lp.wv.t());
            dx = dx_in;
        }

        let (demb, dg, db) = layer_norm_backward(&dx, &cache.emb_ln, &p.emb_ln_g);
        grads.emb_ln_g += &dg;
        grads.emb_ln_b += &db;
        for (r, &id) in cache.ids.iter().enumerate() {
            let row = demb.row(r);
            let mut t = grads.tok_emb.row_mut(id);
            t += &row;
            let mut pe = grads.pos_emb.row_mut(r);
            pe += &row;
        }
        loss
    }

    /// Mean cross-entropy over the batch and its gradient, flattened in the
    /// order of [`Params::tensors`].
    pub fn loss_and_grad(
        &self,
        seqs: &[TokenSequence],
        labels: &[Class],
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self.batch_loss_and_grad(seqs, labels)?;
        Ok((loss, grads.to_flat()))
    }

    fn batch_loss_and_grad(
        &self,
        seqs: &[TokenSequence],
        labels: &[Class],
    ) -> Result<(f64, Params)> {
        if seqs.len() != labels.len() || seqs.is_empty() {
            return Err(Error::BadInput(
                "sequence and label counts differ or are empty".into(),
            ));
        }
        let mut grads = self.params.zeros_like();
        let w = 1.0 / seqs.len() as f64;
        let mut loss = 0.0;
        for (seq, &label) in seqs.iter().zip(labels) {
            self.check_sequence(seq)?;
            let cache = self.forward(seq);
            loss += w * self.backward(&cache, label, w, &mut grads);
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, seqs: &[TokenSequence], labels: &[Class]) -> Result<f64> {
        let mut total = 0.0;
        for (seq, &label) in seqs.iter().zip(labels) {
            self.check_sequence(seq)?;
            let probs = two_way_softmax(self.forward(seq).logits);
            total -= probs[usize::from(label.is_target())]
                .max(f64::MIN_POSITIVE)
                .ln();
        }
        Ok(total / seqs.len().max(1) as f64)
    }

    pub fn predict(&self, items: &[TokenSequence]) -> Result<Vec<Prediction>> {
        items
            .iter()
            .map(|seq| {
                self.check_sequence(seq)?;
                Ok(Prediction::from_score(
                    two_way_softmax(self.forward(seq).logits)[1],
                ))
            })
            .collect()
    }

    /// Attention probabilities of every layer and head for one sequence,
    /// indexed `[layer][head]`, each of shape `(len, len)`.
    pub fn attention_maps(&self, seq: &TokenSequence) -> Result<Vec<Vec<Array2<f64>>>> {
        self.check_sequence(seq)?;
        Ok(self
            .forward(seq)
            .layers
            .into_iter()
            .map(|l| l.probs)
            .collect())
    }

    /// Hidden states after every encoder layer for one sequence.
    pub fn hidden_states(&self, seq: &TokenSequence) -> Result<Vec<Array2<f64>>> {
        self.check_sequence(seq)?;
        let cache = self.forward(seq);
        let mut out: Vec<Array2<f64>> = cache
            .layers
            .iter()
            .skip(1)
            .map(|l| l.x_in.clone())
            .collect();
        // The last layer's output is not cached as an input; rebuild it from
        // the head input row plus the LayerNorm cache.
        let last = cache.layers.last().expect("at least one layer");
        let lp = self.params.layers.last().expect("at least one layer");
        out.push(&last.ln2.xhat * &lp.ln2_g + &lp.ln2_b);
        Ok(out)
    }

    pub fn probabilities(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
        self.check_sequence(seq)?;
        Ok(two_way_softmax(self.forward(seq).logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, TensorJson> = self
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                (
                    t.name,
                    TensorJson {
                        shape: t.shape,
                        data: t.data.to_vec(),
                    },
                )
            })
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            layout: "in_out".into(),
            config: self.config.clone(),
            hyperparams: self.hyperparams.clone(),
            log: self.log.clone(),
            tensors,
        };
        let json =
            serde_json::to_vec(&ckpt).map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<TransformerClassifier> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::BadInput(format!(
                "{}: not a transformer checkpoint",
                path.display()
            )));
        }
        let mut config = ckpt.config;
        config.pretrained_weights = None;
        let mut model = TransformerClassifier::new(config, ckpt.hyperparams)?;
        model.log = ckpt.log;
        let mut flat = Vec::with_capacity(model.params.len());
        for t in model.params.tensors() {
            let stored = ckpt
                .tensors
                .get(&t.name)
                .ok_or_else(|| Error::BadInput(format!("checkpoint lacks tensor {}", t.name)))?;
            if stored.shape != t.shape {
                return Err(Error::BadInput(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, stored.shape, t.shape
                )));
            }
            flat.extend_from_slice(&stored.data);
        }
        model.params.set_flat(&flat);
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "pgrisk-transformer";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layout: String,
    config: TransformerConfig,
    hyperparams: TrainingHyperparams,
    log: TrainingLog,
    tensors: BTreeMap<String, TensorJson>,
}

/// Loads encoder weights from a JSON tensor map (`name -> {shape, data}`)
/// using BERT checkpoint names, with or without a leading `bert.` prefix.
///
/// Dense weights are expected in `[out, in]` layout and are transposed.
/// `embeddings.token_type_embeddings.weight` row 0, when present, is folded
/// into the position embeddings since every token has segment 0. The pooler
/// and any classifier tensors are ignored; the head stays freshly
/// initialized. Embedding tables may be larger than the configured
/// vocabulary or length, in which case the leading rows are used.
pub fn load_pretrained(params: &mut Params, config: &TransformerConfig, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.display().to_string(),
        },
        _ => Error::io(path.display().to_string(), e),
    })?;
    let raw: BTreeMap<String, TensorJson> =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    let tensors: BTreeMap<String, TensorJson> = raw
        .into_iter()
        .map(|(k, v)| (k.strip_prefix("bert.").map(String::from).unwrap_or(k), v))
        .collect();
    let names: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let token_type = tensors.get("embeddings.token_type_embeddings.weight");
    let mut slices = params.slices_mut();
    for ((name, shape), slot) in names.iter().zip(slices.iter_mut()) {
        if name.starts_with("classifier.") {
            continue;
        }
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::BadInput(format!("pretrained weights lack {name}")))?;
        let is_embedding = name.starts_with("embeddings.") && shape.len() == 2;
        let data: Vec<f64> = if is_embedding {
            if t.shape.len() != 2 || t.shape[1] != shape[1] || t.shape[0] < shape[0] {
                return Err(Error::BadInput(format!(
                    "{name}: shape {:?} incompatible with {:?}",
                    t.shape, shape
                )));
            }
            t.data[..shape[0] * shape[1]].to_vec()
        } else if shape.len() == 2 {
            if t.shape != [shape[1], shape[0]] {
                return Err(Error::BadInput(format!(
                    "{name}: expected [out, in] = [{}, {}], got {:?}",
                    shape[1], shape[0], t.shape
                )));
            }
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = vec![0.0; rows * cols];
            for o in 0..cols {
                for i in 0..rows {
                    out[i * cols + o] = t.data[o * rows + i];
                }
            }
            out
        } else {
            if t.shape != *shape {
                return Err(Error::BadInput(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            t.data.clone()
        };
        slot.copy_from_slice(&data);
    }
    drop(slices);
    if let Some(tt) = token_type {
        if tt.shape.len() != 2 || tt.shape[1] != config.hidden {
            return Err(Error::BadInput(
                "token type embeddings have the wrong width".into(),
            ));
        }
        let row0 = ArrayView1::from(&tt.data[..config.hidden]);
        for mut r in params.pos_emb.rows_mut() {
            r += &row0;
        }
    }
    Ok(())
}

/// Trains all weights (or only the head with `freeze_encoder`) with AdamW on
/// shuffled mini-batches. Items are put into a canonical order before the
/// seeded shuffle, so the result does not depend on the input order.
pub fn train_transformer(
    sequences: &[TokenSequence],
    labels: &[Class],
    config: &TransformerConfig,
    hp: &TrainingHyperparams,
) -> Result<TransformerClassifier> {
    if sequences.len() != labels.len() {
        return Err(Error::BadInput(format!(
            "{} sequences but {} labels",
            sequences.len(),
            labels.len()
        )));
    }
    check_both_classes(labels)?;
    let mut model = TransformerClassifier::new(config.clone(), hp.clone())?;
    for seq in sequences {
        model.check_sequence(seq)?;
    }
    let mut canonical: Vec<usize> = (0..sequences.len()).collect();
    canonical.sort_by(|&a, &b| {
        (&sequences[a].ids, &sequences[a].attention_mask, labels[a]).cmp(&(
            &sequences[b].ids,
            &sequences[b].attention_mask,
            labels[b],
        ))
    });
    let (decay, encoder) = model.params.masks();
    let frozen: Vec<bool> = encoder.iter().map(|&e| e && hp.freeze_encoder).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: hp.learning_rate,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
            weight_decay: hp.weight_decay,
        },
        model.params.len(),
    );
    let mut rng = rng_from_seed(derive_seed(hp.seed, "transformer-shuffle"));
    for _ in 0..hp.epochs {
        let mut order = canonical.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let seqs: Vec<TokenSequence> = batch.iter().map(|&i| sequences[i].clone()).collect();
            let ys: Vec<Class> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.batch_loss_and_grad(&seqs, &ys)?;
            epoch_loss += loss * batch.len() as f64;
            let mut flat = model.params.to_flat();
            opt.step(&mut flat, &grads.to_flat(), &decay, &frozen);
            model.params.set_flat(&flat);
        }
        model
            .log
            .epoch_losses
            .push(epoch_loss / sequences.len() as f64);
    }
    Ok(model)
}
