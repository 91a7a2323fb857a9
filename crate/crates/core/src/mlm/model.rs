//! Post-norm transformer encoder with a masked-language-model head whose
//! decoder weights are the word-embedding table itself.
//!
//! The forward pass keeps every intermediate needed by the hand-written
//! backward pass. A batch is a list of variable-length sequences whose
//! tokens are stacked into one `(tokens, hidden)` matrix for the dense
//! layers; attention runs per sequence and head, so padding never enters
//! the computation.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn, NdFloat};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::ops::{
    cst, dense, dense_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax_backward, softmax_rows,
    NormCache,
};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<A> {
    /// Stored as (in, out).
    pub weight: Array2<A>,
    pub bias: Array1<A>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<A> {
    pub gamma: Array1<A>,
    pub beta: Array1<A>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<A> {
    pub query: Dense<A>,
    pub key: Dense<A>,
    pub value: Dense<A>,
    pub attn_output: Dense<A>,
    pub attn_norm: Norm<A>,
    pub ff_in: Dense<A>,
    pub ff_out: Dense<A>,
    pub ff_norm: Norm<A>,
}

/// All trainable tensors. There is no decoder weight matrix: the decoder
/// multiplies by `word_embeddings` transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<A> {
    pub word_embeddings: Array2<A>,
    pub position_embeddings: Array2<A>,
    pub embed_norm: Norm<A>,
    pub layers: Vec<EncoderLayer<A>>,
    pub head_transform: Dense<A>,
    pub head_norm: Norm<A>,
    pub decoder_bias: Array1<A>,
}

impl<A: NdFloat> Dense<A> {
    fn zeros(inp: usize, out: usize) -> Self {
        Dense {
            weight: Array2::zeros((inp, out)),
            bias: Array1::zeros(out),
        }
    }

    fn cast<B: NdFloat>(&self) -> Dense<B> {
        Dense {
            weight: self.weight.mapv(cast),
            bias: self.bias.mapv(cast),
        }
    }
}

impl<A: NdFloat> Norm<A> {
    fn zeros(n: usize) -> Self {
        Norm {
            gamma: Array1::zeros(n),
            beta: Array1::zeros(n),
        }
    }

    fn cast<B: NdFloat>(&self) -> Norm<B> {
        Norm {
            gamma: self.gamma.mapv(cast),
            beta: self.beta.mapv(cast),
        }
    }
}

fn cast<A: NdFloat, B: NdFloat>(x: A) -> B {
    B::from(x).expect("finite float cast")
}

impl<A: NdFloat> Params<A> {
    /// Zero tensors with the shapes implied by `config`; layer-norm gains
    /// are zero too, so this is a gradient buffer rather than a model.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, f) = (config.hidden, config.ff_size);
        let layer = || EncoderLayer {
            query: Dense::zeros(h, h),
            key: Dense::zeros(h, h),
            value: Dense::zeros(h, h),
            attn_output: Dense::zeros(h, h),
            attn_norm: Norm::zeros(h),
            ff_in: Dense::zeros(h, f),
            ff_out: Dense::zeros(f, h),
            ff_norm: Norm::zeros(h),
        };
        Params {
            word_embeddings: Array2::zeros((config.vocab_size, h)),
            position_embeddings: Array2::zeros((config.max_seq, h)),
            embed_norm: Norm::zeros(h),
            layers: (0..config.layers).map(|_| layer()).collect(),
            head_transform: Dense::zeros(h, h),
            head_norm: Norm::zeros(h),
            decoder_bias: Array1::zeros(config.vocab_size),
        }
    }

    /// Normal(0, 0.02) weights and embeddings, zero biases, identity norms.
    pub fn init(config: &ModelConfig, rng: &mut impl RngCore) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut p = Self::zeros(config);
        for (name, mut t) in p.tensors_mut() {
            if name.ends_with(".weight") {
                t.mapv_inplace(|_| cst(normal.sample(rng)));
            } else if name.ends_with(".gamma") {
                t.fill(A::one());
            }
        }
        p
    }

    pub fn cast<B: NdFloat>(&self) -> Params<B> {
        Params {
            word_embeddings: self.word_embeddings.mapv(cast),
            position_embeddings: self.position_embeddings.mapv(cast),
            embed_norm: self.embed_norm.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    query: l.query.cast(),
                    key: l.key.cast(),
                    value: l.value.cast(),
                    attn_output: l.attn_output.cast(),
                    attn_norm: l.attn_norm.cast(),
                    ff_in: l.ff_in.cast(),
                    ff_out: l.ff_out.cast(),
                    ff_norm: l.ff_norm.cast(),
                })
                .collect(),
            head_transform: self.head_transform.cast(),
            head_norm: self.head_norm.cast(),
            decoder_bias: self.decoder_bias.mapv(cast),
        }
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, A>)> {
        let mut out = vec![
            (
                "embeddings.word_embeddings.weight".to_owned(),
                self.word_embeddings.view().into_dyn(),
            ),
            (
                "embeddings.position_embeddings.weight".to_owned(),
                self.position_embeddings.view().into_dyn(),
            ),
            (
                "embeddings.layer_norm.gamma".to_owned(),
                self.embed_norm.gamma.view().into_dyn(),
            ),
            (
                "embeddings.layer_norm.beta".to_owned(),
                self.embed_norm.beta.view().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            let dense = [
                ("attention.query", &l.query),
                ("attention.key", &l.key),
                ("attention.value", &l.value),
                ("attention.output.dense", &l.attn_output),
            ];
            for (n, d) in dense {
                out.push((format!("{p}.{n}.weight"), d.weight.view().into_dyn()));
                out.push((format!("{p}.{n}.bias"), d.bias.view().into_dyn()));
            }
            out.push((
                format!("{p}.attention.output.layer_norm.gamma"),
                l.attn_norm.gamma.view().into_dyn(),
            ));
            out.push((
                format!("{p}.attention.output.layer_norm.beta"),
                l.attn_norm.beta.view().into_dyn(),
            ));
            for (n, d) in [("intermediate.dense", &l.ff_in), ("output.dense", &l.ff_out)] {
                out.push((format!("{p}.{n}.weight"), d.weight.view().into_dyn()));
                out.push((format!("{p}.{n}.bias"), d.bias.view().into_dyn()));
            }
            out.push((
                format!("{p}.output.layer_norm.gamma"),
                l.ff_norm.gamma.view().into_dyn(),
            ));
            out.push((format!("{p}.output.layer_norm.beta"), l.ff_norm.beta.view().into_dyn()));
        }
        out.push((
            "head.transform.dense.weight".to_owned(),
            self.head_transform.weight.view().into_dyn(),
        ));
        out.push((
            "head.transform.dense.bias".to_owned(),
            self.head_transform.bias.view().into_dyn(),
        ));
        out.push((
            "head.transform.layer_norm.gamma".to_owned(),
            self.head_norm.gamma.view().into_dyn(),
        ));
        out.push((
            "head.transform.layer_norm.beta".to_owned(),
            self.head_norm.beta.view().into_dyn(),
        ));
        out.push(("head.decoder.bias".to_owned(), self.decoder_bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, A>)> {
        let Params {
            word_embeddings,
            position_embeddings,
            embed_norm,
            layers,
            head_transform,
            head_norm,
            decoder_bias,
        } = self;
        let mut out = vec![
            (
                "embeddings.word_embeddings.weight".to_owned(),
                word_embeddings.view_mut().into_dyn(),
            ),
            (
                "embeddings.position_embeddings.weight".to_owned(),
                position_embeddings.view_mut().into_dyn(),
            ),
            (
                "embeddings.layer_norm.gamma".to_owned(),
                embed_norm.gamma.view_mut().into_dyn(),
            ),
            (
                "embeddings.layer_norm.beta".to_owned(),
                embed_norm.beta.view_mut().into_dyn(),
            ),
        ];
        for (i, l) in layers.iter_mut().enumerate() {
            let p = format!("encoder.layer.{i}");
            let EncoderLayer {
                query,
                key,
                value,
                attn_output,
                attn_norm,
                ff_in,
                ff_out,
                ff_norm,
            } = l;
            let dense = [
                ("attention.query", query),
                ("attention.key", key),
                ("attention.value", value),
                ("attention.output.dense", attn_output),
            ];
            for (n, d) in dense {
                out.push((format!("{p}.{n}.weight"), d.weight.view_mut().into_dyn()));
                out.push((format!("{p}.{n}.bias"), d.bias.view_mut().into_dyn()));
            }
            out.push((
                format!("{p}.attention.output.layer_norm.gamma"),
                attn_norm.gamma.view_mut().into_dyn(),
            ));
            out.push((
                format!("{p}.attention.output.layer_norm.beta"),
                attn_norm.beta.view_mut().into_dyn(),
            ));
            for (n, d) in [("intermediate.dense", ff_in), ("output.dense", ff_out)] {
                out.push((format!("{p}.{n}.weight"), d.weight.view_mut().into_dyn()));
                out.push((format!("{p}.{n}.bias"), d.bias.view_mut().into_dyn()));
            }
            out.push((
                format!("{p}.output.layer_norm.gamma"),
                ff_norm.gamma.view_mut().into_dyn(),
            ));
            out.push((
                format!("{p}.output.layer_norm.beta"),
                ff_norm.beta.view_mut().into_dyn(),
            ));
        }
        out.push((
            "head.transform.dense.weight".to_owned(),
            head_transform.weight.view_mut().into_dyn(),
        ));
        out.push((
            "head.transform.dense.bias".to_owned(),
            head_transform.bias.view_mut().into_dyn(),
        ));
        out.push((
            "head.transform.layer_norm.gamma".to_owned(),
            head_norm.gamma.view_mut().into_dyn(),
        ));
        out.push((
            "head.transform.layer_norm.beta".to_owned(),
            head_norm.beta.view_mut().into_dyn(),
        ));
        out.push(("head.decoder.bias".to_owned(), decoder_bias.view_mut().into_dyn()));
        out
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: &ModelConfig, mut named: HashMap<String, ArrayD<A>>) -> Result<Self> {
        let mut p = Self::zeros(config);
        for (name, mut slot) in p.tensors_mut() {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.assign(&t);
        }
        if let Some(extra) = named.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(p)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: A) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn sum_of_squares(&self) -> A {
        self.tensors()
            .iter()
            .map(|(_, t)| t.fold(A::zero(), |acc, &v| acc + v * v))
            .fold(A::zero(), |a, b| a + b)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

struct LayerTrace<A> {
    input: Array2<A>,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    probs: Vec<Array2<A>>,
    ctx: Array2<A>,
    attn_drop: Option<Array2<A>>,
    norm1: NormCache<A>,
    x1: Array2<A>,
    ff_pre: Array2<A>,
    ff_act: Array2<A>,
    ff_drop: Option<Array2<A>>,
    norm2: NormCache<A>,
}

struct Trace<A> {
    /// (first row, rows, attendable keys) per sequence.
    spans: Vec<(usize, usize, usize)>,
    ids: Vec<usize>,
    positions: Vec<usize>,
    embed_norm: NormCache<A>,
    embed_drop: Option<Array2<A>>,
    layers: Vec<LayerTrace<A>>,
    hidden: Array2<A>,
}

struct HeadTrace<A> {
    input: Array2<A>,
    pre: Array2<A>,
    norm: NormCache<A>,
    out: Array2<A>,
}

/// One training sequence: active ids (no padding) and the prediction target
/// at each position, if selected.
#[derive(Debug, Clone, Copy)]
pub struct TrainSeq<'a> {
    pub ids: &'a [TokenId],
    pub targets: &'a [Option<TokenId>],
}

fn dropout_mask<A: NdFloat>(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<A> {
    let keep = cst::<A>(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { A::zero() } else { keep })
}

/// Encoder plus masked-LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmModel<A> {
    pub config: ModelConfig,
    pub params: Params<A>,
}

impl<A: NdFloat> MlmModel<A> {
    pub fn new(config: ModelConfig, params: Params<A>) -> Self {
        MlmModel { config, params }
    }

    /// The decoder weight matrix, which is the word-embedding table.
    pub fn decoder_weight(&self) -> &Array2<A> {
        &self.params.word_embeddings
    }

    pub fn cast<B: NdFloat>(&self) -> MlmModel<B> {
        MlmModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Model("empty sequence".into()));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::Model(format!(
                "sequence of {} tokens exceeds max_seq {}",
                ids.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Model(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Each sequence is paired with the number of leading positions that may
    /// be attended to; later positions are padding.
    fn encode(&self, seqs: &[(&[TokenId], usize)], mut dropout: Option<&mut dyn RngCore>) -> Trace<A> {
        let cfg = &self.config;
        let p = &self.params;
        let (h, heads, hd) = (cfg.hidden, cfg.heads, cfg.head_dim());
        let drop_p = if dropout.is_some() { cfg.dropout } else { 0.0 };
        let mut spans = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for &(seq, keys) in seqs {
            spans.push((ids.len(), seq.len(), keys.min(seq.len())));
            for (pos, &id) in seq.iter().enumerate() {
                ids.push(id as usize);
                positions.push(pos);
            }
        }
        let n = ids.len();
        let mut x = Array2::zeros((n, h));
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&p.word_embeddings.row(ids[r]));
            row += &p.position_embeddings.row(positions[r]);
        }
        let (mut x, embed_norm) = layer_norm(&x.view(), &p.embed_norm.gamma, &p.embed_norm.beta);
        let mut mask = |shape| -> Option<Array2<A>> {
            match dropout.as_deref_mut() {
                Some(rng) if drop_p > 0.0 => Some(dropout_mask(shape, drop_p, rng)),
                _ => None,
            }
        };
        let embed_drop = mask((n, h));
        if let Some(m) = &embed_drop {
            x *= m;
        }

        let scale = cst::<A>(1.0 / (hd as f64).sqrt());
        let mut layers = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let input = x;
            let q = dense(&input.view(), &layer.query.weight, &layer.query.bias);
            let k = dense(&input.view(), &layer.key.weight, &layer.key.bias);
            let v = dense(&input.view(), &layer.value.weight, &layer.value.bias);
            let mut ctx = Array2::zeros((n, h));
            let mut probs = Vec::with_capacity(spans.len() * heads);
            for &(start, len, keys) in &spans {
                for head in 0..heads {
                    let (rows, cols) = (start..start + len, head * hd..(head + 1) * hd);
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![start..start + keys, cols.clone()]);
                    let vh = v.slice(s![start..start + keys, cols.clone()]);
                    let mut pr = qh.dot(&kh.t());
                    pr *= scale;
                    softmax_rows(&mut pr);
                    ctx.slice_mut(s![rows, cols]).assign(&pr.dot(&vh));
                    probs.push(pr);
                }
            }
            let mut a = dense(&ctx.view(), &layer.attn_output.weight, &layer.attn_output.bias);
            let attn_drop = mask((n, h));
            if let Some(m) = &attn_drop {
                a *= m;
            }
            a += &input;
            let (x1, norm1) = layer_norm(&a.view(), &layer.attn_norm.gamma, &layer.attn_norm.beta);
            let ff_pre = dense(&x1.view(), &layer.ff_in.weight, &layer.ff_in.bias);
            let ff_act = gelu(&ff_pre);
            let mut f = dense(&ff_act.view(), &layer.ff_out.weight, &layer.ff_out.bias);
            let ff_drop = mask((n, h));
            if let Some(m) = &ff_drop {
                f *= m;
            }
            f += &x1;
            let (out, norm2) = layer_norm(&f.view(), &layer.ff_norm.gamma, &layer.ff_norm.beta);
            x = out;
            layers.push(LayerTrace {
                input,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                norm1,
                x1,
                ff_pre,
                ff_act,
                ff_drop,
                norm2,
            });
        }
        Trace {
            spans,
            ids,
            positions,
            embed_norm,
            embed_drop,
            layers,
            hidden: x,
        }
    }

    fn head(&self, hidden: Array2<A>) -> HeadTrace<A> {
        let p = &self.params;
        let pre = dense(&hidden.view(), &p.head_transform.weight, &p.head_transform.bias);
        let act = gelu(&pre);
        let (out, norm) = layer_norm(&act.view(), &p.head_norm.gamma, &p.head_norm.beta);
        HeadTrace {
            input: hidden,
            pre,
            norm,
            out,
        }
    }

    /// `hidden · Eᵀ + bias` for each row of `hidden`.
    pub fn decode(&self, hidden: &ArrayView2<A>) -> Array2<A> {
        let mut logits = hidden.dot(&self.params.word_embeddings.t());
        logits += &self.params.decoder_bias;
        logits
    }

    /// Final encoder states for one sequence, one row per position.
    pub fn encoder_states(&self, ids: &[TokenId]) -> Result<Array2<A>> {
        self.check_ids(ids)?;
        Ok(self.encode(&[(ids, ids.len())], None).hidden)
    }

    /// Head-transformed states: the vectors the decoder multiplies with the
    /// embedding table.
    pub fn transformed_states(&self, ids: &[TokenId]) -> Result<Array2<A>> {
        self.check_ids(ids)?;
        Ok(self.head(self.encode(&[(ids, ids.len())], None).hidden).out)
    }

    /// Head-transformed state at a single position.
    pub fn hidden_at(&self, ids: &[TokenId], position: usize) -> Result<Array1<A>> {
        if position >= ids.len() {
            return Err(Error::Model(format!(
                "position {position} outside sequence of {}",
                ids.len()
            )));
        }
        self.check_ids(ids)?;
        let trace = self.encode(&[(ids, ids.len())], None);
        let row = trace.hidden.slice(s![position..position + 1, ..]).to_owned();
        Ok(self.head(row).out.row(0).to_owned())
    }

    /// Logits over the full vocabulary at every position of `ids` (active
    /// tokens only, no padding).
    pub fn forward_logits(&self, ids: &[TokenId]) -> Result<Array2<A>> {
        let t = self.transformed_states(ids)?;
        Ok(self.decode(&t.view()))
    }

    /// Logits at every position of a padded sequence; attention only reaches
    /// the first `seq.len` positions.
    pub fn forward_padded(&self, seq: &TokenSeq) -> Result<Array2<A>> {
        self.check_ids(&seq.ids)?;
        let trace = self.encode(&[(&seq.ids, seq.len)], None);
        let t = self.head(trace.hidden).out;
        Ok(self.decode(&t.view()))
    }

    /// Summed cross-entropy over selected positions and the gradient of
    /// `scale * loss_sum`. Dropout is applied when an rng is given.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainSeq<'_>],
        scale: A,
        dropout: Option<&mut dyn RngCore>,
    ) -> (A, usize, Params<A>) {
        let cfg = &self.config;
        let p = &self.params;
        let mut grads = Params::zeros(cfg);
        let seqs: Vec<(&[TokenId], usize)> = batch.iter().map(|s| (s.ids, s.ids.len())).collect();
        let trace = self.encode(&seqs, dropout);

        let mut selected = Vec::new();
        for (seq, &(start, _, _)) in batch.iter().zip(&trace.spans) {
            for (i, t) in seq.targets.iter().enumerate().take(seq.ids.len()) {
                if let Some(t) = t {
                    selected.push((start + i, *t as usize));
                }
            }
        }
        if selected.is_empty() {
            return (A::zero(), 0, grads);
        }

        let mut gathered = Array2::zeros((selected.len(), cfg.hidden));
        for (mut row, &(r, _)) in gathered.rows_mut().into_iter().zip(&selected) {
            row.assign(&trace.hidden.row(r));
        }
        let head = self.head(gathered);
        let mut probs = self.decode(&head.out.view());
        softmax_rows(&mut probs);
        let mut loss = A::zero();
        for (mut row, &(_, target)) in probs.rows_mut().into_iter().zip(&selected) {
            loss -= row[target].ln();
            row[target] -= A::one();
        }
        let dlogits = probs * scale;

        grads.decoder_bias += &dlogits.sum_axis(Axis(0));
        super::ops::matmul_acc(&dlogits.t(), &head.out.view(), &mut grads.word_embeddings.view_mut());
        let dt = dlogits.dot(&p.word_embeddings);
        let dact = layer_norm_backward(
            &dt.view(),
            &head.norm,
            &p.head_norm.gamma,
            &mut grads.head_norm.gamma,
            &mut grads.head_norm.beta,
        );
        let dpre = gelu_backward(&head.pre, &dact.view());
        let dsel = dense_backward(
            &head.input.view(),
            &dpre.view(),
            &p.head_transform.weight,
            &mut grads.head_transform.weight,
            &mut grads.head_transform.bias,
        );
        let mut dx = Array2::zeros(trace.hidden.raw_dim());
        for (row, &(r, _)) in dsel.rows().into_iter().zip(&selected) {
            let mut target = dx.row_mut(r);
            target += &row;
        }

        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let scale_attn = cst::<A>(1.0 / (hd as f64).sqrt());
        for (layer, (lt, g)) in p
            .layers
            .iter()
            .zip(trace.layers.iter().zip(grads.layers.iter_mut()))
            .rev()
        {
            let dr2 = layer_norm_backward(
                &dx.view(),
                &lt.norm2,
                &layer.ff_norm.gamma,
                &mut g.ff_norm.gamma,
                &mut g.ff_norm.beta,
            );
            let mut dx1 = dr2.clone();
            let df = match &lt.ff_drop {
                Some(m) => dr2 * m,
                None => dr2,
            };
            let dact = dense_backward(
                &lt.ff_act.view(),
                &df.view(),
                &layer.ff_out.weight,
                &mut g.ff_out.weight,
                &mut g.ff_out.bias,
            );
            let dpre = gelu_backward(&lt.ff_pre, &dact.view());
            dx1 += &dense_backward(
                &lt.x1.view(),
                &dpre.view(),
                &layer.ff_in.weight,
                &mut g.ff_in.weight,
                &mut g.ff_in.bias,
            );
            let dr1 = layer_norm_backward(
                &dx1.view(),
                &lt.norm1,
                &layer.attn_norm.gamma,
                &mut g.attn_norm.gamma,
                &mut g.attn_norm.beta,
            );
            let mut dinput = dr1.clone();
            let da = match &lt.attn_drop {
                Some(m) => dr1 * m,
                None => dr1,
            };
            let dctx = dense_backward(
                &lt.ctx.view(),
                &da.view(),
                &layer.attn_output.weight,
                &mut g.attn_output.weight,
                &mut g.attn_output.bias,
            );

            let mut dq = Array2::zeros(lt.q.raw_dim());
            let mut dk = Array2::zeros(lt.k.raw_dim());
            let mut dv = Array2::zeros(lt.v.raw_dim());
            let mut probs = lt.probs.iter();
            for &(start, len, keys) in &trace.spans {
                for head in 0..heads {
                    let pr = probs.next().expect("one attention map per span and head");
                    let (rows, cols) = (start..start + len, head * hd..(head + 1) * hd);
                    let key_rows = start..start + keys;
                    let dch = dctx.slice(s![rows.clone(), cols.clone()]);
                    let qh = lt.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = lt.k.slice(s![key_rows.clone(), cols.clone()]);
                    let vh = lt.v.slice(s![key_rows.clone(), cols.clone()]);
                    let dpr = dch.dot(&vh.t());
                    dv.slice_mut(s![key_rows.clone(), cols.clone()])
                        .assign(&pr.t().dot(&dch));
                    let mut ds = softmax_backward(pr, &dpr);
                    ds *= scale_attn;
                    dq.slice_mut(s![rows, cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![key_rows, cols]).assign(&ds.t().dot(&qh));
                }
            }
            let inp = lt.input.view();
            dinput += &dense_backward(
                &inp,
                &dq.view(),
                &layer.query.weight,
                &mut g.query.weight,
                &mut g.query.bias,
            );
            dinput += &dense_backward(&inp, &dk.view(), &layer.key.weight, &mut g.key.weight, &mut g.key.bias);
            dinput += &dense_backward(
                &inp,
                &dv.view(),
                &layer.value.weight,
                &mut g.value.weight,
                &mut g.value.bias,
            );
            dx = dinput;
        }

        if let Some(m) = &trace.embed_drop {
            dx *= m;
        }
        let demb = layer_norm_backward(
            &dx.view(),
            &trace.embed_norm,
            &p.embed_norm.gamma,
            &mut grads.embed_norm.gamma,
            &mut grads.embed_norm.beta,
        );
        for (r, row) in demb.rows().into_iter().enumerate() {
            let mut w = grads.word_embeddings.row_mut(trace.ids[r]);
            w += &row;
            let mut pos = grads.position_embeddings.row_mut(trace.positions[r]);
            pos += &row;
        }
        (loss, selected.len(), grads)
    }

    /// Mean cross-entropy over selected positions, without dropout.
    pub fn loss(&self, batch: &[TrainSeq<'_>]) -> A {
        let (sum, count, _) = self.loss_and_grad(batch, A::one(), None);
        if count == 0 {
            A::zero()
        } else {
            sum / cst(count as f64)
        }
    }
}

impl MlmModel<f32> {
    pub fn init(config: ModelConfig, rng: &mut impl RngCore) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(MlmModel { config, params })
    }
}

/// Shape helper for checkpoint IO.
pub(crate) fn dyn_array<A: Clone>(dims: &[usize], data: Vec<A>) -> Result<ArrayD<A>> {
    ArrayD::from_shape_vec(IxDyn(dims), data).map_err(|e| Error::Checkpoint(e.to_string()))
}
