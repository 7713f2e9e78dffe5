//! Step-by-step decoding with per-layer key/value caches.
//!
//! Under an `ngram(N)` mask each decoder layer keeps a [`RingBufferCache`]
//! of capacity `N-1`: position `p` is written to slot `(p-1) mod (N-1)`,
//! overwriting position `p-N+1`, and reads walk the slots in ascending
//! position order. The causal baseline keeps every row in an
//! [`AppendCache`]. Apart from the cache both paths run identical step code.
//!
//! Cached rows are full `d_model`-wide key and value projections (before the
//! head split); head `h` reads columns `h*d_k .. (h+1)*d_k`.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::mask::MaskSpec;
use crate::model::{encode, ModelConfig, ModelParams, TokenSequence, BOS, EOS};
use crate::ops::{gelu, layer_norm, softmax_in_place};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Rows of a cache in ascending position order.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheWindow<S> {
    pub keys: Tensor<S>,
    pub values: Tensor<S>,
    /// 1-indexed positions of the rows.
    pub positions: Vec<usize>,
}

/// Common interface of the two cache layouts.
pub trait KvCache<S: Scalar> {
    /// Store the key/value rows of `position`, which must directly follow
    /// the previously pushed position (the first push is position 1).
    fn push(&mut self, position: usize, key: &[S], value: &[S]) -> Result<()>;

    /// Number of rows currently readable.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key row at logical index `i` (0 = oldest retained position).
    fn key(&self, i: usize) -> &[S];

    fn value(&self, i: usize) -> &[S];

    fn width(&self) -> usize;

    /// Position of the most recent push, 0 before the first.
    fn last_position(&self) -> usize;

    /// Scalars currently allocated for keys and values.
    fn stored_numbers(&self) -> usize;

    fn positions(&self) -> Vec<usize> {
        let last = self.last_position();
        (last + 1 - self.len()..=last).collect()
    }

    fn window(&self) -> Result<CacheWindow<S>> {
        if self.is_empty() {
            return Err(Error::Protocol(
                "cannot read the window of an empty cache".into(),
            ));
        }
        let (n, w) = (self.len(), self.width());
        let mut keys = Vec::with_capacity(n * w);
        let mut values = Vec::with_capacity(n * w);
        for i in 0..n {
            keys.extend_from_slice(self.key(i));
            values.extend_from_slice(self.value(i));
        }
        Ok(CacheWindow {
            keys: Tensor::new(vec![n, w], keys)?,
            values: Tensor::new(vec![n, w], values)?,
            positions: self.positions(),
        })
    }
}

fn check_push(
    last: usize,
    position: usize,
    width: usize,
    key_len: usize,
    value_len: usize,
) -> Result<()> {
    if position != last + 1 {
        return Err(Error::Protocol(format!(
            "push of position {position} after position {last}; positions must be sequential"
        )));
    }
    if key_len != width || value_len != width {
        return Err(Error::dim(
            "cache push",
            &[key_len, value_len],
            &[width, width],
        ));
    }
    Ok(())
}

/// Fixed-capacity key/value store indexed modulo its capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RingBufferCache<S> {
    capacity: usize,
    width: usize,
    keys: Vec<S>,
    values: Vec<S>,
    count: usize,
    next_slot: usize,
    last_position: usize,
}

impl<S: Scalar> RingBufferCache<S> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config(format!(
                "ring buffer needs positive capacity and width, got {capacity}x{width}"
            )));
        }
        Ok(Self {
            capacity,
            width,
            keys: vec![S::zero(); capacity * width],
            values: vec![S::zero(); capacity * width],
            count: 0,
            next_slot: 0,
            last_position: 0,
        })
    }

    /// Cache sized for an `ngram(order)` mask: capacity `order - 1`.
    pub fn for_order(order: usize, width: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidOrder(order));
        }
        Self::new(order - 1, width)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot the next push will write.
    pub fn next_slot(&self) -> usize {
        self.next_slot
    }

    /// Slot holding (or that held) 1-indexed `position`.
    pub fn slot_of(&self, position: usize) -> usize {
        (position - 1) % self.capacity
    }

    fn physical(&self, i: usize) -> usize {
        // oldest retained position is last - count + 1
        self.slot_of(self.last_position + 1 - self.count + i)
    }
}

impl<S: Scalar> KvCache<S> for RingBufferCache<S> {
    fn push(&mut self, position: usize, key: &[S], value: &[S]) -> Result<()> {
        check_push(
            self.last_position,
            position,
            self.width,
            key.len(),
            value.len(),
        )?;
        let slot = self.slot_of(position);
        debug_assert_eq!(slot, self.next_slot);
        let range = slot * self.width..(slot + 1) * self.width;
        self.keys[range.clone()].copy_from_slice(key);
        self.values[range].copy_from_slice(value);
        self.count = (self.count + 1).min(self.capacity);
        self.next_slot = (slot + 1) % self.capacity;
        self.last_position = position;
        Ok(())
    }

    fn len(&self) -> usize {
        self.count
    }

    fn key(&self, i: usize) -> &[S] {
        let s = self.physical(i);
        &self.keys[s * self.width..(s + 1) * self.width]
    }

    fn value(&self, i: usize) -> &[S] {
        let s = self.physical(i);
        &self.values[s * self.width..(s + 1) * self.width]
    }

    fn width(&self) -> usize {
        self.width
    }

    fn last_position(&self) -> usize {
        self.last_position
    }

    fn stored_numbers(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}

/// Unbounded append-only store used by the causal baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct AppendCache<S> {
    width: usize,
    keys: Vec<S>,
    values: Vec<S>,
    last_position: usize,
}

impl<S: Scalar> AppendCache<S> {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            keys: Vec::new(),
            values: Vec::new(),
            last_position: 0,
        }
    }
}

impl<S: Scalar> KvCache<S> for AppendCache<S> {
    fn push(&mut self, position: usize, key: &[S], value: &[S]) -> Result<()> {
        check_push(
            self.last_position,
            position,
            self.width,
            key.len(),
            value.len(),
        )?;
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.last_position = position;
        Ok(())
    }

    fn len(&self) -> usize {
        self.last_position
    }

    fn key(&self, i: usize) -> &[S] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    fn value(&self, i: usize) -> &[S] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    fn width(&self) -> usize {
        self.width
    }

    fn last_position(&self) -> usize {
        self.last_position
    }

    fn stored_numbers(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheKind {
    Ring { capacity: usize },
    Append,
}

impl CacheKind {
    /// Ring buffer for n-gram masks, append-only otherwise.
    pub fn for_mask(mask: MaskSpec) -> Result<Self> {
        match mask {
            MaskSpec::Ngram { order } if order >= 2 => Ok(CacheKind::Ring {
                capacity: order - 1,
            }),
            MaskSpec::Ngram { order } => Err(Error::InvalidOrder(order)),
            MaskSpec::Causal => Ok(CacheKind::Append),
            MaskSpec::Full => Err(Error::Config(
                "incremental decoding needs a causal or ngram mask".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerCache<S> {
    Ring(RingBufferCache<S>),
    Append(AppendCache<S>),
}

impl<S: Scalar> LayerCache<S> {
    pub fn new(kind: CacheKind, width: usize) -> Result<Self> {
        Ok(match kind {
            CacheKind::Ring { capacity } => {
                LayerCache::Ring(RingBufferCache::new(capacity, width)?)
            }
            CacheKind::Append => LayerCache::Append(AppendCache::new(width)),
        })
    }

    fn inner(&self) -> &dyn KvCache<S> {
        match self {
            LayerCache::Ring(c) => c,
            LayerCache::Append(c) => c,
        }
    }
}

impl<S: Scalar> KvCache<S> for LayerCache<S> {
    fn push(&mut self, position: usize, key: &[S], value: &[S]) -> Result<()> {
        match self {
            LayerCache::Ring(c) => c.push(position, key, value),
            LayerCache::Append(c) => c.push(position, key, value),
        }
    }

    fn len(&self) -> usize {
        self.inner().len()
    }

    fn key(&self, i: usize) -> &[S] {
        match self {
            LayerCache::Ring(c) => c.key(i),
            LayerCache::Append(c) => c.key(i),
        }
    }

    fn value(&self, i: usize) -> &[S] {
        match self {
            LayerCache::Ring(c) => c.value(i),
            LayerCache::Append(c) => c.value(i),
        }
    }

    fn width(&self) -> usize {
        self.inner().width()
    }

    fn last_position(&self) -> usize {
        self.inner().last_position()
    }

    fn stored_numbers(&self) -> usize {
        self.inner().stored_numbers()
    }
}

/// Timing and bookkeeping for one decoding step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepProfile {
    /// Time spent in cached self-attention (scores, softmax, weighted sum),
    /// summed over layers.
    pub self_attention: Duration,
    /// Keys attended by the new query in each layer.
    pub attended_keys: usize,
    /// Rows held by the largest layer cache after the step.
    pub cache_entries: usize,
}

/// Per-stream decoding state: encoder memory, precomputed cross-attention
/// keys/values, one self-attention cache per decoder layer, and the tokens
/// fed so far. Invariant: `position() == 1 + emitted().len()`.
#[derive(Clone, Debug)]
pub struct DecodeState<S> {
    memory: Tensor<S>,
    cross_keys: Vec<Tensor<S>>,
    cross_values: Vec<Tensor<S>>,
    caches: Vec<LayerCache<S>>,
    position: usize,
    emitted: Vec<usize>,
}

impl<S: Scalar> DecodeState<S> {
    /// State whose cache layout follows `config.mask`.
    pub fn new(memory: Tensor<S>, params: &ModelParams<S>, config: &ModelConfig) -> Result<Self> {
        Self::with_cache(memory, params, config, CacheKind::for_mask(config.mask)?)
    }

    pub fn with_cache(
        memory: Tensor<S>,
        params: &ModelParams<S>,
        config: &ModelConfig,
        kind: CacheKind,
    ) -> Result<Self> {
        config.validate()?;
        if memory.cols() != config.d_model {
            return Err(Error::dim(
                "decode memory",
                memory.shape(),
                &[memory.rows(), config.d_model],
            ));
        }
        let mut cross_keys = Vec::with_capacity(params.decoder.len());
        let mut cross_values = Vec::with_capacity(params.decoder.len());
        let mut caches = Vec::with_capacity(params.decoder.len());
        for layer in &params.decoder {
            cross_keys.push(memory.matmul(&layer.cross_attn.w_key)?);
            cross_values.push(memory.matmul(&layer.cross_attn.w_value)?);
            caches.push(LayerCache::new(kind, config.d_model)?);
        }
        Ok(Self {
            memory,
            cross_keys,
            cross_values,
            caches,
            position: 1,
            emitted: Vec::new(),
        })
    }

    /// 1-indexed position the next fed token will occupy.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn emitted(&self) -> &[usize] {
        &self.emitted
    }

    pub fn memory(&self) -> &Tensor<S> {
        &self.memory
    }

    pub fn caches(&self) -> &[LayerCache<S>] {
        &self.caches
    }

    /// Feed `token` at the current position and return the logits scoring
    /// the next position.
    pub fn step(
        &mut self,
        token: usize,
        params: &ModelParams<S>,
        config: &ModelConfig,
    ) -> Result<Tensor<S>> {
        self.step_profiled(token, params, config).map(|(l, _)| l)
    }

    pub fn step_profiled(
        &mut self,
        token: usize,
        params: &ModelParams<S>,
        config: &ModelConfig,
    ) -> Result<(Tensor<S>, StepProfile)> {
        if token >= config.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        if self.position > config.max_positions {
            return Err(Error::Input(format!(
                "position {} exceeds max_positions {}",
                self.position, config.max_positions
            )));
        }
        let d = config.d_model;
        let heads = config.num_heads;
        let eps = S::lit(config.layer_norm_eps);
        let mut profile = StepProfile::default();

        let mut x = embed_one(token, self.position, params, config);
        for (l, layer) in params.decoder.iter().enumerate() {
            let q = x.matmul(&layer.self_attn.w_query)?;
            let k = x.matmul(&layer.self_attn.w_key)?;
            let v = x.matmul(&layer.self_attn.w_value)?;
            let cache = &mut self.caches[l];
            cache.push(self.position, k.data(), v.data())?;

            let mut ctx = Tensor::zeros(&[1, d]);
            let started = Instant::now();
            attend_row(
                q.data(),
                cache.len(),
                |j| cache.key(j),
                |j| cache.value(j),
                heads,
                ctx.data_mut(),
            );
            profile.self_attention += started.elapsed();
            profile.attended_keys = cache.len();
            profile.cache_entries = profile.cache_entries.max(cache.len());

            let a = ctx.matmul(&layer.self_attn.w_out)?;
            let h1 = layer_norm(
                &x.add(&a)?,
                &layer.norm_self.gain,
                &layer.norm_self.bias,
                eps,
            )?;

            let qc = h1.matmul(&layer.cross_attn.w_query)?;
            let (ck, cv) = (&self.cross_keys[l], &self.cross_values[l]);
            let mut cctx = Tensor::zeros(&[1, d]);
            attend_row(
                qc.data(),
                ck.rows(),
                |j| ck.row(j),
                |j| cv.row(j),
                heads,
                cctx.data_mut(),
            );
            let c = cctx.matmul(&layer.cross_attn.w_out)?;
            let h2 = layer_norm(
                &h1.add(&c)?,
                &layer.norm_cross.gain,
                &layer.norm_cross.bias,
                eps,
            )?;

            let f = h2
                .matmul(&layer.ff.w_in)?
                .add_row_vector(&layer.ff.b_in)?
                .map(gelu)
                .matmul(&layer.ff.w_out)?
                .add_row_vector(&layer.ff.b_out)?;
            x = layer_norm(&h2.add(&f)?, &layer.norm_ff.gain, &layer.norm_ff.bias, eps)?;
        }
        let logits = x.matmul(&params.output)?.reshape(&[config.vocab_size])?;
        self.position += 1;
        self.emitted.push(token);
        Ok((logits, profile))
    }
}

/// Free-function form of [`DecodeState::step`].
pub fn incremental_step<S: Scalar>(
    state: &mut DecodeState<S>,
    token: usize,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    state.step(token, params, config)
}

fn embed_one<S: Scalar>(
    token: usize,
    position: usize,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Tensor<S> {
    let d = config.d_model;
    let scale = S::from_usize(d).unwrap().sqrt();
    let pos = (position - 1) as f64;
    let mut row = vec![S::zero(); d];
    for m in 0..d / 2 {
        let angle = pos * 10000f64.powf(-((2 * m) as f64) / d as f64);
        row[2 * m] = S::lit(angle.sin());
        row[2 * m + 1] = S::lit(angle.cos());
    }
    for (o, &e) in row.iter_mut().zip(params.embedding.row(token)) {
        *o += scale * e;
    }
    Tensor::new(vec![1, d], row).expect("row shape")
}

/// Multi-head attention of a single query row over `n` key/value rows.
fn attend_row<'a, S: Scalar>(
    query: &[S],
    n: usize,
    key: impl Fn(usize) -> &'a [S],
    value: impl Fn(usize) -> &'a [S],
    heads: usize,
    out: &mut [S],
) {
    let d = query.len();
    let dk = d / heads;
    let scale = S::one() / S::from_usize(dk).unwrap().sqrt();
    let mut scores = vec![S::zero(); n];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let q = &query[cols.clone()];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q, &key(j)[cols.clone()]) * scale;
        }
        softmax_in_place(&mut scores);
        let o = &mut out[cols.clone()];
        for (j, &p) in scores.iter().enumerate() {
            for (acc, &v) in o.iter_mut().zip(&value(j)[cols.clone()]) {
                *acc += p * v;
            }
        }
    }
}

/// Greedy decoding from `BOS`: feed the argmax (lowest id on ties) until
/// `EOS` or until the output holds `max_len` tokens.
pub fn greedy_decode<S: Scalar>(
    source: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
    max_len: usize,
) -> Result<TokenSequence> {
    source.check_vocab(config.vocab_size)?;
    let memory = encode(source, params, config)?;
    let mut state = DecodeState::new(memory, params, config)?;
    let mut out = vec![BOS];
    let limit = max_len.min(config.max_positions + 1);
    while out.len() < limit {
        let logits = state.step(*out.last().unwrap(), params, config)?;
        let next = argmax(logits.data());
        out.push(next);
        if next == EOS {
            break;
        }
    }
    if out.last() == Some(&EOS) {
        TokenSequence::target(out)
    } else {
        TokenSequence::prefix(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
