//! Multi-way, multilingual attention-based encoder-decoder.
//!
//! `N` bidirectional GRU encoders and `M` conditional GRU decoders share one
//! attention mechanism. Each decoder's read-out also sees an `N`-bit
//! indicator of which encoder(s) produced the current source representation.
//!
//! Annotation matrices are batch-major: row `b * T + t` holds position `t` of
//! sentence `b`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, LanguageSpec, PairBatch, Vocab, BOS, SPECIALS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SHARED_ATTENTION: &str = "shared";

/// Score assigned to padded source positions before the softmax.
const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageVocab {
    pub name: String,
    /// Surface tokens; ids start after the specials.
    pub tokens: Vec<String>,
}

impl LanguageVocab {
    pub fn new(name: &str, tokens: Vec<String>) -> Self {
        LanguageVocab {
            name: name.to_string(),
            tokens,
        }
    }

    pub fn from_spec(spec: &LanguageSpec) -> Self {
        Self::new(&spec.name, (0..spec.surface_size()).map(|s| spec.token(s)).collect())
    }

    /// `size` ids in total, with placeholder surface tokens.
    pub fn with_size(name: &str, size: usize) -> Self {
        let n = size.saturating_sub(SPECIALS.len());
        Self::new(name, (0..n).map(|i| format!("{}{i}", name.to_lowercase())).collect())
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.tokens.len()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.tokens.iter().cloned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One encoder per source language, in indicator-bit order.
    pub encoders: Vec<LanguageVocab>,
    /// One decoder per target language.
    pub decoders: Vec<LanguageVocab>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_hidden_dim: usize,
    pub readout_dim: usize,
    pub max_decode_len: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults over the given languages.
    pub fn new(encoders: Vec<LanguageVocab>, decoders: Vec<LanguageVocab>) -> Self {
        ModelConfig {
            encoders,
            decoders,
            embed_dim: 32,
            hidden_dim: 64,
            attn_hidden_dim: 64,
            readout_dim: 64,
            max_decode_len: 24,
            init_scale: 0.08,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() || self.decoders.is_empty() {
            return Err(Error::Config("at least one encoder and one decoder required".into()));
        }
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_hidden_dim", self.attn_hidden_dim),
            ("readout_dim", self.readout_dim),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for l in self.encoders.iter().chain(&self.decoders) {
            if l.tokens.is_empty() {
                return Err(Error::Config(format!("language {}: empty vocabulary", l.name)));
            }
            if l.vocab().len() != l.vocab_size() {
                return Err(Error::Config(format!(
                    "language {}: duplicate or reserved token in vocabulary",
                    l.name
                )));
            }
        }
        for list in [&self.encoders, &self.decoders] {
            let names: BTreeSet<&str> = list.iter().map(|l| l.name.as_str()).collect();
            if names.len() != list.len() {
                return Err(Error::Config("duplicate language name".into()));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_r: ParamId,
    pub w_u: ParamId,
    pub w_c: ParamId,
    pub u_r: ParamId,
    pub u_u: ParamId,
    pub u_c: ParamId,
    pub b_r: ParamId,
    pub b_u: ParamId,
    pub b_c: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub lang: String,
    pub embed: ParamId,
    pub fwd: GruParams,
    pub bwd: GruParams,
    /// Projection of annotations into the attention space.
    pub w_att: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub lang: String,
    pub embed: ParamId,
    pub gru: GruParams,
    /// Projection of the decoder state into the attention space.
    pub w_att: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub ro_state: ParamId,
    pub ro_ctx: ParamId,
    pub ro_prev: ParamId,
    pub ro_ind: ParamId,
    pub ro_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Scorer `v . tanh(K Wn h + Q Wm z + Y E[y] + b)` plus the context
/// projection `U`, `b`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub key_w: ParamId,
    pub query_w: ParamId,
    pub prev_w: ParamId,
    pub hid_b: ParamId,
    pub v: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl AttentionParams {
    pub fn ids(&self) -> [ParamId; 7] {
        [self.key_w, self.query_w, self.prev_w, self.hid_b, self.v, self.u, self.b]
    }
}

/// Encoder, decoder and attention that together act as one translation model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationPath {
    pub encoder: usize,
    pub decoder: usize,
    pub attention: String,
}

/// Encoder output for a batch of source sentences.
#[derive(Clone, Debug)]
pub struct Annotations {
    pub encoder: usize,
    /// `B*T x 2H` concatenated forward/backward states.
    pub h: Var,
    /// `B*T x A` projection of `h` into the attention space.
    pub proj: Var,
    /// `B*T`, true on real tokens.
    pub mask: Vec<bool>,
    /// `B*T x 1`, `1/len` on real tokens and 0 on padding.
    pub mean_weights: Var,
    pub rows: usize,
    pub steps: usize,
}

/// Attention inputs for one source path during decoding.
#[derive(Clone, Copy, Debug)]
pub struct PathInputs<'a> {
    pub attention: AttentionParams,
    pub h: Var,
    /// Scorer pre-activations contributed by the annotations, `B*T x A`.
    pub keys: Var,
    pub mask: &'a [bool],
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct MultiWayModel {
    config: ModelConfig,
    store: ParamStore,
    encoders: Vec<EncoderParams>,
    decoders: Vec<DecoderParams>,
    source_vocabs: Vec<Vocab>,
    target_vocabs: Vec<Vocab>,
    attentions: BTreeMap<String, AttentionParams>,
    routes: BTreeMap<(String, String), String>,
    trained: BTreeSet<(String, String)>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    scale: f64,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::uniform(rows, cols, self.scale, &mut self.rng);
        self.store.insert(name, t)
    }

    fn bias(&mut self, name: String, cols: usize) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(1, cols))
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<GruParams> {
        Ok(GruParams {
            w_r: self.weight(format!("{prefix}/W_r"), input, hidden)?,
            w_u: self.weight(format!("{prefix}/W_u"), input, hidden)?,
            w_c: self.weight(format!("{prefix}/W_c"), input, hidden)?,
            u_r: self.weight(format!("{prefix}/U_r"), hidden, hidden)?,
            u_u: self.weight(format!("{prefix}/U_u"), hidden, hidden)?,
            u_c: self.weight(format!("{prefix}/U_c"), hidden, hidden)?,
            b_r: self.bias(format!("{prefix}/b_r"), hidden)?,
            b_u: self.bias(format!("{prefix}/b_u"), hidden)?,
            b_c: self.bias(format!("{prefix}/b_c"), hidden)?,
        })
    }

    fn attention(&mut self, id: &str, cfg: &ModelConfig) -> Result<AttentionParams> {
        let (a, c, e) = (cfg.attn_hidden_dim, cfg.context_dim(), cfg.embed_dim);
        let p = format!("attention/{id}");
        Ok(AttentionParams {
            key_w: self.weight(format!("{p}/W_key"), a, a)?,
            query_w: self.weight(format!("{p}/W_query"), a, a)?,
            prev_w: self.weight(format!("{p}/W_prev"), e, a)?,
            hid_b: self.bias(format!("{p}/b_hidden"), a)?,
            v: self.weight(format!("{p}/v"), a, 1)?,
            u: self.weight(format!("{p}/U"), c, c)?,
            b: self.bias(format!("{p}/b"), c)?,
        })
    }
}

fn lookup_attention(store: &ParamStore, id: &str) -> Result<AttentionParams> {
    let get = |n: &str| {
        store
            .id(&format!("attention/{id}/{n}"))
            .ok_or_else(|| Error::UnknownAttention(id.to_string()))
    };
    Ok(AttentionParams {
        key_w: get("W_key")?,
        query_w: get("W_query")?,
        prev_w: get("W_prev")?,
        hid_b: get("b_hidden")?,
        v: get("v")?,
        u: get("U")?,
        b: get("b")?,
    })
}

impl MultiWayModel {
    /// Fresh model with seeded uniform weights and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scale: config.init_scale,
        };
        let (e, h, a, r) = (
            config.embed_dim,
            config.hidden_dim,
            config.attn_hidden_dim,
            config.readout_dim,
        );
        let c = config.context_dim();
        let n = config.encoders.len();
        let mut encoders = Vec::new();
        for l in &config.encoders {
            let p = format!("encoder/{}", l.name);
            encoders.push(EncoderParams {
                lang: l.name.clone(),
                embed: init.weight(format!("{p}/embed"), l.vocab_size(), e)?,
                fwd: init.gru(&format!("{p}/gru_fwd"), e, h)?,
                bwd: init.gru(&format!("{p}/gru_bwd"), e, h)?,
                w_att: init.weight(format!("{p}/W_att"), c, a)?,
            });
        }
        let mut decoders = Vec::new();
        for l in &config.decoders {
            let p = format!("decoder/{}", l.name);
            decoders.push(DecoderParams {
                lang: l.name.clone(),
                embed: init.weight(format!("{p}/embed"), l.vocab_size(), e)?,
                gru: init.gru(&format!("{p}/gru"), e + c, h)?,
                w_att: init.weight(format!("{p}/W_att"), h, a)?,
                init_w: init.weight(format!("{p}/init/W"), a, h)?,
                init_b: init.bias(format!("{p}/init/b"), h)?,
                ro_state: init.weight(format!("{p}/readout/W_state"), h, r)?,
                ro_ctx: init.weight(format!("{p}/readout/W_ctx"), c, r)?,
                ro_prev: init.weight(format!("{p}/readout/W_prev"), e, r)?,
                ro_ind: init.weight(format!("{p}/readout/W_indicator"), n, r)?,
                ro_b: init.bias(format!("{p}/readout/b"), r)?,
                out_w: init.weight(format!("{p}/readout/W_out"), r, l.vocab_size())?,
                out_b: init.bias(format!("{p}/readout/b_out"), l.vocab_size())?,
            });
        }
        let shared = init.attention(SHARED_ATTENTION, &config)?;
        let mut attentions = BTreeMap::new();
        attentions.insert(SHARED_ATTENTION.to_string(), shared);
        Ok(MultiWayModel {
            source_vocabs: config.encoders.iter().map(LanguageVocab::vocab).collect(),
            target_vocabs: config.decoders.iter().map(LanguageVocab::vocab).collect(),
            config,
            store,
            encoders,
            decoders,
            attentions,
            routes: BTreeMap::new(),
            trained: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoders(&self) -> &[EncoderParams] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[DecoderParams] {
        &self.decoders
    }

    pub fn source_vocab(&self, lang: &str) -> Result<&Vocab> {
        Ok(&self.source_vocabs[self.encoder_index(lang)?])
    }

    pub fn target_vocab(&self, lang: &str) -> Result<&Vocab> {
        Ok(&self.target_vocabs[self.decoder_index(lang)?])
    }

    pub fn num_encoders(&self) -> usize {
        self.encoders.len()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Short content digest of all parameters.
    pub fn checkpoint_id(&self) -> String {
        self.store.digest_all()[..16].to_string()
    }

    pub fn attention_ids(&self) -> impl Iterator<Item = &str> {
        self.attentions.keys().map(String::as_str)
    }

    pub fn attention(&self, id: &str) -> Result<AttentionParams> {
        self.attentions
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownAttention(id.to_string()))
    }

    /// Explicit `(source, target) -> attention id` entries; unlisted pairs
    /// use the shared attention.
    pub fn routes(&self) -> &BTreeMap<(String, String), String> {
        &self.routes
    }

    pub fn encoder_index(&self, lang: &str) -> Result<usize> {
        self.encoders
            .iter()
            .position(|e| e.lang == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn decoder_index(&self, lang: &str) -> Result<usize> {
        self.decoders
            .iter()
            .position(|d| d.lang == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn attention_id_for(&self, src: &str, tgt: &str) -> &str {
        self.routes
            .get(&(src.to_string(), tgt.to_string()))
            .map_or(SHARED_ATTENTION, String::as_str)
    }

    pub fn path(&self, src: &str, tgt: &str) -> Result<TranslationPath> {
        Ok(TranslationPath {
            encoder: self.encoder_index(src)?,
            decoder: self.decoder_index(tgt)?,
            attention: self.attention_id_for(src, tgt).to_string(),
        })
    }

    pub fn trained_directions(&self) -> &BTreeSet<(String, String)> {
        &self.trained
    }

    pub fn is_trained(&self, src: &str, tgt: &str) -> bool {
        self.trained.contains(&(src.to_string(), tgt.to_string()))
    }

    pub fn mark_trained(&mut self, src: &str, tgt: &str) {
        self.trained.insert((src.to_string(), tgt.to_string()));
    }

    /// Copy attention `from` under a new id. The copy is byte-identical.
    pub(crate) fn copy_attention(&mut self, from: &str, new_id: &str) -> Result<AttentionParams> {
        if self.attentions.contains_key(new_id) {
            return Err(Error::invalid(format!("attention `{new_id}` already exists")));
        }
        let src = self.attention(from)?;
        let names = ["W_key", "W_query", "W_prev", "b_hidden", "v", "U", "b"];
        for (id, n) in src.ids().into_iter().zip(names) {
            let t = self.store.get(id).clone();
            self.store.insert(format!("attention/{new_id}/{n}"), t)?;
        }
        let params = lookup_attention(&self.store, new_id)?;
        self.attentions.insert(new_id.to_string(), params);
        Ok(params)
    }

    pub(crate) fn set_route(&mut self, src: &str, tgt: &str, attention: &str) -> Result<()> {
        self.attention(attention)?;
        self.encoder_index(src)?;
        self.decoder_index(tgt)?;
        self.routes
            .insert((src.to_string(), tgt.to_string()), attention.to_string());
        Ok(())
    }

    /// Restore registry state (used by checkpoint loading).
    pub(crate) fn restore_registry(
        &mut self,
        clones: &[String],
        routes: &[(String, String, String)],
        trained: &[(String, String)],
    ) -> Result<()> {
        for id in clones {
            self.copy_attention(SHARED_ATTENTION, id)?;
        }
        for (s, t, a) in routes {
            self.set_route(s, t, a)?;
        }
        for (s, t) in trained {
            self.encoder_index(s)?;
            self.decoder_index(t)?;
            self.mark_trained(s, t);
        }
        Ok(())
    }

    /// Parameter ids belonging to attention `id`.
    pub fn attention_param_ids(&self, id: &str) -> Result<Vec<ParamId>> {
        Ok(self.attention(id)?.ids().to_vec())
    }

    /// A standalone one-encoder, one-decoder model holding copies of the
    /// parameters this model uses for `src -> tgt`. The indicator row of
    /// `src` becomes the single indicator row.
    pub fn extract_pair(&self, src: &str, tgt: &str) -> Result<MultiWayModel> {
        let path = self.path(src, tgt)?;
        let enc_cfg = self.config.encoders[path.encoder].clone();
        let dec_cfg = self.config.decoders[path.decoder].clone();
        let mut cfg = self.config.clone();
        cfg.encoders = vec![enc_cfg];
        cfg.decoders = vec![dec_cfg];
        let mut out = MultiWayModel::new(cfg)?;
        let ids: Vec<ParamId> = out.store.ids().collect();
        for id in ids {
            let name = out.store.name(id).to_string();
            let value = if let Some(rest) = name.strip_prefix(&format!("attention/{SHARED_ATTENTION}/")) {
                let src_id = self
                    .store
                    .id(&format!("attention/{}/{rest}", path.attention))
                    .expect("attention params exist");
                self.store.get(src_id).clone()
            } else if name.ends_with("readout/W_indicator") {
                let src_id = self.decoders[path.decoder].ro_ind;
                let row = self.store.get(src_id).row_slice(path.encoder).to_vec();
                Tensor::row(row)
            } else {
                let src_id = self.store.id(&name).expect("same layout");
                self.store.get(src_id).clone()
            };
            *out.store.get_mut(id) = value;
        }
        if self.is_trained(src, tgt) {
            out.mark_trained(src, tgt);
        }
        Ok(out)
    }

    fn check_ids(&self, ids: &[usize], vocab: usize) -> Result<()> {
        match ids.iter().find(|&&i| i >= vocab) {
            Some(&id) => Err(Error::OutOfVocab { id, size: vocab }),
            None => Ok(()),
        }
    }

    /// One GRU update on a row batch.
    pub fn gru_step(&self, tape: &mut Tape<'_>, p: &GruParams, x: Var, h: Var) -> Result<Var> {
        let (w_r, u_r, b_r) = (tape.param(p.w_r), tape.param(p.u_r), tape.param(p.b_r));
        let (w_u, u_u, b_u) = (tape.param(p.w_u), tape.param(p.u_u), tape.param(p.b_u));
        let (w_c, u_c, b_c) = (tape.param(p.w_c), tape.param(p.u_c), tape.param(p.b_c));

        let xr = tape.matmul(x, w_r)?;
        let hr = tape.matmul(h, u_r)?;
        let r = tape.add(xr, hr)?;
        let r = tape.add_row(r, b_r)?;
        let r = tape.sigmoid(r)?;

        let xu = tape.matmul(x, w_u)?;
        let hu = tape.matmul(h, u_u)?;
        let u = tape.add(xu, hu)?;
        let u = tape.add_row(u, b_u)?;
        let u = tape.sigmoid(u)?;

        let rh = tape.mul(r, h)?;
        let xc = tape.matmul(x, w_c)?;
        let hc = tape.matmul(rh, u_c)?;
        let cand = tape.add(xc, hc)?;
        let cand = tape.add_row(cand, b_c)?;
        let cand = tape.tanh(cand)?;

        // (1 - u) * h + u * cand
        let shape = tape.shape(u).to_vec();
        let ones = tape.constant(Tensor::filled(shape[0], shape[1], 1.0));
        let keep = tape.sub(ones, u)?;
        let kept = tape.mul(keep, h)?;
        let upd = tape.mul(u, cand)?;
        tape.add(kept, upd)
    }

    /// Bidirectional encoding of a padded source batch.
    pub fn encode(&self, tape: &mut Tape<'_>, encoder: usize, src: &Batch) -> Result<Annotations> {
        let enc = self
            .encoders
            .get(encoder)
            .ok_or_else(|| Error::invalid(format!("no encoder {encoder}")))?;
        let vocab = self.config.encoders[encoder].vocab_size();
        self.check_ids(&src.ids, vocab)?;
        if src.lengths.contains(&0) {
            return Err(Error::invalid("empty source sentence"));
        }
        let (b, t_len, h_dim) = (src.rows(), src.width, self.config.hidden_dim);
        let embed = tape.param(enc.embed);
        let xs: Vec<Var> = (0..t_len)
            .map(|t| tape.gather(embed, src.column(t)))
            .collect::<Result<_>>()?;
        let zeros = tape.constant(Tensor::zeros(b, h_dim));

        let mut fwd = Vec::with_capacity(t_len);
        let mut h = zeros;
        for (t, &x) in xs.iter().enumerate() {
            let next = self.gru_step(tape, &enc.fwd, x, h)?;
            h = tape.select(src.mask_column(t), next, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zeros; t_len];
        let mut h = zeros;
        for t in (0..t_len).rev() {
            let next = self.gru_step(tape, &enc.bwd, xs[t], h)?;
            h = tape.select(src.mask_column(t), next, h)?;
            bwd[t] = h;
        }
        let mut parts = Vec::with_capacity(2 * t_len);
        for t in 0..t_len {
            parts.push(fwd[t]);
            parts.push(bwd[t]);
        }
        let wide = tape.concat(&parts)?;
        let ann = tape.reshape(wide, b * t_len, 2 * h_dim)?;
        let w_att = tape.param(enc.w_att);
        let proj = tape.matmul(ann, w_att)?;
        let weights: Vec<f64> = (0..b * t_len)
            .map(|i| {
                if src.mask[i] {
                    1.0 / src.lengths[i / t_len] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mean_weights = tape.constant(Tensor::column(weights));
        Ok(Annotations {
            encoder,
            h: ann,
            proj,
            mask: src.mask.clone(),
            mean_weights,
            rows: b,
            steps: t_len,
        })
    }

    /// Single-source decoder initializer: `tanh(mean_t(Wn h_t) W_init + b)`.
    pub fn init_single(&self, tape: &mut Tape<'_>, decoder: usize, ann: &Annotations) -> Result<Var> {
        let dec = &self.decoders[decoder];
        let weighted = tape.mul_col(ann.proj, ann.mean_weights)?;
        let mean = tape.group_sum(weighted, ann.steps)?;
        let w = tape.param(dec.init_w);
        let b = tape.param(dec.init_b);
        let pre = tape.affine(mean, w, b)?;
        tape.tanh(pre)
    }

    /// Initial decoder state; several sources average their initializers.
    pub fn init_decoder_state(&self, tape: &mut Tape<'_>, decoder: usize, anns: &[&Annotations]) -> Result<Var> {
        if anns.is_empty() {
            return Err(Error::invalid("init_decoder_state needs at least one source"));
        }
        let c = self.config.context_dim();
        for a in anns {
            if tape.shape(a.h)[1] != c {
                return Err(Error::Shape {
                    op: "init_decoder_state",
                    lhs: tape.shape(a.h).to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let inits: Vec<Var> = anns
            .iter()
            .map(|a| self.init_single(tape, decoder, a))
            .collect::<Result<_>>()?;
        mean_vars(tape, &inits)
    }

    /// Scorer pre-activations that depend only on the annotations.
    pub fn attention_keys(&self, tape: &mut Tape<'_>, att: &AttentionParams, proj: Var) -> Result<Var> {
        let k = tape.param(att.key_w);
        tape.matmul(proj, k)
    }

    pub fn path_inputs<'a>(&self, tape: &mut Tape<'_>, attention: &str, ann: &'a Annotations) -> Result<PathInputs<'a>> {
        let att = self.attention(attention)?;
        let keys = self.attention_keys(tape, &att, ann.proj)?;
        Ok(PathInputs {
            attention: att,
            h: ann.h,
            keys,
            mask: &ann.mask,
            steps: ann.steps,
        })
    }

    /// One attention read. `state_proj` is `Wm z` (`B x A`), `prev_emb` the
    /// previous target embedding. Returns the context (`B x 2H`) and the
    /// attention weights (`B x T`).
    pub fn attention_step(
        &self,
        tape: &mut Tape<'_>,
        path: &PathInputs<'_>,
        state_proj: Var,
        prev_emb: Var,
    ) -> Result<(Var, Var)> {
        let att = &path.attention;
        let steps = path.steps;
        let rows = tape.shape(state_proj)[0];
        if !path.mask.chunks(steps).all(|m| m.iter().any(|&x| x)) {
            return Err(Error::invalid("attention over a fully masked source"));
        }
        let qw = tape.param(att.query_w);
        let pw = tape.param(att.prev_w);
        let hb = tape.param(att.hid_b);
        let q = tape.matmul(state_proj, qw)?;
        let p = tape.matmul(prev_emb, pw)?;
        let q = tape.add(q, p)?;
        let q = tape.add_row(q, hb)?;
        let q = tape.repeat_rows(q, steps)?;
        let pre = tape.add(path.keys, q)?;
        let hidden = tape.tanh(pre)?;
        let v = tape.param(att.v);
        let scores = tape.matmul(hidden, v)?;
        let mut scores = tape.reshape(scores, rows, steps)?;
        if path.mask.iter().any(|&m| !m) {
            let pad: Vec<bool> = path.mask.iter().map(|&m| !m).collect();
            scores = tape.masked_fill(scores, pad, MASKED_SCORE)?;
        }
        let alpha = tape.softmax(scores)?;
        let alpha_col = tape.reshape(alpha, rows * steps, 1)?;
        let weighted = tape.mul_col(path.h, alpha_col)?;
        let summed = tape.group_sum(weighted, steps)?;
        let u = tape.param(att.u);
        let b = tape.param(att.b);
        let ctx = tape.affine(summed, u, b)?;
        Ok((ctx, alpha))
    }

    pub fn embed_target(&self, tape: &mut Tape<'_>, decoder: usize, prev: &[usize]) -> Result<Var> {
        let dec = &self.decoders[decoder];
        self.check_ids(prev, self.config.decoders[decoder].vocab_size())?;
        let e = tape.param(dec.embed);
        tape.gather(e, prev.to_vec())
    }

    /// GRU update with input `[E(prev); context]`.
    pub fn decoder_step(&self, tape: &mut Tape<'_>, decoder: usize, state: Var, prev_emb: Var, ctx: Var) -> Result<Var> {
        let c = self.config.context_dim();
        if tape.shape(ctx)[1] != c {
            return Err(Error::Shape {
                op: "decoder_step",
                lhs: tape.shape(ctx).to_vec(),
                rhs: vec![c],
            });
        }
        let x = tape.concat(&[prev_emb, ctx])?;
        self.gru_step(tape, &self.decoders[decoder].gru, x, state)
    }

    /// Unnormalized next-token scores from `(z, c, E[prev], indicator)`.
    pub fn output_logits(
        &self,
        tape: &mut Tape<'_>,
        decoder: usize,
        state: Var,
        ctx: Var,
        prev_emb: Var,
        indicator: Var,
    ) -> Result<Var> {
        let dec = &self.decoders[decoder];
        let n = self.num_encoders();
        if tape.shape(indicator)[1] != n {
            return Err(Error::Shape {
                op: "output_logits",
                lhs: tape.shape(indicator).to_vec(),
                rhs: vec![n],
            });
        }
        let ws = tape.param(dec.ro_state);
        let wc = tape.param(dec.ro_ctx);
        let wp = tape.param(dec.ro_prev);
        let wi = tape.param(dec.ro_ind);
        let b = tape.param(dec.ro_b);
        let a = tape.matmul(state, ws)?;
        let c = tape.matmul(ctx, wc)?;
        let p = tape.matmul(prev_emb, wp)?;
        let i = tape.matmul(indicator, wi)?;
        let s = tape.add(a, c)?;
        let s = tape.add(s, p)?;
        let s = tape.add(s, i)?;
        let s = tape.add_row(s, b)?;
        let t = tape.tanh(s)?;
        let wo = tape.param(dec.out_w);
        let bo = tape.param(dec.out_b);
        tape.affine(t, wo, bo)
    }

    pub fn output_distribution(
        &self,
        tape: &mut Tape<'_>,
        decoder: usize,
        state: Var,
        ctx: Var,
        prev_emb: Var,
        indicator: Var,
    ) -> Result<Var> {
        let logits = self.output_logits(tape, decoder, state, ctx, prev_emb, indicator)?;
        tape.softmax(logits)
    }

    /// `rows x N` indicator with the bits of `encoders` set.
    pub fn indicator(&self, rows: usize, encoders: &[usize]) -> Result<Tensor> {
        let n = self.num_encoders();
        let mut bits = vec![0.0; n];
        for &e in encoders {
            if e >= n {
                return Err(Error::invalid(format!("no encoder {e}")));
            }
            bits[e] = 1.0;
        }
        if encoders.is_empty() {
            return Err(Error::invalid("indicator needs at least one bit"));
        }
        let data = (0..rows).flat_map(|_| bits.iter().copied()).collect();
        Tensor::matrix(rows, n, data)
    }

    /// One decoding step of an (early-averaged) stream: attend over every
    /// path, average the contexts, update the state and read out logits.
    /// Returns `(new state, logits)`.
    pub fn stream_step(
        &self,
        tape: &mut Tape<'_>,
        decoder: usize,
        paths: &[PathInputs<'_>],
        state: Var,
        prev: &[usize],
        indicator: Var,
    ) -> Result<(Var, Var)> {
        let emb = self.embed_target(tape, decoder, prev)?;
        let w_att = tape.param(self.decoders[decoder].w_att);
        let state_proj = tape.matmul(state, w_att)?;
        let ctxs: Vec<Var> = paths
            .iter()
            .map(|p| self.attention_step(tape, p, state_proj, emb).map(|(c, _)| c))
            .collect::<Result<_>>()?;
        let ctx = mean_vars(tape, &ctxs)?;
        let next = self.decoder_step(tape, decoder, state, emb, ctx)?;
        let logits = self.output_logits(tape, decoder, next, ctx, emb, indicator)?;
        Ok((next, logits))
    }

    /// Teacher-forced per-sentence log-probabilities (`B x 1`) of `target`
    /// (EOS-terminated) given one or more aligned source batches. Several
    /// sources are early-averaged.
    pub fn sequence_logprob(
        &self,
        tape: &mut Tape<'_>,
        sources: &[(usize, &Batch)],
        decoder: usize,
        attentions: &[&str],
        target: &Batch,
    ) -> Result<Var> {
        if sources.is_empty() || sources.len() != attentions.len() {
            return Err(Error::invalid("one attention id per source required"));
        }
        if target.lengths.contains(&0) {
            return Err(Error::invalid("empty target sequence"));
        }
        self.check_ids(&target.ids, self.config.decoders[decoder].vocab_size())?;
        let rows = target.rows();
        let anns: Vec<Annotations> = sources
            .iter()
            .map(|(e, b)| {
                if b.rows() != rows {
                    return Err(Error::invalid("source and target batches differ in size"));
                }
                self.encode(tape, *e, b)
            })
            .collect::<Result<_>>()?;
        let paths: Vec<PathInputs<'_>> = anns
            .iter()
            .zip(attentions)
            .map(|(a, id)| self.path_inputs(tape, id, a))
            .collect::<Result<_>>()?;
        let ann_refs: Vec<&Annotations> = anns.iter().collect();
        let mut state = self.init_decoder_state(tape, decoder, &ann_refs)?;
        let enc_ids: Vec<usize> = sources.iter().map(|(e, _)| *e).collect();
        let indicator = tape.constant(self.indicator(rows, &enc_ids)?);
        let mut prev = vec![BOS; rows];
        let mut total: Option<Var> = None;
        for t in 0..target.width {
            let (next, logits) = self.stream_step(tape, decoder, &paths, state, &prev, indicator)?;
            state = next;
            let lp = tape.log_softmax(logits)?;
            let gold = target.column(t);
            let picked = tape.pick(lp, gold.clone())?;
            let mask: Vec<f64> = target.mask_column(t).iter().map(|&m| f64::from(u8::from(m))).collect();
            let m = tape.constant(Tensor::column(mask));
            let masked = tape.mul(picked, m)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, masked)?,
                None => masked,
            });
            prev = gold;
        }
        Ok(total.expect("target width >= 1"))
    }

    /// Mean negative log-likelihood per sentence of a training batch on one path.
    pub fn batch_loss(&self, tape: &mut Tape<'_>, path: &TranslationPath, batch: &PairBatch) -> Result<Var> {
        let lp = self.sequence_logprob(
            tape,
            &[(path.encoder, &batch.source)],
            path.decoder,
            &[path.attention.as_str()],
            &batch.target,
        )?;
        let total = tape.sum(lp)?;
        tape.scale(total, -1.0 / batch.target.rows() as f64)
    }

    /// Teacher-forced log-probability of one target sentence (ids without
    /// EOS; EOS is appended) given one or more source sentences.
    pub fn forward_logprob(
        &self,
        sources: &[(usize, &[usize])],
        decoder: usize,
        attentions: &[&str],
        target: &[usize],
    ) -> Result<f64> {
        let batches: Vec<Batch> = sources
            .iter()
            .map(|(_, s)| Batch::from_sequences(&[*s], false))
            .collect::<Result<_>>()?;
        let srcs: Vec<(usize, &Batch)> = sources.iter().zip(&batches).map(|((e, _), b)| (*e, b)).collect();
        let tgt = Batch::from_sequences(&[target], true)?;
        let mut tape = Tape::inference(&self.store);
        let lp = self.sequence_logprob(&mut tape, &srcs, decoder, attentions, &tgt)?;
        Ok(tape.value(lp).item())
    }
}

/// Arithmetic mean of same-shaped values; a single value is returned as is.
pub fn mean_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    match vars {
        [] => Err(Error::invalid("mean of zero values")),
        [one] => Ok(*one),
        [first, rest @ ..] => {
            let mut acc = *first;
            for v in rest {
                acc = tape.add(acc, *v)?;
            }
            tape.scale(acc, 1.0 / vars.len() as f64)
        }
    }
}
