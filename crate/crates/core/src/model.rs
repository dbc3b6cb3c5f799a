//! Transformer encoder-decoder with per-language bottleneck modules.
//!
//! The shared trunk is a pre-norm T5-style stack: scale-only RMS norms,
//! relu feed-forward, learned absolute position embeddings, and a tied
//! embedding/output head. After the feed-forward block of every layer the
//! hidden states pass through a bottleneck adapter selected by the example's
//! language ID (fixed routing). Adapters are residual
//! `h + U.relu(D.h + b_D) + b_U` blocks whose up-projection starts at zero,
//! so a freshly built model computes exactly the same function as its
//! adapter-free trunk.
//!
//! The dense baseline variant keeps a single adapter bank shared by all
//! languages, which makes it parameter-identical to the modular model at
//! `N = 1` while routing every language through the same unit.

use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, TapeId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RMS_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e30;

/// Index of a language in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguageId(pub usize);

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One adapter bank per language.
    Modular,
    /// A single adapter bank shared by every language.
    Dense,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Modular => "modular",
            Variant::Dense => "dense",
        }
    }

    pub fn from_label(s: &str) -> Option<Variant> {
        match s {
            "modular" => Some(Variant::Modular),
            "dense" => Some(Variant::Dense),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of languages N the model allocates modules for.
    pub n_languages: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_bottleneck: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Default bottleneck width: half the hidden dimension.
    pub fn default_bottleneck(d_model: usize) -> usize {
        d_model / 2
    }

    /// Total layer count L over encoder and decoder.
    pub fn n_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_languages", self.n_languages),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_bottleneck == 0 {
            return Err(Error::Config(
                "d_bottleneck must be positive (degenerate size-0 adapters are rejected)".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Exact parameter counts implied by a config: `(shared, per_language)`.
/// The total over a modular model is `shared + N * per_language`.
pub fn param_counts(config: &ModelConfig) -> (usize, usize) {
    let d = config.d_model;
    let shared = config.vocab_size * d
        + config.max_len * d
        + config.n_enc_layers * (4 * d * d + 2 * d * config.d_ff + 2 * d)
        + config.n_dec_layers * (8 * d * d + 2 * d * config.d_ff + 3 * d)
        + d;
    let per_language = config.n_layers()
        * (config.d_bottleneck * d + config.d_bottleneck + d * config.d_bottleneck + d);
    (shared, per_language)
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: ParamId,
    attn: AttentionParams,
    ln_ffn: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_attn: ParamId,
    attn: AttentionParams,
    ln_cross: ParamId,
    cross: AttentionParams,
    ln_ffn: ParamId,
    w1: ParamId,
    w2: ParamId,
}

/// Parameter ids of one bottleneck adapter unit.
#[derive(Debug, Clone, Copy)]
pub struct AdapterUnit {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl AdapterUnit {
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

/// Resolved routing target: an adapter bank/layer position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterHandle {
    pub bank: usize,
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    variant: Variant,
    store: ParamStore,
    emb_token: ParamId,
    emb_pos: ParamId,
    enc_layers: Vec<EncLayer>,
    dec_layers: Vec<DecLayer>,
    final_ln: ParamId,
    /// `adapters[bank][layer]`, layers indexed encoder-first.
    adapters: Vec<Vec<AdapterUnit>>,
    inference_lang: LanguageId,
}

impl Model {
    /// Builds and initializes a model. Shared parameters are drawn first, so
    /// two variants built from the same seed share their trunk init.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (config.d_ff as f64).sqrt();
        let emb_std = 0.02;

        let emb_token = store.add(
            "emb.token",
            ParamGroup::Emb,
            None,
            Tensor::randn(vec![config.vocab_size, d], emb_std, &mut rng),
        );
        let emb_pos = store.add(
            "emb.pos",
            ParamGroup::Emb,
            None,
            Tensor::randn(vec![config.max_len, d], emb_std, &mut rng),
        );

        let attn = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        prefix: &str,
                        group: ParamGroup| AttentionParams {
            wq: store.add(
                format!("{prefix}.wq"),
                group,
                None,
                Tensor::randn(vec![d, d], proj_std, rng),
            ),
            wk: store.add(
                format!("{prefix}.wk"),
                group,
                None,
                Tensor::randn(vec![d, d], proj_std, rng),
            ),
            wv: store.add(
                format!("{prefix}.wv"),
                group,
                None,
                Tensor::randn(vec![d, d], proj_std, rng),
            ),
            wo: store.add(
                format!("{prefix}.wo"),
                group,
                None,
                Tensor::randn(vec![d, d], proj_std, rng),
            ),
        };

        let mut enc_layers = Vec::with_capacity(config.n_enc_layers);
        for i in 0..config.n_enc_layers {
            let ln_attn = store.add(
                format!("enc.{i}.ln_attn.gain"),
                ParamGroup::EncLn,
                None,
                Tensor::ones(vec![d]),
            );
            let a = attn(&mut store, &mut rng, &format!("enc.{i}.attn"), ParamGroup::EncAtt);
            let ln_ffn = store.add(
                format!("enc.{i}.ln_ffn.gain"),
                ParamGroup::EncLn,
                None,
                Tensor::ones(vec![d]),
            );
            let w1 = store.add(
                format!("enc.{i}.ffn.w1"),
                ParamGroup::EncFfn,
                None,
                Tensor::randn(vec![d, config.d_ff], proj_std, &mut rng),
            );
            let w2 = store.add(
                format!("enc.{i}.ffn.w2"),
                ParamGroup::EncFfn,
                None,
                Tensor::randn(vec![config.d_ff, d], ff_std, &mut rng),
            );
            enc_layers.push(EncLayer {
                ln_attn,
                attn: a,
                ln_ffn,
                w1,
                w2,
            });
        }

        let mut dec_layers = Vec::with_capacity(config.n_dec_layers);
        for i in 0..config.n_dec_layers {
            let ln_attn = store.add(
                format!("dec.{i}.ln_attn.gain"),
                ParamGroup::DecLn,
                None,
                Tensor::ones(vec![d]),
            );
            let a = attn(&mut store, &mut rng, &format!("dec.{i}.attn"), ParamGroup::DecAtt);
            let ln_cross = store.add(
                format!("dec.{i}.ln_cross.gain"),
                ParamGroup::DecLn,
                None,
                Tensor::ones(vec![d]),
            );
            let c = attn(
                &mut store,
                &mut rng,
                &format!("dec.{i}.cross"),
                ParamGroup::DecCrossAtt,
            );
            let ln_ffn = store.add(
                format!("dec.{i}.ln_ffn.gain"),
                ParamGroup::DecLn,
                None,
                Tensor::ones(vec![d]),
            );
            let w1 = store.add(
                format!("dec.{i}.ffn.w1"),
                ParamGroup::DecFfn,
                None,
                Tensor::randn(vec![d, config.d_ff], proj_std, &mut rng),
            );
            let w2 = store.add(
                format!("dec.{i}.ffn.w2"),
                ParamGroup::DecFfn,
                None,
                Tensor::randn(vec![config.d_ff, d], ff_std, &mut rng),
            );
            dec_layers.push(DecLayer {
                ln_attn,
                attn: a,
                ln_cross,
                cross: c,
                ln_ffn,
                w1,
                w2,
            });
        }

        let final_ln = store.add(
            "dec.final_ln.gain",
            ParamGroup::DecLn,
            None,
            Tensor::ones(vec![d]),
        );

        let n_banks = match variant {
            Variant::Modular => config.n_languages,
            Variant::Dense => 1,
        };
        let n_layers = config.n_layers();
        let mut adapters = Vec::with_capacity(n_banks);
        for bank in 0..n_banks {
            let mut units = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let (side, group) = if layer < config.n_enc_layers {
                    ("enc", ParamGroup::EncMod)
                } else {
                    ("dec", ParamGroup::DecMod)
                };
                let prefix = format!("mod.{side}.{layer}.lang{bank}");
                let down_w = store.add(
                    format!("{prefix}.down.w"),
                    group,
                    Some(bank),
                    Tensor::randn(vec![config.d_bottleneck, d], proj_std, &mut rng),
                );
                let down_b = store.add(
                    format!("{prefix}.down.b"),
                    group,
                    Some(bank),
                    Tensor::zeros(vec![config.d_bottleneck]),
                );
                // Zero up-projection makes every fresh adapter the identity.
                let up_w = store.add(
                    format!("{prefix}.up.w"),
                    group,
                    Some(bank),
                    Tensor::zeros(vec![d, config.d_bottleneck]),
                );
                let up_b = store.add(
                    format!("{prefix}.up.b"),
                    group,
                    Some(bank),
                    Tensor::zeros(vec![d]),
                );
                units.push(AdapterUnit {
                    down_w,
                    down_b,
                    up_w,
                    up_b,
                });
            }
            adapters.push(units);
        }

        Ok(Model {
            config,
            variant,
            store,
            emb_token,
            emb_pos,
            enc_layers,
            dec_layers,
            final_ln,
            adapters,
            inference_lang: LanguageId(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_banks(&self) -> usize {
        self.adapters.len()
    }

    /// Fixed routing: the adapter for (language, layer). Every token of an
    /// example is routed through the same unit. The dense variant maps all
    /// languages onto its single bank.
    pub fn route(&self, lang: LanguageId, layer: usize) -> Result<AdapterHandle> {
        if lang.0 >= self.config.n_languages {
            return Err(Error::Routing {
                lang: lang.0,
                n_languages: self.config.n_languages,
            });
        }
        if layer >= self.config.n_layers() {
            return Err(Error::IndexOutOfRange {
                what: "adapter layer",
                index: layer,
                limit: self.config.n_layers(),
            });
        }
        let bank = match self.variant {
            Variant::Modular => lang.0,
            Variant::Dense => 0,
        };
        Ok(AdapterHandle { bank, layer })
    }

    pub fn adapter_unit(&self, handle: AdapterHandle) -> &AdapterUnit {
        &self.adapters[handle.bank][handle.layer]
    }

    /// All parameter ids of one language's bank (both encoder and decoder units).
    pub fn bank_param_ids(&self, bank: usize) -> Vec<ParamId> {
        self.adapters[bank]
            .iter()
            .flat_map(|u| u.param_ids())
            .collect()
    }

    /// Sets the language whose modules are used for subsequent inference.
    pub fn swap_language(&mut self, inference_lang: LanguageId) -> Result<()> {
        if inference_lang.0 >= self.config.n_languages {
            return Err(Error::Routing {
                lang: inference_lang.0,
                n_languages: self.config.n_languages,
            });
        }
        self.inference_lang = inference_lang;
        Ok(())
    }

    pub fn active_language(&self) -> LanguageId {
        self.inference_lang
    }

    fn check_tokens(&self, what: &'static str, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Dimension(format!("{what}: empty token sequence")));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Dimension(format!(
                "{what}: length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: t,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// `h + U.relu(D.h + b_D) + b_U` for a `[T x d_model]` input.
    pub fn adapter_apply_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        h: TapeId,
        handle: AdapterHandle,
    ) -> Result<TapeId> {
        let unit = *self.adapter_unit(handle);
        let down_w = binder.bind(&self.store, tape, unit.down_w);
        let down_b = binder.bind(&self.store, tape, unit.down_b);
        let up_w = binder.bind(&self.store, tape, unit.up_w);
        let up_b = binder.bind(&self.store, tape, unit.up_b);
        let pre = tape.matmul_nt(h, down_w)?;
        let pre = tape.add_row(pre, down_b)?;
        let act = tape.relu(pre);
        let up = tape.matmul_nt(act, up_w)?;
        let up = tape.add_row(up, up_b)?;
        tape.add(h, up)
    }

    /// Value-level adapter application, for tests and probes.
    pub fn adapter_apply(&self, h: &Tensor, handle: AdapterHandle) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.store);
        let hid = tape.constant(h.clone());
        let out = self.adapter_apply_on(&mut tape, &mut binder, hid, handle)?;
        Ok(tape.value(out).clone())
    }

    fn attention_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        q_in: TapeId,
        kv_in: TapeId,
        p: &AttentionParams,
        causal: bool,
    ) -> Result<TapeId> {
        let wq = binder.bind(&self.store, tape, p.wq);
        let wk = binder.bind(&self.store, tape, p.wk);
        let wv = binder.bind(&self.store, tape, p.wv);
        let wo = binder.bind(&self.store, tape, p.wo);
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let d_k = self.config.d_model / self.config.n_heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let t_q = tape.value(q).rows();
        let t_k = tape.value(k).rows();
        let mask = if causal {
            debug_assert_eq!(t_q, t_k);
            let mut m = vec![0.0; t_q * t_k];
            for i in 0..t_q {
                for j in (i + 1)..t_k {
                    m[i * t_k + j] = MASK_NEG;
                }
            }
            Some(tape.constant(Tensor::from_vec(vec![t_q, t_k], m)?))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.col_slice(q, h * d_k, d_k)?;
            let kh = tape.col_slice(k, h * d_k, d_k)?;
            let vh = tape.col_slice(v, h * d_k, d_k)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = mask {
                scores = tape.add(scores, mask)?;
            }
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, wo)
    }

    fn embed_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        tokens: &[usize],
    ) -> Result<TapeId> {
        let emb = binder.bind(&self.store, tape, self.emb_token);
        let pos = binder.bind(&self.store, tape, self.emb_pos);
        let tok = tape.gather(emb, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(pos, &positions)?;
        tape.add(tok, pos)
    }

    fn encode_impl(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        tokens: &[usize],
        lang: LanguageId,
        apply_adapters: bool,
    ) -> Result<TapeId> {
        self.check_tokens("encode", tokens)?;
        let mut h = self.embed_on(tape, binder, tokens)?;
        for (i, layer) in self.enc_layers.iter().enumerate() {
            let gain = binder.bind(&self.store, tape, layer.ln_attn);
            let a = tape.rms_norm(h, gain, RMS_EPS)?;
            let attn = self.attention_on(tape, binder, a, a, &layer.attn, false)?;
            h = tape.add(h, attn)?;

            let gain = binder.bind(&self.store, tape, layer.ln_ffn);
            let f = tape.rms_norm(h, gain, RMS_EPS)?;
            let w1 = binder.bind(&self.store, tape, layer.w1);
            let w2 = binder.bind(&self.store, tape, layer.w2);
            let mid = tape.matmul(f, w1)?;
            let mid = tape.relu(mid);
            let out = tape.matmul(mid, w2)?;
            h = tape.add(h, out)?;

            if apply_adapters {
                let handle = self.route(lang, i)?;
                h = self.adapter_apply_on(tape, binder, h, handle)?;
            }
        }
        Ok(h)
    }

    fn decode_impl(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        enc_out: TapeId,
        tgt_in: &[usize],
        lang: LanguageId,
        apply_adapters: bool,
    ) -> Result<TapeId> {
        self.check_tokens("decode", tgt_in)?;
        let mut h = self.embed_on(tape, binder, tgt_in)?;
        for (i, layer) in self.dec_layers.iter().enumerate() {
            let gain = binder.bind(&self.store, tape, layer.ln_attn);
            let a = tape.rms_norm(h, gain, RMS_EPS)?;
            let attn = self.attention_on(tape, binder, a, a, &layer.attn, true)?;
            h = tape.add(h, attn)?;

            let gain = binder.bind(&self.store, tape, layer.ln_cross);
            let c = tape.rms_norm(h, gain, RMS_EPS)?;
            let cross = self.attention_on(tape, binder, c, enc_out, &layer.cross, false)?;
            h = tape.add(h, cross)?;

            let gain = binder.bind(&self.store, tape, layer.ln_ffn);
            let f = tape.rms_norm(h, gain, RMS_EPS)?;
            let w1 = binder.bind(&self.store, tape, layer.w1);
            let w2 = binder.bind(&self.store, tape, layer.w2);
            let mid = tape.matmul(f, w1)?;
            let mid = tape.relu(mid);
            let out = tape.matmul(mid, w2)?;
            h = tape.add(h, out)?;

            if apply_adapters {
                let handle = self.route(lang, self.config.n_enc_layers + i)?;
                h = self.adapter_apply_on(tape, binder, h, handle)?;
            }
        }
        let gain = binder.bind(&self.store, tape, self.final_ln);
        let h = tape.rms_norm(h, gain, RMS_EPS)?;
        // Tied output head: logits = h . E^T
        let emb = binder.bind(&self.store, tape, self.emb_token);
        tape.matmul_nt(h, emb)
    }

    /// Encoder stack on an existing tape.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        tokens: &[usize],
        lang: LanguageId,
    ) -> Result<TapeId> {
        self.route(lang, 0)?;
        self.encode_impl(tape, binder, tokens, lang, true)
    }

    /// Decoder stack over an already-encoded source on the same tape;
    /// returns `[T_t x vocab]` logits. Used by incremental decoding.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        enc_out: TapeId,
        tgt_in: &[usize],
        lang: LanguageId,
    ) -> Result<TapeId> {
        self.route(lang, 0)?;
        self.decode_impl(tape, binder, enc_out, tgt_in, lang, true)
    }

    /// Full pass on an existing tape; returns `[T_t x vocab]` logits.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        src: &[usize],
        tgt_in: &[usize],
        lang: LanguageId,
    ) -> Result<TapeId> {
        let enc = self.encode_on(tape, binder, src, lang)?;
        self.decode_impl(tape, binder, enc, tgt_in, lang, true)
    }

    /// Encoder output values on a throwaway tape.
    pub fn encode(&self, tokens: &[usize], lang: LanguageId) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.store);
        let h = self.encode_on(&mut tape, &mut binder, tokens, lang)?;
        Ok(tape.value(h).clone())
    }

    /// Logit values on a throwaway tape.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize], lang: LanguageId) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.store);
        let logits = self.forward_on(&mut tape, &mut binder, src, tgt_in, lang)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward through the currently swapped-in inference language.
    pub fn forward_inference(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        self.forward(src, tgt_in, self.inference_lang)
    }

    /// The shared trunk alone, adapters skipped entirely. A zero-init model
    /// produces logits bit-identical to this path.
    pub fn forward_shared_only(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.store);
        let enc = self.encode_impl(&mut tape, &mut binder, src, LanguageId(0), false)?;
        let logits = self.decode_impl(&mut tape, &mut binder, enc, tgt_in, LanguageId(0), false)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            n_languages: 3,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_bottleneck: 4,
            vocab_size: 20,
            max_len: 12,
        }
    }

    #[test]
    fn config_rejects_zero_bottleneck_and_bad_heads() {
        let mut c = micro_config();
        c.d_bottleneck = 0;
        assert!(c.validate().is_err());
        let mut c = micro_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_counts_match_spec_example() {
        // d_model=8, d_bottleneck=4, L=4 => per_language = 4*(8*4+4 + 4*8+8) = 304
        let c = ModelConfig {
            n_languages: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_bottleneck: 4,
            vocab_size: 20,
            max_len: 12,
        };
        let (_, per_language) = param_counts(&c);
        assert_eq!(per_language, 304);
    }

    #[test]
    fn param_counts_equal_enumeration() {
        let c = micro_config();
        let m = Model::new(c.clone(), Variant::Modular, 1).unwrap();
        let (shared, per_language) = param_counts(&c);
        let shared_enum: usize = m
            .store()
            .iter()
            .filter(|(_, p)| !p.group.is_adapter())
            .map(|(_, p)| p.value.numel())
            .sum();
        let adapter_enum: usize = m
            .store()
            .iter()
            .filter(|(_, p)| p.group.is_adapter())
            .map(|(_, p)| p.value.numel())
            .sum();
        assert_eq!(shared, shared_enum);
        assert_eq!(per_language * c.n_languages, adapter_enum);
    }

    #[test]
    fn shared_count_independent_of_n() {
        let mut c1 = micro_config();
        c1.n_languages = 1;
        let mut c3 = micro_config();
        c3.n_languages = 3;
        assert_eq!(param_counts(&c1).0, param_counts(&c3).0);
    }

    #[test]
    fn route_is_direct_index_and_bounds_checked() {
        let m = Model::new(micro_config(), Variant::Modular, 0).unwrap();
        let h = m.route(LanguageId(2), 0).unwrap();
        assert_eq!(h, AdapterHandle { bank: 2, layer: 0 });
        assert!(m.route(LanguageId(3), 0).is_err());
        assert!(m.route(LanguageId(0), 2).is_err());
    }

    #[test]
    fn dense_routes_all_languages_to_bank_zero() {
        let m = Model::new(micro_config(), Variant::Dense, 0).unwrap();
        assert_eq!(m.n_banks(), 1);
        for lang in 0..3 {
            assert_eq!(m.route(LanguageId(lang), 1).unwrap().bank, 0);
        }
    }

    #[test]
    fn fresh_adapter_is_identity_bit_exactly() {
        let m = Model::new(micro_config(), Variant::Modular, 3).unwrap();
        let h = Tensor::randn(vec![5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let out = m.adapter_apply(&h, m.route(LanguageId(1), 1).unwrap()).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn adapter_hand_example() {
        // d_model=2, bottleneck=1, D=[[1,0]], U=[[1],[0]], biases zero, h=[2,3] -> [4,3]
        let c = ModelConfig {
            n_languages: 1,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_ff: 4,
            d_bottleneck: 1,
            vocab_size: 6,
            max_len: 4,
        };
        let mut m = Model::new(c, Variant::Modular, 0).unwrap();
        let unit = *m.adapter_unit(AdapterHandle { bank: 0, layer: 0 });
        m.store_mut().get_mut(unit.down_w).value.data_mut().copy_from_slice(&[1.0, 0.0]);
        m.store_mut().get_mut(unit.up_w).value.data_mut().copy_from_slice(&[1.0, 0.0]);
        let h = Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let out = m.adapter_apply(&h, AdapterHandle { bank: 0, layer: 0 }).unwrap();
        assert_eq!(out.data(), &[4.0, 3.0]);
    }

    #[test]
    fn adapter_negative_preactivation_is_identity() {
        let c = micro_config();
        let mut m = Model::new(c, Variant::Modular, 5).unwrap();
        let unit = *m.adapter_unit(AdapterHandle { bank: 0, layer: 0 });
        // force strongly negative pre-activations; relu kills the update
        for v in m.store_mut().get_mut(unit.down_b).value.data_mut() {
            *v = -100.0;
        }
        for v in m.store_mut().get_mut(unit.up_w).value.data_mut() {
            *v = 1.0;
        }
        let h = Tensor::from_vec(vec![2, 8], vec![0.1; 16]).unwrap();
        let out = m.adapter_apply(&h, AdapterHandle { bank: 0, layer: 0 }).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn zero_init_encode_is_language_independent() {
        let m = Model::new(micro_config(), Variant::Modular, 11).unwrap();
        let tokens = [1usize, 4, 9, 2];
        let e0 = m.encode(&tokens, LanguageId(0)).unwrap();
        let e1 = m.encode(&tokens, LanguageId(1)).unwrap();
        let e2 = m.encode(&tokens, LanguageId(2)).unwrap();
        assert_eq!(e0.data(), e1.data());
        assert_eq!(e0.data(), e2.data());
    }

    #[test]
    fn routing_isolation_for_encode() {
        let mut m = Model::new(micro_config(), Variant::Modular, 13).unwrap();
        let tokens = [3usize, 7, 1];
        let before = m.encode(&tokens, LanguageId(0)).unwrap();
        // perturb every parameter of other languages' banks
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for bank in 1..3 {
            for id in m.bank_param_ids(bank) {
                for v in m.store_mut().get_mut(id).value.data_mut() {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
        }
        let after = m.encode(&tokens, LanguageId(0)).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut m = Model::new(micro_config(), Variant::Modular, 17).unwrap();
        // give the adapters real weights so the test covers the full path
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bank in 0..3 {
            for id in m.bank_param_ids(bank) {
                for v in m.store_mut().get_mut(id).value.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        let src = [1usize, 2, 3];
        let a = m.forward(&src, &[5, 6, 7, 8], LanguageId(1)).unwrap();
        let b = m.forward(&src, &[5, 6, 19, 12], LanguageId(1)).unwrap();
        let v = m.config().vocab_size;
        // positions 0 and 1 see identical prefixes
        assert_eq!(a.data()[..2 * v], b.data()[..2 * v]);
        assert_ne!(a.data()[2 * v..], b.data()[2 * v..]);
    }

    #[test]
    fn zero_init_forward_equals_shared_trunk() {
        let m = Model::new(micro_config(), Variant::Modular, 23).unwrap();
        let src = [1usize, 2, 3, 4];
        let tgt = [5usize, 6];
        let modular = m.forward(&src, &tgt, LanguageId(2)).unwrap();
        let trunk = m.forward_shared_only(&src, &tgt).unwrap();
        assert_eq!(modular.data(), trunk.data());
    }

    #[test]
    fn swap_language_contract() {
        let mut m = Model::new(micro_config(), Variant::Modular, 29).unwrap();
        let src = [1usize, 2];
        let tgt = [3usize];
        m.swap_language(LanguageId(1)).unwrap();
        let via_swap = m.forward_inference(&src, &tgt).unwrap();
        let direct = m.forward(&src, &tgt, LanguageId(1)).unwrap();
        assert_eq!(via_swap.data(), direct.data());
        // double swap is a no-op
        m.swap_language(LanguageId(2)).unwrap();
        m.swap_language(LanguageId(1)).unwrap();
        let again = m.forward_inference(&src, &tgt).unwrap();
        assert_eq!(again.data(), via_swap.data());
        assert!(m.swap_language(LanguageId(3)).is_err());
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = Model::new(micro_config(), Variant::Modular, 31).unwrap();
        let tokens: Vec<usize> = (0..13).map(|i| i % 5).collect();
        assert!(m.encode(&tokens, LanguageId(0)).is_err());
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let a = Model::new(micro_config(), Variant::Modular, 41).unwrap();
        let b = Model::new(micro_config(), Variant::Modular, 41).unwrap();
        let la = a.forward(&[1, 2, 3], &[4, 5], LanguageId(1)).unwrap();
        let lb = b.forward(&[1, 2, 3], &[4, 5], LanguageId(1)).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
