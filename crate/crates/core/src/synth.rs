//! Deterministic synthetic multilingual corpus.
//!
//! Every language is a rendering of a shared "pivot" token space `[0, V_b)`
//! into its own disjoint vocabulary slice via a seeded permutation, so
//! parallel sentences exist by construction, language identification is
//! exact slice membership, and "correct meaning in the wrong language" is a
//! well-defined, measurable output.
//!
//! The layout always allocates one extra slice beyond the trained languages.
//! That reserved slice never appears in pretraining and stands in for a
//! truly unseen language. Its relatedness to a trained language j is
//! controlled by two knobs: it can share j's permutation, and a seeded
//! fraction of its pivot vocabulary can be rendered with j's tokens
//! outright (loanwords), the synthetic analogue of related languages
//! sharing lexical material.

use crate::error::{Error, Result};
use crate::model::LanguageId;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary regions: `n_slices` content slices of width `v_base`, then
/// PAD/BOS/EOS, then the corruption sentinels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub n_slices: usize,
    pub v_base: usize,
    pub n_sentinels: usize,
}

impl VocabLayout {
    pub const DEFAULT_SENTINELS: usize = 16;

    /// Layout for `n_languages` trained languages plus the reserved slice.
    pub fn new(n_languages: usize, v_base: usize) -> VocabLayout {
        VocabLayout {
            n_slices: n_languages + 1,
            v_base,
            n_sentinels: Self::DEFAULT_SENTINELS,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_slices * self.v_base + 3 + self.n_sentinels
    }

    pub fn content_end(&self) -> usize {
        self.n_slices * self.v_base
    }

    pub fn pad(&self) -> usize {
        self.content_end()
    }

    pub fn bos(&self) -> usize {
        self.content_end() + 1
    }

    pub fn eos(&self) -> usize {
        self.content_end() + 2
    }

    pub fn sentinel(&self, i: usize) -> Result<usize> {
        if i >= self.n_sentinels {
            return Err(Error::IndexOutOfRange {
                what: "sentinel",
                index: i,
                limit: self.n_sentinels,
            });
        }
        Ok(self.content_end() + 3 + i)
    }

    pub fn is_sentinel(&self, token: usize) -> bool {
        token >= self.content_end() + 3 && token < self.vocab_size()
    }

    pub fn is_content(&self, token: usize) -> bool {
        token < self.content_end()
    }

    /// Slice index of a content token.
    pub fn slice_of(&self, token: usize) -> Option<usize> {
        self.is_content(token).then(|| token / self.v_base)
    }

    /// Number of trained languages (slices minus the reserved one).
    pub fn n_trained(&self) -> usize {
        self.n_slices - 1
    }

    pub fn reserved_slice(&self) -> usize {
        self.n_slices - 1
    }
}

/// One synthetic language: a slice plus a bijection over pivot space.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub id: LanguageId,
    offset: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
    /// Loanword overrides: pivot token -> token in another language's slice.
    cognates: Vec<Option<usize>>,
}

impl SyntheticLanguage {
    pub fn new(id: LanguageId, layout: &VocabLayout, perm: Vec<usize>) -> SyntheticLanguage {
        assert_eq!(perm.len(), layout.v_base, "permutation must cover [0, V_b)");
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        SyntheticLanguage {
            id,
            offset: id.0 * layout.v_base,
            cognates: vec![None; perm.len()],
            perm,
            inv,
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `t -> offset + perm(t)`, with loanword overrides where planted.
    pub fn render(&self, pivot: &[usize]) -> Result<Vec<usize>> {
        pivot
            .iter()
            .map(|&t| {
                if t >= self.perm.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "pivot token",
                        index: t,
                        limit: self.perm.len(),
                    });
                }
                Ok(match self.cognates[t] {
                    Some(foreign) => foreign,
                    None => self.offset + self.perm[t],
                })
            })
            .collect()
    }

    /// Inverse of [`render`] for tokens of this language's own slice.
    pub fn derender(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if t < self.offset || t >= self.offset + self.perm.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "slice token",
                        index: t,
                        limit: self.offset + self.perm.len(),
                    });
                }
                Ok(self.inv[t - self.offset])
            })
            .collect()
    }
}

/// Deterministic bigram chain over pivot space; all languages share it.
#[derive(Debug, Clone)]
pub struct PivotGrammar {
    v_base: usize,
    n_successors: usize,
    successors: Vec<Vec<usize>>,
    min_len: usize,
    max_len: usize,
}

impl PivotGrammar {
    pub const SUCCESSORS: usize = 4;
    pub const MIN_LEN: usize = 8;

    /// `max_len` here is the sequence-length cap for generated pivots, i.e.
    /// model `max_len - 4` so corrupted inputs and task targets always fit.
    pub fn new(grammar_seed: u64, v_base: usize, max_len: usize) -> PivotGrammar {
        assert!(max_len >= Self::MIN_LEN, "max pivot length below minimum");
        let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
        let n_successors = Self::SUCCESSORS.min(v_base);
        let successors = (0..v_base)
            .map(|_| sample(&mut rng, v_base, n_successors).into_vec())
            .collect();
        PivotGrammar {
            v_base,
            n_successors,
            successors,
            min_len: Self::MIN_LEN,
            max_len,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len);
        let mut state = rng.random_range(0..self.v_base);
        out.push(state);
        for _ in 1..len {
            let next = self.successors[state][rng.random_range(0..self.n_successors)];
            out.push(next);
            state = next;
        }
        out
    }

    /// Chain transition probability, for distribution checks.
    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        let hits = self.successors[from].iter().filter(|&&s| s == to).count();
        hits as f64 / self.n_successors as f64
    }

    pub fn successors_of(&self, state: usize) -> &[usize] {
        &self.successors[state]
    }

    pub fn length_bounds(&self) -> (usize, usize) {
        (self.min_len, self.max_len)
    }
}

/// One corpus example. Targets carry a trailing EOS; inputs do not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub lang: LanguageId,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Outcome of span corruption on one sequence.
pub enum Corrupted {
    Example { input: Vec<usize>, target: Vec<usize> },
    /// Sequence too short to corrupt; callers draw a fresh one.
    Skip,
}

/// Splits `n_items` into `n_segments` parts, each at least 1.
fn random_segmentation(n_items: usize, n_segments: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n_segments >= 1 && n_items >= n_segments);
    if n_segments == 1 {
        return vec![n_items];
    }
    // choose distinct interior cut points in [1, n_items)
    let mut cuts = sample(rng, n_items - 1, n_segments - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect::<Vec<_>>();
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(n_segments);
    let mut prev = 0;
    for c in cuts {
        lengths.push(c - prev);
        prev = c;
    }
    lengths.push(n_items - prev);
    lengths
}

/// T5-style span corruption. Roughly `noise_density` of the tokens are
/// removed in spans of mean length `mean_span_len`; each removed span leaves
/// a sentinel in the input and reappears in the target after the same
/// sentinel. `splice` reconstructs the original sequence exactly.
pub fn span_corrupt(
    tokens: &[usize],
    noise_density: f64,
    mean_span_len: f64,
    layout: &VocabLayout,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted> {
    if !(noise_density > 0.0 && noise_density < 1.0) {
        return Err(Error::Contract(format!(
            "noise_density must lie in (0, 1), got {noise_density}"
        )));
    }
    let n = tokens.len();
    if n < 4 {
        return Ok(Corrupted::Skip);
    }
    let n_noise = (n as f64 * noise_density).round() as usize;
    if n_noise == 0 {
        return Ok(Corrupted::Example {
            input: tokens.to_vec(),
            target: vec![layout.eos()],
        });
    }
    let n_noise = n_noise.min(n - 1);
    let n_nonnoise = n - n_noise;
    let n_spans = ((n_noise as f64 / mean_span_len).round() as usize)
        .max(1)
        .min(n_noise)
        .min(n_nonnoise)
        .min(layout.n_sentinels);

    let noise_lengths = random_segmentation(n_noise, n_spans, rng);
    let nonnoise_lengths = random_segmentation(n_nonnoise, n_spans, rng);

    let mut input = Vec::with_capacity(n_nonnoise + n_spans);
    let mut target = Vec::with_capacity(n_noise + n_spans + 1);
    let mut pos = 0;
    for (i, (&keep, &drop)) in nonnoise_lengths.iter().zip(&noise_lengths).enumerate() {
        input.extend_from_slice(&tokens[pos..pos + keep]);
        pos += keep;
        let sentinel = layout.sentinel(i)?;
        input.push(sentinel);
        target.push(sentinel);
        target.extend_from_slice(&tokens[pos..pos + drop]);
        pos += drop;
    }
    debug_assert_eq!(pos, n);
    target.push(layout.eos());
    Ok(Corrupted::Example { input, target })
}

/// Reconstructs the original sequence from a corrupted pair.
pub fn splice(input: &[usize], target: &[usize], layout: &VocabLayout) -> Result<Vec<usize>> {
    // parse target into sentinel-keyed spans
    let mut spans: Vec<(usize, Vec<usize>)> = Vec::new();
    for &t in target {
        if t == layout.eos() {
            break;
        }
        if layout.is_sentinel(t) {
            spans.push((t, Vec::new()));
        } else if let Some(last) = spans.last_mut() {
            last.1.push(t);
        } else {
            return Err(Error::Contract(
                "splice: target content before first sentinel".into(),
            ));
        }
    }
    let mut out = Vec::new();
    for &t in input {
        if layout.is_sentinel(t) {
            let span = spans
                .iter()
                .find(|(s, _)| *s == t)
                .ok_or_else(|| Error::Contract(format!("splice: sentinel {t} missing in target")))?;
            out.extend_from_slice(&span.1);
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

/// Even-position extraction: the fine-tuning transduction task. The target
/// is the same language as the input, so output language should equal input
/// language and a wrong-language output with correct meaning is expressible.
pub fn gen_task(lang: &SyntheticLanguage, pivot: &[usize], layout: &VocabLayout) -> Result<Example> {
    let input = lang.render(pivot)?;
    let extracted: Vec<usize> = pivot.iter().step_by(2).copied().collect();
    let mut target = lang.render(&extracted)?;
    target.push(layout.eos());
    Ok(Example {
        lang: lang.id,
        input,
        target,
    })
}

/// Majority-vote language identification over content-token slice
/// membership. Ties break to the lower slice id. Specials and sentinels are
/// ignored; a sequence without content tokens is undetermined.
pub fn lid(tokens: &[usize], layout: &VocabLayout) -> Result<(LanguageId, f64)> {
    let mut counts = vec![0usize; layout.n_slices];
    let mut total = 0usize;
    for &t in tokens {
        if let Some(slice) = layout.slice_of(t) {
            counts[slice] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Undetermined(
            "language id over a sequence with no content tokens".into(),
        ));
    }
    let (best, &count) = counts
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        .expect("non-empty counts");
    Ok((LanguageId(best), count as f64 / total as f64))
}

/// Per-token derendering using each token's own slice and that slice's
/// language. Returns `None` for non-content tokens.
pub fn derender_token(token: usize, languages: &[SyntheticLanguage], layout: &VocabLayout) -> Option<usize> {
    let slice = layout.slice_of(token)?;
    let lang = languages.get(slice)?;
    lang.derender(&[token]).ok().map(|v| v[0])
}

/// Fraction of positions whose pivot meaning matches the reference,
/// regardless of which language each token is rendered in. Trailing EOS on
/// either side is ignored; length mismatches count against the score.
pub fn meaning_match(
    output: &[usize],
    reference: &[usize],
    languages: &[SyntheticLanguage],
    layout: &VocabLayout,
) -> Result<f64> {
    let strip = |seq: &[usize]| -> Vec<usize> {
        let mut v = seq.to_vec();
        while v.last() == Some(&layout.eos()) {
            v.pop();
        }
        v
    };
    let out = strip(output);
    let reference = strip(reference);
    if !out.iter().any(|&t| layout.is_content(t)) {
        return Err(Error::Undetermined(
            "meaning_match over an output with no content tokens".into(),
        ));
    }
    let denom = out.len().max(reference.len());
    if denom == 0 {
        return Ok(1.0);
    }
    let matches = out
        .iter()
        .zip(&reference)
        .filter(|(&o, &r)| {
            match (
                derender_token(o, languages, layout),
                derender_token(r, languages, layout),
            ) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            }
        })
        .count();
    Ok(matches as f64 / denom as f64)
}

fn mix_seed(seed: u64, tag: u64, lane: u64) -> u64 {
    // splitmix64 over a combined word
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(lane.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Everything needed to generate corpora deterministically.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub n_languages: usize,
    pub v_base: usize,
    pub grammar_seed: u64,
    pub data_seed: u64,
    pub max_len: usize,
    pub pretrain_per_lang: usize,
    pub pretrain_heldout_per_lang: usize,
    pub task_train_per_lang: usize,
    pub task_dev_per_lang: usize,
    pub task_heldout_per_lang: usize,
    pub sweep_examples: usize,
    pub noise_density: f64,
    pub mean_span_len: f64,
    /// Trained language the reserved slice is related to.
    pub related_to: Option<usize>,
    /// Loanword fraction for the reserved slice, in `[0, 1]`.
    pub relatedness: f64,
}

impl DataConfig {
    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self.n_languages, self.v_base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages == 0 || self.v_base < 2 {
            return Err(Error::Config("need n_languages >= 1 and v_base >= 2".into()));
        }
        if self.max_len < PivotGrammar::MIN_LEN + 4 {
            return Err(Error::Config(format!(
                "max_len must be at least {}",
                PivotGrammar::MIN_LEN + 4
            )));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Config("relatedness must lie in [0, 1]".into()));
        }
        if let Some(j) = self.related_to {
            if j >= self.n_languages {
                return Err(Error::Config(format!(
                    "related_to = {j} is not a trained language (N = {})",
                    self.n_languages
                )));
            }
        }
        Ok(())
    }
}

/// The language set implied by a data config: one language per trained
/// slice plus the reserved language with its relatedness plant applied.
pub fn build_languages(cfg: &DataConfig) -> Result<Vec<SyntheticLanguage>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut languages = Vec::with_capacity(layout.n_slices);
    for slice in 0..layout.n_slices {
        let reserved = slice == layout.reserved_slice();
        let perm_source = match (reserved, cfg.related_to) {
            // the reserved slice shares its permutation with the related language
            (true, Some(j)) => j,
            _ => slice,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.grammar_seed, 1, perm_source as u64));
        let mut perm: Vec<usize> = (0..cfg.v_base).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        languages.push(SyntheticLanguage::new(LanguageId(slice), &layout, perm));
    }
    if let Some(j) = cfg.related_to {
        let n_loan = (cfg.relatedness * cfg.v_base as f64).round() as usize;
        if n_loan > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.grammar_seed, 2, j as u64));
            let loans = sample(&mut rng, cfg.v_base, n_loan);
            let donor = languages[j].clone();
            let reserved = layout.reserved_slice();
            for t in loans {
                let word = donor.render(&[t])?[0];
                languages[reserved].cognates[t] = Some(word);
            }
        }
    }
    Ok(languages)
}

/// All splits of a generated corpus.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub layout: VocabLayout,
    pub languages: Vec<SyntheticLanguage>,
    pub pretrain_train: Vec<Example>,
    pub pretrain_heldout: Vec<Example>,
    pub task_train: Vec<Example>,
    pub task_dev: Vec<Example>,
    pub task_heldout: Vec<Example>,
    /// Examples in the reserved (never pretrained) language.
    pub sweep_unseen: Vec<Example>,
}

const TAG_PRETRAIN: u64 = 10;
const TAG_PRETRAIN_HELDOUT: u64 = 11;
const TAG_TASK_TRAIN: u64 = 12;
const TAG_TASK_DEV: u64 = 13;
const TAG_TASK_HELDOUT: u64 = 14;
const TAG_SWEEP: u64 = 15;

pub fn generate(cfg: &DataConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let layout = cfg.layout();
    let languages = build_languages(cfg)?;
    let grammar = PivotGrammar::new(cfg.grammar_seed, cfg.v_base, cfg.max_len - 4);

    let span_split = |tag: u64, count: usize| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(count * cfg.n_languages);
        for lang in 0..cfg.n_languages {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.data_seed, tag, lang as u64));
            let language = &languages[lang];
            let mut made = 0;
            while made < count {
                let pivot = grammar.sample(&mut rng);
                let rendered = language.render(&pivot)?;
                match span_corrupt(
                    &rendered,
                    cfg.noise_density,
                    cfg.mean_span_len,
                    &layout,
                    &mut rng,
                )? {
                    Corrupted::Example { input, target } => {
                        out.push(Example {
                            lang: LanguageId(lang),
                            input,
                            target,
                        });
                        made += 1;
                    }
                    Corrupted::Skip => continue,
                }
            }
        }
        Ok(out)
    };

    // Task splits are parallel across languages: each index shares a pivot.
    let task_split = |tag: u64, count: usize| -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.data_seed, tag, 0));
        let pivots: Vec<Vec<usize>> = (0..count).map(|_| grammar.sample(&mut rng)).collect();
        let mut out = Vec::with_capacity(count * cfg.n_languages);
        for lang in 0..cfg.n_languages {
            for pivot in &pivots {
                out.push(gen_task(&languages[lang], pivot, &layout)?);
            }
        }
        Ok(out)
    };

    let sweep_unseen = {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.data_seed, TAG_SWEEP, 0));
        let reserved = &languages[layout.reserved_slice()];
        (0..cfg.sweep_examples)
            .map(|_| {
                let pivot = grammar.sample(&mut rng);
                gen_task(reserved, &pivot, &layout)
            })
            .collect::<Result<Vec<_>>>()?
    };

    Ok(GeneratedData {
        pretrain_train: span_split(TAG_PRETRAIN, cfg.pretrain_per_lang)?,
        pretrain_heldout: span_split(TAG_PRETRAIN_HELDOUT, cfg.pretrain_heldout_per_lang)?,
        task_train: task_split(TAG_TASK_TRAIN, cfg.task_train_per_lang)?,
        task_dev: task_split(TAG_TASK_DEV, cfg.task_dev_per_lang)?,
        task_heldout: task_split(TAG_TASK_HELDOUT, cfg.task_heldout_per_lang)?,
        sweep_unseen,
        layout,
        languages,
    })
}
