//! Greedy decoding, task metrics, and the module-reuse sweep.

use crate::error::{Error, Result};
use crate::model::{LanguageId, Model};
use crate::params::ParamBinder;
use crate::synth::{lid, meaning_match, Example, SyntheticLanguage, VocabLayout};
use crate::tape::Tape;

/// One decoded example with its verdicts.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Generated tokens, EOS excluded.
    pub output: Vec<usize>,
    /// Detected language and majority confidence; `None` when undetermined.
    pub detected: Option<(LanguageId, f64)>,
    /// Pivot-space agreement with the reference (language-agnostic).
    pub meaning_accuracy: f64,
    /// Strict position-wise token agreement with the reference.
    pub token_accuracy: f64,
    pub exact_match: bool,
}

/// Aggregate metrics over one evaluation set.
#[derive(Debug, Clone)]
pub struct TaskMetrics {
    pub exact_match: f64,
    pub meaning_accuracy: f64,
    pub token_accuracy: f64,
    pub target_language_rate: f64,
    pub results: Vec<DecodeResult>,
}

/// Greedy decoding: start from BOS, append the argmax token (ties to the
/// lowest id), stop at EOS or after `max_new` tokens. The encoder runs once.
pub fn greedy_decode(
    model: &Model,
    input: &[usize],
    lang: LanguageId,
    max_new: usize,
    layout: &VocabLayout,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(model.store());
    let enc = model.encode_on(&mut tape, &mut binder, input, lang)?;
    let cap = max_new.min(model.config().max_len - 1);
    let mut out: Vec<usize> = Vec::new();
    loop {
        let mut tgt_in = Vec::with_capacity(out.len() + 1);
        tgt_in.push(layout.bos());
        tgt_in.extend_from_slice(&out);
        let logits = model.decode_on(&mut tape, &mut binder, enc, &tgt_in, lang)?;
        let value = tape.value(logits);
        let v = value.last_dim();
        let last = &value.data()[(value.rows() - 1) * v..];
        let mut best = 0usize;
        for (tok, &score) in last.iter().enumerate() {
            if score > last[best] {
                best = tok;
            }
        }
        if best == layout.eos() || out.len() >= cap {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

fn strip_eos(seq: &[usize], layout: &VocabLayout) -> Vec<usize> {
    let mut v = seq.to_vec();
    while v.last() == Some(&layout.eos()) {
        v.pop();
    }
    v
}

fn position_accuracy(output: &[usize], reference: &[usize]) -> f64 {
    let denom = output.len().max(reference.len());
    if denom == 0 {
        return 1.0;
    }
    let matches = output
        .iter()
        .zip(reference)
        .filter(|(o, r)| o == r)
        .count();
    matches as f64 / denom as f64
}

/// Decodes one example and scores it against its reference.
pub fn decode_example(
    model: &Model,
    example: &Example,
    lang: LanguageId,
    layout: &VocabLayout,
    languages: &[SyntheticLanguage],
) -> Result<DecodeResult> {
    let reference = strip_eos(&example.target, layout);
    let output = greedy_decode(model, &example.input, lang, model.config().max_len - 1, layout)?;
    let detected = match lid(&output, layout) {
        Ok(d) => Some(d),
        Err(Error::Undetermined(_)) => None,
        Err(e) => return Err(e),
    };
    let meaning_accuracy = match meaning_match(&output, &reference, languages, layout) {
        Ok(m) => m,
        Err(Error::Undetermined(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let token_accuracy = position_accuracy(&output, &reference);
    let exact_match = output == reference;
    Ok(DecodeResult {
        output,
        detected,
        meaning_accuracy,
        token_accuracy,
        exact_match,
    })
}

/// Fraction of results whose detected language equals `target`.
pub fn target_language_rate(results: &[DecodeResult], target: LanguageId) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Undetermined(
            "target language rate over an empty result set".into(),
        ));
    }
    let hits = results
        .iter()
        .filter(|r| matches!(r.detected, Some((lang, _)) if lang == target))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Swaps the model to `inference_lang`, decodes every example, and
/// aggregates exact match, meaning accuracy, token accuracy, and the
/// fraction of outputs detected as `inference_lang`.
pub fn task_eval(
    model: &mut Model,
    examples: &[Example],
    inference_lang: LanguageId,
    layout: &VocabLayout,
    languages: &[SyntheticLanguage],
) -> Result<TaskMetrics> {
    if examples.is_empty() {
        return Err(Error::Undetermined("task_eval over an empty example set".into()));
    }
    model.swap_language(inference_lang)?;
    let lang = model.active_language();
    let mut results = Vec::with_capacity(examples.len());
    for ex in examples {
        results.push(decode_example(model, ex, lang, layout, languages)?);
    }
    let n = results.len() as f64;
    let exact_match = results.iter().filter(|r| r.exact_match).count() as f64 / n;
    let meaning_accuracy = results.iter().map(|r| r.meaning_accuracy).sum::<f64>() / n;
    let token_accuracy = results.iter().map(|r| r.token_accuracy).sum::<f64>() / n;
    let target_language_rate = target_language_rate(&results, inference_lang)?;
    Ok(TaskMetrics {
        exact_match,
        meaning_accuracy,
        token_accuracy,
        target_language_rate,
        results,
    })
}

/// One candidate row of a module sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub lang: LanguageId,
    /// Ranking metric: strict per-token accuracy against the unseen-language
    /// references, so both meaning and rendering must be right.
    pub task_accuracy: f64,
    pub exact_match: f64,
    pub meaning_accuracy: f64,
}

/// Ranked module-reuse report over all N candidate modules.
#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Sorted descending by task accuracy; ties break to the lower id.
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn best(&self) -> &SweepEntry {
        &self.entries[0]
    }
}

/// Evaluates examples of a language unseen in pretraining under every
/// existing language module and ranks the candidates.
pub fn module_sweep(
    model: &mut Model,
    examples: &[Example],
    layout: &VocabLayout,
    languages: &[SyntheticLanguage],
) -> Result<SweepReport> {
    if examples.is_empty() {
        return Err(Error::Undetermined("module sweep over an empty example set".into()));
    }
    let n = model.config().n_languages;
    let mut entries = Vec::with_capacity(n);
    for candidate in 0..n {
        let lang = LanguageId(candidate);
        model.swap_language(lang)?;
        let mut exact = 0usize;
        let mut token_acc = 0.0;
        let mut meaning = 0.0;
        for ex in examples {
            let r = decode_example(model, ex, lang, layout, languages)?;
            exact += r.exact_match as usize;
            token_acc += r.token_accuracy;
            meaning += r.meaning_accuracy;
        }
        let count = examples.len() as f64;
        entries.push(SweepEntry {
            lang,
            task_accuracy: token_acc / count,
            exact_match: exact as f64 / count,
            meaning_accuracy: meaning / count,
        });
    }
    entries.sort_by(|a, b| {
        b.task_accuracy
            .partial_cmp(&a.task_accuracy)
            .expect("finite accuracies")
            .then(a.lang.0.cmp(&b.lang.0))
    });
    Ok(SweepReport { entries })
}

/// Per-language evaluation row for reports.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub lang: LanguageId,
    pub zero_shot: bool,
    pub exact_match: f64,
    pub meaning_accuracy: f64,
    pub target_language_rate: f64,
    pub n_examples: usize,
}

/// Evaluates held-out task data per language, flagging zero-shot rows
/// (languages outside the fine-tuning sources).
pub fn evaluate_languages(
    model: &mut Model,
    heldout: &[Example],
    eval_langs: &[LanguageId],
    source_langs: &[LanguageId],
    layout: &VocabLayout,
    languages: &[SyntheticLanguage],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(eval_langs.len());
    for &lang in eval_langs {
        let examples: Vec<Example> = heldout.iter().filter(|e| e.lang == lang).cloned().collect();
        let metrics = task_eval(model, &examples, lang, layout, languages)?;
        rows.push(EvalRow {
            lang,
            zero_shot: !source_langs.contains(&lang),
            exact_match: metrics.exact_match,
            meaning_accuracy: metrics.meaning_accuracy,
            target_language_rate: metrics.target_language_rate,
            n_examples: examples.len(),
        });
    }
    Ok(rows)
}

/// Machine-parseable lines plus a small human-readable table.
pub fn format_eval_report(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "eval\tlang={}\tzero_shot={}\tn={}\tem={}\tmeaning={}\ttarget_lang_rate={}\n",
            r.lang,
            r.zero_shot as u8,
            r.n_examples,
            r.exact_match,
            r.meaning_accuracy,
            r.target_language_rate
        ));
    }
    out.push('\n');
    out.push_str("lang  zero-shot      EM  meaning  target-lang-rate\n");
    for r in rows {
        out.push_str(&format!(
            "{:<5} {:<9} {:>7.3} {:>8.3} {:>17.3}\n",
            r.lang.0,
            if r.zero_shot { "yes" } else { "no" },
            r.exact_match,
            r.meaning_accuracy,
            r.target_language_rate
        ));
    }
    out
}

/// Module-sweep report lines: one per candidate, ranked.
pub fn format_sweep_report(report: &SweepReport) -> String {
    let mut out = String::new();
    for (rank, e) in report.entries.iter().enumerate() {
        out.push_str(&format!(
            "sweep\trank={}\tlang={}\ttask_acc={}\tem={}\tmeaning={}\n",
            rank + 1,
            e.lang,
            e.task_accuracy,
            e.exact_match,
            e.meaning_accuracy
        ));
    }
    out
}
