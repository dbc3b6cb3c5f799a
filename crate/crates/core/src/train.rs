//! Pretraining and fine-tuning loops.
//!
//! Both phases share one step routine: language-round-robin batches, one
//! tape per step with per-example losses averaged into a single scalar, and
//! a masked Adam update under a constant learning rate with linear warmup.
//! Everything is a pure function of (model seed, data seed, config), so two
//! identical runs log identical bytes.

use crate::error::{Error, Result};
use crate::freezing::{build_mask, verify_frozen, FreezeConfig, Phase};
use crate::model::{LanguageId, Model};
use crate::optim::{adam_step, OptimState, TrainMask};
use crate::params::ParamBinder;
use crate::synth::{Example, GeneratedData};
use crate::tape::{cross_entropy_value, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Fine-tune source languages. Ignored by pretraining.
    pub languages: Vec<LanguageId>,
}

impl TrainConfig {
    pub fn validate(&self, phase: Phase) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if phase == Phase::Finetune && self.languages.is_empty() {
            return Err(Error::Config(
                "fine-tuning requires a nonempty source-language list".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub step: usize,
    pub phase: Phase,
    /// Language the metric refers to, or -1 for run-level metrics.
    pub lang: i64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    points: Vec<MetricPoint>,
}

impl MetricsHistory {
    pub fn push(&mut self, step: usize, phase: Phase, lang: i64, metric: &str, value: f64) {
        if let Some(last) = self.points.last() {
            debug_assert!(step >= last.step, "metric steps must be monotone");
        }
        self.points.push(MetricPoint {
            step,
            phase,
            lang,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn points(&self) -> &[MetricPoint] {
        &self.points
    }

    pub fn extend(&mut self, other: MetricsHistory) {
        self.points.extend(other.points);
    }

    /// Latest value of a metric for a language, if recorded.
    pub fn last_value(&self, lang: i64, metric: &str) -> Option<f64> {
        self.points
            .iter()
            .rev()
            .find(|p| p.lang == lang && p.metric == metric)
            .map(|p| p.value)
    }

    /// Append-only line format: `step<TAB>phase<TAB>lang<TAB>metric<TAB>value`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                p.step,
                p.phase.label(),
                p.lang,
                p.metric,
                p.value
            ));
        }
        out
    }
}

/// Teacher-forcing split: decoder input starts at BOS, output ends at EOS.
pub fn shift_target(target: &[usize], bos: usize) -> (Vec<usize>, Vec<usize>) {
    debug_assert!(!target.is_empty(), "targets always carry at least EOS");
    let mut tgt_in = Vec::with_capacity(target.len());
    tgt_in.push(bos);
    tgt_in.extend_from_slice(&target[..target.len() - 1]);
    (tgt_in, target.to_vec())
}

/// Mean teacher-forced token loss and token count for one example.
pub fn example_loss(model: &Model, example: &Example, bos: usize) -> Result<(f64, usize)> {
    let (tgt_in, tgt_out) = shift_target(&example.target, bos);
    let logits = model.forward(&example.input, &tgt_in, example.lang)?;
    let loss = cross_entropy_value(&logits, &tgt_out, None)?;
    Ok((loss, tgt_out.len()))
}

/// `exp(mean token cross-entropy)` over a language's held-out examples,
/// token-pooled under teacher forcing.
pub fn perplexity(model: &Model, heldout: &[Example], lang: LanguageId, bos: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in heldout.iter().filter(|e| e.lang == lang) {
        let (loss, n) = example_loss(model, ex, bos)?;
        sum += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Undetermined(format!(
            "perplexity: no held-out examples for language {lang}"
        )));
    }
    Ok((sum / count as f64).exp())
}

/// Mean teacher-forced loss over a set of examples (dev loss).
pub fn dev_loss(model: &Model, examples: &[Example], bos: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Undetermined("dev loss over an empty set".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let (loss, n) = example_loss(model, ex, bos)?;
        sum += loss * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Groups examples by language and checks coverage of the required set.
fn language_pools<'a>(
    examples: &'a [Example],
    required: &[LanguageId],
    what: &str,
) -> Result<Vec<(LanguageId, Vec<&'a Example>)>> {
    let mut pools = Vec::new();
    for &lang in required {
        let pool: Vec<&Example> = examples.iter().filter(|e| e.lang == lang).collect();
        if pool.is_empty() {
            return Err(Error::DataCoverage(format!(
                "{what}: no examples for language {lang}"
            )));
        }
        pools.push((lang, pool));
    }
    Ok(pools)
}

struct StepOutcome {
    loss: f64,
}

fn train_step(
    model: &mut Model,
    pools: &[(LanguageId, Vec<&Example>)],
    cursor: &mut usize,
    per_lang_cursor: &mut [usize],
    cfg: &TrainConfig,
    state: &mut OptimState,
    mask: &TrainMask,
    step: usize,
    bos: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(model.store());
    let mut losses = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let pool_idx = *cursor % pools.len();
        *cursor += 1;
        let (lang, pool) = &pools[pool_idx];
        let ex = pool[per_lang_cursor[pool_idx] % pool.len()];
        per_lang_cursor[pool_idx] += 1;
        let (tgt_in, tgt_out) = shift_target(&ex.target, bos);
        let logits = model.forward_on(&mut tape, &mut binder, &ex.input, &tgt_in, *lang)?;
        let loss = tape.cross_entropy(logits, &tgt_out, None)?;
        losses.push(loss);
    }
    let batch_loss = tape.mean_scalars(&losses)?;
    let loss_value = tape.value(batch_loss).scalar_value()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {loss_value} at step {step}"
        )));
    }
    tape.backward(batch_loss)?;
    model.store_mut().zero_grads();
    binder.write_grads(model.store_mut(), &tape)?;
    adam_step(model.store_mut(), state, mask, cfg.lr_at(step))?;
    Ok(StepOutcome { loss: loss_value })
}

/// Joint pretraining over all languages: every parameter trains, batches
/// cycle languages round-robin, held-out perplexity is logged per language
/// at every eval point.
pub fn pretrain(model: &mut Model, data: &GeneratedData, cfg: &TrainConfig) -> Result<MetricsHistory> {
    cfg.validate(Phase::Pretrain)?;
    let n = model.config().n_languages;
    let required: Vec<LanguageId> = (0..n).map(LanguageId).collect();
    let pools = language_pools(&data.pretrain_train, &required, "pretrain corpus")?;
    language_pools(&data.pretrain_heldout, &required, "pretrain held-out")?;
    let bos = data.layout.bos();

    let mask = TrainMask::all(model.store());
    let mut state = OptimState::new(model.store());
    let mut history = MetricsHistory::default();
    let mut cursor = 0usize;
    let mut per_lang_cursor = vec![0usize; pools.len()];

    let eval = |model: &Model, history: &mut MetricsHistory, step: usize| -> Result<()> {
        for &lang in &required {
            let ppl = perplexity(model, &data.pretrain_heldout, lang, bos)?;
            history.push(step, Phase::Pretrain, lang.0 as i64, "heldout_ppl", ppl);
        }
        Ok(())
    };

    eval(model, &mut history, 0)?;
    for step in 0..cfg.steps {
        let outcome = train_step(
            model,
            &pools,
            &mut cursor,
            &mut per_lang_cursor,
            cfg,
            &mut state,
            &mask,
            step,
            bos,
        )?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            history.push(done, Phase::Pretrain, -1, "train_loss", outcome.loss);
            eval(model, &mut history, done)?;
        }
    }
    Ok(history)
}

/// Fine-tuning on the configured source languages under a freeze config.
/// Adapters and frozen groups are verified bit-identical afterwards; the
/// returned model state is the eval checkpoint with the lowest source-dev
/// loss.
pub fn finetune(
    model: &mut Model,
    data: &GeneratedData,
    freeze_cfg: &FreezeConfig,
    cfg: &TrainConfig,
) -> Result<MetricsHistory> {
    cfg.validate(Phase::Finetune)?;
    let pools = language_pools(&data.task_train, &cfg.languages, "task corpus")?;
    let dev: Vec<Example> = data
        .task_dev
        .iter()
        .filter(|e| cfg.languages.contains(&e.lang))
        .cloned()
        .collect();
    if dev.is_empty() {
        return Err(Error::DataCoverage(
            "fine-tuning: no dev examples for the source languages".into(),
        ));
    }
    let bos = data.layout.bos();

    let mask = build_mask(model, freeze_cfg, Phase::Finetune)?;
    let before = model.store().snapshot();
    let mut state = OptimState::new(model.store());
    let mut history = MetricsHistory::default();
    let mut cursor = 0usize;
    let mut per_lang_cursor = vec![0usize; pools.len()];

    let eval = |model: &Model, history: &mut MetricsHistory, step: usize| -> Result<f64> {
        let mut mean = 0.0;
        for &lang in &cfg.languages {
            let lang_dev: Vec<Example> = dev.iter().filter(|e| e.lang == lang).cloned().collect();
            let loss = dev_loss(model, &lang_dev, bos)?;
            history.push(step, Phase::Finetune, lang.0 as i64, "dev_loss", loss);
            mean += loss;
        }
        Ok(mean / cfg.languages.len() as f64)
    };

    let initial = eval(model, &mut history, 0)?;
    let mut best: (f64, Vec<Vec<f64>>) = (initial, model.store().snapshot());

    for step in 0..cfg.steps {
        let outcome = train_step(
            model,
            &pools,
            &mut cursor,
            &mut per_lang_cursor,
            cfg,
            &mut state,
            &mask,
            step,
            bos,
        )?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            history.push(done, Phase::Finetune, -1, "train_loss", outcome.loss);
            let mean = eval(model, &mut history, done)?;
            if mean < best.0 {
                best = (mean, model.store().snapshot());
            }
        }
    }

    // checkpoint selection: keep the best dev-loss parameters
    for (i, values) in best.1.iter().enumerate() {
        let id = crate::params::ParamId(i);
        model
            .store_mut()
            .get_mut(id)
            .value
            .data_mut()
            .copy_from_slice(values);
    }

    let after = model.store().snapshot();
    let report = verify_frozen(model.store(), &before, &after, &mask)?;
    if !report.is_clean() {
        return Err(Error::Contract(format!(
            "freeze violation after fine-tuning: {:?}",
            report.violations
        )));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::synth::{generate, DataConfig};

    fn tiny_data() -> GeneratedData {
        generate(&DataConfig {
            n_languages: 2,
            v_base: 12,
            grammar_seed: 3,
            data_seed: 5,
            max_len: 16,
            pretrain_per_lang: 8,
            pretrain_heldout_per_lang: 4,
            task_train_per_lang: 8,
            task_dev_per_lang: 4,
            task_heldout_per_lang: 4,
            sweep_examples: 2,
            noise_density: 0.15,
            mean_span_len: 3.0,
            related_to: None,
            relatedness: 0.0,
        })
        .unwrap()
    }

    fn tiny_model(data: &GeneratedData, seed: u64) -> Model {
        let c = ModelConfig {
            n_languages: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            d_bottleneck: 8,
            vocab_size: data.layout.vocab_size(),
            max_len: 16,
        };
        Model::new(c, Variant::Modular, seed).unwrap()
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 5,
            steps,
            batch_size: 2,
            seed: 0,
            eval_every: 5,
            languages: vec![LanguageId(0)],
        }
    }

    #[test]
    fn zero_steps_yields_single_initial_eval_point() {
        let data = tiny_data();
        let mut model = tiny_model(&data, 1);
        let history = pretrain(&mut model, &data, &tiny_train(0)).unwrap();
        let steps: Vec<usize> = history.points().iter().map(|p| p.step).collect();
        assert!(steps.iter().all(|&s| s == 0));
        assert_eq!(history.points().len(), 2); // one ppl row per language
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let data = tiny_data();
        let model = tiny_model(&data, 2);
        let bos = data.layout.bos();
        let loss = dev_loss(&model, &data.task_dev, bos).unwrap();
        let ln_v = (data.layout.vocab_size() as f64).ln();
        assert!(
            (loss - ln_v).abs() / ln_v < 0.15,
            "initial loss {loss} vs ln(V) {ln_v}"
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let data = tiny_data();
        let mut m1 = tiny_model(&data, 3);
        let mut m2 = tiny_model(&data, 3);
        let h1 = pretrain(&mut m1, &data, &tiny_train(6)).unwrap();
        let h2 = pretrain(&mut m2, &data, &tiny_train(6)).unwrap();
        assert_eq!(h1.to_lines(), h2.to_lines());
        for (a, b) in m1.store().snapshot().iter().zip(m2.store().snapshot()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn pretrain_reduces_loss() {
        let data = tiny_data();
        let mut model = tiny_model(&data, 4);
        let history = pretrain(&mut model, &data, &tiny_train(40)).unwrap();
        let first = history.points().iter().find(|p| p.metric == "heldout_ppl").unwrap();
        let last = history.last_value(0, "heldout_ppl").unwrap();
        assert!(last < first.value, "ppl {} -> {last}", first.value);
    }

    #[test]
    fn finetune_respects_mask_and_freezes_adapters() {
        let data = tiny_data();
        let mut model = tiny_model(&data, 5);
        let before = model.store().snapshot();
        let cfg = FreezeConfig::from_name("s7").unwrap();
        finetune(&mut model, &data, &cfg, &tiny_train(10)).unwrap();
        let after = model.store().snapshot();
        for (id, p) in model.store().iter() {
            let moved = before[id.index()] != after[id.index()];
            let frozen = p.group.is_adapter()
                || matches!(
                    p.group,
                    crate::params::ParamGroup::Emb
                        | crate::params::ParamGroup::DecLn
                        | crate::params::ParamGroup::DecFfn
                );
            if frozen {
                assert!(!moved, "{} moved despite freeze", p.name);
            }
        }
        // something did train
        assert_ne!(before, after);
    }

    #[test]
    fn finetune_missing_language_is_coverage_error() {
        let data = tiny_data();
        let mut model = tiny_model(&data, 6);
        let mut cfg = tiny_train(2);
        cfg.languages = vec![LanguageId(1), LanguageId(0)];
        let only_lang0: GeneratedData = {
            let mut d = data.clone();
            d.task_train.retain(|e| e.lang == LanguageId(0));
            d
        };
        let freeze = FreezeConfig::from_name("s1").unwrap();
        let err = finetune(&mut model, &only_lang0, &freeze, &cfg).unwrap_err();
        assert!(matches!(err, Error::DataCoverage(_)));
    }

    #[test]
    fn perplexity_bounds_on_rigged_distributions() {
        let data = tiny_data();
        let model = tiny_model(&data, 7);
        // uniform logits model would give ppl == vocab_size; the freshly
        // initialized model is near-uniform
        let bos = data.layout.bos();
        let ppl = perplexity(&model, &data.pretrain_heldout, LanguageId(0), bos).unwrap();
        let v = data.layout.vocab_size() as f64;
        assert!((ppl - v).abs() / v < 0.25, "near-uniform ppl {ppl} vs V {v}");
        assert!(perplexity(&model, &[], LanguageId(0), bos).is_err());
    }
}
