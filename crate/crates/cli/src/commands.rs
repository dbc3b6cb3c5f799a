//! Command implementations behind the `mmt` binary.

use anyhow::{bail, Context, Result};
use mmt_core::checkpoint;
use mmt_core::config::RunConfig;
use mmt_core::corpus::{read_corpus, write_corpus};
use mmt_core::eval::{
    evaluate_languages, format_eval_report, format_sweep_report, module_sweep, EvalRow,
};
use mmt_core::freezing::FreezeConfig;
use mmt_core::model::{Model, Variant};
use mmt_core::synth::{build_languages, generate, Example, GeneratedData};
use mmt_core::train::{finetune, pretrain, MetricsHistory};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const CORPUS_FILES: [&str; 6] = [
    "pretrain_train.tsv",
    "pretrain_heldout.tsv",
    "task_train.tsv",
    "task_dev.tsv",
    "task_heldout.tsv",
    "sweep_unseen.tsv",
];

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::preset()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

pub fn cmd_generate_data(config: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let data = generate(&config.data_config())?;
    let splits: [(&str, &[Example]); 6] = [
        (CORPUS_FILES[0], &data.pretrain_train),
        (CORPUS_FILES[1], &data.pretrain_heldout),
        (CORPUS_FILES[2], &data.task_train),
        (CORPUS_FILES[3], &data.task_dev),
        (CORPUS_FILES[4], &data.task_heldout),
        (CORPUS_FILES[5], &data.sweep_unseen),
    ];
    for (name, examples) in splits {
        let path = out_dir.join(name);
        write_corpus(&path, &data.layout, examples)?;
        println!("wrote {} ({} examples)", path.display(), examples.len());
    }
    Ok(())
}

/// Reassembles corpora written by `generate-data`, validating the layout
/// against the run config.
pub fn load_data(config: &RunConfig, data_dir: &Path) -> Result<GeneratedData> {
    let data_cfg = config.data_config();
    let expect_layout = data_cfg.layout();
    let languages = build_languages(&data_cfg)?;
    let mut splits: Vec<Vec<Example>> = Vec::with_capacity(CORPUS_FILES.len());
    for name in CORPUS_FILES {
        let path = data_dir.join(name);
        let (layout, examples) =
            read_corpus(&path).with_context(|| format!("reading corpus {}", path.display()))?;
        if layout != expect_layout {
            bail!(
                "corpus {} was generated under layout {:?}, config implies {:?}",
                path.display(),
                layout,
                expect_layout
            );
        }
        splits.push(examples);
    }
    let mut it = splits.into_iter();
    Ok(GeneratedData {
        layout: expect_layout,
        languages,
        pretrain_train: it.next().unwrap(),
        pretrain_heldout: it.next().unwrap(),
        task_train: it.next().unwrap(),
        task_dev: it.next().unwrap(),
        task_heldout: it.next().unwrap(),
        sweep_unseen: it.next().unwrap(),
    })
}

fn write_metrics(path: &Path, history: &MetricsHistory) -> Result<()> {
    fs::write(path, history.to_lines())
        .with_context(|| format!("writing metrics {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics")
}

pub fn cmd_pretrain(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let data = load_data(config, data_dir)?;
    let mut model = Model::new(config.model_config(), config.variant, config.seed)?;
    let history = pretrain(&mut model, &data, &config.pretrain_config())?;
    checkpoint::save(out, &model, config)?;
    write_metrics(&metrics_path(out), &history)?;
    for lang in 0..config.n_languages {
        if let Some(ppl) = history.last_value(lang as i64, "heldout_ppl") {
            println!("final heldout ppl lang {lang}: {ppl:.4}");
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Checks that an override config is architecture-compatible with the
/// checkpoint it is applied to.
fn check_compat(ckpt: &RunConfig, requested: &RunConfig) -> Result<()> {
    if ckpt.model_config() != requested.model_config() {
        bail!(
            "config/checkpoint mismatch: checkpoint model section differs \
             (checkpoint N={}, d_model={}, vocab={}; requested N={}, d_model={}, vocab={})",
            ckpt.n_languages,
            ckpt.d_model,
            ckpt.model_config().vocab_size,
            requested.n_languages,
            requested.d_model,
            requested.model_config().vocab_size,
        );
    }
    if ckpt.variant != requested.variant {
        bail!(
            "config/checkpoint mismatch: checkpoint is {}, requested {}",
            ckpt.variant.label(),
            requested.variant.label()
        );
    }
    Ok(())
}

pub fn cmd_finetune(
    config_path: Option<&Path>,
    checkpoint_path: &Path,
    data_dir: &Path,
    out: &Path,
    freeze_override: Option<&str>,
    seed_override: Option<u64>,
) -> Result<()> {
    let (ckpt_config, mut model) = checkpoint::load(checkpoint_path)?;
    let mut config = match config_path {
        Some(p) => {
            let requested = load_config(Some(p))?;
            check_compat(&ckpt_config, &requested)?;
            requested
        }
        None => ckpt_config,
    };
    if let Some(freeze) = freeze_override {
        config.freeze = freeze.to_string();
    }
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    let data = load_data(&config, data_dir)?;
    let freeze_cfg = FreezeConfig::from_name(&config.freeze)?;
    let history = finetune(&mut model, &data, &freeze_cfg, &config.finetune_config())?;
    checkpoint::save(out, &model, &config)?;
    write_metrics(&metrics_path(out), &history)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_evaluation(
    model: &mut Model,
    config: &RunConfig,
    data: &GeneratedData,
) -> Result<Vec<EvalRow>> {
    Ok(evaluate_languages(
        model,
        &data.task_heldout,
        &config.eval_language_ids(),
        &config.source_language_ids(),
        &data.layout,
        &data.languages,
    )?)
}

pub fn cmd_evaluate(checkpoint_path: &Path, data_dir: &Path, out: Option<&Path>) -> Result<()> {
    let (config, mut model) = checkpoint::load(checkpoint_path)?;
    let data = load_data(&config, data_dir)?;
    let rows = run_evaluation(&mut model, &config, &data)?;
    let report = format_eval_report(&rows);
    print!("{report}");
    if let Some(path) = out {
        fs::write(path, &report).with_context(|| format!("writing report {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Zero-shot summary of eval rows: mean metrics over the zero-shot rows.
fn zero_shot_summary(rows: &[EvalRow]) -> (f64, f64, f64) {
    let zs: Vec<&EvalRow> = rows.iter().filter(|r| r.zero_shot).collect();
    if zs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = zs.len() as f64;
    (
        zs.iter().map(|r| r.exact_match).sum::<f64>() / n,
        zs.iter().map(|r| r.meaning_accuracy).sum::<f64>() / n,
        zs.iter().map(|r| r.target_language_rate).sum::<f64>() / n,
    )
}

pub fn cmd_sweep_freeze(
    config_path: Option<&Path>,
    checkpoint_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut table = String::from(
        "config\tsource_em\tzs_em\tzs_meaning\tzs_target_lang_rate\n",
    );
    for cfg in FreezeConfig::table() {
        let name = cfg.name.clone();
        let ft_path = out_dir.join(format!("{name}.mmt5"));
        cmd_finetune(
            config_path,
            checkpoint_path,
            data_dir,
            &ft_path,
            Some(&name),
            None,
        )?;
        let (config, mut model) = checkpoint::load(&ft_path)?;
        let data = load_data(&config, data_dir)?;
        let rows = run_evaluation(&mut model, &config, &data)?;
        let source_em = rows
            .iter()
            .filter(|r| !r.zero_shot)
            .map(|r| r.exact_match)
            .sum::<f64>()
            / rows.iter().filter(|r| !r.zero_shot).count().max(1) as f64;
        let (zs_em, zs_meaning, zs_rate) = zero_shot_summary(&rows);
        let _ = writeln!(table, "{name}\t{source_em}\t{zs_em}\t{zs_meaning}\t{zs_rate}");
    }
    let table_path = out_dir.join("freeze_sweep.tsv");
    fs::write(&table_path, &table)?;
    print!("{table}");
    println!("wrote {}", table_path.display());
    Ok(())
}

pub fn cmd_sweep_bottleneck(config: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let d = config.d_model;
    let sizes = [d / 8, d / 4, d / 2, d];
    let mut table = String::from("d_bottleneck\tratio\tsource_em\tzs_em\tzs_meaning\tzs_target_lang_rate\tfinal_mean_ppl\n");
    for (i, &size) in sizes.iter().enumerate() {
        if size == 0 {
            bail!("d_model {} too small for a d/8 bottleneck", d);
        }
        let mut cfg = config.clone();
        cfg.d_bottleneck = size;
        cfg.validate()?;
        let data = load_data(&cfg, data_dir)?;
        let mut model = Model::new(cfg.model_config(), cfg.variant, cfg.seed)?;
        let history = pretrain(&mut model, &data, &cfg.pretrain_config())?;
        let mean_ppl = (0..cfg.n_languages)
            .filter_map(|l| history.last_value(l as i64, "heldout_ppl"))
            .sum::<f64>()
            / cfg.n_languages as f64;
        let freeze_cfg = FreezeConfig::from_name(&cfg.freeze)?;
        finetune(&mut model, &data, &freeze_cfg, &cfg.finetune_config())?;
        let ckpt = out_dir.join(format!("bottleneck_{size}.mmt5"));
        checkpoint::save(&ckpt, &model, &cfg)?;
        let rows = run_evaluation(&mut model, &cfg, &data)?;
        let source_em = rows
            .iter()
            .filter(|r| !r.zero_shot)
            .map(|r| r.exact_match)
            .sum::<f64>()
            / rows.iter().filter(|r| !r.zero_shot).count().max(1) as f64;
        let (zs_em, zs_meaning, zs_rate) = zero_shot_summary(&rows);
        let ratio = ["1/8", "1/4", "1/2", "1"][i];
        let _ = writeln!(
            table,
            "{size}\t{ratio}\t{source_em}\t{zs_em}\t{zs_meaning}\t{zs_rate}\t{mean_ppl}"
        );
    }
    let table_path = out_dir.join("bottleneck_sweep.tsv");
    fs::write(&table_path, &table)?;
    print!("{table}");
    println!("wrote {}", table_path.display());
    Ok(())
}

pub fn cmd_sweep_modules(checkpoint_path: &Path, data_dir: &Path, out: Option<&Path>) -> Result<()> {
    let (config, mut model) = checkpoint::load(checkpoint_path)?;
    let data = load_data(&config, data_dir)?;
    let report = module_sweep(&mut model, &data.sweep_unseen, &data.layout, &data.languages)?;
    let text = format_sweep_report(&report);
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing report {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Shared by pretrain/finetune commands: apply CLI overrides onto a config.
pub fn apply_overrides(
    config: &mut RunConfig,
    seed: Option<u64>,
    freeze: Option<&str>,
    variant: Option<Variant>,
) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(f) = freeze {
        config.freeze = f.to_string();
    }
    if let Some(v) = variant {
        config.variant = v;
    }
    config.validate()?;
    Ok(())
}
