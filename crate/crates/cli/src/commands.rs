use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use taskcast_core::data::{generate_dataset, load_dataset_dir, save_dataset, Dataset, Standardizer};
use taskcast_core::experiment::{run_ablation, ExperimentConfig};
use taskcast_core::gradcheck::{self, Component};
use taskcast_core::grammar::TaskGrammar;
use taskcast_core::losses::ProgressLossKind;
use taskcast_core::metrics::{evaluate, MetricsReport};
use taskcast_core::model::{load_checkpoint, save_checkpoint};
use taskcast_core::train::{history_csv, train as train_model};
use taskcast_core::{Error, Result};

use crate::{AblateArgs, Common, EvalArgs, GenDataArgs, GradCheckArgs, TrainArgs};

const VERSION: &str = concat!("taskcast ", env!("CARGO_PKG_VERSION"));

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        None => Ok(ExperimentConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
        }
    }
}

fn load_grammar(name: &str) -> Result<TaskGrammar> {
    let g = if name == "ikea-default" {
        TaskGrammar::ikea_default()
    } else {
        TaskGrammar::from_file(Path::new(name))?
    };
    g.validate()?;
    Ok(g)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates the run directory and records the resolved settings and the
/// tool version in it.
fn run_dir<C: Serialize>(common: &Common, default_name: &str, config: &C) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| common.out_root.join(default_name));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let text = toml::to_string(config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    write_file(&dir.join("config.toml"), &text)?;
    write_file(&dir.join("VERSION"), &format!("{VERSION}\n"))?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join("metrics.json"), &report.to_json())?;
    write_file(&dir.join("metrics.txt"), &report.to_table())
}

fn dataset_or_generate(
    data: Option<&Path>,
    grammar: &str,
    exp: &ExperimentConfig,
) -> Result<(Dataset, Dataset, Option<Standardizer>)> {
    let all = match data {
        Some(dir) => load_dataset_dir(dir)?,
        None => generate_dataset(&load_grammar(grammar)?, &exp.synthetic)?,
    };
    exp.split(all)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut exp = load_config(&a.common)?;
    let s = &mut exp.synthetic;
    if let Some(v) = a.sequences {
        s.sequences = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.feature_dim {
        s.feature_dim = v;
    }
    let grammar = load_grammar(&a.grammar)?;
    let dataset = generate_dataset(&grammar, &exp.synthetic)?;
    let dir = run_dir(&a.common, &format!("data-seed{}", exp.synthetic.seed), &exp.synthetic)?;
    let grammar_text = toml::to_string(&grammar).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("grammar.toml"), &grammar_text)?;
    save_dataset(&dataset, &dir)?;
    let frames: usize = dataset.sequences.iter().map(|s| s.len()).sum();
    println!(
        "wrote {} sequences ({frames} frames, {} classes) to {}",
        dataset.sequences.len(),
        dataset.num_classes(),
        dir.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut exp = load_config(&a.common)?;
    let kind = match &a.progress_loss {
        Some(k) => k.parse()?,
        None => exp.model.progress_loss,
    };
    if let Some(v) = a.seed {
        exp.train.seed = v;
    }
    if let Some(v) = a.epochs {
        exp.train.epochs = v;
    }
    if let Some(v) = a.batches_per_epoch {
        exp.train.batches_per_epoch = v;
    }
    if let Some(v) = a.learning_rate {
        exp.train.adam.learning_rate = v;
    }
    if let Some(v) = a.test_sequences {
        exp.test_sequences = v;
    }
    exp.standardize |= a.standardize;
    let (train_set, test_set, standardizer) = dataset_or_generate(a.data.as_deref(), &a.grammar, &exp)?;
    exp.model = exp.model_for(&a.model, kind, train_set.feature_dim(), train_set.num_classes())?;
    let name = format!("train-{}-{}-seed{}", exp.model.variant_name(), kind.label(), exp.train.seed);
    let dir = run_dir(&a.common, &name, &exp)?;
    exp.train.checkpoint_dir = Some(dir.join("checkpoints"));
    if let Some(s) = &standardizer {
        let json = serde_json::to_string_pretty(s).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&dir.join("standardizer.json"), &json)?;
    }

    let out = train_model(&exp.model, &train_set, &exp.train)?;
    write_file(&dir.join("loss_history.csv"), &history_csv(&out.history))?;
    save_checkpoint(&out.best, &dir.join("model.ckpt"))?;
    println!("best epoch {} of {}", out.best_epoch, exp.train.epochs);
    if !test_set.sequences.is_empty() {
        let report = evaluate(&out.best, &test_set, &exp.train.sampler)?;
        write_report(&dir, &report)?;
        print!("{}", report.to_table());
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let exp = load_config(&a.common)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset_dir(&a.data)?;
    if data.num_classes() != params.config.num_classes || data.feature_dim() != params.config.input_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes of {}-d features, dataset has {} of {}-d",
            params.config.num_classes,
            params.config.input_dim,
            data.num_classes(),
            data.feature_dim()
        )));
    }
    let test = if a.test_sequences == 0 {
        data
    } else {
        data.split_tail(a.test_sequences.min(data.sequences.len())).1
    };
    let test = match &a.standardizer {
        None => test,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let s: Standardizer = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            s.apply(&test)?
        }
    };
    #[derive(Serialize)]
    struct EvalRun<'a> {
        checkpoint: &'a Path,
        data: &'a Path,
        test_sequences: usize,
        standardizer: Option<&'a Path>,
        sampler: &'a taskcast_core::sampling::SamplerConfig,
    }
    let dir = run_dir(
        &a.common,
        "eval",
        &EvalRun {
            checkpoint: &a.checkpoint,
            data: &a.data,
            test_sequences: a.test_sequences,
            standardizer: a.standardizer.as_deref(),
            sampler: &exp.train.sampler,
        },
    )?;
    let report = evaluate(&params, &test, &exp.train.sampler)?;
    write_report(&dir, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let components: Vec<Component> = if a.component == "all" {
        Component::ALL.to_vec()
    } else {
        vec![a.component.parse()?]
    };
    let mut unexpected = Vec::new();
    let mut lines = Vec::new();
    for c in components {
        let tol = a.tolerance.unwrap_or(c.default_tolerance());
        let report = gradcheck::grad_check(c, a.trials, tol, a.seed);
        let note = if c.expected_to_pass() { "" } else { " (expected to fail)" };
        println!("{report}{note}");
        lines.push(format!("{report}{note}"));
        if report.passed != c.expected_to_pass() {
            unexpected.push(c.name());
        }
    }
    if a.common.out.is_some() {
        #[derive(Serialize)]
        struct GradRun<'a> {
            component: &'a str,
            trials: usize,
            seed: u64,
            tolerance: Option<f64>,
        }
        let dir = run_dir(
            &a.common,
            "grad-check",
            &GradRun {
                component: &a.component,
                trials: a.trials,
                seed: a.seed,
                tolerance: a.tolerance,
            },
        )?;
        write_file(&dir.join("report.txt"), &(lines.join("\n") + "\n"))?;
    }
    if unexpected.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(format!("gradient check disagreed for {}", unexpected.join(", "))))
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut exp = load_config(&a.common)?;
    if let Some(v) = a.epochs {
        exp.train.epochs = v;
    }
    if let Some(v) = a.batches_per_epoch {
        exp.train.batches_per_epoch = v;
    }
    if let Some(v) = a.test_sequences {
        exp.test_sequences = v;
    }
    let kinds = a
        .progress_loss
        .iter()
        .map(|k| k.parse::<ProgressLossKind>())
        .collect::<Result<Vec<_>>>()?;
    exp.standardize |= a.standardize;
    let (train_set, test_set, _) = dataset_or_generate(a.data.as_deref(), &a.grammar, &exp)?;
    if test_set.sequences.is_empty() {
        return Err(Error::Config("ablation needs at least one test sequence".into()));
    }
    let dir = run_dir(&a.common, "ablate", &exp)?;
    let variants: Vec<&str> = a.variants.iter().map(String::as_str).collect();
    let table = run_ablation(&exp, &train_set, &test_set, &variants, &kinds, &a.seeds)?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("ablation.json"), &json)?;
    let text = table.to_table();
    write_file(&dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}
