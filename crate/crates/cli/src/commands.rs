//! The six subcommand implementations. Each command loads its config, applies
//! the seed override, validates, takes the output-directory lock when it
//! writes, and echoes the fully-resolved config so a run log never depends on
//! knowing the defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use elf_core::augment::standardize;
use elf_core::dataset::{load_split, save_split};
use elf_core::elft;
use elf_core::gradcheck::{grad_check_with_plan, ProbePlan};
use elf_core::model::{load_checkpoint, render_trace, save_checkpoint, shape_plan};
use elf_core::synth::synth_dataset;
use elf_core::train::{ablate, ablation_csv, ablation_table, evaluate, train, train_log_csv};
use elf_core::{Config, Error, MetricsReport, ModalPair, Mode, ModelParams, Result, Tape, Tensor};

use crate::cfg::{load_config, render_flat, seed_override};
use crate::lock::DirLock;

/// Name of the resolved-config copy every writing command leaves next to its
/// outputs.
pub const CONFIG_USED: &str = "config_used.cfg";

fn echo_config(cfg: &Config) {
    println!("--- resolved config ---");
    print!("{}", render_flat(cfg));
    println!("-----------------------");
}

fn write_config_used(dir: &Path, cfg: &Config) -> Result<()> {
    elft::write_string_atomic(&dir.join(CONFIG_USED), &render_flat(cfg))
}

fn load_cfg_with_seed(
    config: Option<&Path>,
    seed_flag: Option<u64>,
    apply: impl FnOnce(&mut Config, u64),
) -> Result<Config> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed_override(seed_flag)? {
        apply(&mut cfg, seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn per_class_counts(pairs: &[ModalPair], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for pair in pairs {
        counts[pair.label.value()] += 1;
    }
    counts
}

/// `elf synth`: write a synthetic dataset split under `out/<split>/`.
pub fn cmd_synth(
    config: Option<&Path>,
    out: &Path,
    split: &str,
    force: bool,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_cfg_with_seed(config, seed, |c, s| c.synth.seed = s)?;
    let _lock = DirLock::acquire(out)?;

    let split_dir = out.join(split);
    let occupied = split_dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if force {
            std::fs::remove_dir_all(&split_dir)?;
        } else {
            return Err(Error::Config(format!(
                "{} already contains data; pass --force to replace it",
                split_dir.display()
            )));
        }
    }

    let pairs = synth_dataset(&cfg.synth, &cfg.dims)?;
    save_split(out, split, &pairs)?;
    write_config_used(out, &cfg)?;

    echo_config(&cfg);
    let counts = per_class_counts(&pairs, cfg.fusion.num_classes);
    println!("wrote {} samples to {}", pairs.len(), split_dir.display());
    for (class, n) in counts.iter().enumerate() {
        println!("  class {class}: {n}");
    }
    Ok(())
}

/// `elf train`: train one mode on a dataset split and leave a checkpoint,
/// a per-epoch CSV log, and the resolved config in `out/`.
pub fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    mode: &str,
    out: &Path,
    split: &str,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_cfg_with_seed(config, seed, |c, s| c.train.seed = s)?;
    let mode = Mode::from_str(mode)?;
    let _lock = DirLock::acquire(out)?;

    let dataset = load_split(data, split, &cfg.dims, cfg.fusion.num_classes)?;
    echo_config(&cfg);
    println!("training mode {mode} on {} samples from {}", dataset.len(), data.join(split).display());

    let outcome = train(&dataset, &cfg, mode)?;
    for row in &outcome.log {
        println!("epoch {:>4}  loss {:<12.6} train_acc {:.3}", row.epoch, row.loss, row.train_acc);
    }

    let ckpt_dir = out.join("checkpoint");
    save_checkpoint(&ckpt_dir, &outcome.params)?;
    elft::write_string_atomic(&out.join("train_log.csv"), &train_log_csv(&outcome.log))?;
    write_config_used(out, &cfg)?;

    let report = evaluate(&dataset, &outcome.params, &cfg)?;
    println!("final metrics on the training split:");
    print!("{}", report.render());
    println!("checkpoint written to {}", ckpt_dir.display());
    Ok(())
}

/// `elf eval`: score a checkpoint on a dataset split and write the metrics CSV.
pub fn cmd_eval(
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    mode: Option<&str>,
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;

    if !checkpoint.join("manifest.txt").is_file() {
        return Err(Error::Param(format!(
            "no checkpoint at {} (missing manifest.txt)",
            checkpoint.display()
        )));
    }
    let params = load_checkpoint(checkpoint, &cfg)?;
    if let Some(requested) = mode {
        let requested = Mode::from_str(requested)?;
        if requested != params.mode {
            return Err(Error::Param(format!(
                "checkpoint was trained in mode {}, but --mode asked for {requested}",
                params.mode
            )));
        }
    }

    let csv_path: PathBuf = out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.join("eval_metrics.csv"));
    let lock_dir = csv_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(lock_dir)?;

    let dataset = load_split(data, split, &cfg.dims, cfg.fusion.num_classes)?;
    let report = evaluate(&dataset, &params, &cfg)?;

    println!("mode {} on {} ({} samples):", params.mode, data.join(split).display(), dataset.len());
    print!("{}", report.render());
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row(&params.mode.to_string()));
    elft::write_string_atomic(&csv_path, &csv)?;
    println!("metrics written to {}", csv_path.display());
    Ok(())
}

/// `elf ablate`: train and evaluate all six component configurations under one
/// seed, printing the comparison table and writing it as text and CSV.
pub fn cmd_ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    train_split: &str,
    eval_split: &str,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_cfg_with_seed(config, seed, |c, s| c.train.seed = s)?;
    let _lock = DirLock::acquire(out)?;

    let train_set = load_split(data, train_split, &cfg.dims, cfg.fusion.num_classes)?;
    let eval_set = load_split(data, eval_split, &cfg.dims, cfg.fusion.num_classes)?;
    echo_config(&cfg);
    println!(
        "ablating over {} train / {} eval samples from {}",
        train_set.len(),
        eval_set.len(),
        data.display()
    );

    let rows = ablate(&train_set, &eval_set, &cfg)?;
    let table = ablation_table(&rows);
    print!("{table}");

    elft::write_string_atomic(&out.join("ablation.txt"), &table)?;
    elft::write_string_atomic(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_config_used(out, &cfg)?;
    println!("table written to {} and {}", out.join("ablation.txt").display(), out.join("ablation.csv").display());
    Ok(())
}

/// `elf gradcheck`: compare the tape's analytic gradients against finite
/// differences on a freshly synthesized sample, one report row per parameter
/// group. Fails (exit 1) if any group's max relative error reaches `tol`.
pub fn cmd_gradcheck(
    config: Option<&Path>,
    seed: Option<u64>,
    probes: usize,
    h: f64,
    tol: f64,
) -> Result<()> {
    let cfg = load_cfg_with_seed(config, seed, |c, s| c.train.seed = s)?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("probe step must be positive and finite, got {h}")));
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::Config(format!("tolerance must be positive and finite, got {tol}")));
    }

    let data = synth_dataset(&cfg.synth, &cfg.dims)?;
    // One sample in the evaluation view keeps each probe cheap enough to
    // cover every parameter group; gradient structure is the same either way.
    let picks: Vec<(Tensor, Tensor, usize)> = data
        .iter()
        .take(1)
        .map(|s| (s.fundus.clone(), standardize(&s.oct), s.label.value()))
        .collect();

    let params = ModelParams::init(Mode::Full, &cfg);
    let named = params.named();
    let cfg2 = cfg.clone();
    let build = move |tape: &mut Tape, ps: &[(String, Tensor)]| {
        let p = params.with_tensors(ps)?;
        let mut acc = Tensor::zeros(&[1]);
        for (fundus, oct, label) in &picks {
            let logits = elf_core::forward(tape, &p, fundus, oct, &cfg2)?;
            let ce = tape.cross_entropy(&logits, *label)?;
            let ce1 = tape.reshape(&ce, &[1])?;
            acc = tape.add(&acc, &ce1)?;
        }
        let mean = tape.mul_scalar(&acc, 1.0 / picks.len() as f64)?;
        tape.sum_all(&mean)
    };

    let plan = if probes == 0 {
        ProbePlan::Exhaustive
    } else {
        ProbePlan::Sampled { cap_per_group: probes, seed: cfg.train.seed }
    };
    let report = grad_check_with_plan(&named, &build, h, tol, plan)?;
    print!("{}", report.render());
    if report.pass {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} at tolerance {:.1e}",
            report.max_rel_err, report.tol
        )))
    }
}

/// `elf shapes`: print the symbolic shape walkthrough of one mode's forward
/// pass for whatever dimensions the config declares. Nothing is allocated, so
/// this works at clinically sized inputs too.
pub fn cmd_shapes(config: Option<&Path>, mode: &str) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let mode = Mode::from_str(mode)?;

    let d = &cfg.dims;
    let (ih, iw) = d.fundus_input_hw;
    let (it, ioh, iow) = d.oct_input_thw;
    println!("mode: {mode}");
    println!("fundus input 3x{ih}x{iw} -> features {}x{}x{} (stacked height D_x = {})", d.c_x, d.h_x, d.w_x, d.d_x());
    println!("oct    input {it}x1x{ioh}x{iow} -> features {}x{}x{}x{} (stacked height S_y = {})", d.t_y, d.c_y, d.h_y, d.w_y, d.s_y());
    println!();
    print!("{}", render_trace(&shape_plan(mode, &cfg)));
    Ok(())
}
