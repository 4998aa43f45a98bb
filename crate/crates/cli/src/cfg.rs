//! Flat `key = value` run configuration files.
//!
//! One assignment per line, `#` starts a comment, unspecified keys keep the
//! compiled-in defaults. [`render_flat`] writes every key back out (defaults
//! included), so the echoed config in a run log is always complete, and
//! `parse_config(render_flat(cfg)) == cfg` round-trips.

use std::path::Path;

use elf_core::{Config, Error, Result};

/// Parse a config file's text. `source` names the file in error messages;
/// every error carries `source:line`.
pub fn parse_config(text: &str, source: &str) -> Result<Config> {
    let mut cfg = Config::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{source}:{lineno}: expected `key = value`, got {line:?}"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, key, value)
            .map_err(|msg| Error::Config(format!("{source}:{lineno}: {msg}")))?;
    }
    Ok(cfg)
}

/// Load a config file (or the compiled-in defaults when `path` is `None`).
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text, &p.display().to_string())
        }
    }
}

fn apply_key(cfg: &mut Config, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> std::result::Result<T, String> {
        value.parse().map_err(|_| format!("key {key} expects {kind}, got {value:?}"))
    }
    fn boolean(key: &str, value: &str) -> std::result::Result<bool, String> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("key {key} expects true or false, got {value:?}")),
        }
    }

    let d = &mut cfg.dims;
    let f = &mut cfg.fusion;
    let t = &mut cfg.train;
    let s = &mut cfg.synth;
    match key {
        "fundus_input_h" => d.fundus_input_hw.0 = num(key, value, "an integer")?,
        "fundus_input_w" => d.fundus_input_hw.1 = num(key, value, "an integer")?,
        "oct_input_t" => d.oct_input_thw.0 = num(key, value, "an integer")?,
        "oct_input_h" => d.oct_input_thw.1 = num(key, value, "an integer")?,
        "oct_input_w" => d.oct_input_thw.2 = num(key, value, "an integer")?,
        "c_x" => d.c_x = num(key, value, "an integer")?,
        "h_x" => d.h_x = num(key, value, "an integer")?,
        "w_x" => d.w_x = num(key, value, "an integer")?,
        "t_y" => d.t_y = num(key, value, "an integer")?,
        "c_y" => d.c_y = num(key, value, "an integer")?,
        "h_y" => d.h_y = num(key, value, "an integer")?,
        "w_y" => d.w_y = num(key, value, "an integer")?,
        "tau_local" => f.tau_local = num(key, value, "a number")?,
        "tau_global" => f.tau_global = num(key, value, "a number")?,
        "fused_width" => f.fused_width = num(key, value, "an integer")?,
        "num_classes" => f.num_classes = num(key, value, "an integer")?,
        "batch_size" => t.batch_size = num(key, value, "an integer")?,
        "learning_rate" => t.learning_rate = num(key, value, "a number")?,
        "epochs" => t.epochs = num(key, value, "an integer")?,
        "beta1" => t.beta1 = num(key, value, "a number")?,
        "beta2" => t.beta2 = num(key, value, "a number")?,
        "epsilon" => t.epsilon = num(key, value, "a number")?,
        "seed" => t.seed = num(key, value, "an integer")?,
        "augment_fundus" => t.augment_fundus = boolean(key, value)?,
        "augment_oct" => t.augment_oct = boolean(key, value)?,
        "synth_per_class" => {
            let mut counts = Vec::new();
            for part in value.split(',') {
                counts.push(num::<usize>(key, part.trim(), "comma-separated integers")?);
            }
            s.per_class = counts;
        }
        "synth_signal_fundus" => s.signal_fundus = num(key, value, "a number")?,
        "synth_signal_oct" => s.signal_oct = num(key, value, "a number")?,
        "synth_noise_sigma" => s.noise_sigma = num(key, value, "a number")?,
        "synth_seed" => s.seed = num(key, value, "an integer")?,
        _ => return Err(format!("unknown config key {key}")),
    }
    Ok(())
}

/// Render every key with its current value, in the file layout the parser
/// accepts. Used both to echo the effective configuration into run logs and
/// to write `config_used.cfg` next to a run's outputs.
pub fn render_flat(cfg: &Config) -> String {
    let d = &cfg.dims;
    let f = &cfg.fusion;
    let t = &cfg.train;
    let s = &cfg.synth;
    let per_class =
        s.per_class.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "# input and feature-map dims\n\
         fundus_input_h = {}\n\
         fundus_input_w = {}\n\
         oct_input_t = {}\n\
         oct_input_h = {}\n\
         oct_input_w = {}\n\
         c_x = {}\n\
         h_x = {}\n\
         w_x = {}\n\
         t_y = {}\n\
         c_y = {}\n\
         h_y = {}\n\
         w_y = {}\n\
         # fusion\n\
         tau_local = {}\n\
         tau_global = {}\n\
         fused_width = {}\n\
         num_classes = {}\n\
         # training\n\
         batch_size = {}\n\
         learning_rate = {}\n\
         epochs = {}\n\
         beta1 = {}\n\
         beta2 = {}\n\
         epsilon = {}\n\
         seed = {}\n\
         augment_fundus = {}\n\
         augment_oct = {}\n\
         # synthetic data\n\
         synth_per_class = {}\n\
         synth_signal_fundus = {}\n\
         synth_signal_oct = {}\n\
         synth_noise_sigma = {}\n\
         synth_seed = {}\n",
        d.fundus_input_hw.0,
        d.fundus_input_hw.1,
        d.oct_input_thw.0,
        d.oct_input_thw.1,
        d.oct_input_thw.2,
        d.c_x,
        d.h_x,
        d.w_x,
        d.t_y,
        d.c_y,
        d.h_y,
        d.w_y,
        f.tau_local,
        f.tau_global,
        f.fused_width,
        f.num_classes,
        t.batch_size,
        t.learning_rate,
        t.epochs,
        t.beta1,
        t.beta2,
        t.epsilon,
        t.seed,
        t.augment_fundus,
        t.augment_oct,
        per_class,
        s.signal_fundus,
        s.signal_oct,
        s.noise_sigma,
        s.seed,
    )
}

/// Seed precedence: explicit flag, then the ELF_SEED environment variable,
/// then whatever the config file (or default) carries.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("ELF_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("ELF_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
