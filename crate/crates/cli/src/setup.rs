//! Turning flags and config files into library inputs.
//!
//! Every value resolves through the same chain: an explicit flag wins,
//! then the matching key in a config file, then the built-in default.
//! Model keys live in the `[model]` section (of `--model-config` first,
//! `--config` second); command keys live in a section named after the
//! subcommand, with keys spelled exactly like the long flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use gradrecon::config::ConfigFile;
use gradrecon::data::{load_idx, synth_dataset, Dataset, SynthKind};
use gradrecon::error::{Error, Result};
use gradrecon::models::{Arch, CnnConfig, MlpConfig};

/// The library's invalid-argument error, stamped as ours.
pub fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op: "cli".to_string(),
        msg: msg.into(),
    }
}

/// Config files in precedence order, scoped to one section.
pub struct Lookup {
    files: Vec<ConfigFile>,
    section: String,
}

impl Lookup {
    pub fn open(paths: &[Option<&Path>], section: &str) -> Result<Lookup> {
        let mut files = Vec::new();
        for path in paths.iter().flatten() {
            files.push(ConfigFile::load(path)?);
        }
        Ok(Lookup {
            files,
            section: section.to_string(),
        })
    }

    /// First hit wins: the flag, then the files in order.
    pub fn value<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        for file in &self.files {
            if let Some(v) = file.get_as::<T>(&self.section, key)? {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    pub fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.value(flag, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.value(flag, key)?.ok_or_else(|| {
            bad(format!("missing `--{key}` (or `{key}` in [{}])", self.section),
            )
        })
    }
}

/// Model description shared by every command that builds a network.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    /// Architecture: mlp or cnn
    #[arg(long, value_name = "KIND")]
    pub arch: Option<String>,
    /// MLP layer sizes, input first (e.g. 784,5,10)
    #[arg(long, value_name = "LIST")]
    pub layers: Option<String>,
    /// Input width (CNN) or input dimension (MLP shorthand)
    #[arg(long, value_name = "N")]
    pub d: Option<usize>,
    /// Input channels
    #[arg(long, value_name = "N")]
    pub c: Option<usize>,
    /// Conv kernel width
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Conv padding
    #[arg(long, value_name = "N")]
    pub p: Option<usize>,
    /// Conv stride
    #[arg(long, value_name = "N")]
    pub s: Option<usize>,
    /// Number of conv kernels
    #[arg(long, value_name = "N")]
    pub h_kernels: Option<usize>,
    /// Hidden units (MLP shorthand) or dense units after the conv layer
    #[arg(long, value_name = "N")]
    pub n1: Option<usize>,
    /// Output classes
    #[arg(long, value_name = "N")]
    pub n2: Option<usize>,
    /// Seed for the model parameters
    #[arg(long, value_name = "SEED")]
    pub params_seed: Option<u64>,
}

pub struct Model {
    pub arch: Arch,
    pub params_seed: u64,
}

fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("bad {what} entry {part:?}: {e}")))
        })
        .collect()
}

/// Builds the architecture from the `[model]` lookup chain. The MLP form
/// takes either a full `layers` list or the `d`/`n1`/`n2` shorthand for
/// one hidden layer.
pub fn build_model(flags: &ModelFlags, lookup: &Lookup) -> Result<Model> {
    let arch_kind = lookup.get(flags.arch.clone(), "arch", "mlp".to_string())?;
    let params_seed = lookup.get(flags.params_seed, "params-seed", 0)?;
    let arch = match arch_kind.as_str() {
        "mlp" => {
            let sizes = match lookup.value(flags.layers.clone(), "layers")? {
                Some(list) => parse_usize_list(&list, "layer")?,
                None => {
                    let d = lookup.require(flags.d, "d")?;
                    let n1 = lookup.get(flags.n1, "n1", 1)?;
                    let n2 = lookup.get(flags.n2, "n2", 10)?;
                    vec![d, n1, n2]
                }
            };
            Arch::Mlp(MlpConfig::new(sizes)?)
        }
        "cnn" => Arch::Cnn(CnnConfig {
            channels: lookup.get(flags.c, "c", 1)?,
            input_width: lookup.require(flags.d, "d")?,
            kernel_size: lookup.require(flags.k, "k")?,
            padding: lookup.get(flags.p, "p", 0)?,
            stride: lookup.get(flags.s, "s", 1)?,
            kernel_count: lookup.get(flags.h_kernels, "h-kernels", 1)?,
            dense_units: lookup.get(flags.n1, "n1", 1)?,
            classes: lookup.get(flags.n2, "n2", 10)?,
        }),
        other => {
            return Err(bad(format!("unknown model arch {other:?} (want mlp or cnn)"),
            ))
        }
    };
    arch.validate()?;
    Ok(Model { arch, params_seed })
}

/// Where training instances come from: a `synth:` spec or an IDX pair.
pub enum DataSource {
    Synth {
        kind: SynthKind,
        n: usize,
        c: usize,
        d: usize,
        classes: usize,
        seed: u64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

/// Parses `synth:KIND[,key=value...]` with keys n, c, d, classes, seed.
/// Anything else is an IDX image file path; `labels` names its pair.
pub fn parse_data_source(raw: &str, labels: Option<&str>) -> Result<DataSource> {
    let Some(spec) = raw.strip_prefix("synth:") else {
        let labels = labels.ok_or_else(|| {
            bad("IDX data needs `--labels FILE` alongside `--data`")
        })?;
        return Ok(DataSource::Idx {
            images: raw.to_string(),
            labels: labels.to_string(),
        });
    };
    let mut parts = spec.split(',');
    let kind = match parts.next().unwrap_or("").trim() {
        "gaussian" => SynthKind::Gaussian,
        "stripes" => SynthKind::Stripes,
        "blobs" => SynthKind::Blobs,
        other => {
            return Err(bad(format!("unknown synth kind {other:?} (want gaussian, stripes, or blobs)"),
            ))
        }
    };
    let (mut n, mut c, mut d, mut classes, mut seed) = (1usize, 1usize, 28usize, 10usize, 0u64);
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            bad(format!("bad synth option {part:?} (want key=value)"))
        })?;
        let bad_num = |e: std::num::ParseIntError| {
            bad(format!("bad synth value for {key:?}: {e}"))
        };
        match key.trim() {
            "n" => n = value.trim().parse().map_err(bad_num)?,
            "c" => c = value.trim().parse().map_err(bad_num)?,
            "d" => d = value.trim().parse().map_err(bad_num)?,
            "classes" => classes = value.trim().parse().map_err(bad_num)?,
            "seed" => seed = value.trim().parse().map_err(bad_num)?,
            other => {
                return Err(bad(format!("unknown synth option {other:?}"),
                ))
            }
        }
    }
    Ok(DataSource::Synth {
        kind,
        n,
        c,
        d,
        classes,
        seed,
    })
}

/// Loads the dataset, synthesizing a default when no `--data` was given:
/// blobs shaped to the model input, `count` instances.
pub fn load_data(
    raw: Option<&str>,
    labels: Option<&str>,
    arch: &Arch,
    count: usize,
) -> Result<Dataset> {
    let source = match raw {
        Some(raw) => parse_data_source(raw, labels)?,
        None => {
            let (c, d) = match arch {
                Arch::Cnn(cfg) => (cfg.channels, cfg.input_width),
                Arch::Mlp(cfg) => {
                    let numel = cfg.input_dim();
                    let side = (numel as f64).sqrt().round() as usize;
                    if side * side != numel {
                        return Err(bad(format!(
                                "MLP input dimension {numel} is not square; give --data explicitly"
                            ),
                        ));
                    }
                    (1, side)
                }
            };
            DataSource::Synth {
                kind: SynthKind::Blobs,
                n: count,
                c,
                d,
                classes: arch.classes(),
                seed: 0,
            }
        }
    };
    let ds = match source {
        DataSource::Synth {
            kind,
            n,
            c,
            d,
            classes,
            seed,
        } => synth_dataset(kind, n.max(count), c, d, classes, seed)?,
        DataSource::Idx { images, labels } => {
            let (channels, classes) = match arch {
                Arch::Cnn(cfg) => (cfg.channels, cfg.classes),
                Arch::Mlp(cfg) => (1, cfg.classes()),
            };
            load_idx(images, labels, channels, classes)?
        }
    };
    if ds.len() < count {
        return Err(bad(format!("need {count} instances but the dataset has {}", ds.len()),
        ));
    }
    if ds.classes != arch.classes() {
        return Err(bad(format!(
                "dataset has {} classes but the model expects {}",
                ds.classes,
                arch.classes()
            ),
        ));
    }
    let numel: usize = ds.images[0].numel();
    if numel != arch.input_numel() {
        return Err(bad(format!(
                "dataset instances carry {numel} values but the model input needs {}",
                arch.input_numel()
            ),
        ));
    }
    Ok(ds)
}
