use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Critic, Generator, LatentAnchor};
use crate::airsim::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Tensor};

const GEN_PREFIX: &str = "gen/";
const CRITIC_PREFIX: &str = "critic/";

/// Text sidecar that makes a parameter checkpoint self-describing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelManifest {
    pub arch: ArchConfig,
    pub norm: NormStats,
    /// Free-form extra keys (epoch, seed, ...), written in sorted order.
    pub meta: BTreeMap<String, String>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelManifest {
    /// Latent anchor the networks were trained with (`meta.anchored_latent`,
    /// anchored when absent).
    pub fn anchor(&self) -> Result<LatentAnchor> {
        match self.meta.get("anchored_latent").map(String::as_str) {
            None | Some("true") => LatentAnchor::from_norm(&self.norm),
            Some("false") => Ok(LatentAnchor::standard()),
            Some(v) => Err(Error::Format(format!("manifest meta.anchored_latent has invalid value `{v}`"))),
        }
    }

    /// Epoch recorded in `meta.epoch`, if any.
    pub fn epoch(&self) -> Option<usize> {
        self.meta.get("epoch").and_then(|v| v.parse().ok())
    }

    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::from("format=chanest-model\nversion=1\n");
        let _ = writeln!(s, "antennas={}", a.antennas);
        let _ = writeln!(s, "symbols={}", a.symbols);
        let _ = writeln!(s, "subcarriers={}", a.subcarriers);
        let _ = writeln!(s, "encoder_widths={}", join(&a.encoder_widths));
        let _ = writeln!(s, "z_dim={}", a.z_dim);
        let _ = writeln!(s, "critic_widths={}", join(&a.critic_widths));
        let _ = writeln!(s, "leaky_slope={:?}", a.leaky_slope);
        let _ = writeln!(s, "bn_momentum={:?}", a.bn_momentum);
        let _ = writeln!(s, "scale_min={:?}", self.norm.scale_min);
        let _ = writeln!(s, "scale_max={:?}", self.norm.scale_max);
        let _ = writeln!(s, "mu_h={:?}", self.norm.mu_h);
        let _ = writeln!(s, "sigma_h={:?}", self.norm.sigma_h);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("manifest is missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("manifest key `{k}` has invalid value `{v}`")))
        }
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?.split(',').map(|x| num(k, x.trim().to_string())).collect()
        };
        if get("format")? != "chanest-model" || get("version")? != "1" {
            return Err(Error::Format("not a version-1 model manifest".into()));
        }
        let arch = ArchConfig {
            antennas: num("antennas", get("antennas")?)?,
            symbols: num("symbols", get("symbols")?)?,
            subcarriers: num("subcarriers", get("subcarriers")?)?,
            encoder_widths: list("encoder_widths")?,
            z_dim: num("z_dim", get("z_dim")?)?,
            critic_widths: list("critic_widths")?,
            leaky_slope: num("leaky_slope", get("leaky_slope")?)?,
            bn_momentum: num("bn_momentum", get("bn_momentum")?)?,
        };
        arch.validate()?;
        let norm = NormStats::new(
            num("scale_min", get("scale_min")?)?,
            num("scale_max", get("scale_max")?)?,
            num("mu_h", get("mu_h")?)?,
            num("sigma_h", get("sigma_h")?)?,
        )?;
        let meta = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self { arch, norm, meta })
    }
}

/// Sidecar path: the checkpoint path with its extension replaced.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

/// Writes both networks (plus any `extra` entries) to a parameter
/// checkpoint at `path` and the manifest next to it.
pub fn save_model(
    path: impl AsRef<Path>,
    generator: &Generator,
    critic: &Critic,
    manifest: &ModelManifest,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let path = path.as_ref();
    if generator.arch() != &manifest.arch || critic.arch() != &manifest.arch {
        return Err(Error::Config("manifest architecture does not match the networks".into()));
    }
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (prefix, set) in [(GEN_PREFIX, generator.params()), (CRITIC_PREFIX, critic.params())] {
        entries.extend(set.iter().map(|p| (format!("{prefix}{}", p.name), p.value.clone())));
    }
    entries.extend(extra.iter().cloned());
    checkpoint::save(path, &entries)?;
    std::fs::write(manifest_path(path), manifest.to_text())?;
    Ok(())
}

pub struct LoadedModel {
    pub generator: Generator,
    pub critic: Critic,
    pub manifest: ModelManifest,
    /// Entries that belong to neither network.
    pub extra: Vec<(String, Tensor)>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let manifest = ModelManifest::parse(&std::fs::read_to_string(manifest_path(path))?)?;
    let entries = checkpoint::load(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::new(&manifest.arch, &mut rng)?;
    let mut critic = Critic::new(&manifest.arch, &mut rng)?;
    let mut gen_entries = Vec::new();
    let mut critic_entries = Vec::new();
    let mut extra = Vec::new();
    for (name, t) in entries {
        if let Some(n) = name.strip_prefix(GEN_PREFIX) {
            gen_entries.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(CRITIC_PREFIX) {
            critic_entries.push((n.to_string(), t));
        } else {
            extra.push((name, t));
        }
    }
    generator.params_mut().load_named(&gen_entries)?;
    critic.params_mut().load_named(&critic_entries)?;
    Ok(LoadedModel {
        generator,
        critic,
        manifest,
        extra,
    })
}
