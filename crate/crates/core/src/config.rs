//! Run configuration: a flat `key = value` text file with typed,
//! defaulted keys and `PYROCAST_`-prefixed environment overrides.
//!
//! Every key the pipeline understands is registered in one schema table
//! with its type and default; unknown keys are rejected at load so a
//! typo cannot silently fall back to a default. Environment variables
//! mirror keys with dots mapped to underscores (`stage1.iterations`
//! becomes `PYROCAST_STAGE1_ITERATIONS`) and take precedence over the
//! file. The canonical serialization lists every known key with its
//! effective value, so its hash identifies a run regardless of which
//! defaults were spelled out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bivariate::{RhoSupport, Stage3Config};
use crate::error::{Error, Result};
use crate::eval::CvScheme;
use crate::forest::ForestConfig;
use crate::lgcp::LgcpConfig;
use crate::mesh::MeshConfig;
use crate::occurrence::Stage1Config;
use crate::synth::{MissingSpec, SimConfig};

pub const ENV_PREFIX: &str = "PYROCAST_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    U64,
    F64,
    Bool,
    Str,
}

/// The full key schema: name, type, default. Single source of truth for
/// validation, documentation, and the canonical hash.
const SCHEMA: &[(&str, Kind, &str)] = &[
    ("out.dir", Kind::Str, "out"),
    // Empty path keys resolve relative to out.dir with standard names.
    ("panel.csv", Kind::Str, ""),
    ("seed", Kind::U64, "1"),
    ("threads", Kind::U64, "0"),
    ("sim.nx", Kind::U64, "20"),
    ("sim.ny", Kind::U64, "20"),
    ("sim.spacing", Kind::F64, "1"),
    ("sim.t", Kind::U64, "20"),
    ("sim.start_year", Kind::U64, "1993"),
    ("sim.phi_eps", Kind::F64, "3"),
    ("sim.r_eps", Kind::F64, "0.6"),
    ("sim.phi_eta", Kind::F64, "3"),
    ("sim.r_eta", Kind::F64, "0.5"),
    ("sim.rho_eta", Kind::F64, "0.5"),
    ("sim.mu_z_base", Kind::F64, "0"),
    ("sim.mu_z_amp", Kind::F64, "1"),
    ("sim.mu1_base", Kind::F64, "2"),
    ("sim.mu1_amp", Kind::F64, "1"),
    ("sim.log_sigma1_base", Kind::F64, "-0.2"),
    ("sim.log_sigma1_amp", Kind::F64, "0.3"),
    ("sim.mu2_base", Kind::F64, "0.8"),
    ("sim.mu2_amp", Kind::F64, "0.6"),
    ("sim.log_sigma2_base", Kind::F64, "-0.5"),
    ("sim.log_sigma2_amp", Kind::F64, "0.3"),
    ("sim.missing.ba_rate", Kind::F64, "0.2"),
    ("sim.missing.cnt_rate", Kind::F64, "0.2"),
    ("sim.missing.gappy_share", Kind::F64, "0.5"),
    ("mesh.extension_margin", Kind::F64, "0.1"),
    // 0 disables coarsening: mesh nodes sit at the pixel centers.
    ("mesh.node_ratio", Kind::F64, "0"),
    ("mesh.max_nodes", Kind::U64, "20000"),
    ("stage1.iterations", Kind::U64, "60000"),
    ("stage1.burn_in", Kind::U64, "10000"),
    ("stage1.thin", Kind::U64, "5"),
    ("stage1.s_phi", Kind::F64, "0.3"),
    ("stage1.s_r", Kind::F64, "0.3"),
    ("stage1.adapt", Kind::Bool, "true"),
    // 0 disables periodic checkpoints; resume still works from the final
    // checkpoint an interrupted run left behind.
    ("stage1.checkpoint_every", Kind::U64, "0"),
    ("stage2.xi_share", Kind::F64, "0.5"),
    ("stage2.grids", Kind::Str, "5,9,17"),
    ("stage3.iterations", Kind::U64, "60000"),
    ("stage3.burn_in", Kind::U64, "10000"),
    ("stage3.thin", Kind::U64, "5"),
    ("stage3.s_phi", Kind::F64, "0.3"),
    ("stage3.s_r", Kind::F64, "0.3"),
    ("stage3.s_rho", Kind::F64, "0.3"),
    ("stage3.adapt", Kind::Bool, "true"),
    ("stage3.rho_symmetric", Kind::Bool, "false"),
    ("stage3.checkpoint_every", Kind::U64, "0"),
    ("rf.ntree", Kind::U64, "200"),
    // 0 considers every feature at each split.
    ("rf.mtry", Kind::U64, "0"),
    ("rf.min_leaf", Kind::U64, "1"),
    ("lgcp.iterations", Kind::U64, "250000"),
    ("lgcp.burn_in", Kind::U64, "200000"),
    ("lgcp.thin", Kind::U64, "25"),
    ("lgcp.batch", Kind::U64, "10"),
    ("lgcp.step_a", Kind::F64, "1e-4"),
    // 0 selects the default schedule scale iterations / 10.
    ("lgcp.step_c", Kind::F64, "0"),
    ("lgcp.lambda_bound", Kind::F64, "30"),
    ("lgcp.s_phi", Kind::F64, "0.3"),
    ("lgcp.s_r", Kind::F64, "0.3"),
    ("lgcp.adapt", Kind::Bool, "true"),
    // 0 selects the coefficient-count-based default.
    ("lgcp.beta_prior_variance", Kind::F64, "0"),
    // intercept | trend | covariates
    ("lgcp.design", Kind::Str, "intercept"),
    ("lgcp.checkpoint_every", Kind::U64, "0"),
    ("cv.scheme", Kind::Str, "fixed-month"),
];

fn schema_entry(key: &str) -> Option<(Kind, &'static str)> {
    SCHEMA
        .iter()
        .find(|(k, _, _)| *k == key)
        .map(|&(_, kind, default)| (kind, default))
}

/// Environment variable name mirroring a config key.
pub fn env_name(key: &str) -> String {
    let mut name = String::from(ENV_PREFIX);
    for ch in key.chars() {
        name.push(if ch == '.' { '_' } else { ch.to_ascii_uppercase() });
    }
    name
}

/// Effective settings for one run: schema defaults plus file and
/// environment overrides.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    overrides: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse `key = value` lines. Blank lines and `#` comments are
    /// skipped; unknown or repeated keys and untyped values are errors.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                lineno + 1
            )))?;
            let (key, value) = (key.trim(), value.trim());
            if config.overrides.contains_key(key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            config.set(key, value)?;
        }
        Ok(config)
    }

    /// Read a config file and apply process-environment overrides.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::from_text(&text)?;
        config.apply_env_from(std::env::vars())?;
        Ok(config)
    }

    /// Set one key, checking it against the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (kind, _) = schema_entry(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        check_kind(key, kind, value)?;
        self.overrides.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `PYROCAST_*` overrides from an environment listing. Prefixed
    /// variables that match no key are rejected, so a misspelled override
    /// cannot be ignored.
    pub fn apply_env_from(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<()> {
        for (name, value) in vars {
            let Some(_) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = SCHEMA
                .iter()
                .map(|(k, _, _)| *k)
                .find(|k| env_name(k) == name)
                .ok_or_else(|| {
                    Error::Config(format!("environment variable {name} matches no config key"))
                })?;
            let (kind, _) = schema_entry(key).unwrap();
            check_kind(key, kind, &value)?;
            self.overrides.insert(key.to_string(), value);
        }
        Ok(())
    }

    /// Effective string value: override if present, else the default.
    pub fn get(&self, key: &str) -> &str {
        match self.overrides.get(key) {
            Some(v) => v,
            None => {
                schema_entry(key)
                    .unwrap_or_else(|| panic!("unregistered config key {key}"))
                    .1
            }
        }
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().unwrap_or_else(|_| panic!("key {key} is not u64-typed"))
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get_u64(key) as usize
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().unwrap_or_else(|_| panic!("key {key} is not f64-typed"))
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get(key).parse().unwrap_or_else(|_| panic!("key {key} is not bool-typed"))
    }

    /// Every known key with its effective value, sorted; the hashed
    /// identity of the run settings.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in SCHEMA {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out.dir"))
    }

    /// Artifact path: explicit override, else `out.dir/<name>`.
    pub fn artifact(&self, key: &str, name: &str) -> PathBuf {
        let v = self.get(key);
        if v.is_empty() {
            self.out_dir().join(name)
        } else {
            PathBuf::from(v)
        }
    }

    pub fn seed(&self) -> u64 {
        self.get_u64("seed")
    }

    pub fn threads(&self) -> usize {
        self.get_usize("threads")
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let config = SimConfig {
            nx: self.get_usize("sim.nx"),
            ny: self.get_usize("sim.ny"),
            spacing: self.get_f64("sim.spacing"),
            t: self.get_usize("sim.t"),
            start_year: self.get_u64("sim.start_year") as i32,
            phi_eps: self.get_f64("sim.phi_eps"),
            r_eps: self.get_f64("sim.r_eps"),
            phi_eta: self.get_f64("sim.phi_eta"),
            r_eta: self.get_f64("sim.r_eta"),
            rho_eta: self.get_f64("sim.rho_eta"),
            mu_z_base: self.get_f64("sim.mu_z_base"),
            mu_z_amp: self.get_f64("sim.mu_z_amp"),
            mu1_base: self.get_f64("sim.mu1_base"),
            mu1_amp: self.get_f64("sim.mu1_amp"),
            log_sigma1_base: self.get_f64("sim.log_sigma1_base"),
            log_sigma1_amp: self.get_f64("sim.log_sigma1_amp"),
            mu2_base: self.get_f64("sim.mu2_base"),
            mu2_amp: self.get_f64("sim.mu2_amp"),
            log_sigma2_base: self.get_f64("sim.log_sigma2_base"),
            log_sigma2_amp: self.get_f64("sim.log_sigma2_amp"),
            missing: MissingSpec {
                ba_rate: self.get_f64("sim.missing.ba_rate"),
                cnt_rate: self.get_f64("sim.missing.cnt_rate"),
                gappy_share: self.get_f64("sim.missing.gappy_share"),
            },
            mesh: self.mesh_config(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn mesh_config(&self) -> MeshConfig {
        let ratio = self.get_f64("mesh.node_ratio");
        MeshConfig {
            extension_margin: self.get_f64("mesh.extension_margin"),
            node_target_ratio: (ratio > 0.0).then_some(ratio),
            max_nodes: self.get_usize("mesh.max_nodes"),
            ..MeshConfig::default()
        }
    }

    pub fn stage1_config(&self) -> Result<Stage1Config> {
        let config = Stage1Config {
            iterations: self.get_u64("stage1.iterations"),
            burn_in: self.get_u64("stage1.burn_in"),
            thin: self.get_u64("stage1.thin"),
            s_phi: self.get_f64("stage1.s_phi"),
            s_r: self.get_f64("stage1.s_r"),
            adapt: self.get_bool("stage1.adapt"),
            ..Stage1Config::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn basis_grids(&self) -> Result<Vec<usize>> {
        let text = self.get("stage2.grids");
        let grids: Vec<usize> = text
            .split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("stage2.grids entry {part:?} is not an integer")))
            })
            .collect::<Result<_>>()?;
        if grids.is_empty() {
            return Err(Error::Config("stage2.grids must list at least one grid".into()));
        }
        Ok(grids)
    }

    pub fn xi_share(&self) -> f64 {
        self.get_f64("stage2.xi_share")
    }

    pub fn stage3_config(&self) -> Result<Stage3Config> {
        let config = Stage3Config {
            iterations: self.get_u64("stage3.iterations"),
            burn_in: self.get_u64("stage3.burn_in"),
            thin: self.get_u64("stage3.thin"),
            s_phi: self.get_f64("stage3.s_phi"),
            s_r: self.get_f64("stage3.s_r"),
            s_rho: self.get_f64("stage3.s_rho"),
            adapt: self.get_bool("stage3.adapt"),
            rho_support: if self.get_bool("stage3.rho_symmetric") {
                RhoSupport::Symmetric
            } else {
                RhoSupport::Unit
            },
            ..Stage3Config::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn forest_config(&self) -> ForestConfig {
        let mtry = self.get_usize("rf.mtry");
        ForestConfig {
            ntree: self.get_usize("rf.ntree"),
            mtry: (mtry > 0).then_some(mtry),
            min_leaf: self.get_usize("rf.min_leaf").max(1),
        }
    }

    pub fn lgcp_config(&self) -> Result<LgcpConfig> {
        let step_c = self.get_f64("lgcp.step_c");
        let beta_var = self.get_f64("lgcp.beta_prior_variance");
        let config = LgcpConfig {
            iterations: self.get_u64("lgcp.iterations"),
            burn_in: self.get_u64("lgcp.burn_in"),
            thin: self.get_u64("lgcp.thin"),
            batch: self.get_usize("lgcp.batch"),
            step_a: self.get_f64("lgcp.step_a"),
            step_c: (step_c > 0.0).then_some(step_c),
            lambda_bound: self.get_f64("lgcp.lambda_bound"),
            s_phi: self.get_f64("lgcp.s_phi"),
            s_r: self.get_f64("lgcp.s_r"),
            adapt: self.get_bool("lgcp.adapt"),
            beta_prior_variance: (beta_var > 0.0).then_some(beta_var),
            ..LgcpConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn lgcp_design(&self) -> Result<LgcpDesign> {
        match self.get("lgcp.design") {
            "intercept" => Ok(LgcpDesign::Intercept),
            "trend" => Ok(LgcpDesign::Trend),
            "covariates" => Ok(LgcpDesign::Covariates),
            other => Err(Error::Config(format!(
                "lgcp.design {other:?} is not intercept, trend, or covariates"
            ))),
        }
    }

    pub fn cv_scheme(&self) -> Result<CvScheme> {
        self.get("cv.scheme").parse()
    }
}

/// Regression structure of the count-intensity competitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgcpDesign {
    /// Intercept only.
    Intercept,
    /// Static six-column trend design.
    Trend,
    /// Trend design plus the per-period covariate block.
    Covariates,
}

fn check_kind(key: &str, kind: Kind, value: &str) -> Result<()> {
    let ok = match kind {
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::F64 => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Str => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("key {key} expects a {kind:?} value, got {value:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_parse() {
        let config = RunConfig::default();
        for (key, kind, default) in SCHEMA {
            check_kind(key, *kind, default).unwrap();
            assert_eq!(config.get(key), *default);
        }
        assert_eq!(config.seed(), 1);
        assert_eq!(config.stage1_config().unwrap().iterations, 60_000);
        assert_eq!(config.stage3_config().unwrap().thin, 5);
        assert_eq!(config.lgcp_config().unwrap().batch, 10);
        assert_eq!(config.lgcp_config().unwrap().step_c, None);
        assert_eq!(config.forest_config().mtry, None);
        assert_eq!(config.basis_grids().unwrap(), vec![5, 9, 17]);
        assert_eq!(config.cv_scheme().unwrap(), CvScheme::FixedMonth);
        assert_eq!(config.lgcp_design().unwrap(), LgcpDesign::Intercept);
        let sim = config.sim_config().unwrap();
        assert_eq!((sim.nx, sim.ny, sim.t), (20, 20, 20));
        assert_eq!(config.mesh_config().node_target_ratio, None);
    }

    #[test]
    fn file_text_overrides_and_strictness() {
        let text =
            "\n# run settings\nseed = 42\nstage1.iterations= 200\nstage1.burn_in = 50\n  rf.mtry =3\n";
        let config = RunConfig::from_text(text).unwrap();
        assert_eq!(config.seed(), 42);
        assert_eq!(config.stage1_config().unwrap().iterations, 200);
        assert_eq!(config.forest_config().mtry, Some(3));
        // Inconsistent MCMC settings surface when the stage config is built.
        let short = RunConfig::from_text("stage1.iterations = 100").unwrap();
        assert!(short.stage1_config().is_err());
        // Untouched keys keep defaults.
        assert_eq!(config.get_u64("stage1.thin"), 5);

        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("seed = notanumber").is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::from_text("just a line").is_err());
        assert!(RunConfig::from_text("sim.spacing = inf").is_err());
    }

    #[test]
    fn environment_overrides_file_values() {
        let mut config = RunConfig::from_text("seed = 3\nstage3.thin = 2").unwrap();
        config
            .apply_env_from([
                ("PYROCAST_SEED".to_string(), "9".to_string()),
                ("PYROCAST_STAGE2_XI_SHARE".to_string(), "0.25".to_string()),
                ("UNRELATED".to_string(), "x".to_string()),
            ])
            .unwrap();
        assert_eq!(config.seed(), 9);
        assert_eq!(config.xi_share(), 0.25);
        assert_eq!(config.get_u64("stage3.thin"), 2);

        let mut bad = RunConfig::default();
        let err = bad
            .apply_env_from([("PYROCAST_TYPO".to_string(), "1".to_string())])
            .unwrap_err();
        assert!(err.to_string().contains("PYROCAST_TYPO"));
        assert!(bad
            .apply_env_from([("PYROCAST_SEED".to_string(), "x".to_string())])
            .is_err());
    }

    #[test]
    fn canonical_hash_tracks_effective_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        // Spelling out a default changes nothing.
        b.set("seed", "1").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert!(a.canonical_text().contains("stage1.iterations = 60000"));
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn artifact_paths_resolve_against_out_dir() {
        let mut config = RunConfig::default();
        config.set("out.dir", "/tmp/run7").unwrap();
        assert_eq!(config.artifact("panel.csv", "panel.csv"), PathBuf::from("/tmp/run7/panel.csv"));
        config.set("panel.csv", "/data/real.csv").unwrap();
        assert_eq!(config.artifact("panel.csv", "panel.csv"), PathBuf::from("/data/real.csv"));
        assert_eq!(env_name("stage1.s_phi"), "PYROCAST_STAGE1_S_PHI");
    }
}
