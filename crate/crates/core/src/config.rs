//! INI-style experiment configuration.
//!
//! ```text
//! [model]
//! dim = 1
//! drift = clamped-well
//! curvature = piecewise
//! curvature.inner = -2
//! sigma1 = 1
//!
//! [run]
//! T = 5
//! dt = 0.001
//! seed = 7
//! ```
//!
//! Lines starting with `#` or `;` are comments. Dotted keys (`drift.rate`)
//! are parameters of the named component.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coupling::{CouplingError, Scheme, SchemeParams, SchemeRegistry};
use crate::levy::{LevyError, ProfileParams, ProfileRegistry, RadialLevyMeasure, RadialProfile, Tabulated};
use crate::model::{DiagonalBand, DiffusionSpec, JumpCoeffSpec, MarkIntensity, ModelError, ModelRegistry, ModelSpec, Params};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {msg}")]
    Syntax { origin: String, line: usize, msg: String },
    #[error("{origin}:{line}: [{section}] {key}: {msg}")]
    Field { origin: String, line: usize, section: String, key: String, msg: String },
    #[error("{origin}: missing required field [{section}] {key}")]
    Missing { origin: String, section: String, key: String },
    #[error("{origin}: {msg}")]
    Invalid { origin: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `[section] key = value` text.
#[derive(Debug, Clone, Default)]
pub struct Ini {
    origin: String,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Ini {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut ini = Ini { origin: origin.to_string(), sections: BTreeMap::new() };
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            let syntax = |msg: String| ConfigError::Syntax { origin: origin.to_string(), line, msg };
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax(format!("unterminated section header `{s}`")))?.trim();
                if name.is_empty() {
                    return Err(syntax("empty section name".into()));
                }
                ini.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| syntax(format!("expected `key = value`, got `{s}`")))?;
            let section = current.clone().ok_or_else(|| syntax("key outside of any section".into()))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(syntax("empty key".into()));
            }
            let value = v.split(" #").next().unwrap_or("").split(" ;").next().unwrap_or("").trim().to_string();
            let sec = ini.sections.get_mut(&section).expect("section exists");
            if let Some(prev) = sec.get(key) {
                return Err(syntax(format!("duplicate key `{key}` (first set on line {})", prev.line)));
            }
            sec.insert(key.to_string(), Entry { value, line });
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|e| e.value.as_str())
    }

    fn line(&self, section: &str, key: &str) -> usize {
        self.sections.get(section).and_then(|s| s.get(key)).map_or(0, |e| e.line)
    }

    pub fn field_error(&self, section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Field { origin: self.origin.clone(), line: self.line(section, key), section: section.into(), key: key.into(), msg: msg.into() }
    }

    pub fn missing(&self, section: &str, key: &str) -> ConfigError {
        ConfigError::Missing { origin: self.origin.clone(), section: section.into(), key: key.into() }
    }

    pub fn invalid(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { origin: self.origin.clone(), msg: msg.into() }
    }

    pub fn str(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.get(section, key).ok_or_else(|| self.missing(section, key))
    }

    pub fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| self.field_error(section, key, format!("expected a number, got `{v}`"))),
        }
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(section, key)?.unwrap_or(default))
    }

    pub fn f64_req(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.f64_opt(section, key)?.ok_or_else(|| self.missing(section, key))
    }

    pub fn u64_opt(&self, section: &str, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<u64>().map(Some).map_err(|_| self.field_error(section, key, format!("expected a non-negative integer, got `{v}`"))),
        }
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.u64_opt(section, key)?.map_or(default, |v| v as usize))
    }

    /// Comma-separated numbers.
    pub fn list_opt(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| self.field_error(section, key, format!("bad number `{}` in list", t.trim()))))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    /// Semicolon-separated points, each a comma-separated vector.
    pub fn points_opt(&self, section: &str, key: &str) -> Result<Option<Vec<Vec<f64>>>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(';')
                .map(|p| {
                    p.split(',')
                        .map(|t| t.trim().parse::<f64>().map_err(|_| self.field_error(section, key, format!("bad number `{}` in point list", t.trim()))))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    /// Numeric keys `prefix.name` of a section, keyed by `name`.
    pub fn params(&self, section: &str, prefix: &str) -> Result<BTreeMap<String, f64>, ConfigError> {
        let mut out = BTreeMap::new();
        if let Some(sec) = self.sections.get(section) {
            let pre = format!("{prefix}.");
            for (k, e) in sec {
                if let Some(name) = k.strip_prefix(&pre) {
                    let v = e.value.parse::<f64>().map_err(|_| self.field_error(section, k, format!("expected a number, got `{}`", e.value)))?;
                    out.insert(name.to_string(), v);
                }
            }
        }
        Ok(out)
    }

    /// All numeric keys of a section except those listed.
    pub fn numeric_section(&self, section: &str, skip: &[&str]) -> Result<BTreeMap<String, f64>, ConfigError> {
        let mut out = BTreeMap::new();
        if let Some(sec) = self.sections.get(section) {
            for (k, e) in sec {
                if skip.contains(&k.as_str()) {
                    continue;
                }
                let v = e.value.parse::<f64>().map_err(|_| self.field_error(section, k, format!("expected a number, got `{}`", e.value)))?;
                out.insert(k.clone(), v);
            }
        }
        Ok(out)
    }

    /// SHA-256 of the canonical form (sorted sections and keys, trimmed values).
    pub fn canonical_hash(&self) -> String {
        let mut h = Sha256::new();
        for (s, sec) in &self.sections {
            h.update(format!("[{s}]\n"));
            for (k, e) in sec {
                h.update(format!("{k}={}\n", e.value));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), Entry { value: value.to_string(), line: 0 });
    }
}

#[derive(Debug, Clone)]
pub struct RunSection {
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub workers: usize,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub record_every: usize,
    pub burn_in: f64,
}

#[derive(Debug, Clone)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<String>,
    pub traces: usize,
}

pub struct ExperimentConfig {
    pub ini: Ini,
    pub model: ModelSpec,
    pub scheme: Option<Arc<dyn Scheme>>,
    pub run: RunSection,
    pub outputs: OutputSection,
    pub hash: String,
}

fn build_levy(ini: &Ini, dim: usize) -> Result<Option<RadialLevyMeasure>, ConfigError> {
    if !ini.has_section("levy") {
        return Ok(None);
    }
    let family = ini.str("levy", "profile")?;
    let profile: Arc<dyn RadialProfile> = if family == "tabulated" {
        let table = ini.str("levy", "table")?;
        let base = Path::new(ini.origin()).parent().unwrap_or(Path::new("."));
        Arc::new(Tabulated::from_csv(&base.join(table)).map_err(|e| ini.field_error("levy", "table", e.to_string()))?)
    } else {
        let params: ProfileParams = ini.numeric_section("levy", &["profile", "cutoff", "max_rate"])?;
        ProfileRegistry::default().build(family, &params, dim).map_err(|e| ini.field_error("levy", "profile", e.to_string()))?
    };
    let cutoff = match ini.get("levy", "cutoff") {
        None | Some("auto") => {
            let max_rate = ini.f64_or("levy", "max_rate", 1000.0)?;
            RadialLevyMeasure::default_cutoff(profile.clone(), dim, max_rate)?.cutoff
        }
        Some(_) => ini.f64_req("levy", "cutoff")?,
    };
    Ok(Some(RadialLevyMeasure::new(profile, dim, cutoff)?))
}

fn build_jump(ini: &Ini) -> Result<Option<JumpCoeffSpec>, ConfigError> {
    if !ini.has_section("jump") {
        return Ok(None);
    }
    let name = ini.str("jump", "coefficient")?;
    let params: Params = ini.numeric_section("jump", &["coefficient", "marks", "weights", "lo", "hi", "mass"])?;
    let g = ModelRegistry::default().jump(name, &params).map_err(|e| ini.field_error("jump", "coefficient", e.to_string()))?;
    let intensity = if let Some(points) = ini.points_opt("jump", "marks")? {
        let weights = ini.list_opt("jump", "weights")?.ok_or_else(|| ini.missing("jump", "weights"))?;
        if weights.len() != points.len() {
            return Err(ini.field_error("jump", "weights", format!("{} weights for {} marks", weights.len(), points.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(ini.field_error("jump", "weights", "weights must be non-negative"));
        }
        MarkIntensity::Atoms { points, weights }
    } else {
        let lo = ini.f64_req("jump", "lo")?;
        let hi = ini.f64_req("jump", "hi")?;
        let mass = ini.f64_req("jump", "mass")?;
        if !(hi > lo) || !(mass >= 0.0) {
            return Err(ini.field_error("jump", "hi", "need hi > lo and mass ≥ 0"));
        }
        MarkIntensity::Interval { lo, hi, mass }
    };
    Ok(Some(JumpCoeffSpec { g, intensity }))
}

/// Builds the model from `[model]`, `[levy]` and `[jump]`.
pub fn build_model(ini: &Ini) -> Result<ModelSpec, ConfigError> {
    let reg = ModelRegistry::default();
    let dim = ini.usize_or("model", "dim", 1)?;
    if dim == 0 {
        return Err(ini.field_error("model", "dim", "dimension must be ≥ 1"));
    }
    let drift_name = ini.str("model", "drift")?;
    let drift = reg.drift(drift_name, &ini.params("model", "drift")?).map_err(|e| ini.field_error("model", "drift", e.to_string()))?;
    let kappa = match ini.get("model", "curvature") {
        Some(name) => reg.curvature(name, &ini.params("model", "curvature")?).map_err(|e| ini.field_error("model", "curvature", e.to_string()))?,
        None => drift.matched_curvature().ok_or_else(|| ini.missing("model", "curvature"))?,
    };
    let mut diffusion = if let Some(diag) = ini.list_opt("model", "sigma1.diag")? {
        if diag.len() != dim {
            return Err(ini.field_error("model", "sigma1.diag", format!("need {dim} entries")));
        }
        DiffusionSpec::additive(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))
    } else if let Some(s) = ini.f64_opt("model", "sigma1")? {
        if s == 0.0 {
            DiffusionSpec::none()
        } else {
            DiffusionSpec::scalar(dim, s)
        }
    } else {
        DiffusionSpec::none()
    };
    if let Some(kind) = ini.get("model", "sigma") {
        match kind {
            "diagonal-band" => {
                let lo = ini.f64_req("model", "sigma.lo")?;
                let hi = ini.f64_req("model", "sigma.hi")?;
                if !(hi >= lo && lo >= 0.0) {
                    return Err(ini.field_error("model", "sigma.hi", "need 0 ≤ lo ≤ hi"));
                }
                diffusion.sigma = Some(Arc::new(DiagonalBand { dim, lo, hi }));
                diffusion.sigma_inf = ini.f64_or("model", "sigma_inf", hi)?;
            }
            other => return Err(ini.field_error("model", "sigma", format!("unknown diffusion `{other}` (known: diagonal-band)"))),
        }
    }
    let mut model = ModelSpec::new(dim, drift, kappa, diffusion);
    if let (Some(r), Some(k)) = (ini.f64_opt("model", "d1.R")?, ini.f64_opt("model", "d1.K")?) {
        model.d1_constants = Some((r, k));
    }
    if let Some(cap) = ini.f64_opt("model", "path_cap")? {
        model.path_cap = cap;
    }
    if let Some(l) = build_levy(ini, dim)? {
        model = model.with_levy(l);
    }
    if let Some(j) = build_jump(ini)? {
        model = model.with_jump(j);
    }
    model.validate_shape()?;
    Ok(model)
}

pub fn build_scheme(ini: &Ini) -> Result<Option<Arc<dyn Scheme>>, ConfigError> {
    let Some(name) = ini.get("scheme", "name") else {
        return Ok(None);
    };
    let params: SchemeParams = ini.numeric_section("scheme", &["name"])?;
    SchemeRegistry::default().build(name, &params).map(Some).map_err(|e| ini.field_error("scheme", "name", e.to_string()))
}

fn state(ini: &Ini, key: &str, dim: usize, default: f64) -> Result<Vec<f64>, ConfigError> {
    match ini.list_opt("run", key)? {
        None => Ok(vec![default; dim]),
        Some(v) if v.len() == dim => Ok(v),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; dim]),
        Some(v) => Err(ini.field_error("run", key, format!("need {dim} coordinates, got {}", v.len()))),
    }
}

pub fn build_run(ini: &Ini, dim: usize) -> Result<RunSection, ConfigError> {
    let t_end = ini.f64_req("run", "T")?;
    let dt = ini.f64_or("run", "dt", 1e-3)?;
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(ini.field_error("run", "dt", "need dt > 0 and T ≥ 0"));
    }
    let steps = (t_end / dt).round();
    if (steps * dt - t_end).abs() > dt {
        return Err(ini.field_error("run", "dt", format!("dt · steps = {} does not match T = {t_end}", steps * dt)));
    }
    let seed = ini.u64_opt("run", "seed")?.ok_or_else(|| ini.missing("run", "seed"))?;
    let run = RunSection {
        t_end,
        dt,
        n_paths: ini.usize_or("run", "n_paths", 1000)?,
        seed,
        workers: ini.usize_or("run", "workers", 0)?,
        x0: state(ini, "x0", dim, 0.0)?,
        y0: state(ini, "y0", dim, 1.0)?,
        record_every: ini.usize_or("run", "record_every", 100)?.max(1),
        burn_in: ini.f64_or("run", "burn_in", 0.0)?,
    };
    Ok(run)
}

impl ExperimentConfig {
    /// Parses and validates; `seed` and `workers` override the file.
    pub fn from_ini(mut ini: Ini, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> Result<Self, ConfigError> {
        if let Some(s) = seed {
            ini.set("run", "seed", &s.to_string());
        }
        let model = build_model(&ini)?;
        let scheme = build_scheme(&ini)?;
        let mut run = build_run(&ini, model.dim)?;
        if let Some(w) = workers {
            run.workers = w;
        }
        let formats = ini.get("outputs", "formats").unwrap_or("csv,json").split(',').map(|s| s.trim().to_string()).collect();
        let outputs = OutputSection {
            directory: out.unwrap_or_else(|| PathBuf::from(ini.get("outputs", "directory").unwrap_or("out"))),
            formats,
            traces: ini.usize_or("outputs", "traces", 0)?,
        };
        let hash = ini.canonical_hash();
        Ok(Self { ini, model, scheme, run, outputs, hash })
    }

    pub fn load(path: &Path, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> Result<Self, ConfigError> {
        Self::from_ini(Ini::load(path)?, seed, workers, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = "[model]\ndim = 1\ndrift = linear\ndrift.rate = 1\nsigma1 = 1\n\n[run]\nT = 1\ndt = 0.01\nseed = 3\n";

    #[test]
    fn parses_minimal() {
        let c = ExperimentConfig::from_ini(Ini::parse(OU, "mem").unwrap(), None, None, None).unwrap();
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.model.drift.name(), "linear");
        assert_eq!(c.model.kappa.eval(0.3), 1.0);
    }

    #[test]
    fn hash_ignores_layout() {
        let a = Ini::parse(OU, "a").unwrap().canonical_hash();
        let b = Ini::parse(&format!("# comment\n{}", OU.replace(" = ", "=")), "b").unwrap().canonical_hash();
        assert_eq!(a, b);
        let c = Ini::parse(&OU.replace("seed = 3", "seed = 4"), "c").unwrap().canonical_hash();
        assert_ne!(a, c);
    }

    #[test]
    fn errors_carry_line_and_field() {
        let e = ExperimentConfig::from_ini(Ini::parse(&OU.replace("dt = 0.01", "dt = abc"), "f.ini").unwrap(), None, None, None).err().expect("bad dt rejected");
        let msg = e.to_string();
        assert!(msg.contains("f.ini:9") && msg.contains("[run] dt"), "{msg}");
        let e = Ini::parse("[model]\nnonsense\n", "g.ini").unwrap_err();
        assert!(e.to_string().starts_with("g.ini:2"));
    }

    #[test]
    fn seed_is_mandatory() {
        let e = ExperimentConfig::from_ini(Ini::parse(&OU.replace("seed = 3\n", ""), "m").unwrap(), None, None, None).err().expect("missing seed rejected");
        assert!(matches!(e, ConfigError::Missing { .. }));
        assert!(ExperimentConfig::from_ini(Ini::parse(&OU.replace("seed = 3\n", ""), "m").unwrap(), Some(9), None, None).is_ok());
    }

    #[test]
    fn tabulated_profile_resolves_relative_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("nu.csv"), "r,q\n0.1,10\n1,1\n2,0.5\n").unwrap();
        let cfg = dir.path().join("exp.ini");
        std::fs::write(&cfg, format!("{OU}\n[levy]\nprofile = tabulated\ntable = nu.csv\ncutoff = 0.1\n")).unwrap();
        let c = ExperimentConfig::load(&cfg, None, None, None).ok().expect("tabulated config loads");
        let m = c.model.levy.unwrap();
        assert_eq!(m.profile().family(), "tabulated");
        assert!((m.profile().density(1.0) - 1.0).abs() < 1e-12);
    }
}
