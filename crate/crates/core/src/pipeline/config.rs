//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::CvSpec;
use crate::imaging::HeightModel;
use crate::optflow::WlkConfig;
use crate::wsvr::{FcSettings, KernelSpec, SolverKind, SolverSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Number of cloud layers, 1 or 2.
    pub n_layers: usize,
    /// Pixels whose accumulated change share reaches this value enter the pool.
    pub tau_sel: f64,
    /// Look-back of the vector pool in frames.
    pub ell: usize,
    /// Keep `ell + 1` frames in the pool instead of `ell`.
    pub ell_inclusive: bool,
    pub n_samples: usize,
    pub wlk: WlkConfig,
    pub height: HeightModel,
    pub diag_fov_deg: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub icm_max_iters: usize,
    pub solver: SolverKind,
    pub kernel: KernelSpec,
    pub c_reg: f64,
    pub epsilon: f64,
    pub smo: SolverSettings,
    pub fc: FcSettings,
    /// Per-frame cross-validation of `kernel`, `c_reg` and `epsilon`.
    pub cv: Option<CvSpec>,
    pub seed: u64,
    /// Isolines per function in plots.
    pub isolines: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_layers: 1,
            tau_sel: 0.95,
            ell: 6,
            ell_inclusive: false,
            n_samples: 200,
            wlk: WlkConfig::default(),
            height: HeightModel::default(),
            diag_fov_deg: 60.0,
            em_max_iters: 200,
            em_tol: 1e-6,
            icm_max_iters: crate::layers::DEFAULT_MAX_ITERS,
            solver: SolverKind::MoWsvmFc,
            kernel: KernelSpec::Linear,
            c_reg: 38.50,
            epsilon: 0.19,
            smo: SolverSettings::default(),
            fc: FcSettings::default(),
            cv: None,
            seed: 0,
            isolines: 12,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("config key '{key}': expected a boolean, got '{v}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

/// Parses `key = value` lines; `#` starts a comment. Later keys override
/// earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected 'key = value'", n + 1)))?;
        out.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
    }
    Ok(out)
}

/// Builds a cross-validation grid from `cv_*` keys over `base`.
pub fn cv_spec_from_pairs(pairs: &BTreeMap<String, String>, base: CvSpec) -> Result<CvSpec> {
    let mut spec = base;
    for (k, v) in pairs {
        match k.as_str() {
            "cv_c" => spec.c_values = parse_list(k, v)?,
            "cv_epsilon" => spec.eps_values = parse_list(k, v)?,
            "cv_gamma" => spec.gammas = parse_list(k, v)?,
            "cv_beta" => spec.betas = parse_list(k, v)?,
            "cv_degree" => spec.degrees = parse_list(k, v)?,
            "cv_kernels" => spec.kernels = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "cv_split" => spec.train_fraction = parse_num(k, v)?,
            "cv_folds" => spec.folds = parse_num(k, v)?,
            "cv_seed" => spec.seed = parse_num(k, v)?,
            "solver" => spec.solver = SolverKind::parse(v)?,
            _ => {}
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn kernel_from(kind: &str, gamma: f64, beta: f64, degree: u32) -> Result<KernelSpec> {
    let k = match kind.trim().to_ascii_lowercase().as_str() {
        "linear" => KernelSpec::Linear,
        "rbf" => KernelSpec::Rbf { gamma },
        "polynomial" | "poly" => KernelSpec::Polynomial { gamma, beta, degree },
        other => return Err(Error::invalid(format!("unknown kernel '{other}'"))),
    };
    k.validate()?;
    Ok(k)
}

impl PipelineConfig {
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let (mut kind, mut gamma, mut beta, mut degree) = ("linear".to_string(), 1.0, 1.0, 2u32);
        let mut cv = false;
        for (k, v) in pairs {
            match k.as_str() {
                "layers" => c.n_layers = parse_num(k, v)?,
                "delta" => c.wlk.vector_scale = parse_num(k, v)?,
                "tau" => c.tau_sel = parse_num(k, v)?,
                "ell" => c.ell = parse_num(k, v)?,
                "ell_inclusive" => c.ell_inclusive = parse_bool(k, v)?,
                "samples" => c.n_samples = parse_num(k, v)?,
                "window" => c.wlk.window_area = parse_num(k, v)?,
                "wlk_tau" => c.wlk.reg_tau = parse_num(k, v)?,
                "sigma" => c.wlk.kernel_sigma = parse_num(k, v)?,
                "frame_rate" => c.wlk.frame_rate = parse_num(k, v)?,
                "taper" => c.wlk.taper = parse_bool(k, v)?,
                "lapse_rate" => c.height.lapse_rate = parse_num(k, v)?,
                "height_floor" => c.height.height_floor = parse_num(k, v)?,
                "height_ceiling" => c.height.height_ceiling = parse_num(k, v)?,
                "fov_deg" => c.diag_fov_deg = parse_num(k, v)?,
                "em_iters" => c.em_max_iters = parse_num(k, v)?,
                "em_tol" => c.em_tol = parse_num(k, v)?,
                "icm_iters" => c.icm_max_iters = parse_num(k, v)?,
                "solver" => c.solver = SolverKind::parse(v)?,
                "kernel" => kind = v.clone(),
                "gamma" => gamma = parse_num(k, v)?,
                "beta" => beta = parse_num(k, v)?,
                "degree" => degree = parse_num(k, v)?,
                "c" => c.c_reg = parse_num(k, v)?,
                "epsilon" => c.epsilon = parse_num(k, v)?,
                "smo_tol" => c.smo.tol = parse_num(k, v)?,
                "smo_max_iter" => c.smo.max_iter = parse_num(k, v)?,
                "fc_tol" => c.fc.fc_tol = parse_num(k, v)?,
                "rho0" => c.fc.rho0 = parse_num(k, v)?,
                "rho_max" => c.fc.rho_max = parse_num(k, v)?,
                "rho_growth" => c.fc.growth = parse_num(k, v)?,
                "cv" => cv = parse_bool(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "isolines" => c.isolines = parse_num(k, v)?,
                _ if k.starts_with("cv_") => {}
                other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
            }
        }
        c.kernel = kernel_from(&kind, gamma, beta, degree)?;
        if cv {
            let base = CvSpec {
                solver: c.solver,
                seed: c.seed,
                ..CvSpec::default()
            };
            c.cv = Some(cv_spec_from_pairs(pairs, base)?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::invalid(format!("layer count must be 1 or 2, got {}", self.n_layers)));
        }
        if !(self.tau_sel > 0.0 && self.tau_sel < 1.0) {
            return Err(Error::invalid("selection threshold must lie in (0, 1)"));
        }
        if self.ell == 0 || self.n_samples < self.n_layers.max(2) {
            return Err(Error::invalid("look-back must be positive and samples must cover the layers"));
        }
        if self.em_max_iters == 0 || self.icm_max_iters == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        if !(self.c_reg > 0.0 && self.epsilon > 0.0) {
            return Err(Error::invalid("complexity and tube width must be positive"));
        }
        if !(self.diag_fov_deg > 0.0 && self.diag_fov_deg < 180.0) {
            return Err(Error::invalid("diagonal FOV must lie in (0, 180) degrees"));
        }
        self.wlk.validate()?;
        self.height.validate()?;
        self.kernel.validate()?;
        self.fc.validate()
    }
}
