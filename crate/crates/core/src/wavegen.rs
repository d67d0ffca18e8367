//! Wave data generators.
//!
//! Two generators produce `T × H × W` rasters of wave heights:
//!
//! * an outward-propagating, decaying circular wave given in closed form,
//!   with no reflection at the borders ([`ds1_sequence`]);
//! * an explicit second-order finite-difference solution of the 2D wave
//!   equation started from a Gaussian bump, with zero boundary values so
//!   fronts reflect at the borders ([`ds2_sequence`]).
//!
//! [`sample_dataset`] draws train/test sets with a random wave center (and,
//! for the variable-velocity set, a random wave speed) per sequence. Every
//! sequence owns an RNG stream derived from `(seed, split, index)`, so output
//! is independent of generation order and thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

/// Closed-form circular wave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ds1Config {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    /// Time units per frame.
    pub dt: f64,
    /// Wave speed in cells per time unit.
    pub c: f64,
    /// Decay rate per cell behind the front.
    pub d: f64,
    /// Wave origin `(s_x, s_y)` in (column, row) cell coordinates.
    pub center: (f64, f64),
}

impl Default for Ds1Config {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            steps: 80,
            dt: 0.01,
            c: 10.0,
            d: 0.25,
            center: (7.5, 7.5),
        }
    }
}

impl Ds1Config {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width, self.steps)?;
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("wave speed c must be > 0, got {}", self.c)));
        }
        if !(self.d >= 0.0) || !self.d.is_finite() {
            return Err(Error::Config(format!("decay d must be >= 0, got {}", self.d)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Finite-difference wave equation with a Gaussian initial bump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ds2Config {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub c: f64,
    pub amplitude: f64,
    pub var_x: f64,
    pub var_y: f64,
    /// Bump center `(s_x, s_y)` in (column, row) cell coordinates.
    pub center: (f64, f64),
}

impl Default for Ds2Config {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            steps: 80,
            dt: 0.1,
            dx: 1.0,
            dy: 1.0,
            c: 3.0,
            amplitude: 0.34,
            var_x: 0.5,
            var_y: 0.5,
            center: (7.5, 7.5),
        }
    }
}

/// Upper bound on `c·Δt/Δx` for the explicit 2D scheme.
pub const CFL_BOUND: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl Ds2Config {
    pub fn cfl_number(&self) -> f64 {
        self.c * self.dt / self.dx.min(self.dy)
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width, self.steps)?;
        for (name, v) in [("dt", self.dt), ("dx", self.dx), ("dy", self.dy), ("var_x", self.var_x), ("var_y", self.var_y)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.c >= 0.0) || !self.c.is_finite() || !self.amplitude.is_finite() {
            return Err(Error::Config("wave speed and amplitude must be finite, c >= 0".into()));
        }
        let number = self.cfl_number();
        if number > CFL_BOUND {
            return Err(Error::Cfl {
                number,
                bound: CFL_BOUND,
            });
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize, steps: usize) -> Result<()> {
    if height == 0 || width == 0 || steps == 0 {
        return Err(Error::Config(format!(
            "field needs positive size, got {steps} steps of {height}x{width}"
        )));
    }
    Ok(())
}

/// Wave height of the closed-form wave at cell `(x, y)` and time `t`.
pub fn ds1_value(x: f64, y: f64, t: f64, cfg: &Ds1Config) -> f64 {
    let r = (x - cfg.center.0).hypot(y - cfg.center.1);
    let front = cfg.c * t;
    if r < front {
        (r - front).sin() * (-cfg.d * (front - r)).exp()
    } else {
        0.0
    }
}

pub fn ds1_sequence(cfg: &Ds1Config) -> Result<Field> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(cfg.steps * h * w);
    for k in 0..cfg.steps {
        let t = k as f64 * cfg.dt;
        for row in 0..h {
            for col in 0..w {
                data.push(ds1_value(col as f64, row as f64, t, cfg));
            }
        }
    }
    Field::new(cfg.steps, h, w, data)
}

/// Initial Gaussian bump.
pub fn ds2_init(cfg: &Ds2Config) -> Vec<f64> {
    let (sx, sy) = cfg.center;
    let mut frame = Vec::with_capacity(cfg.height * cfg.width);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let ex = (col as f64 - sx).powi(2) / (2.0 * cfg.var_x);
            let ey = (row as f64 - sy).powi(2) / (2.0 * cfg.var_y);
            frame.push(cfg.amplitude * (-(ex + ey)).exp());
        }
    }
    frame
}

/// One explicit time step `u(t+Δt) = c²Δt²(u_xx + u_yy) + 2u(t) − u(t−Δt)`.
///
/// Second derivatives are central differences; samples outside the field are zero.
pub fn ds2_step(prev: &[f64], curr: &[f64], cfg: &Ds2Config) -> Result<Vec<f64>> {
    let (h, w) = (cfg.height, cfg.width);
    if prev.len() != h * w || curr.len() != h * w {
        return Err(Error::shape(
            "ds2_step",
            format!("frames must have {} cells, got {} and {}", h * w, prev.len(), curr.len()),
        ));
    }
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            curr[r as usize * w + c as usize]
        }
    };
    let coef = cfg.c * cfg.c * cfg.dt * cfg.dt;
    let (dx2, dy2) = (cfg.dx * cfg.dx, cfg.dy * cfg.dy);
    let mut next = Vec::with_capacity(h * w);
    for row in 0..h as isize {
        for col in 0..w as isize {
            let u = at(row, col);
            let u_xx = (at(row, col + 1) - 2.0 * u + at(row, col - 1)) / dx2;
            let u_yy = (at(row + 1, col) - 2.0 * u + at(row - 1, col)) / dy2;
            next.push(coef * (u_xx + u_yy) + 2.0 * u - prev[(row as usize) * w + col as usize]);
        }
    }
    Ok(next)
}

pub fn ds2_sequence(cfg: &Ds2Config) -> Result<Field> {
    cfg.validate()?;
    let n = cfg.height * cfg.width;
    let mut data = Vec::with_capacity(cfg.steps * n);
    let mut prev = vec![0.0; n];
    let mut curr = ds2_init(cfg);
    data.extend_from_slice(&curr);
    for _ in 1..cfg.steps {
        let next = ds2_step(&prev, &curr, cfg)?;
        data.extend_from_slice(&next);
        prev = std::mem::replace(&mut curr, next);
    }
    Field::new(cfg.steps, cfg.height, cfg.width, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Ds1,
    Ds2,
    Ds1VariableC,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ds1" => Ok(DatasetKind::Ds1),
            "ds2" => Ok(DatasetKind::Ds2),
            "ds1-var" | "ds1_variable_c" => Ok(DatasetKind::Ds1VariableC),
            other => Err(Error::Config(format!("unknown dataset {other:?} (ds1, ds2, ds1-var)"))),
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub ds1: Ds1Config,
    pub ds2: Ds2Config,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Ds1,
            n_train: 100,
            n_test: 20,
            seed: 0,
            ds1: Ds1Config::default(),
            ds2: Ds2Config::default(),
        }
    }
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            kind,
            n_train,
            n_test,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".into()));
        }
        match self.kind {
            DatasetKind::Ds1 | DatasetKind::Ds1VariableC => self.ds1.validate(),
            DatasetKind::Ds2 => self.ds2.validate(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        match self.kind {
            DatasetKind::Ds1 | DatasetKind::Ds1VariableC => (self.ds1.steps, self.ds1.height, self.ds1.width),
            DatasetKind::Ds2 => (self.ds2.steps, self.ds2.height, self.ds2.width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// The concrete parameters one sequence was generated with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum SequenceConfig {
    Ds1(Ds1Config),
    Ds2(Ds2Config),
}

impl SequenceConfig {
    pub fn generate(&self) -> Result<Field> {
        match self {
            SequenceConfig::Ds1(c) => ds1_sequence(c),
            SequenceConfig::Ds2(c) => ds2_sequence(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Field>,
    pub test: Vec<Field>,
    pub train_configs: Vec<SequenceConfig>,
    pub test_configs: Vec<SequenceConfig>,
}

/// Per-sequence RNG; streams never overlap between splits or indices.
pub fn sequence_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    rng.set_stream((tag << 48) | index as u64);
    rng
}

fn interior(rng: &mut ChaCha8Rng, extent: usize) -> f64 {
    if extent >= 3 {
        rng.gen_range(1.0..=(extent - 2) as f64)
    } else {
        (extent as f64 - 1.0) / 2.0
    }
}

/// Draws the generator parameters for one sequence.
pub fn sequence_config(spec: &DatasetSpec, split: Split, index: usize) -> SequenceConfig {
    let mut rng = sequence_rng(spec.seed, split, index);
    match spec.kind {
        DatasetKind::Ds1 | DatasetKind::Ds1VariableC => {
            let mut cfg = spec.ds1.clone();
            let sx = interior(&mut rng, cfg.width);
            let sy = interior(&mut rng, cfg.height);
            cfg.center = (sx, sy);
            if spec.kind == DatasetKind::Ds1VariableC {
                let c0 = spec.ds1.c;
                cfg.c = rng.gen_range(0.5 * c0..=1.5 * c0);
            }
            SequenceConfig::Ds1(cfg)
        }
        DatasetKind::Ds2 => {
            let mut cfg = spec.ds2.clone();
            let sx = interior(&mut rng, cfg.width);
            let sy = interior(&mut rng, cfg.height);
            cfg.center = (sx, sy);
            SequenceConfig::Ds2(cfg)
        }
    }
}

pub fn sample_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let draw = |split: Split, n: usize| -> Result<(Vec<SequenceConfig>, Vec<Field>)> {
        let configs: Vec<SequenceConfig> = (0..n).map(|i| sequence_config(spec, split, i)).collect();
        let fields = configs.par_iter().map(SequenceConfig::generate).collect::<Result<Vec<_>>>()?;
        Ok((configs, fields))
    };
    let (train_configs, train) = draw(Split::Train, spec.n_train)?;
    let (test_configs, test) = draw(Split::Test, spec.n_test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
        train_configs,
        test_configs,
    })
}
