//! Synthetic 2-D target distributions and the distances used to score
//! generated samples against them.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SampleBatch;
use crate::rng::{derive_seed, rng_from_seed};

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const DEFAULT_PROJECTIONS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Gauss8,
    Moons,
    Checkerboard,
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(DatasetName::Gauss8),
            "moons" => Ok(DatasetName::Moons),
            "checkerboard" => Ok(DatasetName::Checkerboard),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetName::Gauss8 => "gauss8",
            DatasetName::Moons => "moons",
            DatasetName::Checkerboard => "checkerboard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Standard deviation of the per-point noise.
    pub noise: f64,
}

impl DatasetSpec {
    pub fn new(name: DatasetName) -> Self {
        let noise = match name {
            DatasetName::Gauss8 => 0.1,
            DatasetName::Moons => 0.05,
            DatasetName::Checkerboard => 0.0,
        };
        Self { name, noise }
    }

    pub fn gauss8() -> Self {
        Self::new(DatasetName::Gauss8)
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// Number of condition labels; zero for unconditional data.
    pub fn num_classes(&self) -> usize {
        match self.name {
            DatasetName::Gauss8 => 8,
            DatasetName::Moons => 2,
            DatasetName::Checkerboard => 0,
        }
    }

    /// Mode centres of `gauss8`.
    pub fn gauss8_centers() -> [[f64; 2]; 8] {
        std::array::from_fn(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [GAUSS8_RADIUS * a.cos(), GAUSS8_RADIUS * a.sin()]
        })
    }
}

pub fn sample_data(spec: &DatasetSpec, count: usize, seed: u64) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!(
            "noise scale {} must be >= 0",
            spec.noise
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut pts = Array2::zeros((count, 2));
    let mut labels = Vec::with_capacity(count);
    let gauss = |rng: &mut crate::rng::Rng| -> f64 { StandardNormal.sample(rng) };
    match spec.name {
        DatasetName::Gauss8 => {
            let centers = DatasetSpec::gauss8_centers();
            for i in 0..count {
                let k = rng.gen_range(0..8);
                pts[[i, 0]] = centers[k][0] + spec.noise * gauss(&mut rng);
                pts[[i, 1]] = centers[k][1] + spec.noise * gauss(&mut rng);
                labels.push(k);
            }
        }
        DatasetName::Moons => {
            for i in 0..count {
                let k = rng.gen_range(0..2);
                let a = PI * rng.gen::<f64>();
                let (x, y) = if k == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                // centred and scaled to roughly [-2, 2]
                pts[[i, 0]] = 1.6 * (x - 0.5) + spec.noise * gauss(&mut rng);
                pts[[i, 1]] = 1.6 * (y - 0.25) + spec.noise * gauss(&mut rng);
                labels.push(k);
            }
        }
        DatasetName::Checkerboard => {
            for i in 0..count {
                // 4x4 board on [-2, 2]^2, filled where column + row is even
                let col = rng.gen_range(0..4usize);
                let row = 2 * rng.gen_range(0..2usize) + (col % 2);
                let x = -2.0 + col as f64 + rng.gen::<f64>();
                let y = -2.0 + row as f64 + rng.gen::<f64>();
                pts[[i, 0]] = x + spec.noise * gauss(&mut rng);
                pts[[i, 1]] = y + spec.noise * gauss(&mut rng);
            }
        }
    }
    let labels = (spec.num_classes() > 0).then_some(labels);
    SampleBatch::new(pts, labels)
}

/// Unit directions drawn from the uniform distribution on the sphere.
pub fn projection_directions(d: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut dirs = Array2::zeros((n, d));
    for mut row in dirs.outer_iter_mut() {
        loop {
            let v: Array1<f64> =
                Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                row.assign(&(v / norm));
                break;
            }
        }
    }
    dirs
}

/// Squared 1-D 2-Wasserstein distance between equal-size empirical samples.
fn w2_squared_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Sliced 2-Wasserstein distance `sqrt(mean_theta W2^2(<A,theta>, <B,theta>))`.
/// Unequal sizes are truncated to the smaller set.
pub fn swd(a: ArrayView2<f64>, b: ArrayView2<f64>, n_projections: usize, seed: u64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("SWD needs non-empty inputs".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if n_projections == 0 {
        return Err(Error::Argument(
            "at least one projection is required".into(),
        ));
    }
    let n = a.nrows().min(b.nrows());
    let a = a.slice(ndarray::s![..n, ..]);
    let b = b.slice(ndarray::s![..n, ..]);
    let dirs = projection_directions(a.ncols(), n_projections, seed);
    let pa = a.dot(&dirs.t());
    let pb = b.dot(&dirs.t());
    let total: f64 = (0..n_projections)
        .map(|k| w2_squared_1d(pa.column(k).to_vec(), pb.column(k).to_vec()))
        .sum();
    Ok((total / n_projections as f64).sqrt())
}

pub fn swd_batches(
    a: &SampleBatch,
    b: &SampleBatch,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    swd(a.points(), b.points(), n_projections, seed)
}

/// Unbiased MMD^2 estimate. `value` is clamped at zero; `raw` is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub raw: f64,
}

/// Gaussian-kernel MMD^2 with `k(x, y) = exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<MmdEstimate> {
    if !(bandwidth > 0.0) {
        return Err(Error::Argument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Argument(
            "MMD needs at least two points per set".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
        let d2: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        (-gamma * d2).exp()
    };
    let within = |s: &ArrayView2<f64>| {
        let n = s.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += kernel(s.row(i), s.row(j));
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a.outer_iter() {
        for y in b.outer_iter() {
            cross += kernel(x, y);
        }
    }
    let cross = cross / (a.nrows() * b.nrows()) as f64;
    let raw = within(&a) + within(&b) - 2.0 * cross;
    Ok(MmdEstimate {
        value: raw.max(0.0),
        raw,
    })
}

/// Mean SWD between independent same-size draws of the true distribution.
pub fn noise_floor(
    spec: &DatasetSpec,
    count: usize,
    trials: usize,
    seed: u64,
    n_projections: usize,
) -> Result<f64> {
    if trials < 3 {
        return Err(Error::Argument(format!(
            "noise floor needs at least 3 trials, got {trials}"
        )));
    }
    let mut total = 0.0;
    for k in 0..trials {
        let a = sample_data(spec, count, derive_seed(seed, &format!("floor-a-{k}")))?;
        let b = sample_data(spec, count, derive_seed(seed, &format!("floor-b-{k}")))?;
        total += swd_batches(&a, &b, n_projections, derive_seed(seed, "floor-proj"))?;
    }
    Ok(total / trials as f64)
}
