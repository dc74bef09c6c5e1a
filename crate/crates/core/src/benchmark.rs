//! Synthetic two-domain Gaussian mixtures.
//!
//! Each class has an isotropic Gaussian in the raw input space. The target
//! domain moves each class mean by its own shift vector, so some classes
//! transfer easily while others land near a rival class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::HeldOutLabels;
use crate::numerics::{normalize_in_place, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmDomainSpec {
    pub num_classes: usize,
    pub raw_dim: usize,
    /// `K × D` source-domain class means.
    pub class_means: Matrix,
    /// Per-class isotropic standard deviation.
    pub covariance_scale: Vec<f64>,
    /// `K × D`; target mean = source mean + shift.
    pub shifts: Matrix,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub seed: u64,
}

impl GmmDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::InvalidConfig("benchmark needs at least 2 classes".into()));
        }
        if self.class_means.shape() != (k, self.raw_dim) || self.shifts.shape() != (k, self.raw_dim) {
            return Err(Error::InvalidConfig("class means and shifts must be K x D".into()));
        }
        if self.covariance_scale.len() != k || self.source_counts.len() != k || self.target_counts.len() != k {
            return Err(Error::InvalidConfig("per-class vectors must have length K".into()));
        }
        if self.covariance_scale.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("covariance scale must be finite and >= 0".into()));
        }
        if self.source_counts.iter().chain(&self.target_counts).any(|&c| c == 0) {
            return Err(Error::InvalidConfig("every class needs at least one instance per domain".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Labeled source data and unlabeled target data; target ground truth only
/// through the metrics channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: LabeledSet,
    pub target: Matrix,
    pub target_truth: HeldOutLabels,
}

fn sample_domain(spec: &GmmDomainSpec, counts: &[usize], shifted: bool, rng: &mut SeededRng) -> (Matrix, Vec<usize>) {
    let d = spec.raw_dim;
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        let mean = spec.class_means.row(class);
        let shift = spec.shifts.row(class);
        let scale = spec.covariance_scale[class];
        for _ in 0..n {
            for j in 0..d {
                let center = mean[j] + if shifted { shift[j] } else { 0.0 };
                data.push(center + scale * rng.normal(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let order = rng.permutation(total);
    let inputs = Matrix::from_vec(total, d, data).expect("finite gaussian samples").select_rows(&order);
    let labels = order.iter().map(|&i| labels[i]).collect();
    (inputs, labels)
}

/// Samples both domains. Instances are shuffled within each domain.
pub fn generate_domain_pair(spec: &GmmDomainSpec) -> Result<DomainPair> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let (xs, ys) = sample_domain(spec, &spec.source_counts, false, &mut root.derive(1));
    let (xt, yt) = sample_domain(spec, &spec.target_counts, true, &mut root.derive(2));
    Ok(DomainPair {
        source: LabeledSet { inputs: xs, labels: ys },
        target: xt,
        target_truth: HeldOutLabels::new(yt),
    })
}

/// Compact description of a benchmark family; [`BenchmarkProfile::to_spec`]
/// draws the concrete means and shift directions from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkProfile {
    pub num_classes: usize,
    pub raw_dim: usize,
    /// Norm of each class mean.
    pub separation: f64,
    pub noise: f64,
    /// Shift magnitude for ordinary classes.
    pub base_shift: f64,
    /// Class whose shift is multiplied by `hard_shift_factor` and whose
    /// target count by `hard_count_factor`.
    #[serde(default)]
    pub hard_class: Option<usize>,
    /// When set, the hard class shifts toward this class's mean instead of
    /// along a random direction.
    #[serde(default)]
    pub hard_shift_toward: Option<usize>,
    pub hard_shift_factor: f64,
    pub hard_count_factor: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
}

impl Default for BenchmarkProfile {
    fn default() -> Self {
        Self::hard_truck()
    }
}

impl BenchmarkProfile {
    /// Six classes in 16 dimensions; the last class shifts 4× further than
    /// the rest and has half as many target instances.
    pub fn hard_truck() -> Self {
        Self {
            num_classes: 6,
            raw_dim: 16,
            separation: 3.0,
            noise: 0.6,
            base_shift: 0.6,
            hard_class: Some(5),
            hard_shift_toward: Some(4),
            hard_shift_factor: 4.0,
            hard_count_factor: 0.5,
            source_per_class: 150,
            target_per_class: 150,
        }
    }

    /// Tight, far-apart classes with no shift.
    pub fn separable() -> Self {
        Self {
            num_classes: 4,
            raw_dim: 8,
            separation: 6.0,
            noise: 0.1,
            base_shift: 0.0,
            hard_class: None,
            hard_shift_toward: None,
            hard_shift_factor: 1.0,
            hard_count_factor: 1.0,
            source_per_class: 80,
            target_per_class: 80,
        }
    }

    /// Target drawn from the source distribution.
    pub fn zero_shift() -> Self {
        Self {
            base_shift: 0.0,
            hard_class: None,
            hard_shift_toward: None,
            hard_shift_factor: 1.0,
            hard_count_factor: 1.0,
            ..Self::hard_truck()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "hard-truck" => Some(Self::hard_truck()),
            "separable" => Some(Self::separable()),
            "zero-shift" => Some(Self::zero_shift()),
            _ => None,
        }
    }

    pub fn to_spec(&self, seed: u64) -> Result<GmmDomainSpec> {
        let (k, d) = (self.num_classes, self.raw_dim);
        for (name, c) in [("hard_class", self.hard_class), ("hard_shift_toward", self.hard_shift_toward)] {
            if let Some(c) = c {
                if c >= k {
                    return Err(Error::InvalidConfig(format!("{name} {c} out of range for {k} classes")));
                }
            }
        }
        if self.hard_shift_toward.is_some() && self.hard_shift_toward == self.hard_class {
            return Err(Error::InvalidConfig("hard_shift_toward must differ from hard_class".into()));
        }
        let root = SeededRng::new(seed);
        let mut rng = root.derive(0);
        let unit = |rng: &mut SeededRng| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
            normalize_in_place(&mut v);
            v
        };
        let mut means = Matrix::zeros(k, d);
        let mut shifts = Matrix::zeros(k, d);
        let mut target_counts = vec![self.target_per_class; k];
        let mut directions = Vec::with_capacity(k);
        for class in 0..k {
            let m = unit(&mut rng);
            for (o, v) in means.row_mut(class).iter_mut().zip(&m) {
                *o = v * self.separation;
            }
            directions.push(unit(&mut rng));
        }
        for (class, mut dir) in directions.into_iter().enumerate() {
            let is_hard = Some(class) == self.hard_class;
            if let (true, Some(t)) = (is_hard, self.hard_shift_toward) {
                dir = means.row(t).iter().zip(means.row(class)).map(|(a, b)| a - b).collect();
                normalize_in_place(&mut dir);
            }
            let factor = if is_hard { self.hard_shift_factor } else { 1.0 };
            for (o, v) in shifts.row_mut(class).iter_mut().zip(&dir) {
                *o = v * self.base_shift * factor;
            }
            if is_hard {
                target_counts[class] = ((self.target_per_class as f64 * self.hard_count_factor).round() as usize).max(1);
            }
        }
        let spec = GmmDomainSpec {
            num_classes: k,
            raw_dim: d,
            class_means: means,
            covariance_scale: vec![self.noise; k],
            shifts,
            source_counts: vec![self.source_per_class; k],
            target_counts,
            seed: root.derive(1).seed(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
