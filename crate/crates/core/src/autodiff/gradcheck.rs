//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Tensors with more coordinates than this are sampled down to it.
    pub max_coords_per_tensor: usize,
    /// Denominator floor of the relative error, so that two gradients that are
    /// both numerically zero compare as equal.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of a scalar function against central differences
/// for each tensor in `params`.
///
/// `f` receives a fresh tape and one trainable [`Var`] per entry of `params`
/// and must return a scalar.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(tape.value(out).shape().to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (ti, var) in vars.iter().enumerate() {
        let len = params[ti].len();
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let coords: Vec<usize> = if len <= config.max_coords_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, config.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = TensorReport {
            index: ti,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &c in &coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + config.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - config.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[c];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(a, numeric, config.abs_floor));
        }
        tensors.push(report);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: config.tolerance,
    })
}
