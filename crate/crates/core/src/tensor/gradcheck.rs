//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Primitive, Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so that components whose true
/// gradient is zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Indices of coordinates whose relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.relative_errors
            .iter()
            .enumerate()
            .filter(|(_, &e)| !(e <= self.tolerance))
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares a supplied gradient against central differences of `value`.
pub fn compare_gradients<V, G>(value: V, gradient: G, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    V: Fn(&Tensor) -> Result<f64, TensorError>,
    G: Fn(&Tensor) -> Result<Vec<f64>, TensorError>,
{
    let analytic = gradient(point)?;
    if analytic.len() != point.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            detail: format!("gradient has {} entries for {} coordinates", analytic.len(), point.numel()),
        });
    }
    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    let relative_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: relative_errors.iter().all(|&e| e <= tolerance),
        analytic,
        numeric,
        relative_errors,
        max_relative_error,
        tolerance,
    })
}

/// Checks the tape gradient of a scalar function built on a fresh tape.
/// `f` receives the tape and the leaf holding the point.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let value = |x: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone())?;
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };
    let gradient = |x: &Tensor| -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone())?;
        let root = f(&mut tape, leaf)?;
        tape.backward(root)?;
        Ok(tape
            .grad(leaf)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]))
    };
    compare_gradients(value, gradient, point, step, tolerance)
}

/// One instance of every primitive, at small shapes.
pub fn primitive_suite() -> Vec<Primitive> {
    vec![
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::MatMul,
        Primitive::AddRow,
        Primitive::Scale(-1.7),
        Primitive::Conv2d,
        Primitive::Relu,
        Primitive::Mean,
        Primitive::SumSquares,
        Primitive::SpatialMean,
        Primitive::Softmax,
        Primitive::SoftmaxCrossEntropy,
        Primitive::Reshape(vec![2, 6]),
    ]
}

fn operand_shapes(prim: &Primitive) -> Vec<Vec<usize>> {
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => vec![vec![3, 4], vec![3, 4]],
        Primitive::MatMul => vec![vec![3, 4], vec![4, 2]],
        Primitive::AddRow => vec![vec![3, 4], vec![4]],
        Primitive::Conv2d => vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        Primitive::SpatialMean => vec![vec![2, 3, 4, 4]],
        _ => vec![vec![3, 4]],
    }
}

/// Finite-difference check of `prim` at a random point drawn from `seed`,
/// against all differentiable operands at once. Non-scalar outputs are
/// contracted with fixed random weights so every output entry contributes
/// a distinct upstream gradient. ReLU inputs are kept away from the kink.
pub fn check_primitive(prim: &Primitive, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = operand_shapes(prim);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let mut point: Vec<f64> = (0..sizes.iter().sum()).map(|_| rng.random_range(-1.0..1.0)).collect();
    if matches!(prim, Primitive::Relu) {
        point.iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    }
    // cross-entropy targets must stay distributions, so they are constants
    let target = matches!(prim, Primitive::SoftmaxCrossEntropy).then(|| {
        let mut t: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        for row in t.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![3, 4], t)
    });
    let target = target.transpose()?;

    let evaluate = |x: &Tensor, want_grad: bool| -> Result<(f64, Vec<f64>), TensorError> {
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let mut offset = 0;
        for (shape, &n) in shapes.iter().zip(&sizes) {
            leaves.push(tape.leaf(Tensor::new(shape.clone(), x.data()[offset..offset + n].to_vec())?)?);
            offset += n;
        }
        let mut operands = leaves.clone();
        if let Some(t) = &target {
            operands.push(tape.constant(t.clone())?);
        }
        let out = tape.apply(prim.clone(), &operands)?;
        let shape = tape.value(out).shape().to_vec();
        let weights: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0)
            .collect();
        let w = tape.constant(Tensor::new(shape, weights)?)?;
        let weighted = tape.mul(out, w)?;
        let root = tape.mean(weighted)?;
        let value = tape.value(root).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(root)?;
        let grad = leaves
            .iter()
            .flat_map(|&l| match tape.grad(l) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(l).numel()],
            })
            .collect();
        Ok((value, grad))
    };
    compare_gradients(
        |x| evaluate(x, false).map(|(v, _)| v),
        |x| evaluate(x, true).map(|(_, g)| g),
        &Tensor::from_vec(point),
        step,
        tolerance,
    )
}
