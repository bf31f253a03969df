use super::{invalid, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g - fd| / max(|g|, |fd|, floor)` over the checked entries.
    pub max_rel_err: f64,
    /// Flat index where the maximum occurred.
    pub worst_index: usize,
    pub analytic: f32,
    pub numeric: f32,
    pub checked: usize,
    /// Entries left out because the probes straddled a kink.
    pub skipped_kinks: usize,
}

/// Denominator floor of [`grad_check`].
pub const DENOM_FLOOR: f64 = 1e-6;

/// Denominator floor for checks through whole blocks. In 32-bit arithmetic
/// the finite-difference noise there is a few 1e-5 in absolute terms, so
/// entries much smaller than this cannot be resolved to 1e-3 relative.
pub const COMPOSITE_DENOM_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Base step; probes sit at `±eps` and `±2 eps`.
    pub eps: f32,
    pub floor: f64,
    /// Flat indices to probe; all when `None`.
    pub entries: Option<Vec<usize>>,
    /// Skip an entry when the step-`eps` and step-`2 eps` central
    /// differences disagree by more than this fraction of
    /// `max(|d|, floor)`, which happens when a probe crosses a kink of a
    /// piecewise-smooth function.
    pub kink_tolerance: Option<f64>,
}

impl GradCheckOptions {
    pub fn new(eps: f32) -> Self {
        Self {
            eps,
            floor: DENOM_FLOOR,
            entries: None,
            kink_tolerance: None,
        }
    }
}

/// Compares tape gradients of the scalar `f` at `x` against fourth-order
/// central finite differences with base step `eps` (probes at `±eps` and
/// `±2 eps`).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_with(f, x, &GradCheckOptions::new(eps))
}

/// [`grad_check`] with relative errors taken against
/// `max(|g|, |fd|, floor)`.
pub fn grad_check_with_floor<F>(f: F, x: &Tensor, eps: f32, floor: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_with(f, x, &GradCheckOptions { floor, ..GradCheckOptions::new(eps) })
}

pub fn grad_check_with<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let (eps, floor) = (opts.eps, opts.floor);
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(invalid("grad_check", format!("floor must be positive, got {floor}")));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("grad_check", format!("step must be positive, got {eps}")));
    }
    let all: Vec<usize>;
    let entries = match &opts.entries {
        Some(e) => e.as_slice(),
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    if let Some(&bad) = entries.iter().find(|&&i| i >= x.len()) {
        return Err(invalid("grad_check", format!("entry {bad} outside {} values", x.len())));
    }
    let tape = Tape::new();
    let input = tape.variable(x.clone());
    let out = f(input)?;
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let analytic = tape.backward(out)?.get_or_zeros(input);

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(tape.constant(probe))?.item();
        if v.is_finite() {
            Ok(v as f64)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let f0 = eval(x.clone())?;
    // value at x + h in entry i, with the step actually representable in f32
    let probe = |i: usize, h: f32| -> Result<(f64, f64)> {
        let mut moved = x.clone();
        moved.data_mut()[i] += h;
        let step = moved.data()[i] as f64 - x.data()[i] as f64;
        Ok((eval(moved)?, step))
    };
    for &i in entries {
        let (p1, s1) = probe(i, eps)?;
        let (m1, t1) = probe(i, -eps)?;
        let (p2, s2) = probe(i, 2.0 * eps)?;
        let (m2, t2) = probe(i, -2.0 * eps)?;
        let (d1, d2) = ((p1 - m1) / (s1 - t1), (p2 - m2) / (s2 - t2));
        if let Some(tol) = opts.kink_tolerance {
            // one-sided slope gaps grow linearly with the step on smooth
            // functions; a kink inside the stencil breaks that, as it does
            // the agreement of the two central differences
            let gap1 = (p1 - f0) / s1 - (f0 - m1) / -t1;
            let gap2 = (p2 - f0) / s2 - (f0 - m2) / -t2;
            let scale = tol * d1.abs().max(d2.abs()).max(floor);
            if (d1 - d2).abs() > scale || (gap2 - 2.0 * gap1).abs() > scale {
                report.skipped_kinks += 1;
                continue;
            }
        }
        // Richardson combination of the two steps
        let numeric = (4.0 * d1 - d2) / 3.0;
        let g = analytic.data()[i] as f64;
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = g as f32;
            report.numeric = numeric as f32;
        }
    }
    Ok(report)
}
