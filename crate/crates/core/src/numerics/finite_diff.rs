use super::NumericsError;

/// Central-difference gradient `(f(θ+ε·eᵢ) − f(θ−ε·eᵢ)) / 2ε` for every
/// coordinate `i`. `theta` is restored before returning.
pub fn finite_diff_grad<F>(
    mut loss_fn: F,
    theta: &mut [f64],
    eps: f64,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Domain(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss_fn(theta);
        theta[i] = orig - eps;
        let minus = loss_fn(theta);
        theta[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteProbe {
                    coordinate: i,
                    value,
                });
            }
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps vanishing gradients from
/// dominating the worst-case ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
