use crate::uracode::ActivityVector;

/// Greedy projection of a real-valued estimate onto non-negative integer
/// vectors summing to `round(ka_hat)`.
///
/// Starts from `floor(max(x̂, 0))` and adds units where the residual
/// `x̂ − x` is largest, or removes them where the overshoot `x − x̂` is
/// largest, one unit at a time. Each unit step is the cheapest available
/// change in `‖x̂ − x‖²`, so for this separable convex objective the result
/// is the exact minimiser. Ties go to the lower index.
pub fn project_counts(x_real: &[f64], ka_hat: f64) -> ActivityVector {
    let target = if ka_hat.is_finite() { ka_hat.round().max(0.0) as u64 } else { 0 };
    let mut x: Vec<u64> = x_real
        .iter()
        .map(|&v| if v.is_finite() && v > 0.0 { v.floor() as u64 } else { 0 })
        .collect();
    let mut total: u64 = x.iter().sum();
    let resid = |x: &[u64], j: usize| x_real[j] - x[j] as f64;

    while total < target {
        let mut best = 0;
        for j in 1..x.len() {
            if resid(&x, j) > resid(&x, best) {
                best = j;
            }
        }
        if x.is_empty() {
            break;
        }
        x[best] += 1;
        total += 1;
    }
    while total > target {
        let mut best: Option<usize> = None;
        for j in 0..x.len() {
            if x[j] == 0 {
                continue;
            }
            match best {
                Some(b) if -resid(&x, j) <= -resid(&x, b) => {}
                _ => best = Some(j),
            }
        }
        let Some(b) = best else { break };
        x[b] -= 1;
        total -= 1;
    }
    ActivityVector {
        counts: x.into_iter().map(|c| c as u32).collect(),
    }
}
