//! Deterministic generators for many-table models that are only described by
//! ranges and averages.

/// `count` dimensions in `[min, max]` whose distribution is a truncated
/// exponential with the requested mean, sampled at the midpoint quantiles
/// `(i + 0.5) / count` and rounded to a multiple of `step`.
///
/// No randomness is involved, so the same stanza always yields the same model.
/// The rounded mean can differ from `mean` by at most `step / 2` plus the
/// quantile discretization error.
pub fn truncated_exponential_dims(
    count: usize,
    min: usize,
    max: usize,
    mean: f64,
    step: usize,
) -> Result<Vec<usize>, String> {
    if min == 0 || min > max {
        return Err(format!("invalid dim range [{min}, {max}]"));
    }
    if !(mean >= min as f64 && mean <= max as f64) {
        return Err(format!("mean {mean} outside [{min}, {max}]"));
    }
    let step = step.max(1);
    let lo = min as f64;
    let span = (max - min) as f64;
    if span == 0.0 {
        return Ok(vec![min; count]);
    }
    let target = mean - lo;
    // Mean offset of an exponential with rate `lam` truncated to [0, span].
    // Positive rate skews toward `min`, negative toward `max`; zero is uniform.
    let mean_offset = |lam: f64| -> f64 {
        if lam.abs() < 1e-12 {
            span / 2.0
        } else {
            1.0 / lam - span / ((lam * span).exp() - 1.0)
        }
    };
    let (mut a, mut b) = (-1e3 / span, 1e3 / span);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean_offset(mid) > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let lam = 0.5 * (a + b);
    let quantile = |u: f64| -> f64 {
        if lam.abs() < 1e-12 {
            u * span
        } else {
            -(1.0 - u * (1.0 - (-lam * span).exp())).ln() / lam
        }
    };
    Ok((0..count)
        .map(|i| {
            let u = (i as f64 + 0.5) / count as f64;
            let x = lo + quantile(u);
            let rounded = ((x / step as f64).round() as usize) * step;
            rounded.clamp(min, max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_range_are_respected() {
        let dims = truncated_exponential_dims(1000, 4, 384, 93.0, 4).unwrap();
        assert_eq!(dims.len(), 1000);
        assert!(dims.iter().all(|&d| (4..=384).contains(&d) && d % 4 == 0));
        let mean = dims.iter().sum::<usize>() as f64 / 1000.0;
        assert!((mean - 93.0).abs() < 2.0, "mean {mean}");
    }

    #[test]
    fn degenerate_range() {
        assert_eq!(truncated_exponential_dims(3, 92, 92, 92.0, 4).unwrap(), vec![92; 3]);
        assert!(truncated_exponential_dims(3, 8, 4, 6.0, 1).is_err());
        assert!(truncated_exponential_dims(3, 4, 8, 9.0, 1).is_err());
    }

    #[test]
    fn mean_above_midpoint_skews_high() {
        let dims = truncated_exponential_dims(200, 4, 100, 80.0, 1).unwrap();
        let mean = dims.iter().sum::<usize>() as f64 / 200.0;
        assert!((mean - 80.0).abs() < 1.0);
    }
}
