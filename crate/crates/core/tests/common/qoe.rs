//! Independent QoE reference.

/// Integrates the digested and expected step curves piecewise between
/// consecutive breakpoints. Shares no code with the library's closed form.
pub fn step_integration_qoe(deliveries: &[f64], tpot: f64) -> f64 {
    let mut digests: Vec<f64> = Vec::new();
    for &d in deliveries {
        let next = match digests.last() {
            None => d,
            Some(&p) => {
                if d > p + tpot {
                    d
                } else {
                    p + tpot
                }
            }
        };
        digests.push(next);
    }
    let n = digests.len();
    let t0 = digests[0];
    let end = digests[n - 1];
    if end <= t0 {
        return 1.0;
    }
    let expected: Vec<f64> = (0..n).map(|k| t0 + tpot * k as f64).collect();
    let mut points: Vec<f64> = digests
        .iter()
        .chain(&expected)
        .copied()
        .filter(|&t| t <= end)
        .collect();
    points.push(end);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let count = |times: &[f64], t: f64| times.iter().filter(|&&x| x <= t).count() as f64;
    let (mut area_d, mut area_e) = (0.0, 0.0);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        area_d += count(&digests, a) * (b - a);
        area_e += count(&expected, a) * (b - a);
    }
    area_d / area_e
}
