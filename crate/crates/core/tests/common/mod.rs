//! Reported results grid shared by the gap tests.

pub const METRICS: [&str; 4] = ["cae_p", "cae_v", "mae_p", "mae_v"];
pub const TESTS: [&str; 4] = ["uniform/affine", "uniform/quadratic", "variable/affine", "variable/quadratic"];

/// Per metric: values for (test, controller) with controllers M, M+N, M+Q.
pub const VALUES: [[[f64; 3]; 4]; 4] = [
    [[475.5, 68.7, 62.2], [542.5, 86.9, 79.2], [1388.2, 199.9, 161.0], [1137.0, 181.5, 157.0]],
    [[47.9, 35.0, 32.9], [53.9, 47.9, 38.6], [288.0, 63.3, 41.7], [201.1, 57.4, 48.4]],
    [[1.129, 0.421, 0.370], [1.356, 0.493, 0.417], [5.220, 0.616, 0.493], [3.978, 0.618, 0.552]],
    [[0.260, 0.267, 0.254], [0.301, 0.300, 0.302], [1.132, 0.391, 0.251], [0.884, 0.327, 0.312]],
];

/// Printed gaps of M+Q against each controller, same layout.
pub const GAPS: [[[f64; 3]; 4]; 4] = [
    [[86.92, 9.44, 0.00], [85.40, 8.88, 0.00], [88.41, 19.46, 0.00], [86.19, 13.51, 0.00]],
    [[31.32, 6.02, 0.00], [28.33, 19.38, 0.00], [85.53, 34.19, 0.00], [75.94, 15.71, 0.00]],
    [[68.83, 11.92, 0.00], [69.26, 15.44, 0.00], [90.55, 19.96, 0.00], [86.11, 10.63, 0.00]],
    [[2.32, 4.88, 0.00], [-0.41, -0.58, 0.00], [77.80, 35.73, 0.00], [64.68, 4.68, 0.00]],
];

/// `(metric, test, controller, printed, recomputed)` for every gap cell.
pub fn gap_cells() -> Vec<(usize, usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for m in 0..4 {
        for t in 0..4 {
            let ours = VALUES[m][t][2];
            for c in 0..3 {
                let gap = platoon_perl::metrics::compute_gap(VALUES[m][t][c], ours).unwrap();
                out.push((m, t, c, GAPS[m][t][c], gap));
            }
        }
    }
    out
}
