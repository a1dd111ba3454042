//! Built-in scenario grids.

use super::{Analysis, IccSpec, Scenario};

/// Geometry of one reference cell: `(p0, p1, icc, n, [m, k, l])`.
pub type GridRow = (f64, f64, &'static str, usize, [usize; 3]);

/// The 30 balanced cells: each `n` is the smallest even number of
/// clusters with predicted power of at least 80%.
pub const BALANCED_ROWS: [GridRow; 30] = [
    (0.2, 0.5, "A1", 14, [2, 3, 5]),
    (0.2, 0.5, "A1", 14, [2, 3, 10]),
    (0.2, 0.5, "A1", 14, [2, 4, 5]),
    (0.2, 0.5, "A1", 12, [3, 3, 5]),
    (0.2, 0.5, "A2", 10, [2, 3, 5]),
    (0.2, 0.5, "A2", 10, [2, 3, 10]),
    (0.2, 0.5, "A2", 10, [2, 4, 5]),
    (0.2, 0.5, "A2", 8, [3, 3, 5]),
    (0.2, 0.5, "A3", 8, [2, 3, 5]),
    (0.2, 0.5, "A3", 8, [3, 3, 5]),
    (0.2, 0.5, "A4", 8, [3, 3, 5]),
    (0.1, 0.3, "A1", 22, [2, 3, 5]),
    (0.1, 0.3, "A1", 20, [2, 3, 10]),
    (0.1, 0.3, "A1", 20, [2, 4, 5]),
    (0.1, 0.3, "A1", 16, [3, 3, 5]),
    (0.1, 0.3, "A2", 16, [2, 3, 5]),
    (0.1, 0.3, "A2", 14, [2, 3, 10]),
    (0.1, 0.3, "A2", 14, [2, 4, 5]),
    (0.1, 0.3, "A2", 12, [3, 3, 5]),
    (0.1, 0.3, "A3", 12, [2, 3, 5]),
    (0.1, 0.3, "A3", 10, [3, 3, 5]),
    (0.1, 0.3, "A4", 10, [3, 3, 5]),
    (0.5, 0.7, "A1", 26, [2, 4, 5]),
    (0.5, 0.7, "A2", 16, [3, 3, 5]),
    (0.5, 0.7, "A3", 12, [2, 4, 5]),
    (0.5, 0.7, "A4", 14, [3, 3, 5]),
    (0.8, 0.9, "A2", 30, [3, 3, 5]),
    (0.8, 0.9, "A3", 22, [2, 4, 5]),
    (0.8, 0.9, "A4", 28, [2, 4, 5]),
    (0.8, 0.9, "A4", 24, [3, 3, 5]),
];

/// Size cell (`p1 = p0`) for 1-based `row`.
pub fn size_scenario(row: usize) -> Scenario {
    let (p0, _, icc, n, dims) = BALANCED_ROWS[row - 1];
    let mut s = Scenario::new(format!("s{row:02}-size"), p0, p0, IccSpec::Label(icc.into()), dims, n);
    s.analyses = vec![Analysis::Ene, Analysis::Independence];
    s
}

/// Power cell for 1-based `row`.
pub fn power_scenario(row: usize) -> Scenario {
    let (p0, p1, icc, n, dims) = BALANCED_ROWS[row - 1];
    let mut s = Scenario::new(format!("s{row:02}-power"), p0, p1, IccSpec::Label(icc.into()), dims, n);
    s.analyses = vec![Analysis::Ene, Analysis::Independence];
    s
}

/// Size and power cells of every row, size first within a row.
pub fn balanced_grid() -> Vec<Scenario> {
    (1..=BALANCED_ROWS.len())
        .flat_map(|r| [size_scenario(r), power_scenario(r)])
        .collect()
}

/// The balanced grid with gamma panel sizes of the given CV.
pub fn unbalanced_grid(cv: f64) -> Vec<Scenario> {
    balanced_grid()
        .into_iter()
        .map(|mut s| {
            s.cv = cv;
            s.name = format!("{}-cv{cv}", s.name);
            s
        })
        .collect()
}

/// `balanced` or `unbalanced:<cv>`.
pub fn by_name(name: &str) -> Option<Vec<Scenario>> {
    match name.split_once(':') {
        None if name == "balanced" => Some(balanced_grid()),
        Some(("unbalanced", cv)) => cv.parse::<f64>().ok().filter(|c| *c >= 0.0).map(unbalanced_grid),
        _ => None,
    }
}
