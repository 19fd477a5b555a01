//! CSV emission, observed orders and iteration matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thm_core::forms::TransportVariant;
use thm_core::mms::observed_order;

use crate::experiment::RunResult;

/// Fixed CSV header.
pub const CSV_HEADER: [&str; 14] = [
    "kind", "variant", "ell", "N", "h", "status", "iters", "err_u_L2", "err_u_dG", "err_p_L2", "err_p_dG", "err_T_L2",
    "err_T_dG", "err_phi_L2",
];

/// Observed orders between two consecutive meshes of one `(label, variant, ell)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub label: String,
    pub variant: TransportVariant,
    pub ell: usize,
    /// Finer mesh of the pair.
    pub cells: usize,
    pub h: f64,
    /// Orders of `(u_L2, u_dG, p_L2, p_dG, T_L2, T_dG, phi_L2)`.
    pub orders: [f64; 7],
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() { format!("{v:.10e}") } else if v.is_nan() { String::new() } else { format!("{v}") }
}

/// Orders between consecutive mesh sizes for every group with at least two
/// completed runs. Rows follow the order of `results`.
pub fn order_rows(results: &[RunResult]) -> Vec<OrderRow> {
    let mut groups: BTreeMap<(usize, String, usize), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if r.errors.is_some() {
            let rank = TransportVariant::ALL.iter().position(|&v| v == r.spec.variant).unwrap_or(usize::MAX);
            groups.entry((r.spec.ell, r.label.clone(), rank)).or_default().push(r);
        }
    }
    let mut rows = Vec::new();
    for runs in groups.values_mut() {
        runs.sort_by_key(|r| r.spec.cells);
        for pair in runs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (ea, eb) = (a.errors.expect("errors").as_array(), b.errors.expect("errors").as_array());
            let mut orders = [f64::NAN; 7];
            for i in 0..7 {
                orders[i] = observed_order(&[ea[i], eb[i]], &[a.h, b.h]).unwrap_or(f64::NAN);
            }
            rows.push(OrderRow {
                label: a.label.clone(),
                variant: a.spec.variant,
                ell: a.spec.ell,
                cells: b.spec.cells,
                h: b.h,
                orders,
            });
        }
    }
    rows
}

/// CSV text: header, one row per run, then the observed-order rows (status `order`).
pub fn to_csv(results: &[RunResult], with_orders: bool) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in results {
        let errors = r.errors.map(|e| e.as_array().map(fmt_value)).unwrap_or_else(|| std::array::from_fn(|_| String::new()));
        let mut rec = vec![
            r.label.clone(),
            r.spec.variant.name().to_owned(),
            r.spec.ell.to_string(),
            r.spec.cells.to_string(),
            fmt_value(r.h),
            r.status.name().to_owned(),
            r.iterations.to_string(),
        ];
        rec.extend(errors);
        w.write_record(&rec)?;
    }
    if with_orders {
        for o in order_rows(results) {
            let mut rec = vec![
                format!("{}:order", o.label),
                o.variant.name().to_owned(),
                o.ell.to_string(),
                o.cells.to_string(),
                fmt_value(o.h),
                "order".to_owned(),
                String::new(),
            ];
            rec.extend(o.orders.map(fmt_value));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
}

/// Text table of Picard iteration counts: one line per variant, one column per
/// `(ell, N, sweep label)`; `*` marks runs that did not converge.
pub fn iteration_matrix(results: &[RunResult]) -> String {
    let mut columns: Vec<(usize, usize, String)> = Vec::new();
    let mut variants: Vec<TransportVariant> = Vec::new();
    for r in results {
        let col = (r.spec.ell, r.spec.cells, r.label.clone());
        if !columns.contains(&col) {
            columns.push(col);
        }
        if !variants.contains(&r.spec.variant) {
            variants.push(r.spec.variant);
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "variant");
    for (ell, n, label) in &columns {
        let _ = write!(out, " | {label} ell={ell} N={n}");
    }
    out.push('\n');
    for v in variants {
        let _ = write!(out, "{:<8}", v.name());
        for (ell, n, label) in &columns {
            let cell = results
                .iter()
                .find(|r| r.spec.variant == v && r.spec.ell == *ell && r.spec.cells == *n && &r.label == label)
                .map(|r| match r.status.name() {
                    "converged" => r.iterations.to_string(),
                    "skipped" => "-".to_owned(),
                    _ => format!("{}*", r.iterations),
                })
                .unwrap_or_default();
            let width = format!(" | {label} ell={ell} N={n}").len() - 3;
            let _ = write!(out, " | {cell:>width$}");
        }
        out.push('\n');
    }
    out
}
