//! Browser bindings for the demo page: generate a block-model graph and look
//! at its homophily, compute soft assignments and sharpened targets for
//! points typed into the page, and compare exact and first-order outer
//! gradients on the quadratic toy.
//!
//! Every export returns a JSON string; errors come back as `{"error": …}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use graphmeta::adcore::{Order, Tape, Tensor};
use graphmeta::graph::{generate_sbm, node_homophily, SbmSpec};
use graphmeta::harness::checks::quadratic_outer_gradient;
use graphmeta::metalearner::{select_high_confidence, sharpen, soft_assign};

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Parses `"x y; x y; …"` into rows.
fn parse_points(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| r.split([' ', ',']).filter(|t| !t.is_empty()).map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect())
        .collect::<Result<_, _>>()?;
    match rows.first() {
        None => Err("no points".into()),
        Some(first) if rows.iter().any(|r| r.len() != first.len()) => Err("points differ in dimension".into()),
        Some(_) => Ok(rows),
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Generates a graph and reports its size, mean degree, homophily and the
/// first few edges.
#[wasm_bindgen]
pub fn graph_stats(classes: usize, per_class: usize, p_in: f64, p_out: f64, seed: u64) -> String {
    respond((|| {
        let spec = SbmSpec { classes, per_class, p_in, p_out, seed, split: Some([classes, 0, 0]), ..SbmSpec::default() };
        let g = generate_sbm(&spec).map_err(|e| e.to_string())?;
        let n = g.num_nodes();
        let degrees: Vec<usize> = (0..n).map(|v| g.neighbors(v).len()).collect();
        let same = g.edges().iter().filter(|&&(u, v)| g.labels()[u] == g.labels()[v]).count();
        Ok(json!({
            "nodes": n,
            "edges": g.edges().len(),
            "mean_degree": degrees.iter().sum::<usize>() as f64 / n.max(1) as f64,
            "isolated": degrees.iter().filter(|&&d| d == 0).count(),
            "homophily": node_homophily(&g),
            "same_label_edges": same,
        }))
    })())
}

/// Student-t soft assignment of `points` to `prototypes`, the rows chosen by
/// per-prototype top-`k` selection and their sharpened target.
#[wasm_bindgen]
pub fn assignments(points: &str, prototypes: &str, k: usize) -> String {
    respond((|| {
        let z = parse_points(points)?;
        let p = parse_points(prototypes)?;
        if z[0].len() != p[0].len() {
            return Err("points and prototypes differ in dimension".into());
        }
        let tape = Tape::new(Order::First);
        let q = soft_assign(tape.constant(Tensor::from_rows(&z)), tape.constant(Tensor::from_rows(&p)))
            .map_err(|e| e.to_string())?
            .value();
        let (rows, sub) = select_high_confidence(&q, k.max(1));
        Ok(json!({ "q": rows_of(&q), "selected": rows, "target": rows_of(&sharpen(&sub)) }))
    })())
}

/// Outer gradients for inner loss `aθ²`, one step of size `alpha` and outer
/// loss `θ′²`, next to their closed forms.
#[wasm_bindgen]
pub fn quadratic_toy(theta: f64, a: f64, alpha: f64) -> String {
    respond((|| {
        let exact = quadratic_outer_gradient(theta, a, alpha, Order::Exact).map_err(|e| e.to_string())?;
        let first = quadratic_outer_gradient(theta, a, alpha, Order::First).map_err(|e| e.to_string())?;
        let f = 1.0 - 2.0 * a * alpha;
        Ok(json!({
            "exact": exact,
            "exact_closed_form": 2.0 * theta * f * f,
            "first_order": first,
            "first_order_closed_form": 2.0 * theta * f,
        }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_return_json() {
        let v: Value = serde_json::from_str(&graph_stats(3, 10, 0.3, 0.05, 1)).unwrap();
        assert_eq!(v["nodes"], 30);
        let v: Value = serde_json::from_str(&assignments("0 0; 1 1; 5 5", "0 0; 5 5", 1)).unwrap();
        assert_eq!(v["selected"], json!([0, 2]));
        let v: Value = serde_json::from_str(&quadratic_toy(1.0, 1.0, 0.1)).unwrap();
        assert!((v["exact"].as_f64().unwrap() - 1.28).abs() < 1e-12);
        let v: Value = serde_json::from_str(&assignments("0 0; 1", "0 0", 1)).unwrap();
        assert!(v["error"].is_string());
    }
}
