//! Independent reference implementations used to cross-check the library.
//! Each follows the textbook formula directly, with no shared code.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Fleiss' kappa in the per-item agreement form
/// P_i = (sum_j n_ij^2 - n) / (n (n - 1)). `None` when P_e = 1.
pub fn fleiss_direct(rows: &[Vec<u32>]) -> Option<f64> {
    let big_n = rows.len() as f64;
    let n = rows[0].iter().sum::<u32>() as f64;
    let k = rows[0].len();
    let mut p_bar = 0.0;
    for row in rows {
        let sq: f64 = row.iter().map(|&x| (x as f64) * (x as f64)).sum();
        p_bar += (sq - n) / (n * (n - 1.0));
    }
    p_bar /= big_n;
    let mut p_e = 0.0;
    for j in 0..k {
        let col: f64 = rows.iter().map(|r| r[j] as f64).sum();
        let p_j = col / (big_n * n);
        p_e += p_j * p_j;
    }
    if (1.0 - p_e).abs() <= 1e-12 {
        None
    } else {
        Some((p_bar - p_e) / (1.0 - p_e))
    }
}

/// Greedy one-to-one matching with a used flag per prediction.
pub fn brute_force_counts<T: PartialEq>(gold: &[T], pred: &[T]) -> (usize, usize, usize) {
    let mut used = vec![false; pred.len()];
    let mut tp = 0;
    for g in gold {
        for (i, p) in pred.iter().enumerate() {
            if !used[i] && p == g {
                used[i] = true;
                tp += 1;
                break;
            }
        }
    }
    (tp, pred.len() - tp, gold.len() - tp)
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Indices of candidates kept by the similarity filter, plus the threshold.
pub fn filter_brute_force(cands: &[Vec<f64>], refs: &[Vec<f64>], sigma: f64) -> (Vec<usize>, f64) {
    let mut loo_sum = 0.0;
    for i in 0..refs.len() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..refs.len() {
            if i != j {
                best = best.max(cos(&refs[i], &refs[j]));
            }
        }
        loo_sum += best;
    }
    let threshold = sigma * loo_sum / refs.len() as f64;
    let kept = cands
        .iter()
        .enumerate()
        .filter(|(_, c)| refs.iter().map(|r| cos(c, r)).fold(f64::NEG_INFINITY, f64::max) >= threshold)
        .map(|(i, _)| i)
        .collect();
    (kept, threshold)
}

/// One row of the published source-prompt table.
#[derive(Clone, Debug)]
pub struct SourceRow {
    pub dataset: String,
    pub task: String,
    pub model: String,
    pub truth: f64,
    pub nickname: f64,
    pub fake: f64,
}

pub fn read_source_rows(text: &str) -> Vec<SourceRow> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            SourceRow {
                dataset: f[0].into(),
                task: f[1].into(),
                model: f[2].into(),
                truth: f[3].parse().unwrap(),
                nickname: f[4].parse().unwrap(),
                fake: f[5].parse().unwrap(),
            }
        })
        .collect()
}

/// Plain average of `variant - reference` in F1 points.
pub fn macro_delta(rows: &[&SourceRow], reference: fn(&SourceRow) -> f64, variant: fn(&SourceRow) -> f64) -> f64 {
    rows.iter().map(|r| variant(r) - reference(r)).sum::<f64>() / rows.len() as f64
}

/// Parses a tab-separated grid into (train, test) -> value.
pub fn read_grid(text: &str) -> BTreeMap<(String, String), f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let mut out = BTreeMap::new();
    for l in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = l.split('\t').collect();
        for (col, v) in header[1..].iter().zip(&f[1..]) {
            out.insert((f[0].to_string(), col.to_string()), v.parse().unwrap());
        }
    }
    out
}
