//! Hungarian-matched pixel accuracy.

use std::fmt::Write as _;

use rayon::prelude::*;
use sgseg_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::nn::ParamStore;

/// Ground-truth id of pixels excluded from evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Pixel counts indexed by (predicted cluster, ground-truth class).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(invalid("confusion matrix must be square"));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, pred: usize, label: usize) -> u64 {
        self.counts[pred * self.k + label]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose label is not [`IGNORE_LABEL`].
    pub fn add(&mut self, pred: &[usize], labels: &[u8]) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(invalid(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &l) in pred.iter().zip(labels) {
            if l == IGNORE_LABEL {
                continue;
            }
            if p >= self.k || l as usize >= self.k {
                return Err(invalid(format!(
                    "pair ({p}, {l}) outside a {k}x{k} confusion matrix",
                    k = self.k
                )));
            }
            self.counts[p * self.k + l as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(invalid("cannot merge confusion matrices of different size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Pixels counted under the mapping `perm[pred] = class`.
    pub fn matched(&self, perm: &[usize]) -> u64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Minimum-cost assignment over a square matrix given row-major with side
/// `n`, restricted to `rows` and `cols` (equal lengths). Returns the column
/// chosen for each listed row, in order.
fn min_cost_assignment(cost: &[i64], n: usize, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let m = rows.len();
    if m == 0 {
        return Vec::new();
    }
    let c = |i: usize, j: usize| cost[rows[i - 1] * n + cols[j - 1]];
    // Potentials method on 1-based indices; p[j] is the row matched to column j.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; m + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; m];
    for j in 1..=m {
        assign[p[j] - 1] = cols[j - 1];
    }
    assign
}

fn assignment_cost(cost: &[i64], n: usize, rows: &[usize], cols: &[usize]) -> i64 {
    let a = min_cost_assignment(cost, n, rows, cols);
    rows.iter().zip(a).map(|(&r, c)| cost[r * n + c]).sum()
}

/// Mapping `perm[cluster] = class` that maximizes matched pixels. Among
/// optimal mappings the lexicographically smallest is returned.
pub fn hungarian_match(cm: &ConfusionMatrix) -> Vec<usize> {
    let n = cm.k;
    let cost: Vec<i64> = cm.counts.iter().map(|&c| -(c as i64)).collect();
    let all: Vec<usize> = (0..n).collect();
    let best = assignment_cost(&cost, n, &all, &all);
    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0i64;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let chosen = free
            .iter()
            .copied()
            .find(|&j| {
                let cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
                fixed + cost[i * n + j] + assignment_cost(&cost, n, &rest, &cols) == best
            })
            .expect("an optimal completion always exists");
        fixed += cost[i * n + chosen];
        perm.push(chosen);
        free.retain(|&c| c != chosen);
    }
    perm
}

/// Percentage of labeled pixels whose mapped prediction equals the label.
/// `None` when no pixel is labeled.
pub fn pixel_accuracy(pred: &[usize], labels: &[u8], perm: &[usize]) -> Result<Option<f64>> {
    if pred.len() != labels.len() {
        return Err(invalid("prediction and label rasters differ in size"));
    }
    let mut valid = 0u64;
    let mut correct = 0u64;
    for (&p, &l) in pred.iter().zip(labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let mapped = *perm
            .get(p)
            .ok_or_else(|| invalid(format!("cluster {p} has no mapping")))?;
        valid += 1;
        correct += u64::from(mapped == l as usize);
    }
    Ok((valid > 0).then(|| 100.0 * correct as f64 / valid as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Matched pixel accuracy in percent; `None` without labeled pixels.
    pub accuracy: Option<f64>,
    /// Accuracy per ground-truth class in percent.
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    /// `permutation[cluster] = class`.
    pub permutation: Vec<usize>,
    pub pixels: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let permutation = hungarian_match(&confusion);
        let pixels = confusion.total();
        let matched = confusion.matched(&permutation);
        let accuracy = (pixels > 0).then(|| 100.0 * matched as f64 / pixels as f64);
        let per_class = (0..confusion.k)
            .map(|c| {
                let n: u64 = (0..confusion.k).map(|p| confusion.get(p, c)).sum();
                let hit: u64 = (0..confusion.k)
                    .filter(|&p| permutation[p] == c)
                    .map(|p| confusion.get(p, c))
                    .sum();
                (n > 0).then(|| 100.0 * hit as f64 / n as f64)
            })
            .collect();
        Self {
            accuracy,
            per_class,
            confusion,
            permutation,
            pixels,
        }
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.2}"));
        let mut s = String::new();
        writeln!(s, "pixel accuracy: {}", pct(self.accuracy)).unwrap();
        writeln!(s, "labeled pixels: {}", self.pixels).unwrap();
        writeln!(s, "class  accuracy  matched cluster").unwrap();
        for (c, acc) in self.per_class.iter().enumerate() {
            let clusters: Vec<String> = (0..self.permutation.len())
                .filter(|&p| self.permutation[p] == c)
                .map(|p| p.to_string())
                .collect();
            writeln!(s, "{c:>5}  {:>8}  {}", pct(*acc), clusters.join(",")).unwrap();
        }
        writeln!(s, "confusion (rows = predicted, cols = ground truth):").unwrap();
        for row in self.confusion.rows() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>8}")).collect();
            writeln!(s, "{}", cells.join("")).unwrap();
        }
        s
    }

    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        let num = |v: Option<f64>| v.map_or("null".to_string(), |a| format!("{a}"));
        let list = |v: Vec<String>| format!("[{}]", v.join(","));
        format!(
            "{{\"accuracy\":{},\"pixels\":{},\"per_class\":{},\"permutation\":{},\"confusion\":{}}}",
            num(self.accuracy),
            self.pixels,
            list(self.per_class.iter().map(|&a| num(a)).collect()),
            list(self.permutation.iter().map(|p| p.to_string()).collect()),
            list(
                self.confusion
                    .rows()
                    .iter()
                    .map(|r| list(r.iter().map(|c| c.to_string()).collect()))
                    .collect()
            ),
        )
    }
}

/// Predicts every image and evaluates against `labels` with a single
/// matching computed over the whole set.
pub fn evaluate(model: &Model, store: &ParamStore, images: &[Tensor], labels: &[Vec<u8>]) -> Result<EvalReport> {
    if images.len() != labels.len() {
        return Err(invalid("every image needs a label raster"));
    }
    let k = model.arch.classes;
    let per_image: Vec<Result<ConfusionMatrix>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, lab)| {
            let pred = model.predict(store, img)?;
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&pred.labels, lab)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    for c in per_image {
        cm.merge(&c?)?;
    }
    Ok(EvalReport::from_confusion(cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominant_is_identity() {
        let cm = ConfusionMatrix::from_rows(&[vec![9, 1, 0], vec![2, 8, 1], vec![0, 3, 7]]).unwrap();
        assert_eq!(hungarian_match(&cm), vec![0, 1, 2]);
    }

    #[test]
    fn cyclic_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 5, 0], vec![0, 1, 5], vec![5, 0, 1]]).unwrap();
        let p = hungarian_match(&cm);
        assert_eq!(p, vec![1, 2, 0]);
        assert_eq!(cm.matched(&p), 15);
    }

    #[test]
    fn ties_pick_the_lexicographically_smallest() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(hungarian_match(&cm), vec![0, 1]);
        let cm = ConfusionMatrix::from_rows(&[vec![0, 0, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(hungarian_match(&cm), vec![0, 1, 2]);
    }

    #[test]
    fn non_square_rejected() {
        assert!(ConfusionMatrix::from_rows(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let perm = [0, 1];
        assert_eq!(pixel_accuracy(&[0, 1, 1], &[0, 1, 1], &perm).unwrap(), Some(100.0));
        assert_eq!(pixel_accuracy(&[0, 1, 0, 1], &[0, 1, 1, 0], &perm).unwrap(), Some(50.0));
        assert_eq!(pixel_accuracy(&[0, 1], &[255, 255], &perm).unwrap(), None);
        assert_eq!(pixel_accuracy(&[1, 1, 0], &[0, 255, 1], &[1, 0]).unwrap(), Some(100.0));
    }

    #[test]
    fn ignored_pixels_are_not_counted() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 1, 1], &[0, 255, 1]).unwrap();
        assert_eq!(cm.total(), 2);
        assert!(cm.add(&[2], &[0]).is_err());
    }

    #[test]
    fn report_totals_match() {
        let cm = ConfusionMatrix::from_rows(&[vec![0, 4], vec![6, 0]]).unwrap();
        let r = EvalReport::from_confusion(cm);
        assert_eq!(r.permutation, vec![1, 0]);
        assert_eq!(r.accuracy, Some(100.0));
        assert_eq!(r.pixels, 10);
        assert_eq!(r.per_class, vec![Some(100.0), Some(100.0)]);
        assert!(r.to_json().starts_with("{\"accuracy\":100,"));
    }
}
