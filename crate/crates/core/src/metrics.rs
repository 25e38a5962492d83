//! Open-world evaluation: grid-argmax prediction over the full
//! attribute×object product and the calibration-bias protocol — sweep a
//! scalar added to every not-seen composition's score, trace the
//! seen/unseen accuracy trade-off, and report S, U, best harmonic mean,
//! and area under the unseen-versus-seen curve.

use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write as _;

use crate::error::{MmptError, Result};
use crate::model::ScoreTable;
use crate::space::{Composition, CompositionSpace, EvalSplit};

// ── Scores ───────────────────────────────────────────────────────────────────

/// One sample's score over every composition in the open-world grid, either
/// as the two softmax factors or as an externally produced dense grid.
#[derive(Debug, Clone)]
pub enum CompositionScores {
    Factorized { rho_a: Vec<f64>, rho_o: Vec<f64> },
    /// Row-major `|A| x |O|` grid.
    Dense(Vec<f64>),
}

fn check_open_unit(values: &[f64], what: &str) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v <= 0.0 || v >= 1.0 {
            return Err(MmptError::invalid(format!(
                "{what} must lie strictly inside (0, 1), got {v}"
            )));
        }
    }
    Ok(())
}

impl CompositionScores {
    pub fn validate(&self, n_attrs: usize, n_objs: usize) -> Result<()> {
        match self {
            CompositionScores::Factorized { rho_a, rho_o } => {
                if rho_a.len() != n_attrs || rho_o.len() != n_objs {
                    return Err(MmptError::invalid(format!(
                        "factorized scores are {}x{} but the space is {}x{}",
                        rho_a.len(),
                        rho_o.len(),
                        n_attrs,
                        n_objs
                    )));
                }
                check_open_unit(rho_a, "attribute probabilities")?;
                check_open_unit(rho_o, "object probabilities")
            }
            CompositionScores::Dense(grid) => {
                if grid.len() != n_attrs * n_objs {
                    return Err(MmptError::invalid(format!(
                        "dense grid has {} entries but the space has {}",
                        grid.len(),
                        n_attrs * n_objs
                    )));
                }
                check_open_unit(grid, "composition scores")
            }
        }
    }

    /// Score of flat cell `a * n_objs + o`.
    #[inline]
    fn cell(&self, flat: usize, n_objs: usize) -> f64 {
        match self {
            CompositionScores::Factorized { rho_a, rho_o } => {
                rho_a[flat / n_objs] * rho_o[flat % n_objs]
            }
            CompositionScores::Dense(grid) => grid[flat],
        }
    }
}

/// A sample ready for the evaluation protocol.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub scores: CompositionScores,
    pub label: Composition,
}

// ── Prediction ───────────────────────────────────────────────────────────────

/// Flat-grid argmax with a per-cell additive bias on not-seen cells. A
/// strict `>` scan keeps the first maximum, which is exactly the lowest
/// attribute-major cell among ties.
fn biased_argmax(
    scores: &CompositionScores,
    seen_mask: &[bool],
    n_objs: usize,
    bias: f64,
) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_flat = 0;
    for (flat, &seen) in seen_mask.iter().enumerate() {
        let v = scores.cell(flat, n_objs) + if seen { 0.0 } else { bias };
        if v > best {
            best = v;
            best_flat = flat;
        }
    }
    best_flat
}

/// The open-world prediction: the single highest-scoring composition in the
/// full grid, ties broken by lowest attribute-major index. Accepts both
/// factorized and dense score forms.
pub fn predict_open_world(
    scores: &CompositionScores,
    space: &CompositionSpace,
) -> Result<Composition> {
    let (n_attrs, n_objs) = (space.n_attributes(), space.n_objects());
    if n_attrs == 0 || n_objs == 0 {
        return Err(MmptError::invalid("prediction over an empty composition space"));
    }
    scores.validate(n_attrs, n_objs)?;
    let mut best = f64::NEG_INFINITY;
    let mut best_flat = 0;
    for flat in 0..n_attrs * n_objs {
        let v = scores.cell(flat, n_objs);
        if v > best {
            best = v;
            best_flat = flat;
        }
    }
    Ok(Composition::new(best_flat / n_objs, best_flat % n_objs))
}

// ── Bias sweep ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BiasPoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Seen/unseen accuracies at each evaluated bias, sorted by bias ascending.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsCurve {
    pub points: Vec<BiasPoint>,
}

/// (sample index, group membership, true flat cell) after label validation.
struct Grouped {
    is_unseen_labeled: Vec<bool>,
    n_seen: usize,
    n_unseen: usize,
}

fn group_samples(
    samples: &[ScoredSample],
    space: &CompositionSpace,
    split: EvalSplit,
) -> Result<Grouped> {
    let unseen: Vec<Composition> = space.unseen(split).to_vec();
    let mut is_unseen_labeled = Vec::with_capacity(samples.len());
    let (mut n_seen, mut n_unseen) = (0usize, 0usize);
    for s in samples {
        if s.label.attr >= space.n_attributes() || s.label.obj >= space.n_objects() {
            return Err(MmptError::invalid(format!(
                "label ({}, {}) is outside the {}x{} space",
                s.label.attr,
                s.label.obj,
                space.n_attributes(),
                space.n_objects()
            )));
        }
        if space.is_seen(s.label) {
            is_unseen_labeled.push(false);
            n_seen += 1;
        } else if unseen.contains(&s.label) {
            is_unseen_labeled.push(true);
            n_unseen += 1;
        } else {
            return Err(MmptError::protocol(format!(
                "label {} is neither seen nor in the evaluated unseen split",
                space.describe(s.label)
            )));
        }
    }
    if n_unseen == 0 {
        return Err(MmptError::protocol(
            "bias sweep needs at least one unseen-labeled sample",
        ));
    }
    Ok(Grouped { is_unseen_labeled, n_seen, n_unseen })
}

/// Sweeps the calibration bias over every decision boundary. Evaluation
/// points are the per-sample gaps (max seen-cell score minus max not-seen
/// cell score), the midpoints between consecutive gaps — where every
/// comparison is strict, so the curve also captures the regime between two
/// boundaries — and sentinels ±M past every gap.
pub fn bias_sweep(
    samples: &[ScoredSample],
    space: &CompositionSpace,
    split: EvalSplit,
) -> Result<MetricsCurve> {
    if !space.splits_assigned() {
        return Err(MmptError::protocol("bias sweep requires assigned splits"));
    }
    let (n_attrs, n_objs) = (space.n_attributes(), space.n_objects());
    for s in samples {
        s.scores.validate(n_attrs, n_objs)?;
    }
    let grouped = group_samples(samples, space, split)?;
    let seen_mask = space.seen_mask();
    if seen_mask.iter().all(|&m| m) {
        return Err(MmptError::protocol(
            "every composition is seen; the open-world sweep is undefined",
        ));
    }

    // Per-sample decision boundary: the bias at which its best not-seen
    // cell overtakes its best seen cell.
    let mut gaps: Vec<f64> = samples
        .iter()
        .map(|s| {
            let (mut best_seen, mut best_unseen) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (flat, &seen) in seen_mask.iter().enumerate() {
                let v = s.scores.cell(flat, n_objs);
                if seen {
                    best_seen = best_seen.max(v);
                } else {
                    best_unseen = best_unseen.max(v);
                }
            }
            best_seen - best_unseen
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();

    let m = gaps.iter().fold(0.0f64, |acc, g| acc.max(g.abs())) + 1.0;
    let mut biases = Vec::with_capacity(2 * gaps.len() + 2);
    biases.push(-m);
    for (i, &g) in gaps.iter().enumerate() {
        biases.push(g);
        if i + 1 < gaps.len() {
            biases.push((g + gaps[i + 1]) / 2.0);
        }
    }
    biases.push(m);
    biases.dedup();

    let points: Vec<BiasPoint> = biases
        .par_iter()
        .map(|&bias| {
            let (mut seen_hits, mut unseen_hits) = (0usize, 0usize);
            for (s, &unseen_labeled) in samples.iter().zip(&grouped.is_unseen_labeled) {
                let predicted = biased_argmax(&s.scores, seen_mask, n_objs, bias);
                if predicted == space.flat_index(s.label) {
                    if unseen_labeled {
                        unseen_hits += 1;
                    } else {
                        seen_hits += 1;
                    }
                }
            }
            let frac = |hits: usize, total: usize| {
                if total == 0 { 0.0 } else { hits as f64 / total as f64 }
            };
            BiasPoint {
                bias,
                seen_acc: frac(seen_hits, grouped.n_seen),
                unseen_acc: frac(unseen_hits, grouped.n_unseen),
            }
        })
        .collect();
    Ok(MetricsCurve { points })
}

// ── Curve reports ────────────────────────────────────────────────────────────

impl MetricsCurve {
    /// The seen-axis points after collapsing duplicate seen-accuracies to
    /// their best unseen value, sorted by seen ascending.
    fn tradeoff_points(&self) -> Vec<(f64, f64)> {
        let mut xy: Vec<(f64, f64)> =
            self.points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut collapsed: Vec<(f64, f64)> = Vec::with_capacity(xy.len());
        for (x, y) in xy {
            match collapsed.last_mut() {
                Some(last) if last.0 == x => last.1 = y, // sorted: y is the max so far
                _ => collapsed.push((x, y)),
            }
        }
        collapsed
    }

    /// Trapezoidal area of unseen accuracy as a function of seen accuracy,
    /// times 100. A curve with a single distinct seen value has no extent.
    pub fn auc(&self) -> f64 {
        let pts = self.tradeoff_points();
        if pts.len() < 2 {
            log::warn!("unseen-seen curve has a single distinct point; area is 0");
            return 0.0;
        }
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
        }
        area * 100.0
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("bias,seen,unseen\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.bias, p.seen_acc, p.unseen_acc));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

/// The four headline numbers, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsSummary {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
}

/// Best seen accuracy, best unseen accuracy, best harmonic mean over the
/// curve, and the area under it. The area can never exceed the S·U
/// rectangle; a violation means the curve itself is malformed.
pub fn summarize(curve: &MetricsCurve) -> Result<MetricsSummary> {
    if curve.points.is_empty() {
        return Err(MmptError::invalid("cannot summarize an empty curve"));
    }
    let mut s = 0.0f64;
    let mut u = 0.0f64;
    let mut hm = 0.0f64;
    for p in &curve.points {
        s = s.max(p.seen_acc);
        u = u.max(p.unseen_acc);
        if p.seen_acc + p.unseen_acc > 0.0 {
            hm = hm.max(2.0 * p.seen_acc * p.unseen_acc / (p.seen_acc + p.unseen_acc));
        }
    }
    let summary =
        MetricsSummary { s: 100.0 * s, u: 100.0 * u, hm: 100.0 * hm, auc: curve.auc() };
    if summary.auc > summary.s * summary.u / 100.0 + 1e-9 || summary.auc > 100.0 + 1e-9 {
        return Err(MmptError::protocol(format!(
            "area {} exceeds the S*U bound {} - the curve is inconsistent",
            summary.auc,
            summary.s * summary.u / 100.0
        )));
    }
    Ok(summary)
}

// ── Score-table bridge ───────────────────────────────────────────────────────

/// Converts an interchange table into protocol samples against `space`.
/// The table's vocabularies must match the space exactly (same names, same
/// order) so that row indices mean the same compositions.
pub fn table_samples(table: &ScoreTable, space: &CompositionSpace) -> Result<Vec<ScoredSample>> {
    table.validate()?;
    if table.attributes != space.attributes() || table.objects != space.objects() {
        return Err(MmptError::protocol(
            "score table vocabulary does not match the composition space",
        ));
    }
    let attr_idx: HashMap<&str, usize> =
        space.attributes().iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let obj_idx: HashMap<&str, usize> =
        space.objects().iter().enumerate().map(|(i, o)| (o.as_str(), i)).collect();
    (0..table.n_samples())
        .map(|i| {
            let a = attr_idx[table.true_attrs[i].as_str()];
            let o = obj_idx[table.true_objs[i].as_str()];
            Ok(ScoredSample {
                scores: CompositionScores::Factorized {
                    rho_a: table.rho_a[i].clone(),
                    rho_o: table.rho_o[i].clone(),
                },
                label: Composition::new(a, o),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::numbered_space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// 3x4 space: 4 seen pairs, 1 unseen val, 2 unseen test.
    fn small_space() -> CompositionSpace {
        let mut space = numbered_space(3, 4).unwrap();
        space
            .assign_splits(
                vec![
                    Composition::new(0, 0),
                    Composition::new(0, 1),
                    Composition::new(1, 2),
                    Composition::new(2, 3),
                ],
                vec![Composition::new(1, 0)],
                vec![Composition::new(2, 0), Composition::new(1, 3)],
            )
            .unwrap();
        space
    }

    fn softmax_vec(rng: &mut ChaCha12Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..3.0f64).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn random_samples(
        space: &CompositionSpace,
        split: EvalSplit,
        n_seen: usize,
        n_unseen: usize,
        seed: u64,
    ) -> Vec<ScoredSample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..n_seen + n_unseen {
            let label = if i < n_seen {
                space.seen()[rng.gen_range(0..space.seen().len())]
            } else {
                let u = space.unseen(split);
                u[rng.gen_range(0..u.len())]
            };
            out.push(ScoredSample {
                scores: CompositionScores::Factorized {
                    rho_a: softmax_vec(&mut rng, space.n_attributes()),
                    rho_o: softmax_vec(&mut rng, space.n_objects()),
                },
                label,
            });
        }
        out
    }

    // Brute-force reference: plain nested loops, no shared code with the
    // production scan.
    fn oracle_predict(grid: &[Vec<f64>]) -> Composition {
        let mut best = f64::NEG_INFINITY;
        let mut arg = Composition::new(0, 0);
        for (a, row) in grid.iter().enumerate() {
            for (o, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = Composition::new(a, o);
                }
            }
        }
        arg
    }

    fn to_grid(s: &CompositionScores, n_attrs: usize, n_objs: usize) -> Vec<Vec<f64>> {
        (0..n_attrs)
            .map(|a| (0..n_objs).map(|o| s.cell(a * n_objs + o, n_objs)).collect())
            .collect()
    }

    #[test]
    fn one_hot_factors_predict_their_peak() {
        let space = small_space();
        // Strictly inside (0,1): near-one-hot.
        let mut rho_a = vec![1e-6; 3];
        let mut rho_o = vec![1e-6; 4];
        rho_a[2] = 1.0 - 2e-6;
        rho_o[1] = 1.0 - 3e-6;
        let pred = predict_open_world(
            &CompositionScores::Factorized { rho_a, rho_o },
            &space,
        )
        .unwrap();
        assert_eq!(pred, Composition::new(2, 1));
    }

    #[test]
    fn uniform_grid_breaks_ties_attribute_major() {
        let space = small_space();
        let pred = predict_open_world(
            &CompositionScores::Dense(vec![0.5; 12]),
            &space,
        )
        .unwrap();
        assert_eq!(pred, Composition::new(0, 0));
    }

    #[test]
    fn prediction_matches_brute_force_grid_scan() {
        let space = numbered_space(5, 7).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for trial in 0..40 {
            let scores = if trial % 2 == 0 {
                CompositionScores::Factorized {
                    rho_a: softmax_vec(&mut rng, 5),
                    rho_o: softmax_vec(&mut rng, 7),
                }
            } else {
                let mut grid = vec![0.0; 35];
                for v in &mut grid {
                    *v = rng.gen_range(0.01..0.99);
                }
                CompositionScores::Dense(grid)
            };
            let got = predict_open_world(&scores, &space).unwrap();
            let want = oracle_predict(&to_grid(&scores, 5, 7));
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn score_validation_rejects_boundary_and_shape() {
        let space = small_space();
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            let mut grid = vec![0.5; 12];
            grid[5] = bad;
            assert!(predict_open_world(&CompositionScores::Dense(grid), &space).is_err());
        }
        assert!(predict_open_world(&CompositionScores::Dense(vec![0.5; 11]), &space).is_err());
        assert!(predict_open_world(
            &CompositionScores::Factorized { rho_a: vec![0.5; 2], rho_o: vec![0.5; 4] },
            &space
        )
        .is_err());
    }

    // ── Sweep oracle: an independent dense-bias implementation ───────────

    fn oracle_sweep(
        samples: &[ScoredSample],
        space: &CompositionSpace,
        split: EvalSplit,
        n_grid: usize,
    ) -> Vec<BiasPoint> {
        let n_objs = space.n_objects();
        let seen_mask = space.seen_mask();
        // Re-derive the boundaries with plain loops.
        let mut gaps = Vec::new();
        for s in samples {
            let mut best_seen = f64::NEG_INFINITY;
            let mut best_unseen = f64::NEG_INFINITY;
            for flat in 0..seen_mask.len() {
                let v = s.scores.cell(flat, n_objs);
                if seen_mask[flat] {
                    if v > best_seen {
                        best_seen = v;
                    }
                } else if v > best_unseen {
                    best_unseen = v;
                }
            }
            gaps.push(best_seen - best_unseen);
        }
        gaps.sort_by(f64::total_cmp);
        let m = gaps.iter().fold(0.0f64, |acc, g| acc.max(g.abs())) + 1.0;
        // Dense grid spanning [-m, m], plus the exact boundaries and their
        // midpoints so every tie and every strict regime is sampled even
        // when two boundaries sit closer than the grid spacing.
        let mut biases: Vec<f64> = (0..n_grid)
            .map(|i| -m + 2.0 * m * i as f64 / (n_grid - 1) as f64)
            .collect();
        biases.extend_from_slice(&gaps);
        for w in gaps.windows(2) {
            biases.push((w[0] + w[1]) / 2.0);
        }
        biases.sort_by(f64::total_cmp);
        biases.dedup();

        let unseen = space.unseen(split);
        biases
            .iter()
            .map(|&bias| {
                let mut seen_hits = 0usize;
                let mut seen_total = 0usize;
                let mut unseen_hits = 0usize;
                let mut unseen_total = 0usize;
                for s in samples {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = Composition::new(0, 0);
                    for a in 0..space.n_attributes() {
                        for o in 0..n_objs {
                            let flat = a * n_objs + o;
                            let mut v = s.scores.cell(flat, n_objs);
                            if !seen_mask[flat] {
                                v += bias;
                            }
                            if v > best {
                                best = v;
                                arg = Composition::new(a, o);
                            }
                        }
                    }
                    let correct = arg == s.label;
                    if space.is_seen(s.label) {
                        seen_total += 1;
                        seen_hits += correct as usize;
                    } else {
                        assert!(unseen.contains(&s.label));
                        unseen_total += 1;
                        unseen_hits += correct as usize;
                    }
                }
                let frac =
                    |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
                BiasPoint {
                    bias,
                    seen_acc: frac(seen_hits, seen_total),
                    unseen_acc: frac(unseen_hits, unseen_total),
                }
            })
            .collect()
    }

    fn oracle_summary(points: &[BiasPoint]) -> (f64, f64, f64, f64) {
        let s = points.iter().fold(0.0f64, |m, p| m.max(p.seen_acc));
        let u = points.iter().fold(0.0f64, |m, p| m.max(p.unseen_acc));
        let hm = points.iter().fold(0.0f64, |m, p| {
            if p.seen_acc + p.unseen_acc > 0.0 {
                m.max(2.0 * p.seen_acc * p.unseen_acc / (p.seen_acc + p.unseen_acc))
            } else {
                m
            }
        });
        // Independent integration: sort, collapse, trapezoid.
        let mut xy: Vec<(f64, f64)> =
            points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut coll: Vec<(f64, f64)> = Vec::new();
        for (x, y) in xy {
            if let Some(last) = coll.last_mut() {
                if last.0 == x {
                    last.1 = y;
                    continue;
                }
            }
            coll.push((x, y));
        }
        let auc = if coll.len() < 2 {
            0.0
        } else {
            coll.windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum::<f64>()
                * 100.0
        };
        (100.0 * s, 100.0 * u, 100.0 * hm, auc)
    }

    #[test]
    fn hand_table_matches_dense_oracle() {
        let space = small_space();
        // Six samples with spread-out decision boundaries: three labeled
        // with seen pairs, three with unseen-test pairs.
        let mk = |rho_a: [f64; 3], rho_o: [f64; 4], label: (usize, usize)| ScoredSample {
            scores: CompositionScores::Factorized {
                rho_a: rho_a.to_vec(),
                rho_o: rho_o.to_vec(),
            },
            label: Composition::new(label.0, label.1),
        };
        let samples = vec![
            mk([0.7, 0.2, 0.1], [0.6, 0.2, 0.1, 0.1], (0, 0)),
            mk([0.1, 0.3, 0.6], [0.1, 0.1, 0.2, 0.6], (2, 3)),
            mk([0.3, 0.4, 0.3], [0.3, 0.3, 0.3, 0.1], (1, 2)),
            mk([0.2, 0.2, 0.6], [0.5, 0.2, 0.2, 0.1], (2, 0)),
            mk([0.2, 0.6, 0.2], [0.2, 0.2, 0.2, 0.4], (1, 3)),
            mk([0.4, 0.3, 0.3], [0.4, 0.3, 0.2, 0.1], (2, 0)),
        ];
        let curve = bias_sweep(&samples, &space, EvalSplit::Test).unwrap();
        let oracle = oracle_sweep(&samples, &space, EvalSplit::Test, 10_001);

        // Accuracy columns agree at every shared bias.
        let lookup: HashMap<u64, (f64, f64)> = oracle
            .iter()
            .map(|p| (p.bias.to_bits(), (p.seen_acc, p.unseen_acc)))
            .collect();
        let mut shared = 0;
        for p in &curve.points {
            if let Some(&(s, u)) = lookup.get(&p.bias.to_bits()) {
                assert!((p.seen_acc - s).abs() < 1e-9, "seen mismatch at {}", p.bias);
                assert!((p.unseen_acc - u).abs() < 1e-9, "unseen mismatch at {}", p.bias);
                shared += 1;
            }
        }
        assert!(shared >= 6, "only {shared} shared biases");

        let got = summarize(&curve).unwrap();
        let (s, u, hm, auc) = oracle_summary(&oracle);
        assert!((got.s - s).abs() < 1e-9, "S {} vs {s}", got.s);
        assert!((got.u - u).abs() < 1e-9, "U {} vs {u}", got.u);
        assert!((got.hm - hm).abs() < 1e-9, "HM {} vs {hm}", got.hm);
        assert!((got.auc - auc).abs() < 1e-9, "AUC {} vs {auc}", got.auc);
    }

    #[test]
    fn random_instances_match_dense_oracle() {
        let space = small_space();
        for seed in 0..12u64 {
            let samples = random_samples(&space, EvalSplit::Test, 5, 5, 1000 + seed);
            let curve = bias_sweep(&samples, &space, EvalSplit::Test).unwrap();
            let oracle = oracle_sweep(&samples, &space, EvalSplit::Test, 4_001);
            let got = summarize(&curve).unwrap();
            let (s, u, hm, auc) = oracle_summary(&oracle);
            assert!((got.s - s).abs() < 1e-9, "seed {seed} S");
            assert!((got.u - u).abs() < 1e-9, "seed {seed} U");
            assert!((got.hm - hm).abs() < 1e-9, "seed {seed} HM {} vs {hm}", got.hm);
            assert!((got.auc - auc).abs() < 1e-9, "seed {seed} AUC {} vs {auc}", got.auc);
        }
    }

    #[test]
    fn sentinels_saturate_the_curve() {
        let space = small_space();
        let samples = random_samples(&space, EvalSplit::Test, 4, 4, 7);
        let curve = bias_sweep(&samples, &space, EvalSplit::Test).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!(first.unseen_acc, 0.0, "at -M every prediction is seen");
        assert_eq!(last.seen_acc, 0.0, "at +M every prediction is not-seen");
    }

    #[test]
    fn curve_is_monotone_in_bias() {
        let space = small_space();
        for seed in 0..8u64 {
            let samples = random_samples(&space, EvalSplit::Test, 6, 4, 300 + seed);
            let curve = bias_sweep(&samples, &space, EvalSplit::Test).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[0].bias < w[1].bias, "biases not strictly sorted");
                assert!(w[0].seen_acc >= w[1].seen_acc, "seen rose with bias");
                assert!(w[0].unseen_acc <= w[1].unseen_acc, "unseen fell with bias");
            }
        }
    }

    #[test]
    fn power_of_two_scaling_leaves_accuracies_unchanged() {
        // Scaling every sample's grid by one positive constant scales all
        // decision boundaries identically; with a power of two the float
        // arithmetic is exact, so the accuracy columns must be bit-equal.
        let space = small_space();
        let samples = random_samples(&space, EvalSplit::Test, 5, 5, 11);
        let base = bias_sweep(&samples, &space, EvalSplit::Test).unwrap();
        // Dense grids scaled by 0.25: exact in binary floating point and
        // the entries stay inside (0,1).
        let scaled: Vec<ScoredSample> = samples
            .iter()
            .map(|s| {
                let grid: Vec<f64> = (0..12).map(|f| s.scores.cell(f, 4) * 0.25).collect();
                ScoredSample { scores: CompositionScores::Dense(grid), label: s.label }
            })
            .collect();
        let shrunk = bias_sweep(&scaled, &space, EvalSplit::Test).unwrap();
        assert_eq!(base.points.len(), shrunk.points.len());
        let n = base.points.len();
        for (i, (b, s)) in base.points.iter().zip(&shrunk.points).enumerate() {
            assert_eq!(b.seen_acc, s.seen_acc);
            assert_eq!(b.unseen_acc, s.unseen_acc);
            // Sentinels sit at ±(max gap + 1), which does not scale
            // linearly; every decision boundary and midpoint does.
            if i > 0 && i + 1 < n {
                assert_eq!(s.bias, b.bias * 0.25);
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_protocols() {
        let space = small_space();
        // No unseen-labeled samples.
        let seen_only = random_samples(&space, EvalSplit::Test, 3, 0, 5);
        let err = bias_sweep(&seen_only, &space, EvalSplit::Test).unwrap_err();
        assert!(err.to_string().contains("unseen-labeled"), "{err}");
        // A label outside seen ∪ unseen(split): (0,2) is in no split.
        let mut stray = random_samples(&space, EvalSplit::Test, 2, 2, 6);
        stray[0].label = Composition::new(0, 2);
        assert!(bias_sweep(&stray, &space, EvalSplit::Test).is_err());
        // Val-split labels rejected when evaluating the test split.
        let mut val_labeled = random_samples(&space, EvalSplit::Val, 2, 2, 8);
        val_labeled[3].label = Composition::new(1, 0);
        assert!(bias_sweep(&val_labeled, &space, EvalSplit::Test).is_err());
        // Splits not assigned.
        let bare = numbered_space(3, 4).unwrap();
        assert!(bias_sweep(&seen_only, &bare, EvalSplit::Test).is_err());
    }

    // ── Area geometry ────────────────────────────────────────────────────

    fn curve_of(points: &[(f64, f64, f64)]) -> MetricsCurve {
        MetricsCurve {
            points: points
                .iter()
                .map(|&(bias, seen_acc, unseen_acc)| BiasPoint { bias, seen_acc, unseen_acc })
                .collect(),
        }
    }

    #[test]
    fn rectangle_curve_has_rectangle_area() {
        // Constant (s0, u0) plus saturated sentinels: the collapsed
        // trade-off is (0, u0) -> (s0, u0), a rectangle of area s0*u0.
        let curve = curve_of(&[
            (-2.0, 0.8, 0.0),
            (-0.5, 0.8, 0.6),
            (0.5, 0.8, 0.6),
            (2.0, 0.0, 0.6),
        ]);
        assert!((curve.auc() - 0.8 * 0.6 * 100.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_curve_has_full_area() {
        let curve = curve_of(&[(-2.0, 1.0, 0.0), (0.0, 1.0, 1.0), (2.0, 0.0, 1.0)]);
        assert!((curve.auc() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn single_distinct_seen_value_has_zero_area() {
        let curve = curve_of(&[(-1.0, 0.5, 0.1), (1.0, 0.5, 0.9)]);
        assert_eq!(curve.auc(), 0.0);
    }

    #[test]
    fn summary_hand_values() {
        let curve = curve_of(&[(-2.0, 1.0, 0.0), (0.0, 0.5, 0.5), (2.0, 0.0, 1.0)]);
        let s = summarize(&curve).unwrap();
        assert_eq!(s.s, 100.0);
        assert_eq!(s.u, 100.0);
        assert!((s.hm - 50.0).abs() < 1e-12);
        // Trade-off points (0,1), (0.5,0.5), (1,0): area = 0.5.
        assert!((s.auc - 50.0).abs() < 1e-12);

        let zero = summarize(&curve_of(&[(0.0, 0.0, 0.0)])).unwrap();
        assert_eq!((zero.s, zero.u, zero.hm, zero.auc), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn summary_respects_area_bound() {
        // The area integrates y <= U over an x extent <= S, so it can never
        // exceed the S*U rectangle; check on the extreme diagonal and on
        // random sweeps.
        let diagonal = curve_of(&[(-1.0, 1.0, 1.0), (1.0, 0.0, 0.0)]);
        let ok = summarize(&diagonal).unwrap();
        assert!(ok.auc <= ok.s * ok.u / 100.0 + 1e-9);
        for seed in 0..6u64 {
            let space = small_space();
            let samples = random_samples(&space, EvalSplit::Test, 4, 4, 60 + seed);
            let sum =
                summarize(&bias_sweep(&samples, &space, EvalSplit::Test).unwrap()).unwrap();
            assert!(sum.auc <= sum.s * sum.u / 100.0 + 1e-9);
            assert!(sum.auc <= 100.0 + 1e-9);
            assert!(sum.hm <= 100.0 && sum.s <= 100.0 && sum.u <= 100.0);
        }
    }

    #[test]
    fn curve_csv_round_trips_by_eye() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = curve_of(&[(-1.5, 1.0, 0.0), (0.25, 0.5, 0.5)]);
        curve.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bias,seen,unseen");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "-1.5,1,0");
        assert_eq!(lines[2], "0.25,0.5,0.5");
    }

    #[test]
    fn score_table_converts_to_samples() {
        let space = small_space();
        let table = ScoreTable {
            attributes: space.attributes().to_vec(),
            objects: space.objects().to_vec(),
            seen_pairs: space
                .seen()
                .iter()
                .map(|&c| {
                    (
                        space.attributes()[c.attr].clone(),
                        space.objects()[c.obj].clone(),
                    )
                })
                .collect(),
            sample_ids: vec!["s0".into(), "s1".into()],
            true_attrs: vec!["attr0".into(), "attr2".into()],
            true_objs: vec!["obj1".into(), "obj0".into()],
            rho_a: vec![vec![0.5, 0.25, 0.25], vec![0.2, 0.3, 0.5]],
            rho_o: vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.25, 0.25, 0.25, 0.25]],
        };
        let samples = table_samples(&table, &space).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, Composition::new(0, 1));
        assert_eq!(samples[1].label, Composition::new(2, 0));
        match &samples[1].scores {
            CompositionScores::Factorized { rho_a, .. } => assert_eq!(rho_a[2], 0.5),
            _ => panic!("expected factors"),
        }

        // Vocabulary mismatch is rejected.
        let other = numbered_space(3, 5).unwrap();
        assert!(table_samples(&table, &other).is_err());
    }
}
