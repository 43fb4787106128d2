//! Iterative transductive inference: pseudo-label the query set, keep the
//! top-t most confident samples, fold their raw embedded maps into the class
//! prototypes, and repeat with a growing budget.

use crate::tensor::Tensor;

/// One pseudo-labeled query sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub query: usize,
    pub label: usize,
    pub confidence: f32,
}

/// Marks the `t` smallest confidences (lower = more confident); ties break
/// to the smaller query index; `t` clamps to the query count.
pub fn select_topt(confidences: &[f32], t: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        confidences[a]
            .partial_cmp(&confidences[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked = vec![false; confidences.len()];
    for &idx in order.iter().take(t.min(confidences.len())) {
        picked[idx] = true;
    }
    picked
}

/// Elementwise mean of maps, summed in the given order then divided once.
fn mean_maps(maps: &[&Tensor]) -> Tensor {
    let first = maps[0];
    let mut data = vec![0.0f32; first.numel()];
    for m in maps {
        for (d, v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    let count = maps.len() as f32;
    for d in &mut data {
        *d /= count;
    }
    Tensor::new(first.shape().to_vec(), data).expect("uniform shapes")
}

/// Class prototypes from raw embedded support maps.
pub fn raw_prototypes(support_maps: &[Vec<Tensor>]) -> Vec<Tensor> {
    support_maps
        .iter()
        .map(|maps| mean_maps(&maps.iter().collect::<Vec<_>>()))
        .collect()
}

/// Augmented prototypes: (sum of support maps + sum of selected query maps)
/// divided by the combined count. A class with no candidates keeps its
/// original prototype bit for bit. Candidates are folded in query-index
/// order, so the result ignores candidate ordering.
pub fn augment_prototypes(
    support_maps: &[Vec<Tensor>],
    candidates: &[Candidate],
    query_maps: &[Tensor],
) -> Vec<Tensor> {
    let way = support_maps.len();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); way];
    for cand in candidates {
        per_class[cand.label].push(cand.query);
    }
    for queries in &mut per_class {
        queries.sort_unstable();
    }
    support_maps
        .iter()
        .zip(&per_class)
        .map(|(support, queries)| {
            let mut maps: Vec<&Tensor> = support.iter().collect();
            maps.extend(queries.iter().map(|&q| &query_maps[q]));
            mean_maps(&maps)
        })
        .collect()
}

/// Budgets per iteration: t0, t0*growth, t0*growth^2, ... clamped at n_q.
pub fn budget_schedule(t0: usize, iters: usize, growth: usize, n_query: usize) -> Vec<usize> {
    let mut budgets = Vec::with_capacity(iters);
    let mut t = t0;
    for _ in 0..iters {
        budgets.push(t.min(n_query));
        t = t.saturating_mul(growth);
    }
    budgets
}

#[derive(Debug, Clone, Copy)]
pub struct TransduceOptions {
    pub t0: usize,
    pub iters: usize,
    pub growth: usize,
}

impl Default for TransduceOptions {
    fn default() -> Self {
        Self {
            t0: 35,
            iters: 2,
            growth: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationDiagnostics {
    pub budget: usize,
    pub selected_per_class: Vec<usize>,
    /// Accuracy of the selected pseudo-labels, when ground truth is known.
    pub pseudo_accuracy: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct TransduceResult {
    /// Final labels, from one extra prediction pass after the last augmentation.
    pub labels: Vec<usize>,
    pub confidences: Vec<f32>,
    /// First-pass predictions against the un-augmented prototypes.
    pub inductive_labels: Vec<usize>,
    pub inductive_confidences: Vec<f32>,
    pub iterations: Vec<IterationDiagnostics>,
}

/// Runs the full loop. `predict` maps (prototypes, query map) to a
/// (label, confidence) pair and encapsulates the attention pipeline, so the
/// loop itself is identical for every ablation mode.
pub fn transduce(
    support_maps: &[Vec<Tensor>],
    query_maps: &[Tensor],
    options: &TransduceOptions,
    truth: Option<&[usize]>,
    predict: &dyn Fn(&[Tensor], &Tensor) -> (usize, f32),
) -> TransduceResult {
    let predict_all = |prototypes: &[Tensor]| -> (Vec<usize>, Vec<f32>) {
        let mut labels = Vec::with_capacity(query_maps.len());
        let mut confidences = Vec::with_capacity(query_maps.len());
        for q in query_maps {
            let (label, confidence) = predict(prototypes, q);
            labels.push(label);
            confidences.push(confidence);
        }
        (labels, confidences)
    };

    let mut prototypes = raw_prototypes(support_maps);
    let (mut labels, mut confidences) = predict_all(&prototypes);
    let inductive_labels = labels.clone();
    let inductive_confidences = confidences.clone();

    let budgets = budget_schedule(options.t0, options.iters, options.growth, query_maps.len());
    let mut iterations = Vec::with_capacity(budgets.len());
    for &budget in &budgets {
        let picked = select_topt(&confidences, budget);
        let candidates: Vec<Candidate> = picked
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(q, _)| Candidate {
                query: q,
                label: labels[q],
                confidence: confidences[q],
            })
            .collect();
        let mut selected_per_class = vec![0usize; support_maps.len()];
        for c in &candidates {
            selected_per_class[c.label] += 1;
        }
        let pseudo_accuracy = truth.map(|t| {
            if candidates.is_empty() {
                0.0
            } else {
                candidates.iter().filter(|c| t[c.query] == c.label).count() as f32
                    / candidates.len() as f32
            }
        });
        iterations.push(IterationDiagnostics {
            budget,
            selected_per_class,
            pseudo_accuracy,
        });

        prototypes = augment_prototypes(support_maps, &candidates, query_maps);
        let next = predict_all(&prototypes);
        labels = next.0;
        confidences = next.1;
    }

    TransduceResult {
        labels,
        confidences,
        inductive_labels,
        inductive_confidences,
        iterations,
    }
}
