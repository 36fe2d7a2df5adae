//! Re-synchronization of permuted neurons by cosine similarity.
//!
//! A suspect model is matched layer by layer against a reference copy: the
//! pairwise cosine similarity of per-neuron weight vectors feeds a matcher
//! that recovers the inverse permutation, which is then applied to the
//! suspect (compensating in the follower layer). Bias/scale/shift move with
//! their neuron but are excluded from the match itself.

use serde::{Deserialize, Serialize};

use crate::assignment::max_score_assignment;
use crate::attack::permute_layer;
use crate::error::{Error, Result};
use crate::model::{forward, Dataset, LayerKind, LayerSpec, ModelBundle};
use crate::tensor::{cosine, l1_norm, Permutation, Tensor};

/// Pairwise cosine similarities: entry `(i, j)` compares reference neuron `i`
/// with suspect neuron `j`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Tensor,
}

impl SimilarityMatrix {
    /// Wraps a square matrix of similarity scores in [-1, 1].
    pub fn from_values(values: Tensor) -> Result<Self> {
        match values.shape() {
            [r, c] if r == c => {}
            other => {
                return Err(Error::Shape(format!(
                    "similarity matrix must be square, got {other:?}"
                )))
            }
        }
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Validation(
                "similarity entries must lie in [-1, 1]".into(),
            ));
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values.at2(i, j)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Per-neuron weight vectors of a layer: fully-connected neurons are weight
/// columns, conv neurons are their `(in_c, kh, kw)` kernel block flattened
/// row-major.
pub fn neuron_vectors(spec: &LayerSpec, weight: &Tensor) -> Result<Vec<Vec<f32>>> {
    if weight.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match spec {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    let n = spec.output_units();
    let mut out = Vec::with_capacity(n);
    match spec.kind {
        LayerKind::FullyConnected { in_dim, out_dim } => {
            for j in 0..n {
                out.push(
                    (0..in_dim)
                        .map(|c| weight.data()[c * out_dim + j])
                        .collect(),
                );
            }
        }
        LayerKind::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let block = in_channels * kernel_h * kernel_w;
            for j in 0..n {
                out.push(weight.data()[j * block..(j + 1) * block].to_vec());
            }
        }
    }
    Ok(out)
}

/// Cosine similarity matrix between the neurons of two same-shaped layers.
pub fn similarity_matrix(
    spec: &LayerSpec,
    reference: &Tensor,
    suspect: &Tensor,
) -> Result<SimilarityMatrix> {
    if reference.shape() != suspect.shape() {
        return Err(Error::Shape(format!(
            "layer shapes differ: {:?} vs {:?}",
            reference.shape(),
            suspect.shape()
        )));
    }
    let ref_vecs = neuron_vectors(spec, reference)?;
    let sus_vecs = neuron_vectors(spec, suspect)?;
    let n = ref_vecs.len();
    let mut values = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            values.set2(i, j, cosine(&ref_vecs[i], &sus_vecs[j])? as f32);
        }
    }
    Ok(SimilarityMatrix { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMethod {
    /// Repeatedly take the globally largest unmatched entry. Default.
    GreedyGlobal,
    /// Exact maximum-total-similarity assignment.
    ExactAssignment,
    /// Literal per-row argmax; may propose duplicate columns, in which case
    /// the result falls back to `GreedyGlobal` and the duplicates are
    /// reported.
    RowArgmax,
}

impl std::fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MatchMethod::GreedyGlobal => "GreedyGlobal",
            MatchMethod::ExactAssignment => "ExactAssignment",
            MatchMethod::RowArgmax => "RowArgmax",
        };
        write!(f, "{name}")
    }
}

/// Result of recovering one layer's permutation.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub perm: Permutation,
    /// Decision points where an exactly equal competing entry shared the
    /// chosen row or column; resolved lowest-index-first.
    pub ties: usize,
    /// Duplicate columns proposed by the literal row-argmax loop (0 for the
    /// bijective methods).
    pub duplicates: usize,
    /// min over rows of (matched entry - best unmatched entry in that row).
    pub min_margin: f64,
}

fn greedy_global(s: &SimilarityMatrix) -> (Vec<usize>, usize) {
    let n = s.size();
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    let mut map = vec![0usize; n];
    let mut ties = 0usize;
    for _ in 0..n {
        let mut best: Option<(f32, usize, usize)> = None;
        for i in 0..n {
            if row_used[i] {
                continue;
            }
            for j in 0..n {
                if col_used[j] {
                    continue;
                }
                let v = s.at(i, j);
                let better = match best {
                    None => true,
                    Some((bv, _, _)) => v > bv,
                };
                if better {
                    best = Some((v, i, j));
                }
            }
        }
        let (bv, bi, bj) = best.expect("n*n matrix always has an available entry");
        for i in 0..n {
            if !row_used[i] {
                for j in 0..n {
                    if !col_used[j]
                        && s.at(i, j) == bv
                        && (i, j) != (bi, bj)
                        && (i == bi || j == bj)
                    {
                        ties += 1;
                    }
                }
            }
        }
        row_used[bi] = true;
        col_used[bj] = true;
        map[bi] = bj;
    }
    (map, ties)
}

fn row_argmax(s: &SimilarityMatrix) -> (Vec<usize>, usize) {
    let n = s.size();
    let mut map = vec![0usize; n];
    let mut ties = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        for j in 1..n {
            if s.at(i, j) > s.at(i, best) {
                best = j;
            }
        }
        ties += (0..n)
            .filter(|&j| j != best && s.at(i, j) == s.at(i, best))
            .count();
        map[i] = best;
    }
    (map, ties)
}

fn margin_of(s: &SimilarityMatrix, map: &[usize]) -> f64 {
    let n = s.size();
    let mut min_margin = f64::INFINITY;
    for i in 0..n {
        let matched = s.at(i, map[i]) as f64;
        let mut best_other = f64::NEG_INFINITY;
        for j in 0..n {
            if j != map[i] {
                best_other = best_other.max(s.at(i, j) as f64);
            }
        }
        if best_other.is_finite() {
            min_margin = min_margin.min(matched - best_other);
        }
    }
    if min_margin.is_finite() {
        min_margin
    } else {
        0.0
    }
}

/// Recovers the permutation that re-aligns the suspect layer with the
/// reference: `perm.map[i]` is the suspect neuron matched to reference
/// position `i`.
pub fn recover_permutation(s: &SimilarityMatrix, method: MatchMethod) -> Result<MatchOutcome> {
    let n = s.size();
    if s.values().data().iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("similarity matrix contains NaN".into()));
    }
    let (map, ties, duplicates) = match method {
        MatchMethod::GreedyGlobal => {
            let (map, ties) = greedy_global(s);
            (map, ties, 0)
        }
        MatchMethod::ExactAssignment => {
            let map = max_score_assignment(n, |i, j| s.at(i, j) as f64);
            (map, 0, 0)
        }
        MatchMethod::RowArgmax => {
            let (map, ties) = row_argmax(s);
            let mut seen = vec![false; n];
            let mut duplicates = 0usize;
            for &j in &map {
                if seen[j] {
                    duplicates += 1;
                } else {
                    seen[j] = true;
                }
            }
            if duplicates > 0 {
                let (fallback, fb_ties) = greedy_global(s);
                (fallback, ties + fb_ties, duplicates)
            } else {
                (map, ties, 0)
            }
        }
    };
    let min_margin = margin_of(s, &map);
    Ok(MatchOutcome {
        perm: Permutation::from_map(map)?,
        ties,
        duplicates,
        min_margin,
    })
}

/// Fraction of neurons placed back at their original position, in percent.
pub fn psi(true_perm: &Permutation, recovered: &Permutation) -> Result<f64> {
    if true_perm.size() != recovered.size() {
        return Err(Error::Shape(format!(
            "psi wants equal sizes, got {} and {}",
            true_perm.size(),
            recovered.size()
        )));
    }
    let hits = true_perm
        .map()
        .iter()
        .zip(recovered.map())
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * hits as f64 / true_perm.size() as f64)
}

/// Per-layer outcome in the serialized report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResync {
    pub layer: usize,
    pub perm: Vec<usize>,
    pub psi: Option<f64>,
    pub margin: f64,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResyncReport {
    pub layers: Vec<LayerResync>,
    #[serde(rename = "overallPsi")]
    pub overall_psi: Option<f64>,
    pub method: MatchMethod,
}

/// Re-synchronizes every permutable layer of `suspect` against `reference`.
///
/// When the permutations actually applied to the suspect are supplied (layer
/// index plus the permutation), the report scores each layer's recovery with
/// psi; layers not listed are scored against the identity. With no supplied
/// permutations the report is structural only.
pub fn resync_model(
    reference: &ModelBundle,
    suspect: &ModelBundle,
    method: MatchMethod,
    true_perms: &[(usize, Permutation)],
) -> Result<(ModelBundle, ResyncReport)> {
    if reference.layers != suspect.layers || reference.input_shape != suspect.input_shape {
        return Err(Error::Validation(
            "reference and suspect architectures differ".into(),
        ));
    }
    let evaluation = !true_perms.is_empty();
    let mut fixed = suspect.clone();
    let mut layers = Vec::new();
    let mut correct = 0usize;
    let mut total = 0usize;
    for l in 0..reference.depth().saturating_sub(1) {
        let spec = &reference.layers[l];
        let s = similarity_matrix(spec, &reference.weights[l].weight, &fixed.weights[l].weight)?;
        let outcome = recover_permutation(&s, method)?;
        fixed = permute_layer(&fixed, l, &outcome.perm)?;
        let psi_l = if evaluation {
            let n = spec.output_units();
            let applied = true_perms
                .iter()
                .find(|(tl, _)| *tl == l)
                .map(|(_, p)| p.clone())
                .unwrap_or_else(|| Permutation::identity(n));
            // the recovery that restores the layer is the inverse of the
            // permutation the attacker applied
            let value = psi(&applied.inverse(), &outcome.perm)?;
            correct += (value / 100.0 * n as f64).round() as usize;
            total += n;
            Some(value)
        } else {
            None
        };
        layers.push(LayerResync {
            layer: l,
            perm: outcome.perm.map().to_vec(),
            psi: psi_l,
            margin: outcome.min_margin,
            ties: outcome.ties,
        });
    }
    let overall_psi = if evaluation && total > 0 {
        Some(100.0 * correct as f64 / total as f64)
    } else {
        None
    };
    Ok((
        fixed,
        ResyncReport {
            layers,
            overall_psi,
            method,
        },
    ))
}

/// Norm-ranking baseline: matches neurons by their l1-norm order instead of
/// cosine similarity. Returns the recovered permutation plus the number of
/// exact norm ties encountered.
pub fn baseline_norm_ranking(
    spec: &LayerSpec,
    reference: &Tensor,
    suspect: &Tensor,
) -> Result<(Permutation, usize)> {
    let ref_vecs = neuron_vectors(spec, reference)?;
    let sus_vecs = neuron_vectors(spec, suspect)?;
    if ref_vecs.len() != sus_vecs.len() {
        return Err(Error::Shape("layer widths differ".into()));
    }
    let rank_order = |vecs: &[Vec<f32>]| -> (Vec<usize>, usize) {
        let norms: Vec<f64> = vecs.iter().map(|v| l1_norm(v)).collect();
        let mut order: Vec<usize> = (0..vecs.len()).collect();
        order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
        let ties = order
            .windows(2)
            .filter(|w| norms[w[0]] == norms[w[1]])
            .count();
        (order, ties)
    };
    let (ref_order, ref_ties) = rank_order(&ref_vecs);
    let (sus_order, sus_ties) = rank_order(&sus_vecs);
    let mut map = vec![0usize; ref_vecs.len()];
    for (rank, &ref_idx) in ref_order.iter().enumerate() {
        map[ref_idx] = sus_order[rank];
    }
    Ok((Permutation::from_map(map)?, ref_ties + sus_ties))
}

/// Which side of the activation to read in output-similarity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationStage {
    Pre,
    Post,
}

/// Cosine similarity between the responses of neurons `i` and `j` of layer
/// `l`, concatenated over every sample of the dataset.
pub fn output_cosine(
    m: &ModelBundle,
    d: &Dataset,
    layer: usize,
    i: usize,
    j: usize,
    stage: ActivationStage,
) -> Result<f64> {
    if layer >= m.depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for depth {}",
            m.depth()
        )));
    }
    let n = m.layers[layer].output_units();
    if i >= n || j >= n {
        return Err(Error::Validation(format!(
            "neuron index out of range: {i}, {j} vs width {n}"
        )));
    }
    let trace = forward(m, &d.inputs)?;
    let t = match stage {
        ActivationStage::Pre => &trace.pre[layer],
        ActivationStage::Post => &trace.post[layer],
    };
    let per_unit: usize = t.shape()[2..].iter().product::<usize>().max(1);
    let batch = t.shape()[0];
    let series = |unit: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(batch * per_unit);
        for s in 0..batch {
            let start = (s * n + unit) * per_unit;
            out.extend_from_slice(&t.data()[start..start + per_unit]);
        }
        out
    };
    cosine(&series(i), &series(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{magnitude_prune, quantize, scalar_attack};
    use crate::model::{
        init_weights, reference_conv_layers, reference_mlp_layers, Activation, LayerWeights,
        Metadata,
    };
    use crate::rng::{streams, CounterRng};
    use crate::trainer::train_reference;

    fn fc_spec(in_dim: usize, out_dim: usize) -> LayerSpec {
        let mut s = LayerSpec::fully_connected(in_dim, out_dim, Activation::Relu);
        s.has_bias = false;
        s
    }

    fn random_layer(in_dim: usize, out_dim: usize, seed: u64) -> Tensor {
        let mut rng = CounterRng::new(seed, streams::INIT);
        let data: Vec<f32> = (0..in_dim * out_dim).map(|_| rng.normal() as f32).collect();
        Tensor::new(vec![in_dim, out_dim], data).unwrap()
    }

    /// Suspect whose column pi(i) holds reference column i, built directly.
    fn place_columns(w: &Tensor, pi: &Permutation) -> Tensor {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let mut out = Tensor::zeros(vec![in_dim, out_dim]);
        for c in 0..in_dim {
            for i in 0..out_dim {
                out.set2(c, pi.apply(i), w.at2(c, i));
            }
        }
        out
    }

    #[test]
    fn self_similarity_has_unit_diagonal() {
        let w = random_layer(6, 5, 1);
        let s = similarity_matrix(&fc_spec(6, 5), &w, &w).unwrap();
        for i in 0..5 {
            assert_eq!(s.at(i, i), 1.0);
            for j in 0..5 {
                if j != i {
                    assert!(s.at(i, j) < 1.0);
                }
            }
        }
    }

    #[test]
    fn permuted_suspect_lights_up_pi_positions() {
        let w = random_layer(6, 5, 2);
        let mut rng = CounterRng::new(3, streams::PERMUTE);
        let pi = Permutation::random(5, &mut rng);
        let suspect = place_columns(&w, &pi);
        let s = similarity_matrix(&fc_spec(6, 5), &w, &suspect).unwrap();
        for i in 0..5 {
            assert_eq!(s.at(i, pi.apply(i)), 1.0);
        }
    }

    #[test]
    fn orthogonal_columns_give_identity_matrix() {
        let mut w = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            w.set2(i, i, 1.5 + i as f32);
        }
        let s = similarity_matrix(&fc_spec(4, 4), &w, &w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.at(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn recover_from_one_hot_matrix_returns_pi() {
        let mut rng = CounterRng::new(8, streams::PERMUTE);
        let pi = Permutation::random(8, &mut rng);
        let s = SimilarityMatrix {
            values: pi.matrix_view(),
        };
        for method in [
            MatchMethod::GreedyGlobal,
            MatchMethod::ExactAssignment,
            MatchMethod::RowArgmax,
        ] {
            let out = recover_permutation(&s, method).unwrap();
            assert_eq!(out.perm, pi, "{method}");
        }
    }

    #[test]
    fn recover_rejects_nan() {
        let mut values = Tensor::zeros(vec![2, 2]);
        values.set2(0, 0, f32::NAN);
        let s = SimilarityMatrix { values };
        assert!(recover_permutation(&s, MatchMethod::GreedyGlobal).is_err());
    }

    #[test]
    fn greedy_never_beats_exact_and_exact_matches_brute_force() {
        let mut rng = CounterRng::new(17, streams::MONTE_CARLO);
        for trial in 0..100 {
            let n = 2 + trial % 5;
            let mut values = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                for j in 0..n {
                    values.set2(i, j, (rng.uniform() * 2.0 - 1.0) as f32);
                }
            }
            let s = SimilarityMatrix { values };
            let greedy = recover_permutation(&s, MatchMethod::GreedyGlobal).unwrap();
            let exact = recover_permutation(&s, MatchMethod::ExactAssignment).unwrap();
            let total = |p: &Permutation| -> f64 {
                p.map()
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| s.at(i, j) as f64)
                    .sum()
            };
            assert!(
                total(&greedy.perm) <= total(&exact.perm) + 1e-12,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn row_argmax_duplicates_fall_back_to_greedy() {
        // rows 0 and 1 both argmax at column 0
        let values = Tensor::new(
            vec![3, 3],
            vec![0.9, 0.1, 0.0, 0.8, 0.7, 0.0, 0.0, 0.0, 0.9],
        )
        .unwrap();
        let s = SimilarityMatrix { values };
        let out = recover_permutation(&s, MatchMethod::RowArgmax).unwrap();
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.perm.map(), &[0, 1, 2]);
    }

    #[test]
    fn psi_counts_fixed_points() {
        let id = Permutation::identity(4);
        assert_eq!(psi(&id, &id).unwrap(), 100.0);
        let derangement = Permutation::from_map(vec![1, 0, 3, 2]).unwrap();
        assert_eq!(psi(&id, &derangement).unwrap(), 0.0);
        let half = Permutation::from_map(vec![0, 1, 3, 2]).unwrap();
        assert_eq!(psi(&id, &half).unwrap(), 50.0);
    }

    #[test]
    fn psi_is_right_composition_invariant() {
        let mut rng = CounterRng::new(5, streams::PERMUTE);
        for _ in 0..20 {
            let sigma = Permutation::random(7, &mut rng);
            let rho = Permutation::random(7, &mut rng);
            let tau = Permutation::random(7, &mut rng);
            let lhs = psi(&sigma.compose(&tau).unwrap(), &rho.compose(&tau).unwrap()).unwrap();
            let rhs = psi(&sigma, &rho).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn resync_identity_suspect_is_untouched() {
        let (model, _) = train_reference(20, false).unwrap();
        let (fixed, report) = resync_model(&model, &model, MatchMethod::GreedyGlobal, &[]).unwrap();
        assert_eq!(fixed, model);
        assert!(report.overall_psi.is_none());
        for layer in &report.layers {
            assert_eq!(
                layer.perm,
                (0..layer.perm.len()).collect::<Vec<_>>(),
                "layer {}",
                layer.layer
            );
        }
    }

    #[test]
    fn resync_restores_permuted_model_exactly() {
        let (model, _) = train_reference(21, false).unwrap();
        let mut rng = CounterRng::new(22, streams::PERMUTE);
        for layer in 0..2 {
            let pi = Permutation::random(32, &mut rng);
            let suspect = permute_layer(&model, layer, &pi).unwrap();
            let (fixed, report) = resync_model(
                &model,
                &suspect,
                MatchMethod::GreedyGlobal,
                &[(layer, pi.clone())],
            )
            .unwrap();
            assert_eq!(report.overall_psi, Some(100.0), "layer {layer}");
            assert_eq!(fixed, model, "layer {layer}");
            for lr in &report.layers {
                assert!(lr.margin > 0.0, "layer {} margin {}", lr.layer, lr.margin);
            }
        }
    }

    #[test]
    fn resync_restores_conv_model_exactly() {
        let (model, _) = train_reference(23, true).unwrap();
        let mut rng = CounterRng::new(24, streams::PERMUTE);
        for layer in 0..2 {
            let pi = Permutation::random(8, &mut rng);
            let suspect = permute_layer(&model, layer, &pi).unwrap();
            let (fixed, report) =
                resync_model(&model, &suspect, MatchMethod::GreedyGlobal, &[(layer, pi)]).unwrap();
            assert_eq!(report.overall_psi, Some(100.0), "layer {layer}");
            assert_eq!(fixed, model, "layer {layer}");
        }
    }

    #[test]
    fn resync_handles_simultaneous_permutations_on_every_layer() {
        let (model, _) = train_reference(33, false).unwrap();
        let mut rng = CounterRng::new(34, streams::PERMUTE);
        let pi0 = Permutation::random(32, &mut rng);
        let pi1 = Permutation::random(32, &mut rng);
        let suspect = permute_layer(&permute_layer(&model, 0, &pi0).unwrap(), 1, &pi1).unwrap();
        let (fixed, report) = resync_model(
            &model,
            &suspect,
            MatchMethod::GreedyGlobal,
            &[(0, pi0), (1, pi1)],
        )
        .unwrap();
        assert_eq!(report.overall_psi, Some(100.0));
        assert_eq!(fixed, model);
    }

    #[test]
    fn resync_survives_mild_fine_tuning() {
        let (model, data) = train_reference(25, false).unwrap();
        let cfg = model.metadata.train.clone().unwrap();
        let mut rng = CounterRng::new(26, streams::PERMUTE);
        let pi = Permutation::random(32, &mut rng);
        let suspect = permute_layer(&model, 1, &pi).unwrap();
        let tuned = crate::trainer::fine_tune(&suspect, &data, 2.0, &cfg).unwrap();
        let (_, report) =
            resync_model(&model, &tuned.model, MatchMethod::GreedyGlobal, &[(1, pi)]).unwrap();
        assert_eq!(report.overall_psi, Some(100.0));
    }

    #[test]
    fn scalar_attack_is_invisible_to_resync() {
        let (model, _) = train_reference(27, false).unwrap();
        let mut rng = CounterRng::new(28, streams::PERMUTE);
        let pi = Permutation::random(32, &mut rng);
        let suspect = permute_layer(&model, 1, &pi).unwrap();
        let attacked = scalar_attack(&suspect, 1, 5, 0.3).unwrap();
        let (_, report) =
            resync_model(&model, &attacked, MatchMethod::GreedyGlobal, &[(1, pi)]).unwrap();
        assert_eq!(report.overall_psi, Some(100.0));
    }

    #[test]
    fn margin_stays_positive_under_mild_quantization() {
        let (model, _) = train_reference(29, false).unwrap();
        let mut rng = CounterRng::new(30, streams::PERMUTE);
        let pi = Permutation::random(32, &mut rng);
        let suspect = quantize(&permute_layer(&model, 1, &pi).unwrap(), 1, 8).unwrap();
        let (_, report) =
            resync_model(&model, &suspect, MatchMethod::GreedyGlobal, &[(1, pi)]).unwrap();
        assert_eq!(report.overall_psi, Some(100.0));
        for lr in &report.layers {
            assert!(lr.margin > 0.0, "layer {} margin {}", lr.layer, lr.margin);
        }
    }

    #[test]
    fn fully_pruned_layer_does_not_poison_matching() {
        let (model, _) = train_reference(31, false).unwrap();
        let suspect = magnitude_prune(&model, 1, 1.0).unwrap();
        // all-zero suspect columns give all-zero similarity; recovery is
        // arbitrary but must stay a valid bijection and must not crash
        let (_, report) = resync_model(&model, &suspect, MatchMethod::GreedyGlobal, &[]).unwrap();
        assert_eq!(report.layers.len(), 2);
    }

    #[test]
    fn baseline_recovers_distinct_norms_without_perturbation() {
        let w = random_layer(8, 16, 40);
        let mut rng = CounterRng::new(41, streams::PERMUTE);
        let pi = Permutation::random(16, &mut rng);
        let suspect = place_columns(&w, &pi);
        let (recovered, ties) = baseline_norm_ranking(&fc_spec(8, 16), &w, &suspect).unwrap();
        assert_eq!(ties, 0);
        // suspect column pi(i) is reference neuron i
        assert_eq!(psi(&pi, &recovered).unwrap(), 100.0);
    }

    #[test]
    fn baseline_reports_equal_norm_ties() {
        // two columns with identical l1 norm
        let w = Tensor::new(vec![2, 3], vec![1.0, -1.0, 2.0, 0.5, 0.5, 0.25]).unwrap();
        let (_, ties) = baseline_norm_ranking(&fc_spec(2, 3), &w, &w).unwrap();
        assert!(ties > 0);
    }

    #[test]
    fn output_cosine_of_a_neuron_with_itself_is_one() {
        let (model, data) = train_reference(42, false).unwrap();
        let v = output_cosine(&model, &data, 0, 3, 3, ActivationStage::Post).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cloned_scaled_neuron_has_unit_pre_activation_cosine() {
        // neuron 1 is 2x neuron 0 (zero bias): pre-activation responses are
        // proportional, so their cosine is exactly 1
        let w0 = Tensor::new(vec![2, 2], vec![0.7, 1.4, -0.3, -0.6]).unwrap();
        let w1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = {
            let mut l0 = fc_spec(2, 2);
            l0.activation = Activation::Relu;
            let l1 = LayerSpec {
                kind: LayerKind::FullyConnected {
                    in_dim: 2,
                    out_dim: 2,
                },
                activation: Activation::Identity,
                has_bias: false,
                has_channel_scale: false,
            };
            ModelBundle::new(
                vec![l0, l1],
                vec![
                    LayerWeights {
                        weight: w0,
                        bias: None,
                        scale: None,
                        shift: None,
                    },
                    LayerWeights {
                        weight: w1,
                        bias: None,
                        scale: None,
                        shift: None,
                    },
                ],
                vec![2],
                Metadata::bare(0),
            )
            .unwrap()
        };
        let d = crate::model::make_blobs(7, 2, 10, 2).unwrap();
        let v = output_cosine(&m, &d, 0, 0, 1, ActivationStage::Pre).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "pre-activation cosine {v}");
    }

    #[test]
    fn relu_can_equalize_outputs_of_different_neurons() {
        // constructed instance: both neurons fire identically on every
        // sample, yet their parameter vectors are not collinear
        let w0 = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, -1.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut l0 = fc_spec(2, 2);
        l0.activation = Activation::Relu;
        let mut l1 = fc_spec(2, 2);
        l1.activation = Activation::Identity;
        let m = ModelBundle::new(
            vec![l0, l1],
            vec![
                LayerWeights {
                    weight: w0.clone(),
                    bias: None,
                    scale: None,
                    shift: None,
                },
                LayerWeights {
                    weight: eye,
                    bias: None,
                    scale: None,
                    shift: None,
                },
            ],
            vec![2],
            Metadata::bare(0),
        )
        .unwrap();
        let d = Dataset {
            inputs: Tensor::new(vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.5, -2.0, 1.0])
                .unwrap(),
            labels: vec![0, 0, 1, 1],
            name: "constructed".into(),
        };
        let post = output_cosine(&m, &d, 0, 0, 1, ActivationStage::Post).unwrap();
        assert!((post - 1.0).abs() < 1e-9, "post cosine {post}");
        let vecs = neuron_vectors(&m.layers[0], &m.weights[0].weight).unwrap();
        let param = cosine(&vecs[0], &vecs[1]).unwrap();
        assert!(param < 0.99, "parameter cosine {param}");
        let pre = output_cosine(&m, &d, 0, 0, 1, ActivationStage::Pre).unwrap();
        assert!(pre < 0.99, "pre-activation cosine {pre}");
    }

    #[test]
    fn self_recovery_is_exact_for_every_layer_and_method() {
        for (conv, widths) in [(false, vec![32usize, 32]), (true, vec![8, 8])] {
            let layers = if conv {
                reference_conv_layers()
            } else {
                reference_mlp_layers()
            };
            let input = crate::model::reference_input_shape(conv);
            let model = init_weights(&layers, &input, 50).unwrap();
            let mut rng = CounterRng::new(51, streams::PERMUTE);
            for (layer, &n) in widths.iter().enumerate() {
                for method in [
                    MatchMethod::GreedyGlobal,
                    MatchMethod::ExactAssignment,
                    MatchMethod::RowArgmax,
                ] {
                    let pi = Permutation::random(n, &mut rng);
                    let suspect = permute_layer(&model, layer, &pi).unwrap();
                    let (fixed, report) =
                        resync_model(&model, &suspect, method, &[(layer, pi)]).unwrap();
                    assert_eq!(report.overall_psi, Some(100.0), "{method} layer {layer}");
                    assert_eq!(fixed, model, "{method} layer {layer}");
                }
            }
        }
    }
}
