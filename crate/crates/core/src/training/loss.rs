use rand::Rng;

use super::TrainError;
use crate::autodiff::{Graph, Tensor, Var};
use crate::bertscore::score_soft_graph;
use crate::corpus::Example;
use crate::lm::LmEncoder;
use crate::nmt::BoundModel;
use crate::softpred::{sample_gumbel_noise, PredictionMode, SoftDistribution, PROB_FLOOR};

/// Label-smoothed negative log-likelihood of `targets` under `rows`,
/// averaged over the positions whose target is not `pad`.
pub fn label_smoothed_nll(
    rows: &[SoftDistribution],
    targets: &[usize],
    epsilon: f64,
    pad: Option<usize>,
) -> Result<f64, TrainError> {
    if rows.len() != targets.len() {
        return Err(TrainError::LengthMismatch { rows: rows.len(), targets: targets.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &y) in rows.iter().zip(targets) {
        if Some(y) == pad {
            continue;
        }
        let p = row.probs();
        if y >= p.len() {
            return Err(TrainError::Invalid(format!("target {y} outside {} classes", p.len())));
        }
        let log = |x: f64| x.max(PROB_FLOOR).ln();
        let smooth: f64 = p.iter().map(|&x| log(x)).sum();
        total -= (1.0 - epsilon) * log(p[y]) + epsilon / p.len() as f64 * smooth;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Summed label-smoothed NLL of `targets` under `[l, V]` logits, as a graph
/// scalar.
pub fn label_smoothed_nll_sum(g: &mut Graph, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var, TrainError> {
    let v = g.value(logits).cols() as f64;
    let logp = g.log_softmax(logits);
    let picked = g.pick_per_row(logp, targets)?;
    let picked = g.sum(picked);
    let all = g.sum(logp);
    let a = g.scale(picked, -(1.0 - epsilon));
    let b = g.scale(all, -epsilon / v);
    Ok(g.add(a, b)?)
}

/// Baseline objective for a batch: mean label-smoothed NLL per target token.
pub fn nll_batch_loss(g: &mut Graph, bound: &BoundModel<'_>, batch: &[Example], epsilon: f64) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    let mut positions = 0usize;
    for ex in batch {
        let logits = bound.teacher_forced_logits(g, &ex.source, &ex.target)?;
        let l = label_smoothed_nll_sum(g, logits, &ex.target[1..], epsilon)?;
        positions += ex.target.len() - 1;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or(TrainError::EmptyBatch)?;
    Ok(g.scale(total, 1.0 / positions as f64))
}

/// Soft predictions for each teacher-forced position under `mode`.
/// Gumbel noise is drawn from `rng`, one fresh vector per position.
pub fn soft_predictions<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    mode: PredictionMode,
    rng: &mut R,
) -> Result<Var, TrainError> {
    Ok(match mode {
        PredictionMode::Dense => g.softmax(logits),
        PredictionMode::Sparsemax => g.sparsemax(logits),
        PredictionMode::GumbelSoftmax { tau } => {
            let (l, v) = (g.value(logits).rows(), g.value(logits).cols());
            let noise = Tensor::matrix(l, v, sample_gumbel_noise(rng, l * v))?;
            let p = g.softmax(logits);
            g.gumbel_softmax(p, &noise, tau)?
        }
    })
}

/// Negated mean F score of the batch. Each pair's soft candidate keeps the
/// positions whose gold next token is an ordinary token, so the prediction
/// of `<eos>` does not count as a candidate word.
pub fn bertscore_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    bound: &BoundModel<'_>,
    lm: &LmEncoder,
    batch: &[Example],
    mode: PredictionMode,
    rng: &mut R,
) -> Result<Var, TrainError> {
    let logits = batch
        .iter()
        .map(|ex| bound.teacher_forced_logits(g, &ex.source, &ex.target))
        .collect::<Result<Vec<_>, _>>()?;
    soft_score_loss(g, lm, &logits, batch, mode, rng)
}

/// [`bertscore_loss`] starting from each pair's `[len - 1, V]`
/// teacher-forced logits.
pub fn soft_score_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    lm: &LmEncoder,
    logits: &[Var],
    batch: &[Example],
    mode: PredictionMode,
    rng: &mut R,
) -> Result<Var, TrainError> {
    mode.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if logits.len() != batch.len() {
        return Err(TrainError::LengthMismatch { rows: logits.len(), targets: batch.len() });
    }
    let table = g.constant(lm.embeddings().to_tensor());
    let vocab = lm.vocab();
    let mut total: Option<Var> = None;
    for (ex, &pair_logits) in batch.iter().zip(logits) {
        let keep = ex.target[1..].iter().take_while(|&&t| !vocab.is_structural(t)).count();
        let f = if keep == 0 {
            g.constant(Tensor::scalar(0.0))
        } else {
            let l = g.slice_rows(pair_logits, 0, keep)?;
            let probs = soft_predictions(g, l, mode, rng)?;
            let expected = g.matmul(probs, table)?;
            score_soft_graph(g, expected, &ex.target, lm)?.f1
        };
        total = Some(match total {
            Some(t) => g.add(t, f)?,
            None => f,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, -1.0 / batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_without_smoothing_is_zero() {
        let rows = vec![SoftDistribution::one_hot(4, 1), SoftDistribution::one_hot(4, 3)];
        assert!(label_smoothed_nll(&rows, &[1, 3], 0.0, None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_rows_give_log_v() {
        let rows = vec![SoftDistribution::uniform(7); 3];
        for eps in [0.0, 0.1, 0.5] {
            let l = label_smoothed_nll(&rows, &[0, 3, 6], eps, None).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_positions_are_skipped_and_lengths_checked() {
        let rows = vec![SoftDistribution::uniform(3), SoftDistribution::one_hot(3, 0)];
        let l = label_smoothed_nll(&rows, &[0, 2], 0.0, Some(0)).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(matches!(label_smoothed_nll(&rows, &[0], 0.1, None), Err(TrainError::LengthMismatch { .. })));
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, v) = (5, 9);
        let rows: Vec<SoftDistribution> = (0..l)
            .map(|_| {
                let z: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
                let s: f64 = z.iter().map(|x: &f64| x.exp()).sum();
                SoftDistribution::new(z.iter().map(|x| x.exp() / s).collect()).unwrap()
            })
            .collect();
        let targets: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
        let eps = 0.1;
        let mut naive = 0.0;
        for j in 0..l {
            let mut s = 0.0;
            for i in 0..v {
                s += rows[j].probs()[i].ln();
            }
            naive += -((1.0 - eps) * rows[j].probs()[targets[j]].ln() + eps / v as f64 * s);
        }
        naive /= l as f64;
        assert!((label_smoothed_nll(&rows, &targets, eps, None).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn graph_sum_matches_value_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(3, 4, z.clone()).unwrap());
        let loss = label_smoothed_nll_sum(&mut g, logits, &[1, 0, 3], 0.1).unwrap();
        let rows: Vec<SoftDistribution> = z
            .chunks(4)
            .map(|r| {
                let s: f64 = r.iter().map(|x| x.exp()).sum();
                SoftDistribution::new(r.iter().map(|x| x.exp() / s).collect()).unwrap()
            })
            .collect();
        let expected = 3.0 * label_smoothed_nll(&rows, &[1, 0, 3], 0.1, None).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-10);
    }

    fn toy_lm() -> LmEncoder {
        use crate::lm::{EmbeddingTable, Vocabulary};
        let vocab = Vocabulary::with_sentinels(["a", "b", "c"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..7 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        LmEncoder::identity(vocab, EmbeddingTable::new(7, 4, data).unwrap(), 16).unwrap()
    }

    #[test]
    fn point_masses_on_the_reference_give_minus_one() {
        let lm = toy_lm();
        let batch = vec![
            Example { source: vec![4], target: vec![1, 4, 6, 5, 2] },
            Example { source: vec![5], target: vec![1, 5, 2] },
        ];
        for mode in [PredictionMode::Dense, PredictionMode::Sparsemax, PredictionMode::GumbelSoftmax { tau: 0.1 }] {
            let mut g = Graph::new();
            let logits: Vec<Var> = batch
                .iter()
                .map(|ex| {
                    let n = ex.target.len() - 1;
                    let mut z = vec![0.0; n * 7];
                    for (j, &t) in ex.target[1..].iter().enumerate() {
                        z[j * 7 + t] = 200.0;
                    }
                    g.constant(Tensor::matrix(n, 7, z).unwrap())
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = soft_score_loss(&mut g, &lm, &logits, &batch, mode, &mut rng).unwrap();
            assert!((g.value(loss).item() + 1.0).abs() < 1e-6, "{mode:?}");
        }
    }

    #[test]
    fn loss_stays_in_bounds() {
        let lm = toy_lm();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let len = rng.random_range(1..5);
            let mut target = vec![1];
            target.extend((0..len).map(|_| rng.random_range(3..7)));
            target.push(2);
            let batch = vec![Example { source: vec![4], target }];
            let n = batch[0].target.len() - 1;
            let mut g = Graph::new();
            let z = (0..n * 7).map(|_| rng.random_range(-4.0..4.0)).collect();
            let logits = vec![g.constant(Tensor::matrix(n, 7, z).unwrap())];
            let loss = soft_score_loss(&mut g, &lm, &logits, &batch, PredictionMode::Dense, &mut rng).unwrap();
            let v = g.value(loss).item();
            assert!((-1.0..=1.0).contains(&v), "{v}");
        }
    }
}
