use h2t_core::features::LayerSpan;
use h2t_core::selector::{layerwise_scores, relevance_scores, select_fraction, select_layerwise, select_offset_window, RelevanceScores, Strategy};
use h2t_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores_of(v: &[f32]) -> RelevanceScores {
    relevance_scores(&Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()).unwrap()
}

fn random_spans(rng: &mut ChaCha8Rng) -> Vec<LayerSpan> {
    let mut start = 0;
    (0..rng.random_range(1..7))
        .map(|i| {
            let len = rng.random_range(1..12);
            let s = LayerSpan { name: format!("l{i}"), start, len };
            start += len;
            s
        })
        .collect()
}

/// Indices sorted by score (descending), stable on ties.
fn sorted_oracle(v: &[f32]) -> Vec<usize> {
    let mut pairs: Vec<(f32, usize)> = v.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    pairs.into_iter().map(|(_, i)| i).collect()
}

#[test]
fn layer_means_match_grouping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let spans = random_spans(&mut rng);
        let dim: usize = spans.iter().map(|s| s.len).sum();
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0..3.0)).collect();
        let got = layerwise_scores(&scores_of(&v), &spans).unwrap();
        for (s, g) in spans.iter().zip(got) {
            let mut sum = 0.0f64;
            for i in 0..s.len {
                sum += v[s.start + i] as f64;
            }
            assert!((g - sum / s.len as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn layerwise_selection_matches_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let spans = random_spans(&mut rng);
        let dim: usize = spans.iter().map(|s| s.len).sum();
        let smallest = spans.iter().map(|s| s.len).min().unwrap();
        let budget = rng.random_range(smallest..=dim);
        let ls: Vec<f64> = spans.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let got = select_layerwise(&ls, &spans, budget, Strategy::LayerMean).unwrap();

        // Repeatedly take the best-scoring remaining layer that still fits.
        let mut taken = vec![false; spans.len()];
        let mut used = 0;
        loop {
            let pick = (0..spans.len())
                .filter(|&l| !taken[l] && used + spans[l].len <= budget)
                .max_by(|&a, &b| ls[a].total_cmp(&ls[b]).then(b.cmp(&a)));
            let Some(l) = pick else { break };
            taken[l] = true;
            used += spans[l].len;
        }
        let mut expected = vec![false; dim];
        for (l, s) in spans.iter().enumerate() {
            if taken[l] {
                expected[s.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        assert_eq!(got.bitmap, expected);
        assert_eq!(got.kept, used);
        assert!(got.kept <= budget);
    }
}

#[test]
fn fraction_and_offset_windows_match_sorted_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let dim = rng.random_range(2..80);
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let order = sorted_oracle(&v);
        let s = scores_of(&v);

        let f: f64 = rng.random_range(0.01..=1.0);
        let k = ((f * dim as f64).round() as usize).max(1);
        let sel = select_fraction(&s, f).unwrap();
        let mut want = order[..k].to_vec();
        want.sort_unstable();
        assert_eq!(sel.indices(), want);

        let window = rng.random_range(1..=dim);
        let offset = rng.random_range(0..=dim - window);
        let sel = select_offset_window(&s, window, offset).unwrap();
        let mut want = order[offset..offset + window].to_vec();
        want.sort_unstable();
        assert_eq!(sel.indices(), want);
    }
}

#[test]
fn bottom_window_and_small_examples() {
    let s = scores_of(&[0.1, 0.9, 0.5, 0.3]);
    assert_eq!(select_offset_window(&s, 2, 2).unwrap().indices(), vec![0, 3]);
    assert_eq!(select_fraction(&s, 1.0).unwrap().bitmap, vec![true; 4]);
    let spans = vec![
        LayerSpan { name: "a".into(), start: 0, len: 2 },
        LayerSpan { name: "b".into(), start: 2, len: 2 },
    ];
    let z = scores_of(&[0.0, 0.0, 2.0, 2.0]);
    let ls = layerwise_scores(&z, &spans).unwrap();
    assert_eq!(ls, vec![0.0, 2.0]);
    assert_eq!(select_layerwise(&ls, &spans, 2, Strategy::LayerMean).unwrap().indices(), vec![2, 3]);
    assert!(select_layerwise(&ls, &spans, 1, Strategy::LayerMean).is_err());
}
