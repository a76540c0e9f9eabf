use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;
use simat_core::dataset::{compute_weights, filter_objects, split_dataset, BuildConfig, SceneGraphEntry};
use simat_core::geometry::top_k;
use simat_core::train::{infonce_loss, normalized_loss_grad, LossForm};
use simat_core::transform::{apply_transform, word_delta};
use simat_core::{EmbeddingMatrix, Field, ImageRecord, Split, TransformationQuery, Triplet, WordTable};

fn brute_top_k(query: &[f64], rows: &[Vec<f32>], ids: &[String], k: usize, exclude: &[&str]) -> Vec<(String, f64)> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = rows
        .iter()
        .zip(ids)
        .filter(|(_, id)| !exclude.contains(&id.as_str()))
        .map(|(r, id)| {
            let rn = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            let d: f64 = r.iter().zip(query).map(|(&a, b)| f64::from(a) * b).sum();
            let s = if rn == 0.0 { 0.0 } else { (d / (qn * rn)).clamp(-1.0, 1.0) };
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn matrix_strategy(max_rows: usize, max_dim: usize) -> impl Strategy<Value = (Vec<Vec<f32>>, usize)> {
    (1..=max_rows, 1..=max_dim).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), n),
            Just(d),
        )
    })
}

fn ids(n: usize) -> Vec<String> {
    // Not sorted by row order, so id tie-breaks are exercised.
    (0..n).map(|i| format!("x{:03}", (i * 7919) % 1000)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_matches_full_sort((mut rows, d) in matrix_strategy(40, 8), k in 1usize..12, dup in any::<bool>(), seed in any::<u64>()) {
        if dup && rows.len() > 1 {
            let copy = rows[0].clone();
            rows[1] = copy;
        }
        let n = rows.len();
        let ids = ids(n);
        let m = EmbeddingMatrix::from_rows(&rows, d, false).unwrap();
        let query: Vec<f64> = (0..d).map(|j| ((seed >> (j % 60)) & 0xff) as f64 - 127.5).collect();
        let exclude: Vec<&str> = ids.iter().step_by(5).map(String::as_str).collect();
        let got = top_k(&query, &m, &ids, k, &exclude);
        let want = brute_top_k(&query, &rows, &ids, k, &exclude);
        if want.is_empty() {
            prop_assert!(got.is_err());
        } else {
            let got = got.unwrap();
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                prop_assert_eq!(&g.item_id, &w.0);
                prop_assert!((g.similarity - w.1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn top_k_prefix_and_scale_invariance((rows, d) in matrix_strategy(30, 6), k in 1usize..10, scale in 0.01f64..100.0) {
        let ids = ids(rows.len());
        let m = EmbeddingMatrix::from_rows(&rows, d, false).unwrap();
        let query: Vec<f64> = (0..d).map(|j| (j as f64 + 0.5).sin()).collect();
        let scaled: Vec<f64> = query.iter().map(|v| v * scale).collect();
        let a = top_k(&query, &m, &ids, k, &[]).unwrap();
        let b = top_k(&query, &m, &ids, k + 1, &[]).unwrap();
        prop_assert_eq!(&a[..], &b[..a.len()]);
        let c = top_k(&scaled, &m, &ids, k, &[]).unwrap();
        let ia: Vec<&str> = a.iter().map(|h| h.item_id.as_str()).collect();
        let ic: Vec<&str> = c.iter().map(|h| h.item_id.as_str()).collect();
        prop_assert_eq!(ia, ic);
    }

    #[test]
    fn smat_round_trip_is_bit_exact((rows, d) in matrix_strategy(20, 16), normalize in any::<bool>()) {
        let mut m = EmbeddingMatrix::from_rows(&rows, d, false).unwrap();
        if normalize && (0..m.rows()).all(|i| m.row_norm(i) > 0.0) {
            m = m.normalize_rows().unwrap();
        }
        let bytes = m.to_smat_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * m.rows() * m.dim());
        let back = EmbeddingMatrix::from_smat_bytes(&bytes, Path::new("m.smat")).unwrap();
        prop_assert_eq!(back.is_normalized(), m.is_normalized());
        let a: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn weights_sum_to_one_and_match_groups(groups in prop::collection::vec((0usize..3, 0usize..3, 1usize..6), 1..8), rot in 0usize..50) {
        let mut queries = Vec::new();
        for (g, &(f, w, count)) in groups.iter().enumerate() {
            for c in 0..count {
                queries.push(TransformationQuery {
                    query_id: format!("q{}_{}", g, c),
                    image_id: format!("i{}_{}", g, c),
                    field: Field::ALL[f],
                    source_word: format!("a{}", w),
                    target_word: format!("b{}", g),
                    target_caption_id: "c".into(),
                    weight: 0.0,
                });
            }
        }
        let weighted = compute_weights(&queries);
        let total: f64 = weighted.iter().map(|q| q.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        // Brute force: weight = (1/sqrt(group size)) / sum over all queries.
        let mut sizes: HashMap<(Field, String, String), usize> = HashMap::new();
        for q in &queries {
            *sizes.entry((q.field, q.source_word.clone(), q.target_word.clone())).or_default() += 1;
        }
        let z: f64 = queries.iter().map(|q| 1.0 / (sizes[&(q.field, q.source_word.clone(), q.target_word.clone())] as f64).sqrt()).sum();
        for q in &weighted {
            let want = 1.0 / (sizes[&(q.field, q.source_word.clone(), q.target_word.clone())] as f64).sqrt() / z;
            prop_assert!((q.weight - want).abs() < 1e-12);
        }
        // Order of the input does not change any query's weight.
        let mut rotated = queries.clone();
        let r = rot % rotated.len();
        rotated.rotate_left(r);
        let by_id: BTreeMap<String, f64> = compute_weights(&rotated).into_iter().map(|q| (q.query_id, q.weight)).collect();
        for q in &weighted {
            prop_assert!((by_id[&q.query_id] - q.weight).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_objects_matches_brute_force(entries in prop::collection::vec((0usize..3, 0usize..3, 0usize..6), 0..60), cap in 1usize..4) {
        let entries: Vec<SceneGraphEntry> = entries
            .iter()
            .enumerate()
            .map(|(i, &(s, r, o))| SceneGraphEntry::new(&format!("img{}", i), &format!("s{}", s), &format!("r{}", r), &format!("o{}", o)))
            .collect();
        let mut cfg = BuildConfig::new(BTreeSet::new(), BTreeSet::new());
        cfg.max_objects_per_pair = cap;
        let got = filter_objects(&entries, &cfg);

        let rels = |o: &str| entries.iter().filter(|e| e.triplet.object == o).map(|e| e.triplet.relation.clone()).collect::<BTreeSet<_>>().len();
        let step1: Vec<&SceneGraphEntry> = entries.iter().filter(|e| rels(&e.triplet.object) >= 2).collect();
        let want: Vec<SceneGraphEntry> = step1
            .iter()
            .filter(|e| {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for x in step1.iter().filter(|x| x.triplet.subject == e.triplet.subject && x.triplet.relation == e.triplet.relation) {
                    *counts.entry(&x.triplet.object).or_default() += 1;
                }
                let mine = counts[e.triplet.object.as_str()];
                // Objects that beat this one: higher count, or same count and smaller token.
                let better = counts.iter().filter(|(o, &c)| c > mine || (c == mine && **o < e.triplet.object.as_str())).count();
                better < cap
            })
            .map(|e| (*e).clone())
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn split_partitions_images(n in 0usize..60, seed in any::<u64>()) {
        let images: Vec<ImageRecord> = (0..n)
            .map(|i| ImageRecord { image_id: format!("i{:02}", i), triplet: Triplet::new("a", "b", "c"), split: Split::Dev, embedding_row: i })
            .collect();
        let (dev, test) = split_dataset(&images, seed);
        prop_assert_eq!(dev.len(), n.div_ceil(2));
        prop_assert_eq!(dev.len() + test.len(), n);
        prop_assert!(dev.iter().all(|r| r.split == Split::Dev));
        prop_assert!(test.iter().all(|r| r.split == Split::Test));
        let all: BTreeSet<&str> = dev.iter().chain(&test).map(|r| r.image_id.as_str()).collect();
        prop_assert_eq!(all.len(), n);
        let mut reversed = images.clone();
        reversed.reverse();
        prop_assert_eq!(split_dataset(&reversed, seed), (dev, test));
    }

    #[test]
    fn loss_is_symmetric_and_permutation_invariant(n in 1usize..7, d in 1usize..6, seed in any::<u64>(), tau in 0.05f64..2.0) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = simat_core::train::random_batch(n, d, &mut rng);
        let b = simat_core::train::random_batch(n, d, &mut rng);
        prop_assume!(a.rows().into_iter().chain(b.rows()).all(|r| r.dot(&r) > 1e-6));
        let unit = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut r in m.rows_mut() {
                let norm = r.dot(&r).sqrt();
                r.mapv_inplace(|v| v / norm);
            }
            m
        };
        let (ua, ub) = (unit(&a), unit(&b));
        let l = infonce_loss(ua.view(), ub.view(), tau).unwrap();
        let swapped = infonce_loss(ub.view(), ua.view(), tau).unwrap();
        prop_assert!((l - swapped).abs() < 1e-12);
        let perm: Vec<usize> = (0..n).rev().collect();
        let pa = ua.select(ndarray::Axis(0), &perm);
        let pb = ub.select(ndarray::Axis(0), &perm);
        prop_assert!((infonce_loss(pa.view(), pb.view(), tau).unwrap() - l).abs() < 1e-12);
        // Raw inputs: scaling a row leaves the loss unchanged.
        let mut scaled = a.clone();
        scaled.row_mut(0).mapv_inplace(|v| v * 3.5);
        let l1 = normalized_loss_grad(a.view(), b.view(), tau, LossForm::InfoNce).unwrap().loss;
        let l2 = normalized_loss_grad(scaled.view(), b.view(), tau, LossForm::InfoNce).unwrap().loss;
        prop_assert!((l1 - l2).abs() < 1e-12);
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn delta_is_antisymmetric_and_linear(vals in prop::collection::vec(-3.0f32..3.0, 6), lambda in 0.0f64..5.0) {
        let m = EmbeddingMatrix::from_rows(&[&vals[..3], &vals[3..]], 3, false).unwrap();
        let words = WordTable::new(vec!["a".into(), "b".into()], m).unwrap();
        let ab = word_delta(&words, "a", "b").unwrap();
        let ba = word_delta(&words, "b", "a").unwrap();
        for (x, y) in ab.vector.iter().zip(&ba.vector) {
            prop_assert_eq!(*x, -*y);
        }
        let aa = word_delta(&words, "a", "a").unwrap();
        prop_assert!(aa.vector.iter().all(|&v| v == 0.0));
        let img = [0.5, -1.0, 2.0];
        let out = apply_transform(&img, &ab, lambda).unwrap();
        for j in 0..3 {
            prop_assert_eq!(out[j], img[j] + lambda * ab.vector[j]);
        }
        // Composition: a -> b then b -> a returns to the start.
        let back = apply_transform(&apply_transform(&img, &ab, 1.0).unwrap(), &ba, 1.0).unwrap();
        for j in 0..3 {
            prop_assert!((back[j] - img[j]).abs() < 1e-12);
        }
    }
}
