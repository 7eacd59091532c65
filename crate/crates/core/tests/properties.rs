mod common;

use common::{cosine_oracle, overlap_count, pixel_count, pool_oracle};
use ovcd::eval::{f1_from_iou, ConfusionAccumulator, Counts};
use ovcd::feature::{upsample_bilinear, FeatureMap};
use ovcd::fusion::{fuse_inference, refine_pseudo_label};
use ovcd::kmeans::{kmeans, KMeansConfig};
use ovcd::mask::{decode_runs, encode_runs, InstanceMask, LabelRaster, MaskSet};
use ovcd::proposal::{dedup_masks, ChangeProposal, Epoch, ProposalConfig};
use ovcd::prototype::{masked_pool, ClassPrototypes, PrototypeBuildConfig, PrototypeSet};
use ovcd::retrieval::{cosine_sim, retrieve, RetrievalConfig, Strategy as Rule};
use proptest::prelude::*;

fn feature_map(max_side: usize, max_dim: usize) -> impl Strategy<Value = FeatureMap> {
    (1..=max_side, 1..=max_side, 1..=max_dim).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(-10.0f32..10.0, h * w * d).prop_map(move |v| FeatureMap::new(h, w, d, v).unwrap())
    })
}

fn masks(h: usize, w: usize, max_n: usize) -> impl Strategy<Value = Vec<InstanceMask>> {
    prop::collection::vec(
        (0..h, 0..w, 1..=h, 1..=w).prop_map(move |(y, x, dh, dw)| {
            InstanceMask::rect(h, w, y, x, (y + dh).min(h), (x + dw).min(w)).unwrap()
        }),
        0..=max_n,
    )
}

fn blob_mask(h: usize, w: usize) -> impl Strategy<Value = InstanceMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |px| InstanceMask::from_pixels(h, w, &px).unwrap())
}

fn bank(classes: Vec<Vec<Vec<f32>>>) -> PrototypeSet {
    let dim = classes[0][0].len();
    let classes = classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| ClassPrototypes {
            class_index: i as u32 + 1,
            name: format!("c{i}"),
            n_samples: c.len(),
            centroids: c,
        })
        .collect();
    PrototypeSet::new(dim, classes, PrototypeBuildConfig::default()).unwrap()
}

fn bank_strategy(dim: usize, max_classes: usize, max_k: usize) -> impl Strategy<Value = PrototypeSet> {
    prop::collection::vec(
        prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 1..=max_k),
        1..=max_classes,
    )
    .prop_map(bank)
}

proptest! {
    #[test]
    fn rle_round_trips(px in prop::collection::vec(any::<bool>(), 0..300)) {
        let runs = encode_runs(px.iter().copied());
        prop_assert_eq!(runs.iter().sum::<u64>() as usize, px.len());
        prop_assert!(runs.iter().skip(1).all(|&r| r > 0));
        prop_assert_eq!(decode_runs(&runs, px.len()).unwrap(), px);
    }

    #[test]
    fn mask_runs_round_trip(m in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| blob_mask(h, w))) {
        let (h, w) = m.dims();
        prop_assert_eq!(InstanceMask::from_runs(h, w, &m.runs()).unwrap(), m.clone());
        prop_assert_eq!(m.area(), pixel_count(&m));
    }

    #[test]
    fn feature_bytes_round_trip(f in feature_map(6, 5)) {
        let bytes = f.to_bytes();
        prop_assert_eq!(bytes.len(), 20 + 4 * f.data().len());
        prop_assert_eq!(FeatureMap::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn upsampling_stays_within_channel_range(f in feature_map(5, 3), th in 1usize..20, tw in 1usize..20) {
        let up = upsample_bilinear(&f, th, tw).unwrap();
        for c in 0..f.dim() {
            let vals = f.data().iter().skip(c).step_by(f.dim());
            let lo = vals.clone().fold(f32::INFINITY, |a, &b| a.min(b));
            let hi = vals.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            for v in up.data().iter().skip(c).step_by(f.dim()) {
                prop_assert!(*v >= lo - 1e-4 && *v <= hi + 1e-4);
            }
        }
        prop_assert_eq!(upsample_bilinear(&f, f.height(), f.width()).unwrap(), f.clone());
    }

    #[test]
    fn pooling_matches_per_pixel_oracle(
        (f, m, h, w) in (feature_map(5, 4), 1usize..24, 1usize..24)
            .prop_flat_map(|(f, h, w)| (Just(f), blob_mask(h, w), Just(h), Just(w)))
    ) {
        prop_assume!(!m.is_empty());
        let got = masked_pool(&f, &m, h, w).unwrap();
        let want = pool_oracle(&f, &m, h, w);
        for (g, e) in got.iter().zip(&want) {
            prop_assert!((g - e).abs() <= 1e-9 * (1.0 + e.abs()), "{} vs {}", g, e);
        }
    }

    #[test]
    fn pooling_is_linear_in_features(f in feature_map(4, 3), s in 0.1f32..4.0) {
        let m = InstanceMask::full(9, 7).unwrap();
        let scaled = FeatureMap::new(f.height(), f.width(), f.dim(), f.data().iter().map(|v| v * s).collect()).unwrap();
        let a = masked_pool(&f, &m, 9, 7).unwrap();
        let b = masked_pool(&scaled, &m, 9, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * s as f64 - y).abs() < 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn nms_output_is_a_non_overlapping_subset(
        (m1, m2) in (masks(12, 12, 8), masks(12, 12, 8)),
        thr in 0.1f64..1.0,
    ) {
        let cfg = ProposalConfig { nms_iou_threshold: thr, ..Default::default() };
        let s1 = MaskSet::new(12, 12, m1.clone()).unwrap();
        let s2 = MaskSet::new(12, 12, m2.clone()).unwrap();
        let kept = dedup_masks(&s1, &s2, &cfg).unwrap();
        for k in &kept {
            let src = if k.source == Epoch::T1 { &m1 } else { &m2 };
            prop_assert_eq!(&src[k.index], &k.mask);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[..i] {
                prop_assert!(a.mask.iou(&b.mask).unwrap() <= thr);
            }
        }
        // every dropped mask overlaps some kept mask above the threshold
        for m in m1.iter().chain(&m2) {
            if !kept.iter().any(|k| &k.mask == m) {
                prop_assert!(kept.iter().any(|k| k.mask.iou(m).unwrap() > thr));
            }
        }
        let again = MaskSet::new(12, 12, kept.iter().map(|k| k.mask.clone()).collect()).unwrap();
        let twice = dedup_masks(&again, &MaskSet::empty(12, 12).unwrap(), &cfg).unwrap();
        prop_assert_eq!(twice.len(), kept.len());
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        (a, b) in (1usize..8).prop_flat_map(|d| (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d))),
        s in 0.01f64..100.0,
    ) {
        let c = cosine_sim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_sim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((c - cosine_oracle(&a, &b)).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((c - cosine_sim(&scaled, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn retrieval_ignores_query_scale(
        b in bank_strategy(4, 5, 3),
        z in prop::collection::vec(-1.0f64..1.0, 4),
        s in 0.01f64..100.0,
    ) {
        for strategy in [Rule::GlobalMax, Rule::CategoryMean] {
            let cfg = RetrievalConfig { strategy, discard_same_class: false };
            let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
            let (c1, s1) = retrieve(&z, &b, &cfg).unwrap();
            let (c2, s2) = retrieve(&scaled, &b, &cfg).unwrap();
            prop_assert!(c1 == c2 || (s1 - s2).abs() < 1e-9);
        }
    }

    #[test]
    fn single_prototype_strategies_agree(
        b in bank_strategy(3, 6, 1),
        z in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let max = retrieve(&z, &b, &RetrievalConfig { strategy: Rule::GlobalMax, discard_same_class: false }).unwrap();
        let mean = retrieve(&z, &b, &RetrievalConfig { strategy: Rule::CategoryMean, discard_same_class: false }).unwrap();
        prop_assert_eq!(max, mean);
    }

    #[test]
    fn refinement_is_monotone_and_bounded(
        (coarse, props) in (blob_mask(10, 10), masks(10, 10, 6)),
        g1 in 0.0f64..1.0,
        g2 in 0.0f64..1.0,
    ) {
        let set = MaskSet::new(10, 10, props).unwrap();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = refine_pseudo_label(&coarse, &set, lo).unwrap();
        let b = refine_pseudo_label(&coarse, &set, hi).unwrap();
        prop_assert!(b.is_subset_of(&a).unwrap());
        prop_assert!(a.is_subset_of(&set.union()).unwrap());
        // independent integer check of which proposals were admitted
        let mut want = InstanceMask::empty(10, 10).unwrap();
        for m in set.masks() {
            let area = pixel_count(m);
            if area > 0 && overlap_count(m, &coarse) as f64 > lo * area as f64 {
                want.union_with(m).unwrap();
            }
        }
        prop_assert_eq!(a, want);
    }

    #[test]
    fn fusion_is_monotone_in_gamma(
        (region, props) in (blob_mask(10, 10), masks(10, 10, 6)),
        g1 in 0.0f64..1.0,
        g2 in 0.0f64..1.0,
    ) {
        let ps: Vec<ChangeProposal> = props
            .into_iter()
            .map(|mask| ChangeProposal { mask, z1: vec![], z2: vec![], change_score: 0.0, source: Epoch::T1 })
            .collect();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = fuse_inference(&ps, &region, lo).unwrap();
        let b = fuse_inference(&ps, &region, hi).unwrap();
        prop_assert!(b.len() <= a.len());
        prop_assert!(b.iter().all(|p| a.contains(p)));
    }

    #[test]
    fn f1_and_iou_agree_on_any_counts(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let c = Counts { tp, fp, fn_ };
        prop_assert!((c.f1() - f1_from_iou(c.iou())).abs() < 1e-9);
        prop_assert!(c.f1() >= c.iou());
    }

    #[test]
    fn accumulator_merge_commutes(
        p in prop::collection::vec(0u32..4, 16),
        g in prop::collection::vec(0u32..4, 16),
        q in prop::collection::vec(0u32..4, 16),
    ) {
        let r = |v: Vec<u32>| LabelRaster::from_labels(4, 4, v).unwrap();
        let (p, g, q) = (r(p), r(g), r(q));
        let mut a = ConfusionAccumulator::new(3);
        a.add_labels(&p, &g).unwrap();
        let mut b = ConfusionAccumulator::new(3);
        b.add_labels(&q, &g).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b;
        ba.merge(&a).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn kmeans_inertia_never_increases(
        pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..40),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = KMeansConfig { k, max_iters: 100, seed };
        let r = kmeans(&pts, &cfg).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert_eq!(&r, &kmeans(&pts, &cfg).unwrap());
        if r.converged {
            for (j, c) in r.centroids.iter().enumerate() {
                let members: Vec<&Vec<f64>> = pts.iter().zip(&r.assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
                prop_assert!(!members.is_empty());
                for d in 0..2 {
                    let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                    prop_assert!((c[d] - mean).abs() < 1e-9);
                }
            }
        }
    }
}

fn regions(max_per_class: usize) -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    prop::collection::vec(
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..=max_per_class),
        1..=3,
    )
}

proptest! {
    #[test]
    fn centroids_lie_in_class_bounding_box(per_class in regions(12), k in 1usize..6, seed in any::<u64>()) {
        use ovcd::dataset::CategoryVocabulary;
        use ovcd::prototype::{cluster_regions, RegionFeature};
        let vocab = CategoryVocabulary::new((1..=per_class.len()).map(|i| format!("c{i}"))).unwrap();
        let feats: Vec<RegionFeature> = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, vs)| {
                vs.iter().enumerate().map(move |(i, v)| RegionFeature {
                    vector: v.clone(),
                    category: c as u32 + 1,
                    source_id: format!("{c}/{i}"),
                })
            })
            .collect();
        let cfg = PrototypeBuildConfig { k, seed, ..Default::default() };
        let bank = cluster_regions(&feats, &vocab, &cfg).unwrap();
        for (class, vs) in bank.classes().iter().zip(&per_class) {
            prop_assert!(!class.centroids.is_empty() && class.centroids.len() <= k);
            for c in &class.centroids {
                for d in 0..3 {
                    let lo = vs.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min) as f32;
                    let hi = vs.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max) as f32;
                    prop_assert!(c[d] >= lo - 1e-5 && c[d] <= hi + 1e-5);
                }
            }
        }
        prop_assert_eq!(&bank, &cluster_regions(&feats, &vocab, &cfg).unwrap());
    }

    #[test]
    fn global_max_similarity_dominates_category_mean(
        b in bank_strategy(4, 5, 4),
        z in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let (_, smax) = retrieve(&z, &b, &RetrievalConfig { strategy: Rule::GlobalMax, discard_same_class: false }).unwrap();
        let (_, smean) = retrieve(&z, &b, &RetrievalConfig { strategy: Rule::CategoryMean, discard_same_class: false }).unwrap();
        prop_assert!(smax >= smean - 1e-12);
    }

    #[test]
    fn rasterized_pixels_are_covered_by_proposals(
        props in masks(10, 10, 6),
        scores in prop::collection::vec(-1.0f64..1.0, 6),
        classes in prop::collection::vec((1u32..5, 1u32..5), 6),
    ) {
        use ovcd::retrieval::{rasterize, CategoryAssignment};
        let ps: Vec<ChangeProposal> = props
            .into_iter()
            .zip(&scores)
            .map(|(mask, &s)| ChangeProposal { mask, z1: vec![], z2: vec![], change_score: s, source: Epoch::T1 })
            .collect();
        let asg: Vec<CategoryAssignment> = ps
            .iter()
            .enumerate()
            .map(|(i, _)| CategoryAssignment { proposal_id: i, c1: classes[i].0, c2: classes[i].1, sim1: 0.0, sim2: 0.0 })
            .collect();
        let map = rasterize(&asg, &ps, 10, 10).unwrap();
        let mut covered = InstanceMask::empty(10, 10).unwrap();
        for p in &ps {
            covered.union_with(&p.mask).unwrap();
        }
        prop_assert_eq!(map.t1.support(), covered.clone());
        prop_assert_eq!(map.t2.support(), covered);
        // the owner of each pixel is a highest-scoring proposal covering it
        for y in 0..10 {
            for x in 0..10 {
                let best = ps
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.mask.get(y, x))
                    .max_by(|a, b| a.1.change_score.total_cmp(&b.1.change_score).then(b.0.cmp(&a.0)));
                if let Some((i, _)) = best {
                    prop_assert_eq!((map.t1.get(y, x), map.t2.get(y, x)), classes[i]);
                }
            }
        }
        let mut reversed = asg.clone();
        reversed.reverse();
        prop_assert_eq!(rasterize(&reversed, &ps, 10, 10).unwrap(), map);
    }

    #[test]
    fn overlap_ratio_grows_with_region(
        (m, a, b) in (blob_mask(8, 8), blob_mask(8, 8), blob_mask(8, 8)),
    ) {
        use ovcd::fusion::overlap_ratio;
        prop_assume!(!m.is_empty());
        let mut wider = a.clone();
        wider.union_with(&b).unwrap();
        let r = overlap_ratio(&m, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(overlap_ratio(&m, &wider).unwrap() >= r);
        prop_assert_eq!(r, overlap_count(&m, &a) as f64 / pixel_count(&m) as f64);
    }
}
