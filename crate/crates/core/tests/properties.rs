use facetx_core::extractors::{ExtractorParams, Pyramid};
use facetx_core::fftm::{correspondence_matrix, transform_tensors};
use facetx_core::fgm::{exchange_pair, GeneratorParams};
use facetx_core::gradcheck::{finite_diff_check, FdOptions};
use facetx_core::graph::{Graph, NodeId};
use facetx_core::losses::{feature_loss, total_loss, LossComponents, LossWeights};
use facetx_core::model::FaceTransformer;
use facetx_core::synth::{pair_seed, sample_pair_sized};
use facetx_core::{Config, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn softmax(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let n = g.constant(x.clone()).unwrap();
    let s = g.softmax_rows(n).unwrap();
    g.value(s).clone()
}

fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let wn = g.constant(w.clone())?;
    let p = g.mul(x, wn)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, mag in -300i32..300) {
        let mut r = rng(seed);
        let scale = 10f64.powf(f64::from(mag) / 100.0);
        let x = Tensor::from_fn(&[rows, cols], |_| r.gen_range(-1.0..1.0) * scale);
        let s = softmax(&x);
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn fold_and_unfold_invert_each_other(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 4]), c in 1usize..4, gh in 1usize..5, gw in 1usize..5) {
        let mut r = rng(seed);
        let (h, w) = (gh * k, gw * k);
        let x = Tensor::uniform(&[c, h, w], -5.0, 5.0, &mut r);
        let p = Tensor::uniform(&[gh * gw, c * k * k], -5.0, 5.0, &mut r);
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let u = g.unfold(xn, k, k).unwrap();
        let back = g.fold(u, k, k, h, w).unwrap();
        prop_assert_eq!(g.value(back), &x);
        let pn = g.constant(p.clone()).unwrap();
        let f = g.fold(pn, k, k, h, w).unwrap();
        let again = g.unfold(f, k, k).unwrap();
        prop_assert_eq!(g.value(again), &p);
    }

    #[test]
    fn correspondence_is_stochastic_and_scale_free(seed in any::<u64>(), n in 1usize..12, m in 1usize..12, d in 1usize..8, big in any::<bool>()) {
        let mut r = rng(seed);
        let mag = if big { 1e6 } else { 1.0 };
        let q = Tensor::from_fn(&[n, d], |_| r.gen_range(-1.0..1.0) * mag);
        let k = Tensor::from_fn(&[m, d], |_| r.gen_range(-1.0..1.0) * mag);
        let c = correspondence_matrix(&q, &k).unwrap();
        for row in c.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        for a in [0.1, 1.0, 10.0] {
            for b in [0.1, 1.0, 10.0] {
                let qa = Tensor::from_fn(q.shape(), |i| q.data()[i] * a);
                let kb = Tensor::from_fn(k.shape(), |i| k.data()[i] * b);
                prop_assert!(correspondence_matrix(&qa, &kb).unwrap().max_abs_diff(&c) <= 1e-9);
            }
        }
    }

    #[test]
    fn identity_correspondence_is_an_exact_identity(seed in any::<u64>(), h in 1usize..5, c4 in 1usize..4) {
        let mut r = rng(seed);
        let c = 4 * c4;
        let v = Pyramid {
            v1: Tensor::uniform(&[c, h, h], -3.0, 3.0, &mut r),
            v2: Tensor::uniform(&[c / 2, 2 * h, 2 * h], -3.0, 3.0, &mut r),
            v3: Tensor::uniform(&[c / 4, 4 * h, 4 * h], -3.0, 3.0, &mut r),
        };
        prop_assert_eq!(transform_tensors(&Tensor::eye(h * h), &v).unwrap(), v);
    }

    #[test]
    fn feature_loss_is_nonnegative_and_zero_only_on_equal_inputs(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let a = Tensor::uniform(&[n], -2.0, 2.0, &mut r);
        let mut b = a.clone();
        let eval = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let (xn, yn) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
            let l = feature_loss(&mut g, xn, yn).unwrap();
            g.item(l)
        };
        prop_assert_eq!(eval(&a, &b), 0.0);
        let i = r.gen_range(0..n);
        b.data_mut()[i] += 0.5;
        prop_assert!(eval(&a, &b) > 0.0);
    }

    #[test]
    fn total_matches_recomputation_from_components(l in prop::array::uniform4(0.0f64..1e3)) {
        let c = LossComponents { l_f: l[0], l_adv_g: l[1], l_perc: l[2], l_context: l[3] };
        let t = total_loss(&c, &LossWeights::default()).unwrap();
        prop_assert!((t - (5.0 * l[0] + 10.0 * l[1] + 0.001 * l[2] + l[3])).abs() <= 1e-12 * t.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let wo = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
        let ws = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let rep = finite_diff_check(
            |g, p| {
                let y = g.conv2d(p[0], p[1], 1, 1)?;
                let y = g.tanh(y)?;
                let y = g.upsample(y, 2)?;
                let conv_term = weighted_sum(g, y, &wo)?;
                let at = g.transpose(p[2])?;
                let m = g.matmul(p[2], at)?;
                let s = g.softmax_rows(m)?;
                let n = g.normalize_rows(s, 1e-8)?;
                let attn_term = weighted_sum(g, n, &ws)?;
                g.add(conv_term, attn_term)
            },
            &[("x".into(), x), ("w".into(), w), ("a".into(), a)],
            &FdOptions::default(),
        ).unwrap();
        prop_assert!(rep.passed(), "worst {}", rep.worst());
    }

    #[test]
    fn fan_out_gradients_add_up(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[3, 4], 0.2, 2.0, &mut r);
        let branch_f = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            let e = g.exp(x)?;
            g.mean(e)
        };
        let branch_g = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            let l = g.log(x)?;
            let t = g.transpose(l)?;
            let s = g.softmax_rows(t)?;
            let c = g.col_max(s)?;
            g.sum(c)
        };
        let grad_of = |both: bool, first: bool| {
            let mut g = Graph::new();
            let v = g.variable(x.clone()).unwrap();
            let out = match (both, first) {
                (true, _) => {
                    let a = branch_f(&mut g, v).unwrap();
                    let b = branch_g(&mut g, v).unwrap();
                    g.add(a, b).unwrap()
                }
                (false, true) => branch_f(&mut g, v).unwrap(),
                (false, false) => branch_g(&mut g, v).unwrap(),
            };
            g.backward(out).unwrap().wrt(v)
        };
        let total = grad_of(true, true);
        let (gf, gg) = (grad_of(false, true), grad_of(false, false));
        for i in 0..total.numel() {
            prop_assert!((total.data()[i] - gf.data()[i] - gg.data()[i]).abs() <= 1e-12);
        }
        let rep = finite_diff_check(
            |g, p| {
                let a = branch_f(g, p[0])?;
                let b = branch_g(g, p[0])?;
                g.add(a, b)
            },
            &[("x".into(), x.clone())],
            &FdOptions::default(),
        ).unwrap();
        prop_assert!(rep.passed(), "worst {}", rep.worst());
    }

    #[test]
    fn extractor_shapes_follow_the_scale_ratios(seed in any::<u64>(), h in 1usize..5, c4 in 1usize..5, d in 1usize..9, classes in 2usize..6) {
        let mut r = rng(seed);
        let c = 4 * c4;
        let ext = ExtractorParams::new(c, d, classes, &mut rng(seed ^ 1), &mut r);
        let face = Tensor::uniform(&[3, 4 * h, 4 * h], -1.0, 1.0, &mut r);
        let sem = {
            let mut s = Tensor::zeros(&[classes, 4 * h, 4 * h]);
            for p in 0..16 * h * h {
                let k = r.gen_range(0..classes);
                s.data_mut()[k * 16 * h * h + p] = 1.0;
            }
            s
        };
        let mut g = Graph::new();
        let b = ext.bind(&mut g, false).unwrap();
        let f = g.constant(face).unwrap();
        let sn = g.constant(sem).unwrap();
        let pyr = ext.pyramid_extract(&mut g, &b, f).unwrap();
        prop_assert_eq!(g.shape(pyr.v1), &[c, h, h]);
        prop_assert_eq!(g.shape(pyr.v2), &[c / 2, 2 * h, 2 * h]);
        prop_assert_eq!(g.shape(pyr.v3), &[c / 4, 4 * h, 4 * h]);
        let q = ext.image_features(&mut g, &b, f).unwrap();
        let s = ext.semantic_features(&mut g, &b, sn).unwrap();
        prop_assert_eq!(g.shape(q), &[d, h, h]);
        prop_assert_eq!(g.shape(q), g.shape(s));
    }

    #[test]
    fn generator_output_is_bounded_and_exchange_keeps_shapes(seed in any::<u64>(), mag in 0.1f64..1e3) {
        let geo = Config::micro().geometry;
        let mut r = rng(seed);
        let gen = GeneratorParams::new(&geo, &mut r);
        let (c, h) = (geo.channels, geo.feat_h);
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -mag, mag, &mut r);
        let t = Pyramid { v1: u(&[c, h, h]), v2: u(&[c / 2, 2 * h, 2 * h]), v3: u(&[c / 4, 4 * h, 4 * h]) };
        let bg = Pyramid { v1: u(&[c, h, h]), v2: u(&[c / 2, 2 * h, 2 * h]), v3: u(&[c / 4, 4 * h, 4 * h]) };
        let s = u(&[geo.d, h, h]);
        let hi = u(&[geo.gen_widths[1], 2 * h, 2 * h]);
        let lo = u(&[geo.gen_widths[0], h, h]);
        let mut g = Graph::new();
        let b = g.bind(&gen.store, false).unwrap();
        let tp = t.try_map(|x| g.constant(x)).unwrap();
        let bp = bg.try_map(|x| g.constant(x)).unwrap();
        let sn = g.constant(s).unwrap();
        let img = gen.generate(&mut g, &b, sn, &tp, &bp).unwrap();
        prop_assert_eq!(g.shape(img), &[3, 4 * h, 4 * h]);
        prop_assert!(g.value(img).data().iter().all(|v| v.abs() <= 1.0));
        let (hn, ln) = (g.constant(hi.clone()).unwrap(), g.constant(lo.clone()).unwrap());
        let (h2, l2) = exchange_pair(&mut g, &b, &gen.exchange_ids()[0][0], hn, ln).unwrap();
        prop_assert_eq!(g.shape(h2), hi.shape());
        prop_assert_eq!(g.shape(l2), lo.shape());
    }
}

#[test]
fn frozen_pyramid_survives_training_steps() {
    let config = Config::micro();
    let mut model = FaceTransformer::new(config.clone()).unwrap();
    let before = model.extractors.pyramid.store.fingerprint();
    let trainable_before: Vec<_> = model.trainable().iter().map(|s| s.fingerprint()).collect();
    let pairs: Vec<_> = (0..3).map(|i| sample_pair_sized(pair_seed(5, i), 8).unwrap()).collect();
    for p in &pairs {
        model.train_step(&[p]).unwrap();
    }
    assert_eq!(model.extractors.pyramid.store.fingerprint(), before);
    let after: Vec<_> = model.trainable().iter().map(|s| s.fingerprint()).collect();
    assert!(trainable_before.iter().zip(&after).all(|(a, b)| a != b));
}
