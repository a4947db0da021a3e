use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use diffdepth::diffusion::{
    aggregate_target, FeatureAggregator, FeatureLevel, FeaturePyramid, NoiseSchedule, ScheduleKind,
};
use diffdepth::head::{DecoderConfig, DepthMap, DepthRegressor, UpsamplingDecoder};
use diffdepth::metrics::{compute_metrics, silog_loss, MetricReport, SilogParams, ValidityMask};
use diffdepth::nn::{Activation, ParamStore};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn t_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

// naive per-pixel reference, written independently of the accumulator
fn reference(pred: &[f64], gt: &[f64], mask: &[bool]) -> MetricReport {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| idx.iter().map(|&i| f(pred[i], gt[i])).sum::<f64>() / n;
    let within = |k: i32| {
        idx.iter()
            .filter(|&&i| {
                let r = if pred[i] > gt[i] {
                    pred[i] / gt[i]
                } else {
                    gt[i] / pred[i]
                };
                r < 1.25f64.powi(k)
            })
            .count() as f64
            / n
    };
    MetricReport {
        abs_rel: mean(&|p, g| (p - g).abs() / g),
        sq_rel: mean(&|p, g| (p - g).powi(2) / g),
        rmse: mean(&|p, g| (p - g).powi(2)).sqrt(),
        rmse_log: mean(&|p, g| (p / g).ln().powi(2)).sqrt(),
        log10: mean(&|p, g| ((p / g).ln() / std::f64::consts::LN_10).abs()),
        delta1: within(1),
        delta2: within(2),
        delta3: within(3),
        n_pixels: idx.len(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn depth_triplet() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01f64..80.0, n),
            prop::collection::vec(0.01f64..80.0, n),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
            .prop_filter("needs a valid pixel", |(_, _, m)| m.iter().any(|&v| v))
    })
}

fn metrics(p: &[f64], g: &[f64], m: &[bool]) -> MetricReport {
    let n = g.len();
    compute_metrics(
        &DepthMap::new(1, n, p.to_vec()).unwrap(),
        &DepthMap::new(1, n, g.to_vec()).unwrap(),
        &ValidityMask {
            height: 1,
            width: n,
            data: m.to_vec(),
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn schedule_is_strictly_monotone(
        t in 2usize..1200,
        start in 1e-5f64..5e-3,
        span in 1e-4f64..0.05,
        scaled in any::<bool>(),
    ) {
        let kind = if scaled { ScheduleKind::ScaledLinear } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(t, start, start + span, kind).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), t);
        for w in ab.windows(2) {
            prop_assert!(w[1] < w[0]);
            prop_assert!((1.0 - w[1]).sqrt() > (1.0 - w[0]).sqrt());
        }
    }

    #[test]
    fn q_sample_is_jointly_linear(t in 0usize..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..500) {
        let dev = Device::Cpu;
        let s = NoiseSchedule::new(1000, 0.00085, 0.012, ScheduleKind::ScaledLinear).unwrap();
        let draw = |k: u64| {
            let v: Vec<f64> = (0..32).map(|i| (((seed * 7 + k) * 131 + i) as f64 * 0.37).sin()).collect();
            Tensor::from_vec(v, (1, 2, 4, 4), &dev).unwrap()
        };
        let (z0, z1, e0, e1) = (draw(0), draw(1), draw(2), draw(3));
        let mix = |x: &Tensor, y: &Tensor| ((x * a).unwrap() + (y * b).unwrap()).unwrap();
        let lhs = t_f64(&s.q_sample_tensor(&mix(&z0, &z1), t, &mix(&e0, &e1)).unwrap());
        let r0 = s.q_sample_tensor(&z0, t, &e0).unwrap();
        let r1 = s.q_sample_tensor(&z1, t, &e1).unwrap();
        let rhs = t_f64(&mix(&r0, &r1));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-12, "{} vs {}", l, r);
        }
    }

    #[test]
    fn scale_probe(
        (p, g, m) in depth_triplet(),
        c in 0.05f64..20.0,
        k in -4i32..5,
    ) {
        let base = metrics(&p, &g, &m);
        let scaled = |f: f64| {
            let sp: Vec<f64> = p.iter().map(|v| v * f).collect();
            let sg: Vec<f64> = g.iter().map(|v| v * f).collect();
            metrics(&sp, &sg, &m)
        };
        let s = scaled(c);
        prop_assert!(close(s.abs_rel, base.abs_rel, 1e-9));
        prop_assert!(close(s.rmse_log, base.rmse_log, 1e-9));
        prop_assert!(close(s.log10, base.log10, 1e-9));
        prop_assert!(close(s.rmse, c * base.rmse, 1e-9));
        prop_assert!(close(s.sq_rel, c * base.sq_rel, 1e-9));
        // a power of two keeps every ratio exact, so thresholds cannot flip
        let s2 = scaled(2f64.powi(k));
        prop_assert_eq!((s2.delta1, s2.delta2, s2.delta3), (base.delta1, base.delta2, base.delta3));

        let sil = |f: f64| {
            let n = g.len();
            let sp: Vec<f64> = p.iter().map(|v| v * f).collect();
            let sg: Vec<f64> = g.iter().map(|v| v * f).collect();
            let mask = ValidityMask { height: 1, width: n, data: m.clone() };
            silog_loss(
                &DepthMap::new(1, n, sp).unwrap(),
                &DepthMap::new(1, n, sg).unwrap(),
                &mask,
                SilogParams::default(),
            )
            .unwrap()
        };
        prop_assert!(close(sil(c), sil(1.0), 1e-7));
    }

    #[test]
    fn deltas_are_ordered_and_match_reference((p, g, m) in depth_triplet()) {
        let r = metrics(&p, &g, &m);
        prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
        let o = reference(&p, &g, &m);
        prop_assert_eq!(r.n_pixels, o.n_pixels);
        for (a, b) in [
            (r.abs_rel, o.abs_rel),
            (r.sq_rel, o.sq_rel),
            (r.rmse, o.rmse),
            (r.rmse_log, o.rmse_log),
            (r.log10, o.log10),
            (r.delta1, o.delta1),
            (r.delta2, o.delta2),
            (r.delta3, o.delta3),
        ] {
            prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b);
        }
    }

    #[test]
    fn silog_shift_only_moves_the_mean_term(
        (p, g, m) in depth_triplet(),
        shift in -2.0f64..2.0,
        lambda in 0.0f64..1.0,
    ) {
        let n = g.len();
        let mask = ValidityMask { height: 1, width: n, data: m.clone() };
        let loss = |pred: &[f64], params| {
            silog_loss(&DepthMap::new(1, n, pred.to_vec()).unwrap(), &DepthMap::new(1, n, g.clone()).unwrap(), &mask, params)
                .unwrap()
        };
        let shifted: Vec<f64> = p.iter().map(|v| v * shift.exp()).collect();
        let full = SilogParams { lambda: 1.0, alpha: 10.0 };
        prop_assert!(close(loss(&shifted, full), loss(&p, full), 1e-7));

        // closed form: with d -> d + s, mean(d^2) - l*mean(d)^2 moves by
        // 2s(1-l)mean(d) + (1-l)s^2, i.e. only through the (1-l) mean term
        let d: Vec<f64> = (0..n).filter(|&i| m[i]).map(|i| p[i].ln() - g[i].ln()).collect();
        let k = d.len() as f64;
        let mean = d.iter().sum::<f64>() / k;
        let msq = d.iter().map(|v| v * v).sum::<f64>() / k;
        let params = SilogParams { lambda, alpha: 1.0 };
        let expect = (msq - lambda * mean * mean + (1.0 - lambda) * (2.0 * shift * mean + shift * shift)).max(0.0).sqrt();
        prop_assert!(close(loss(&shifted, params), expect, 1e-7));
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn aggregate_has_eight_e_channels(e in 1usize..24, h32 in 1usize..4, w32 in 1usize..4, c16 in 1usize..8) {
        let dev = Device::Cpu;
        let (h, w) = (32 * h32, 32 * w32);
        let levels: Vec<FeatureLevel> = [(16usize, c16), (32, 5), (64, 3)]
            .iter()
            .map(|&(s, c)| FeatureLevel {
                stride: s,
                data: Tensor::ones((1, c, h.div_ceil(s), w.div_ceil(s)), DType::F32, &dev).unwrap(),
            })
            .collect();
        let pyr = FeaturePyramid::new(levels, (h, w)).unwrap();
        let store = ParamStore::new(e as u64);
        let agg = FeatureAggregator::new(c16 + 8, e, store.var_builder(DType::F32, &dev).pp("agg")).unwrap();
        let a = agg.aggregate(&pyr, aggregate_target((h, w))).unwrap();
        prop_assert_eq!(a.data.dims(), &[1, 8 * e, h / 32, w / 32][..]);
    }

    #[test]
    fn decoder_restores_resolution(e in 1usize..6, stages in 1usize..4, hk in 1usize..4, wk in 1usize..4) {
        let dev = Device::Cpu;
        let stride = 1usize << stages;
        let (h, w) = (stride * hk, stride * wk);
        let cfg = DecoderConfig { embed_dim: e, stages, d_max: 10.0, feature_stride: stride, act: Activation::Gelu };
        let store = ParamStore::new(3);
        let dec = UpsamplingDecoder::new(cfg, store.var_builder(DType::F32, &dev).pp("dec")).unwrap();
        let feat = Tensor::randn(0f32, 1.0, (1, 8 * e, hk, wk), &dev).unwrap();
        let a = diffdepth::diffusion::AggregatedFeatureMap::new(feat, e).unwrap();
        let out = dec.decode(&a, (h, w)).unwrap();
        prop_assert_eq!(out.dims(), &[1, e, h, w][..]);
    }

    #[test]
    fn depth_is_inside_open_range(
        vals in prop::collection::vec(-1e30f32..1e30, 2 * 4 * 4),
        scale in prop::sample::select(vec![1e-3f32, 1.0, 1e3, 1e6]),
        d_max in 1.0f64..100.0,
    ) {
        let dev = Device::Cpu;
        let store = ParamStore::new(11);
        let reg = DepthRegressor::new(2, d_max, Activation::Gelu, store.var_builder(DType::F32, &dev).pp("reg")).unwrap();
        let x: Vec<f32> = vals.iter().map(|v| (v / 1e30) * scale).collect();
        let out = reg.regress(&Tensor::from_vec(x, (1, 2, 4, 4), &dev).unwrap()).unwrap();
        for v in t_f64(&out) {
            prop_assert!(v > 0.0 && v < d_max, "{}", v);
        }
        let logits = Tensor::from_vec(vals, (1, 2, 4, 4), &dev).unwrap();
        for v in t_f64(&reg.depth_from_logits(&logits).unwrap()) {
            prop_assert!(v > 0.0 && v < d_max, "{}", v);
        }
    }
}
