use std::collections::BTreeMap;

use fxchart::config::{Preset, RunConfig};
use fxchart::dataset::*;
use fxchart::eval::confusion;
use fxchart::gbm::{simulate_ohlc_path, simulate_path, GbmParams, PricePath};
use fxchart::labeler::{label_window, Label, StrategyKind, StrategySpec};
use fxchart::raster::*;
use fxchart::series::{ingest_price_csv, moving_average, write_price_csv, IndicatorSet};
use fxchart::trainer::LrSchedule;
use proptest::prelude::*;

fn gbm(r: f64, sigma: f64) -> GbmParams {
    GbmParams { r, sigma, ..GbmParams::default() }
}

fn plain(close: Vec<f64>, open: Option<Vec<f64>>) -> PricePath {
    PricePath { params: GbmParams::default(), seed: 0, close, open }
}

fn prices(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1.0f64..1000.0, len)
}

fn label_strategy() -> impl Strategy<Value = StrategySpec> {
    (
        prop_oneof![
            Just(StrategyKind::NextDay),
            Just(StrategyKind::PriceThreshold),
            Just(StrategyKind::OpenCloseGap),
        ],
        2usize..8,
        1usize..6,
        0.0f64..0.05,
        0.0f64..0.05,
    )
        .prop_map(|(kind, window, holding, buy_th, sell_th)| StrategySpec {
            kind,
            window,
            holding: if kind == StrategyKind::NextDay { 1 } else { holding },
            buy_th,
            sell_th,
            ma_fast: 5,
            ma_mid: 7,
            ma_slow: 10,
        })
}

fn single(role: SeriesRole, color: Rgb, w: usize, h: usize, scaling: Scaling) -> ChartSpec {
    ChartSpec {
        width: w,
        height: h,
        channels: 3,
        series: vec![role],
        colors: BTreeMap::from([(role, color)]),
        invert: true,
        scaling,
        line_thickness: 1,
    }
}

/// Topmost lit row in every column.
fn top_rows(img: &ChartImage) -> Vec<Option<usize>> {
    (0..img.width)
        .map(|x| (0..img.height).find(|&y| img.pixel(x, y).iter().any(|&b| b != 0)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gbm_is_deterministic_and_positive(seed in any::<u64>(), sigma in 0.0f64..2.0, r in -0.5f64..0.5, n in 1usize..400) {
        let a = simulate_path(gbm(r, sigma), n, seed).unwrap();
        let b = simulate_path(gbm(r, sigma), n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.close.len(), n + 1);
        prop_assert!(a.close.iter().all(|&p| p > 0.0 && p.is_finite()));
        let o = simulate_ohlc_path(gbm(r, sigma), n, seed).unwrap();
        prop_assert!(o.open.as_ref().unwrap().iter().chain(&o.close).all(|&p| p > 0.0));
    }

    #[test]
    fn ma_is_affine_equivariant(xs in prices(1..60), k in 1usize..15, a in 0.01f64..100.0, b in -500.0f64..500.0) {
        prop_assume!(k <= xs.len());
        let base = moving_average(&xs, k).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let moved = moving_average(&ys, k).unwrap();
        prop_assert_eq!(base.start, moved.start);
        for (u, v) in base.values.iter().zip(&moved.values) {
            let want = a * u + b;
            prop_assert!((v - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", v, want);
        }
    }

    #[test]
    fn ma_lies_within_its_window(xs in prices(1..60), k in 1usize..15) {
        prop_assume!(k <= xs.len());
        let ma = moving_average(&xs, k).unwrap();
        for t in k - 1..xs.len() {
            let w = &xs[t + 1 - k..=t];
            let v = ma.get(t).unwrap();
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= v && v <= hi);
            let naive = w.iter().sum::<f64>() / k as f64;
            prop_assert!((v - naive).abs() <= 1e-9 * naive);
        }
    }

    #[test]
    fn price_csv_round_trip_is_exact(close in prices(1..50), with_open in any::<bool>()) {
        let open = with_open.then(|| close.iter().map(|c| c * 1.001).collect::<Vec<_>>());
        let path = plain(close, open);
        let mut buf = Vec::new();
        write_price_csv(&path, &mut buf).unwrap();
        let back = ingest_price_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.close, path.close);
        prop_assert_eq!(back.open, path.open);
    }

    #[test]
    fn rendering_is_deterministic_and_covers_sample_columns(ys in prices(2..40), h in 8usize..40, extra in 0usize..60) {
        let w = (ys.len() + extra).max(8);
        let spec = single(SeriesRole::Price, [255, 255, 255], w, h, Scaling::WindowMinmax);
        let img = render_chart(&[(SeriesRole::Price, &ys)], &spec).unwrap();
        prop_assert_eq!(&img, &render_chart(&[(SeriesRole::Price, &ys)], &spec).unwrap());
        for i in 0..ys.len() {
            let x = (i as f64 * (w - 1) as f64 / (ys.len() - 1) as f64).round() as usize;
            prop_assert!((0..h).any(|y| img.pixel(x, y)[0] != 0), "column {} is empty", x);
        }
    }

    #[test]
    fn red_lines_stay_in_the_red_channel(ys in prices(2..40), zs in prices(2..40)) {
        let n = ys.len().min(zs.len());
        let spec = ChartSpec {
            width: 48,
            height: 32,
            series: vec![SeriesRole::Ma(10), SeriesRole::Ma(5)],
            scaling: Scaling::FixedRange { lo: 0.0, hi: 1000.0 },
            ..ChartSpec::default()
        };
        let ma5 = render_chart(&[(SeriesRole::Ma(5), &ys[..n])], &ChartSpec { series: vec![SeriesRole::Ma(5)], ..spec.clone() }).unwrap();
        let both = render_chart(&[(SeriesRole::Ma(10), &zs[..n]), (SeriesRole::Ma(5), &ys[..n])], &spec).unwrap();
        for px in ma5.pixels.chunks(3) {
            prop_assert!(px == [0, 0, 0] || px == [255, 0, 0]);
        }
        // Drawn last, MA5 keeps every one of its pixels pure red.
        for (a, b) in ma5.pixels.chunks(3).zip(both.pixels.chunks(3)) {
            if a[0] == 255 {
                prop_assert_eq!(b, &[255u8, 0, 0][..]);
            }
        }
    }

    #[test]
    fn higher_series_plot_higher(base in prices(8..48), lift in prop::collection::vec(0.0f64..300.0, 48)) {
        let n = base.len();
        let above: Vec<f64> = base.iter().zip(&lift).map(|(b, l)| b + l).collect();
        let scaling = Scaling::FixedRange { lo: 0.0, hi: 1400.0 };
        let a = render_chart(&[(SeriesRole::Price, &above)], &single(SeriesRole::Price, [255, 255, 255], n, 32, scaling)).unwrap();
        let b = render_chart(&[(SeriesRole::Price, &base)], &single(SeriesRole::Price, [255, 255, 255], n, 32, scaling)).unwrap();
        for (ta, tb) in top_rows(&a).into_iter().zip(top_rows(&b)) {
            prop_assert!(ta.unwrap() <= tb.unwrap());
        }
    }

    #[test]
    fn inversion_is_an_involution(ys in prices(2..40)) {
        let mut spec = single(SeriesRole::Price, [255, 255, 255], 48, 32, Scaling::WindowMinmax);
        spec.invert = false;
        let img = render_chart(&[(SeriesRole::Price, &ys)], &spec).unwrap();
        prop_assert_eq!(&invert_image(&invert_image(&img)), &img);
        spec.invert = true;
        let dark = render_chart(&[(SeriesRole::Price, &ys)], &spec).unwrap();
        prop_assert_eq!(&invert_image(&dark), &img);
    }

    #[test]
    fn labels_depend_only_on_the_named_days(
        close in prices(30..31),
        open in prices(30..31),
        spec in label_strategy(),
        end in 0usize..20,
        poke in 0usize..30,
        factor in 0.5f64..2.0,
    ) {
        let path = plain(close, Some(open));
        let ind = IndicatorSet::compute(&path.close, &[]).unwrap();
        let day = end + spec.horizon();
        let before = label_window(&path, &ind, end, &spec).unwrap();
        let mut moved = path.clone();
        moved.close[poke] *= factor;
        moved.open.as_mut().unwrap()[poke] *= factor;
        let after = label_window(&moved, &ind, end, &spec).unwrap();
        let touches = poke == end || poke == day;
        if !touches {
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn labels_are_monotone_in_the_future_price(spec in label_strategy(), now in 10.0f64..200.0, a in 0.8f64..1.2, b in 0.8f64..1.2) {
        let h = spec.horizon();
        let label_at = |ratio: f64| {
            let mut close = vec![now; h + 1];
            let mut open = vec![now; h + 1];
            close[h] = now * ratio;
            open[h] = now * ratio;
            let path = plain(close, Some(open));
            label_window(&path, &IndicatorSet::compute(&path.close, &[]).unwrap(), 0, &spec).unwrap()
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(label_at(lo) <= label_at(hi));
    }

    #[test]
    fn thresholds_are_inclusive(th in 0.001f64..0.1, now in 1.0f64..1000.0) {
        let spec = StrategySpec::price_threshold(2, 1, th);
        let up = now * (1.0 + th);
        let down = now * (1.0 - th);
        let ind = IndicatorSet::compute(&[now, up], &[]).unwrap();
        prop_assert_eq!(label_window(&plain(vec![now, up], None), &ind, 0, &spec).unwrap(), Label::Buy);
        prop_assert_eq!(label_window(&plain(vec![now, down], None), &ind, 0, &spec).unwrap(), Label::Sell);
    }

    #[test]
    fn window_count_matches_enumeration(len in 0usize..120, length in 2usize..30, holding in 0usize..10, stride in 1usize..7, warmup in 0usize..25) {
        let mut naive = 0;
        let mut start = warmup;
        while start + length - 1 + holding < len {
            naive += 1;
            start += stride;
        }
        prop_assert_eq!(window_count(len, length, holding, stride, warmup), naive);
    }

    #[test]
    fn split_is_a_seeded_partition(n in 1usize..300, seed in any::<u64>(), t in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (train, val) = (t, (1.0 - t) * v);
        let ratios = SplitRatios { train, val, test: 1.0 - train - val };
        let s = split_dataset((0..n).collect::<Vec<_>>(), ratios, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!((s.train.len() as f64 - n as f64 * ratios.train).abs() <= 1.0);
        prop_assert!((s.val.len() as f64 - n as f64 * ratios.val).abs() <= 1.0);
        prop_assert_eq!(s, split_dataset((0..n).collect::<Vec<_>>(), ratios, seed).unwrap());
    }

    #[test]
    fn confusion_ignores_pair_order(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..80), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let to = |v: &[(usize, usize)]| -> (Vec<Label>, Vec<Label>) {
            v.iter().map(|&(p, t)| (Label::from_class_index(p).unwrap(), Label::from_class_index(t).unwrap())).unzip()
        };
        let (p, t) = to(&pairs);
        let cm = confusion(&p, &t).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut fxchart::rng::seeded_rng(seed));
        let (p2, t2) = to(&shuffled);
        prop_assert_eq!(cm, confusion(&p2, &t2).unwrap());
        prop_assert!(cm.trace() <= cm.total());
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        prop_assert!((0.0..=1.0).contains(&cm.accuracy()));
        for i in 0..3 {
            prop_assert_eq!(cm.row_sum(i), t.iter().filter(|l| l.class_index() == i).count() as u64);
        }
    }

    #[test]
    fn config_round_trip_is_a_fixed_point(which in 0usize..4, seed in any::<u64>(), epochs in 1usize..200, sigma in 0.01f64..1.0) {
        let preset = Preset::ALL[which];
        let text = format!(r#"{{"preset": "{preset}", "seed": {seed}, "train": {{"epochs": {epochs}}}, "gbm": {{"sigma": {sigma}}}}}"#);
        let once = RunConfig::from_json(&text).unwrap();
        let twice = RunConfig::from_json(&once.to_json().unwrap()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.to_json().unwrap(), twice.to_json().unwrap());
    }
}

#[test]
fn stored_labels_match_their_provenance() {
    let spec = StrategySpec { kind: StrategyKind::MaAlignment, window: 10, holding: 3, buy_th: 0.005, sell_th: 0.005, ma_fast: 5, ma_mid: 7, ma_slow: 10 };
    let chart = ChartSpec { width: 32, height: 16, series: vec![SeriesRole::Ma(10), SeriesRole::Ma(7), SeriesRole::Ma(5), SeriesRole::Price], ..ChartSpec::default() };
    let mut colors = chart.colors.clone();
    colors.insert(SeriesRole::Ma(7), [0, 255, 0]);
    let chart = ChartSpec { colors, ..chart };
    let wspec = WindowSpec { length: 10, holding: 3, stride: 2 };
    for id in 0..5 {
        let path = simulate_path(gbm(0.01, 0.4), 80, 100 + id as u64).unwrap();
        let ind = IndicatorSet::compute(&path.close, &[5, 7, 10]).unwrap();
        let samples = build_samples(&path, id, &ind, &wspec, &spec, &chart).unwrap();
        assert_eq!(samples.len(), window_count(path.len(), 10, 3, 2, 9));
        for s in &samples {
            assert_eq!(s.end, s.start + 9);
            assert_eq!(s.label, label_window(&path, &ind, s.end, &spec).unwrap());
            assert_eq!(s.image, render_window(&path, &ind, s.start, s.end, &chart).unwrap());
        }
    }
}

#[test]
fn manifest_round_trip_and_missing_image() {
    let path = simulate_path(GbmParams::default(), 40, 5).unwrap();
    let ind = IndicatorSet::compute(&path.close, &[5, 10, 20]).unwrap();
    let chart = ChartSpec { width: 24, height: 16, ..ChartSpec::default() };
    let wspec = WindowSpec { length: 6, holding: 2, stride: 1 };
    let samples = build_samples(&path, 3, &ind, &wspec, &StrategySpec::price_threshold(6, 2, 0.01), &chart).unwrap();
    let tagged: Vec<TaggedSample> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| ([SplitName::Train, SplitName::Val, SplitName::Test][i % 3], s))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&tagged, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().next(), Some("filename,label,path_id,start,end,split"));
    assert_eq!(text.lines().count(), tagged.len() + 1);
    assert_eq!(read_manifest(dir.path()).unwrap(), tagged);

    let victim = tagged[4].1.filename();
    std::fs::remove_file(dir.path().join(IMAGES_DIR).join(&victim)).unwrap();
    match read_manifest(dir.path()) {
        Err(fxchart::Error::Consistency(m)) => assert!(m.contains(&victim)),
        other => panic!("expected a consistency error, got {other:?}"),
    }
}

#[test]
fn saved_charts_decode_with_a_standard_reader() {
    let path = simulate_path(GbmParams::default(), 60, 8).unwrap();
    let ind = IndicatorSet::compute(&path.close, &[5, 10, 20]).unwrap();
    let img = render_window(&path, &ind, 19, 38, &ChartSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("chart.png");
    save_image(&img, &file).unwrap();
    let decoded = image::open(&file).unwrap().to_rgb8();
    assert_eq!((decoded.width(), decoded.height()), (150, 100));
    assert_eq!(decoded.as_raw(), &img.pixels);
    assert_eq!(load_image(&file).unwrap().pixels, img.pixels);
}

#[test]
fn step_down_schedule() {
    let s = LrSchedule::StepDown { step_epochs: 10, gamma: 0.1 };
    assert_eq!(s.rate(0.05, 1), 0.05);
    assert_eq!(s.rate(0.05, 10), 0.05);
    assert!((s.rate(0.05, 11) - 0.005).abs() < 1e-15);
    assert!((s.rate(0.05, 25) - 0.0005).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.rate(0.05, 99), 0.05);
}
