use dereverb_core::audio_io::{
    manifest_to_string, parse_manifest, read_wav, write_wav, BitDepth, Manifest, ManifestEntry,
};
use dereverb_core::mcloss::{distance, mc_loss_specs, DistanceKind, LossConfig};
use dereverb_core::metrics::si_sdr;
use dereverb_core::spectral::{istft, relative_l2, stft, ComplexSpectrogram, StftConfig, Waveform};
use dereverb_core::stacking::{build_stack, lambda_weight, StackSpec};
use dereverb_core::usd::{forward, EstimatorParams, MASK_BOUND};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;

fn small_cfg() -> StftConfig {
    StftConfig {
        window_len: 8,
        hop_len: 2,
        dft_size: 8,
        ..Default::default()
    }
}

fn spec_strategy(frames: usize) -> impl Strategy<Value = ComplexSpectrogram> {
    let bins = small_cfg().bin_count();
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), frames * bins).prop_map(move |v| {
        let data = Array2::from_shape_vec(
            (frames, bins),
            v.into_iter()
                .map(|(re, im)| Complex64::new(re, im))
                .collect(),
        )
        .unwrap();
        ComplexSpectrogram::new(data, small_cfg()).unwrap()
    })
}

fn waveform_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, min..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stft_round_trip_any_length(x in waveform_strategy(1, 3000), hop in prop::sample::select(vec![64usize, 128, 256])) {
        let cfg = StftConfig { hop_len: hop, ..Default::default() };
        let w = Waveform::new(x, 16000).unwrap();
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
        prop_assert!(relative_l2(y.samples(), w.samples()) <= 1e-9);
    }

    #[test]
    fn si_sdr_power_of_two_scale_is_exact(
        r in waveform_strategy(16, 400),
        noise in waveform_strategy(400, 401),
        k in -20i32..20,
    ) {
        let reference = Waveform::new(r.clone(), 16000).unwrap();
        let est = Waveform::new(r.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect(), 16000).unwrap();
        prop_assume!(reference.energy() > 1e-6);
        let base = si_sdr(&est, &reference).unwrap();
        prop_assert_eq!(si_sdr(&est.scaled(2f64.powi(k)), &reference).unwrap(), base);
    }

    #[test]
    fn stacks_read_lagged_frames(src in spec_strategy(9), k in 1usize..6, delay in 0usize..3, past in 1usize..4, future in 0usize..3) {
        let k = k + delay;
        for spec in [
            StackSpec::past_delayed(k, delay).unwrap(),
            StackSpec::context(past, future).unwrap(),
            StackSpec::garbage(future),
        ] {
            let stack = build_stack(&src, spec).unwrap();
            for t in 0..9 {
                for f in 0..src.bin_count() {
                    for tap in 0..spec.taps() {
                        let s = t as isize - spec.lag(tap);
                        let expect = if (0..9).contains(&s) { src.data()[[s as usize, f]] } else { Complex64::new(0.0, 0.0) };
                        prop_assert_eq!(stack.get(t, f, tap), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn distance_scaling(y in spec_strategy(6), y_hat in spec_strategy(6), c in 1e-3..1e3f64) {
        prop_assume!(y.energy() > 0.0);
        let cc = Complex64::new(c, 0.0);
        let a = distance(DistanceKind::RiMag, &y, &y_hat).unwrap();
        let b = distance(DistanceKind::RiMag, &y.scaled(cc), &y_hat.scaled(cc)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let a = distance(DistanceKind::SquaredL2, &y, &y_hat).unwrap();
        let b = distance(DistanceKind::SquaredL2, &y.scaled(cc), &y_hat.scaled(cc)).unwrap();
        prop_assert!((b - c * c * a).abs() <= 1e-12 * b.max(1e-300));
    }

    #[test]
    fn lambda_ignores_channel_order(a in spec_strategy(5), b in spec_strategy(5), c in spec_strategy(5)) {
        let w1 = lambda_weight(&[a.clone(), b.clone(), c.clone()], 1e-4).unwrap();
        let w2 = lambda_weight(&[c, a, b], 1e-4).unwrap();
        for (x, y) in w1.values().iter().zip(w2.values().iter()) {
            prop_assert!((x - y).abs() <= 1e-15 * x.abs());
        }
    }

    #[test]
    fn masks_are_clamped_before_use(y in spec_strategy(4), raw in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 20)) {
        let m = Array2::from_shape_vec((4, 5), raw.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap();
        let params = EstimatorParams::mask(m);
        let eff = params.effective();
        prop_assert!(eff.iter().all(|z| z.re.abs() <= MASK_BOUND && z.im.abs() <= MASK_BOUND));
        let s = forward(&params, &y).unwrap();
        for ((e, yv), sv) in eff.iter().zip(y.data().iter()).zip(s.data().iter()) {
            prop_assert_eq!(e * yv, *sv);
        }
    }

    #[test]
    fn loss_is_invariant_to_common_scale(
        y0 in spec_strategy(12), y1 in spec_strategy(12), m in spec_strategy(12), c in 1e-2..1e2f64,
    ) {
        let cfg = LossConfig { k: 4, delta: 1, past: 3, future: 1, ..Default::default() };
        let s_hat = ComplexSpectrogram::new(&m.data().mapv(|z| z * 0.5) * y0.data(), small_cfg()).unwrap();
        let base = mc_loss_specs(&[y0.clone(), y1.clone()], 0, &s_hat, None, &cfg).unwrap().total;
        let c = Complex64::new(c, 0.0);
        let scaled = mc_loss_specs(&[y0.scaled(c), y1.scaled(c)], 0, &s_hat.scaled(c), None, &cfg).unwrap().total;
        prop_assert!((base - scaled).abs() <= 1e-6 * base);
    }

    #[test]
    fn float32_wav_round_trip(chans in prop::collection::vec(prop::collection::vec(-1.0..1.0f32, 50), 1..4)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let waves: Vec<Waveform> = chans
            .iter()
            .map(|c| Waveform::new(c.iter().map(|&v| v as f64).collect(), 16000).unwrap())
            .collect();
        write_wav(&path, &waves, BitDepth::Float32).unwrap();
        prop_assert_eq!(read_wav(&path).unwrap(), waves);
    }

    #[test]
    fn manifest_text_round_trip(ids in prop::collection::vec("[a-z]{1,8}", 0..5), seed in any::<u64>(), note in "[ -~]{0,20}") {
        let mut m = Manifest::default();
        m.extra.insert("note".into(), note.into());
        for id in ids {
            m.entries.push(ManifestEntry {
                utt_id: id.clone(),
                mixture_paths: vec![format!("{id}/m0.wav").into()],
                direct_paths: vec![],
                noise_paths: vec![],
                scene: None,
                seed,
                snr_db: Some(12.5),
                rir_full_paths: vec![],
                rir_direct_paths: vec![],
                dry_path: None,
                extra: Default::default(),
            });
        }
        let text = manifest_to_string(&m).unwrap();
        let back = parse_manifest(&text).unwrap();
        prop_assert_eq!(manifest_to_string(&back).unwrap(), text);
        prop_assert_eq!(back, m);
    }
}
