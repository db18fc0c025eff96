use proptest::collection::vec;
use proptest::prelude::*;

use vaeprobe::mnist::{load_idx, parse_idx, partition, to_idx, write_idx, Image, IMAGE_PIXELS};
use vaeprobe::oracle::{perplexity, weighted_average, WeightProfile};

fn profile(logs: &[f64]) -> WeightProfile {
    WeightProfile::from_log_densities(logs, vec![0.0], "prop").unwrap()
}

fn image() -> impl Strategy<Value = Image> {
    (vec(any::<u8>(), IMAGE_PIXELS), 0u8..10).prop_map(|(b, l)| Image::from_bytes(&b, l).unwrap())
}

fn labelled(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Image>> {
    vec(0u8..10, n).prop_map(|labels| {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Image::new(vec![(i % 256) as f64 / 255.0; IMAGE_PIXELS], l).unwrap())
            .collect()
    })
}

proptest! {
    #[test]
    fn weights_form_a_distribution(logs in vec(-1e4f64..1e4, 1..60)) {
        let p = profile(&logs);
        let sum: f64 = p.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn weights_ignore_a_common_shift(logs in vec(-50f64..50.0, 1..40), shift in -1e3f64..1e3) {
        let shifted: Vec<f64> = logs.iter().map(|l| l + shift).collect();
        let a = profile(&logs);
        let b = profile(&shifted);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn largest_log_density_gets_largest_weight(logs in vec(-100f64..100.0, 1..40)) {
        let p = profile(&logs);
        let best = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (l, w) in logs.iter().zip(&p.weights) {
            if *l == best {
                prop_assert_eq!(*w, p.max_weight());
            }
        }
    }

    #[test]
    fn perplexity_between_one_and_n(logs in vec(-1e3f64..1e3, 1..60)) {
        let n = logs.len() as f64;
        let perp = perplexity(&profile(&logs));
        prop_assert!(perp >= 1.0 - 1e-12 && perp <= n + 1e-9, "perplexity {perp} for N={n}");
    }

    #[test]
    fn weighted_average_stays_within_pixel_range(
        images in vec(image(), 1..8),
        seed_logs in vec(-20f64..20.0, 8),
    ) {
        let p = profile(&seed_logs[..images.len()]);
        let mu = weighted_average(&p, &images).unwrap().mu;
        for (j, v) in mu.iter().enumerate() {
            let lo = images.iter().map(|im| im.pixels()[j]).fold(f64::INFINITY, f64::min);
            let hi = images.iter().map(|im| im.pixels()[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn idx_bytes_round_trip(images in vec(image(), 0..6)) {
        let (ib, lb) = to_idx(&images);
        let back = parse_idx(&ib, &lb).unwrap();
        prop_assert_eq!(&back, &images);
        prop_assert_eq!(to_idx(&back), (ib, lb));
    }

    #[test]
    fn idx_files_round_trip(images in vec(image(), 1..4)) {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&images, &ip, &lp).unwrap();
        prop_assert_eq!(load_idx(&ip, &lp).unwrap(), images);
    }

    #[test]
    fn partition_only_drops_the_held_out_digit(
        train in labelled(0..80),
        test in labelled(0..30),
        held in proptest::option::of(0u8..10),
    ) {
        let split = partition(train.clone(), test.clone(), held);
        prop_assert_eq!(&split.test, &test);
        prop_assert_eq!(split.descriptor.held_out, held);
        let expected: Vec<Image> = train.into_iter().filter(|im| Some(im.label()) != held).collect();
        prop_assert_eq!(split.train, expected);
    }
}
