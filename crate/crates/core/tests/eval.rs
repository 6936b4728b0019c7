mod common;

use common::*;
use picat_core::dataset::{Pair, PairedDataset};
use picat_core::eval::{self, evaluate, Aggregate, Identity, CSV_HEADER};
use picat_core::image::SrgbImage;
use picat_core::metrics::{mse, psnr, ssim};
use picat_core::model::{ModelConfig, Variant};
use picat_core::perturb::{perturb, perturb_with_residue, spectral_noise, PerturbKind, PerturbSpec};
use picat_core::synth::{synthetic_pairs, SynthSpec};
use picat_core::train::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn img(seed: u64, h: usize, w: usize) -> SrgbImage<f64> {
    random_image(h, w, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn psnr_closed_forms() {
    let a = SrgbImage::<f64>::filled(4, 4, [0.0; 3]);
    let b = SrgbImage::<f64>::filled(4, 4, [0.5; 3]);
    assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
    let c = SrgbImage::<f64>::filled(4, 4, [0.1; 3]);
    assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&b, &b).unwrap(), 100.0);
    assert!(psnr(&a, &SrgbImage::filled(4, 5, [0.0; 3])).is_err());
}

#[test]
fn ssim_small_noise_stays_near_one() {
    let a = img(1, 32, 32);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = SrgbImage::from_fn(32, 32, |y, x| a.pixel(y, x).map(|v| v + normal.sample(&mut rng)));
    assert!(ssim(&a, &b).unwrap() > 0.999);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert!(ssim(&img(3, 8, 20), &img(4, 8, 20)).is_err());
}

#[test]
fn ssim_constant_pair_oracle() {
    let a = SrgbImage::<f64>::filled(16, 16, [0.2; 3]);
    let b = SrgbImage::<f64>::filled(16, 16, [0.8; 3]);
    let c1 = 1e-4;
    let want = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
    assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.4707).abs() < 1e-4);
}

#[test]
fn spatial_noise_has_the_requested_spread() {
    let flat = SrgbImage::<f64>::filled(128, 128, [0.5; 3]);
    let spec = PerturbSpec {
        kind: PerturbKind::Spatial,
        sigma: 25.0,
        seed: 3,
    };
    let out = perturb(&flat, &spec).unwrap();
    let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!((std / (25.0 / 255.0) - 1.0).abs() < 0.05, "{std}");
}

#[test]
fn spectral_noise_obeys_parseval() {
    let sigma = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..8 {
        let (field, residue) = spectral_noise(64, 48, sigma, &mut rng);
        assert!(residue < 1e-12);
        total += field.iter().map(|v| v * v).sum::<f64>();
        count += field.len();
    }
    let var = total / count as f64;
    assert!((var / (2.0 * sigma * sigma) - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn frequency_perturbation_is_real_and_seeded() {
    let a = img(5, 20, 17);
    let spec = PerturbSpec {
        kind: PerturbKind::Frequency,
        sigma: 0.02,
        seed: 9,
    };
    let (out, residue) = perturb_with_residue(&a, &spec).unwrap();
    assert!(residue < 1e-6);
    assert_ne!(out, a);
    assert_eq!(perturb(&a, &spec).unwrap(), out);
    for kind in [PerturbKind::Spatial, PerturbKind::Frequency] {
        let zero = PerturbSpec { kind, sigma: 0.0, seed: 1 };
        assert_eq!(perturb(&a, &zero).unwrap(), a);
    }
}

fn pairs(n: usize, same: bool) -> PairedDataset<f64> {
    PairedDataset::new(
        (0..n)
            .map(|i| {
                let high = img(100 + i as u64, 16, 16);
                let low = if same { high.clone() } else { high.map(|v| v * 0.5) };
                Pair {
                    name: format!("p{i}"),
                    low,
                    high,
                }
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn identity_on_identical_pairs_is_capped() {
    let r = evaluate(&Identity, "identity", &pairs(4, true), &[]).unwrap();
    assert!(r.records.iter().all(|x| x.psnr_db == 100.0));
}

#[test]
fn aggregates_are_recomputable() {
    let specs: Vec<PerturbSpec> = [15.0, 25.0, 50.0]
        .iter()
        .map(|&sigma| PerturbSpec {
            kind: PerturbKind::Spatial,
            sigma,
            seed: 7,
        })
        .collect();
    let r = evaluate(&Identity, "identity", &pairs(5, false), &specs).unwrap();
    r.verify().unwrap();
    assert_eq!(r.records.len(), 20);
    let clean: Vec<f64> = r.records.iter().filter(|x| x.sigma.is_none()).map(|x| x.psnr_db).collect();
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    assert!((r.clean.mean_psnr_db - mean).abs() < 1e-12);
    for row in &r.sweep {
        let noisy: Vec<&eval::Record> = r.records.iter().filter(|x| x.sigma == Some(row.sigma)).collect();
        assert_eq!(Aggregate::of(&noisy), row.aggregate);
        let drop = (mean - row.aggregate.mean_psnr_db) / mean * 100.0;
        assert!((row.relative_drop_pct - drop).abs() < 1e-9);
    }
    // drops grow with sigma
    assert!(r.sweep[0].relative_drop_pct < r.sweep[2].relative_drop_pct);

    let mut tampered = r.clone();
    tampered.records[0].psnr_db += 1.0;
    assert!(tampered.verify().is_err());

    let csv = r.sweep_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].contains("mean"));
    let width = lines[0].len();
    assert!(lines.iter().all(|l| l.len() == width));
    let csv = r.records_csv();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').map(str::trim).collect();
    assert_eq!(header, CSV_HEADER);
}

#[test]
fn metrics_in_records_match_direct_calls() {
    let data = pairs(3, false);
    let r = evaluate(&Identity, "identity", &data, &[]).unwrap();
    for (rec, p) in r.records.iter().zip(data.pairs()) {
        assert_eq!(rec.image, p.name);
        assert_eq!(rec.psnr_db, psnr(&p.low, &p.high).unwrap());
        assert_eq!(rec.ssim, ssim(&p.low, &p.high).unwrap());
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        patch_size: 16,
        batch_size: 2,
        total_steps: 3,
        val_every: 0,
        smoothing_window: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn ablation_rows_are_reproducible() {
    let spec = SynthSpec {
        count: 4,
        size: 16,
        ..SynthSpec::default()
    };
    let data = synthetic_pairs::<f32>(&spec).unwrap();
    let base = ModelConfig::default();
    let one = eval::ablation_run(&[Variant::CST], &base, &tiny_train(), &data, &data).unwrap();
    assert_eq!(one.len(), 1);
    let again = eval::ablation_run(&[Variant::CST, Variant::CST], &base, &tiny_train(), &data, &data).unwrap();
    assert_eq!(again[0].0, one[0].0);
    assert_eq!(again[1].0, one[0].0);
    assert!(eval::ablation_csv(&[one[0].0.clone()]).starts_with("variant,"));

    let bad = eval::ablation_run(&[Variant::FULL, Variant::new(false, true, false)], &base, &tiny_train(), &data, &data);
    assert!(bad.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_symmetric_and_shift_invariant(seed in any::<u64>(), shift in 0.0f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(6, 7, 0.0, 0.8, &mut rng);
        let b = random_image(6, 7, 0.0, 0.8, &mut rng);
        let pa = psnr(&a, &b).unwrap();
        prop_assert!((pa - psnr(&b, &a).unwrap()).abs() < 1e-12);
        let (a2, b2) = (a.map(|v| v + shift), b.map(|v| v + shift));
        prop_assert!((pa - psnr(&a2, &b2).unwrap()).abs() < 1e-9);
        // larger error, lower score
        let c = SrgbImage::from_fn(6, 7, |y, x| {
            let (p, q) = (a.pixel(y, x), b.pixel(y, x));
            [0, 1, 2].map(|i| p[i] + 1.5 * (q[i] - p[i]))
        });
        if mse(&a, &c).unwrap() > mse(&a, &b).unwrap() {
            prop_assert!(psnr(&a, &c).unwrap() < pa);
        }
    }

    #[test]
    fn ssim_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(12, 13, 0.0, 1.0, &mut rng);
        let b = random_image(12, 13, 0.0, 1.0, &mut rng);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}
