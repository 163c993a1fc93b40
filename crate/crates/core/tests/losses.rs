use l2c_core::encoders::{Dropout, TextEncoder, TextEncoderConfig};
use l2c_core::losses::{
    info_nce_symmetric, mntp_loss_masked, simcse_supervised, LogitScale, MAX_LOGIT_SCALE,
};
use l2c_core::numerics::{Rng, Tape, Tensor};
use l2c_core::tokens::TokenBatch;
use proptest::prelude::*;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Plain reference: mean cross-entropy of the scaled cosine matrix, row-wise and column-wise.
fn reference_info_nce(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> (f64, f64) {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let (a, b): (Vec<_>, Vec<_>) = (a.iter().map(unit).collect(), b.iter().map(unit).collect());
    let n = a.len();
    let sim = |i: usize, j: usize| s * a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>();
    let ce = |row: &dyn Fn(usize) -> f64, target: usize| {
        let m = (0..n).map(row).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).map(|j| (row(j) - m).exp()).sum::<f64>().ln();
        lse - row(target)
    };
    let ab = (0..n).map(|i| ce(&|j| sim(i, j), i)).sum::<f64>() / n as f64;
    let ba = (0..n).map(|j| ce(&|i| sim(i, j), j)).sum::<f64>() / n as f64;
    (ab, ba)
}

fn info_nce(a: &Tensor, b: &Tensor, s: f64) -> f64 {
    let mut tape = Tape::new();
    let (x, y, s) = (
        tape.constant(a.clone()),
        tape.constant(b.clone()),
        tape.constant(Tensor::scalar(s)),
    );
    let l = info_nce_symmetric(&mut tape, x, y, s).unwrap();
    tape.scalar(l)
}

fn simcse(a: &Tensor, b: &Tensor, s: f64, symmetric: bool) -> f64 {
    let mut tape = Tape::new();
    let (x, y, s) = (
        tape.constant(a.clone()),
        tape.constant(b.clone()),
        tape.constant(Tensor::scalar(s)),
    );
    let l = simcse_supervised(&mut tape, x, y, s, symmetric).unwrap();
    tape.scalar(l)
}

fn gaussian(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn uniform_similarity_info_nce_is_ln_n() {
    for n in [2usize, 4, 8] {
        // identical rows make every similarity equal
        let a = Tensor::new(vec![n, 3], [0.3, -1.2, 0.7].repeat(n)).unwrap();
        for s in [1.0, 14.0, 100.0] {
            let l = info_nce(&a, &a, s);
            assert!((l - (n as f64).ln()).abs() < 1e-12, "n={n} s={s}: {l}");
        }
    }
}

#[test]
fn aligned_orthonormal_info_nce_vanishes_at_max_scale() {
    for n in [2usize, 4, 8] {
        let e = Tensor::eye(n);
        let l = info_nce(&e, &e, MAX_LOGIT_SCALE);
        assert!(l <= 1e-8, "n={n}: {l}");
    }
}

#[test]
fn uniform_logit_mntp_is_ln_vocab() {
    for vocab in [8usize, 32, 256] {
        let cfg = TextEncoderConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ..TextEncoderConfig::llm_surrogate()
        };
        let mut enc = TextEncoder::new("enc", cfg, &mut Rng::new(3)).unwrap();
        enc.lm_head.w.value.data_mut().fill(0.0);
        if let Some(b) = enc.lm_head.b.as_mut() {
            b.value.data_mut().fill(0.0);
        }
        let batch = TokenBatch::from_sequences(&[vec![3u32, 5, 6, 7, 1], vec![3, 4, 1]]);
        let mut tape = Tape::new();
        let out = mntp_loss_masked(
            &mut tape,
            &enc,
            &batch,
            &[(0, 2), (0, 4), (1, 1)],
            &mut Dropout::Off,
        )
        .unwrap();
        assert_eq!(out.masked, 3);
        assert!((tape.scalar(out.loss) - (vocab as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn info_nce_matches_reference() {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let n = 2 + rng.below(7);
        let d = 2 + rng.below(6);
        let (a, b) = (gaussian(n, d, &mut rng), gaussian(n, d, &mut rng));
        let s = rng.uniform_in(1.0, 100.0);
        let (ab, ba) = reference_info_nce(&rows(&a), &rows(&b), s);
        assert!((info_nce(&a, &b, s) - 0.5 * (ab + ba)).abs() < 1e-10);
        assert!((simcse(&a, &b, s, false) - ab).abs() < 1e-10);
        assert!((simcse(&a, &b, s, true) - 0.5 * (ab + ba)).abs() < 1e-10);
    }
}

#[test]
fn logit_scale_is_clamped() {
    let s = LogitScale::fixed("s", 1e4);
    assert_eq!(s.value(), MAX_LOGIT_SCALE);
    let mut tape = Tape::new();
    let v = s.var(&mut tape);
    assert_eq!(tape.scalar(v), MAX_LOGIT_SCALE);
    assert!((LogitScale::new("s").value() - 1.0 / 0.07).abs() < 1e-12);
}

#[test]
fn info_nce_needs_two_pairs() {
    let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let (x, s) = (tape.constant(a), tape.constant(Tensor::scalar(1.0)));
    assert!(info_nce_symmetric(&mut tape, x, x, s).is_err());
}

proptest! {
    #[test]
    fn info_nce_bounds_and_invariances(seed in any::<u64>(), n in 2usize..7, d in 2usize..6, s in 0.5f64..100.0, c in 0.1f64..10.0) {
        let mut rng = Rng::new(seed);
        let (a, b) = (gaussian(n, d, &mut rng), gaussian(n, d, &mut rng));
        let l = info_nce(&a, &b, s);
        prop_assert!(l >= 0.0);
        // at most the loss of putting all mass on the worst pair
        prop_assert!(l <= (n as f64).ln() + 2.0 * s + 1e-9);

        // rescaling rows leaves cosines alone
        let scaled = Tensor::new(vec![n, d], a.data().iter().map(|x| x * c).collect()).unwrap();
        prop_assert!((info_nce(&scaled, &b, s) - l).abs() < 1e-9);

        // permuting both sides together only relabels the pairs
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pick = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((info_nce(&pick(&a), &pick(&b), s) - l).abs() < 1e-9);

        // swapping the towers leaves the symmetric loss unchanged
        prop_assert!((info_nce(&b, &a, s) - l).abs() < 1e-12);
    }
}
