use l2c_core::cache::{
    inspect_cache, Checkpoint, EmbeddingCache, CACHE_MAGIC, DTYPE_F32, HEADER_LEN,
};
use l2c_core::numerics::{Rng, Tensor};
use l2c_core::Error;
use proptest::prelude::*;

fn rows(n: usize, d: usize, seed: u64) -> (Vec<u64>, Tensor) {
    let mut rng = Rng::new(seed);
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    rng.shuffle(&mut ids);
    (
        ids,
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap(),
    )
}

proptest! {
    #[test]
    fn cache_round_trips(n in 0usize..40, d in 1usize..9, seed in any::<u64>()) {
        let (ids, values) = rows(n, d, seed);
        let cache = EmbeddingCache::from_rows(d, ids.clone(), &values).unwrap();
        let bytes = cache.to_bytes();
        prop_assert_eq!(&bytes[..8], CACHE_MAGIC.as_slice());
        prop_assert_eq!(bytes.len(), HEADER_LEN + n * (16 + 4 * d));
        let back = EmbeddingCache::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &cache);
        for (i, id) in ids.iter().enumerate() {
            let want: Vec<f32> = values.row(i).iter().map(|&v| v as f32).collect();
            prop_assert_eq!(back.lookup(*id).unwrap(), want.as_slice());
        }
        // every proper prefix is rejected
        if !bytes.is_empty() {
            let cut = (seed as usize) % bytes.len();
            prop_assert!(matches!(EmbeddingCache::from_bytes(&bytes[..cut]), Err(Error::Data(_))));
        }
    }
}

#[test]
fn inspect_reads_the_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (ids, values) = rows(10, 4, 1);
    let path = dir.path().join("c.bin");
    EmbeddingCache::from_rows(4, ids, &values)
        .unwrap()
        .save(&path)
        .unwrap();
    let h = inspect_cache(&path).unwrap();
    assert_eq!((h.count, h.dim, h.dtype), (10, 4, DTYPE_F32));
    assert!(matches!(
        EmbeddingCache::load(&dir.path().join("missing.bin")),
        Err(Error::Data(_) | Error::NotFound(_) | Error::Io(_))
    ));
}

#[test]
fn unknown_caption_is_not_found() {
    let (ids, values) = rows(3, 2, 2);
    let cache = EmbeddingCache::from_rows(2, ids, &values).unwrap();
    assert!(matches!(cache.lookup(1), Err(Error::NotFound(_))));
}

#[test]
fn checkpoint_keeps_f64_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::default();
    ck.insert(
        "w",
        Tensor::new(vec![2, 2], vec![0.1, -1e-300, f64::MAX, 1.0 / 3.0]).unwrap(),
    );
    ck.insert("b", Tensor::scalar(std::f64::consts::PI));
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    // a cache reader refuses a checkpoint container
    assert!(matches!(EmbeddingCache::load(&path), Err(Error::Data(_))));
}
