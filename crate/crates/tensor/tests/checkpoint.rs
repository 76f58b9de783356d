use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{Checkpoint, Conv2d, Module, TensorError};

proptest! {
    #[test]
    fn bytes_round_trip_bit_exact(
        entries in prop::collection::vec(
            ("[a-z/_0-9]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u32>()),
            0..6,
        )
    ) {
        let mut ck = Checkpoint::new();
        for (i, (name, shape, seed)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, NaNs included
            let data = (0..n).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32))).collect();
            ck.insert(format!("{name}{i}"), shape, data);
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.entries.len(), ck.entries.len());
        for (a, b) in ck.entries.iter().zip(&back.entries) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn header_layout() {
    let mut ck = Checkpoint::new();
    ck.insert("w", &[2], vec![1.0, -2.0]);
    let b = ck.to_bytes();
    assert_eq!(&b[0..4], b"MGRD");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
    assert_eq!(b[16], b'w');
    assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(b[21..29].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(b[29..33].try_into().unwrap()), 1.0);
    assert_eq!(b.len(), 37);
}

#[test]
fn corrupt_inputs_rejected() {
    assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
    let mut ck = Checkpoint::new();
    ck.insert("w", &[4], vec![0.0; 4]);
    let b = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    let mut extra = b.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn module_save_load_and_shape_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = Conv2d::new(3, 4, 3, 1, &mut rng);
    let mut ck = Checkpoint::new();
    ck.insert_module("enc", &conv);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mgrd");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    let mut other = Conv2d::new(3, 4, 3, 1, &mut rng);
    loaded.load_module("enc", &mut other).unwrap();
    assert_eq!(other.weight.to_vec(), conv.weight.to_vec());

    let mut wrong = Conv2d::new(3, 5, 3, 1, &mut rng);
    match loaded.load_module("enc", &mut wrong) {
        Err(TensorError::CheckpointShape { expected, found, .. }) => {
            assert_eq!(expected, vec![5, 3, 3, 3]);
            assert_eq!(found, vec![4, 3, 3, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut missing = Conv2d::new(3, 4, 3, 1, &mut rng);
    assert!(loaded.load_module("dec", &mut missing).is_err());
    assert!(other.num_params() > 0);
}
