use mdq_core::entroc::{
    ac_decode, ac_encode, decode_container, encode_container, ideal_bits, quantize_probs, MdqContainer,
    ProbabilitySource,
};
use mdq_core::networks::{CodecModel, NetConfig};
use mdq_core::quant::{Side, SymbolTensor};
use mdq_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position-dependent source whose table at each step depends on the
/// previous symbol, so decoding only works if the causal order is honoured.
struct Adaptive {
    levels: usize,
    seed: u64,
    pos: u64,
    prev: usize,
    sharpness: f64,
}

impl ProbabilitySource for Adaptive {
    fn levels(&self) -> usize {
        self.levels
    }

    fn next_freqs(&mut self, out: &mut [u32]) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.pos << 8) ^ self.prev as u64);
        let w: Vec<f64> = (0..self.levels).map(|_| (rng.gen::<f64>() * self.sharpness).exp()).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        quantize_probs(&p, out)
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        self.prev = symbol;
        self.pos += 1;
        Ok(())
    }
}

fn adaptive(levels: usize, seed: u64, sharpness: f64) -> Adaptive {
    Adaptive { levels, seed, pos: 0, prev: 0, sharpness }
}

#[test]
fn thousand_random_streams_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000u64 {
        let levels = rng.gen_range(2..=16);
        let len = rng.gen_range(0..400);
        let sharp = rng.gen_range(0.0..8.0);
        let syms: Vec<usize> = (0..len).map(|_| rng.gen_range(0..levels)).collect();
        let bytes = ac_encode(&syms, &mut adaptive(levels, case, sharp)).unwrap();
        let back = ac_decode(&bytes, &mut adaptive(levels, case, sharp), len).unwrap();
        assert_eq!(back, syms, "case {case}");
    }
}

#[test]
fn long_streams_stay_within_one_percent_of_ideal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (levels, sharp) in [(8, 0.0), (8, 4.0), (16, 8.0), (3, 2.0)] {
        let syms: Vec<usize> = (0..20_000).map(|_| rng.gen_range(0..levels)).collect();
        let bytes = ac_encode(&syms, &mut adaptive(levels, 5, sharp)).unwrap();
        let ideal = ideal_bits(&syms, &mut adaptive(levels, 5, sharp)).unwrap();
        let real = (bytes.len() * 8) as f64;
        assert!(real <= ideal * 1.01 + 64.0, "L={levels}: {real} vs {ideal}");
    }
}

fn model() -> CodecModel<f32> {
    let cfg = NetConfig {
        base_channels: 8,
        latent_channels: 3,
        levels: 5,
        entropy_channels: 4,
        resconv_repeats: 1,
        ..NetConfig::default()
    };
    CodecModel::new(cfg, 17).unwrap()
}

fn container(m: &CodecModel<f32>, seed: u64) -> (MdqContainer, SymbolTensor, SymbolTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = || SymbolTensor::new(vec![1, 2, 3, 3], (0..18).map(|_| rng.gen_range(0..5)).collect(), 5).unwrap();
    let (sa, sb) = (sym(), sym());
    let c = encode_container(m, &sa, &sb).unwrap();
    assert_eq!((c.width, c.height), (24, 16));
    (c, sa, sb)
}

fn decode_all(m: &CodecModel<f32>, bytes: &[u8]) -> Result<(SymbolTensor, SymbolTensor)> {
    let c = MdqContainer::unpack(bytes)?;
    let missing = || mdq_core::Error::Corrupt("description missing".into());
    let a = decode_container(m, &c, Side::A)?.ok_or_else(missing)?;
    let b = decode_container(m, &c, Side::B)?.ok_or_else(missing)?;
    Ok((a, b))
}

#[test]
fn every_single_byte_flip_is_caught() {
    let m = model();
    let (c, sa, sb) = container(&m, 1);
    let bytes = c.pack().unwrap();
    assert_eq!(decode_all(&m, &bytes).unwrap(), (sa.clone(), sb.clone()));
    for i in 0..bytes.len() {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[i] ^= mask;
            if let Ok((a, b)) = decode_all(&m, &bad) {
                assert!(a != sa || b != sb, "flip of byte {i} with {mask:#x} went unnoticed");
            }
        }
    }
}

#[test]
fn encoding_is_reproducible() {
    let m = model();
    assert_eq!(container(&m, 4).0.pack().unwrap(), container(&m, 4).0.pack().unwrap());
    let rebuilt = model();
    assert_eq!(container(&m, 4).0.pack().unwrap(), container(&rebuilt, 4).0.pack().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip(seed in any::<u64>(), drop in 0usize..3) {
        let m = model();
        let (c, _, _) = container(&m, seed);
        let c = match drop { 0 => c.without(Side::A), 1 => c.without(Side::B), _ => c };
        prop_assert_eq!(MdqContainer::unpack(&c.pack().unwrap()).unwrap(), c);
    }

    #[test]
    fn random_garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let m = model();
        let _ = decode_all(&m, &bytes);
    }
}
