use cryptojack::telemetry::{Direction, WsFrame, WsPayload};
use cryptojack::wallet::{self, keccak::keccak256, Currency, PrefixTable, WalletAddress};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha3::{Digest, Keccak256};

fn oracle_keccak(data: &[u8]) -> [u8; 32] {
    Keccak256::digest(data).into()
}

/// Address built entirely with the oracle crates: base58 with a
/// tiny-keccak checksum.
fn oracle_address(rng: &mut ChaCha8Rng) -> String {
    let mut body = vec![0x12u8];
    body.extend((0..64).map(|_| rng.gen::<u8>()));
    base58_monero::encode_check(&body).unwrap()
}

#[test]
fn keccak_matches_oracle_on_fixed_vectors() {
    let mut vectors: Vec<Vec<u8>> = vec![
        b"".to_vec(),
        b"abc".to_vec(),
        b"The quick brown fox jumps over the lazy dog".to_vec(),
        vec![0u8; 1],
        vec![0xff; 135],
        vec![0x5a; 136],
        vec![0xa5; 137],
        vec![1u8; 271],
        vec![2u8; 272],
        vec![3u8; 273],
        (0..=255u8).collect(),
        vec![0x12; 65],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vectors.extend((0..8).map(|_| {
        let n = rng.gen_range(0..600);
        (0..n).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>()
    }));
    assert!(vectors.len() >= 10);
    for v in &vectors {
        assert_eq!(keccak256(v), oracle_keccak(v), "len {}", v.len());
    }
    assert_eq!(
        hex::encode(keccak256(b"")),
        "c5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470"
    );
}

#[test]
fn keccak_is_not_sha3() {
    let sha3_empty: [u8; 32] = sha3::Sha3_256::digest(b"").into();
    assert_ne!(keccak256(b""), sha3_empty);
}

proptest! {
    #[test]
    fn keccak_agrees_on_random_input(data in proptest::collection::vec(any::<u8>(), 0..1024)) {
        prop_assert_eq!(keccak256(&data), oracle_keccak(&data));
    }

    #[test]
    fn base58_matches_oracle(data in proptest::collection::vec(any::<u8>(), 0..200)) {
        let ours = wallet::encode_monero_base58(&data);
        prop_assert_eq!(&ours, &base58_monero::encode(&data).unwrap());
        prop_assert_eq!(wallet::decode_monero_base58(&ours).unwrap(), data);
    }

    #[test]
    fn base58_round_trips_69_byte_payloads(data in proptest::collection::vec(any::<u8>(), 69)) {
        let text = wallet::encode_monero_base58(&data);
        prop_assert_eq!(text.len(), 95);
        prop_assert_eq!(wallet::decode_monero_base58(&text).unwrap(), data);
    }

    #[test]
    fn scan_ignores_frame_order(seed in any::<u64>(), rotate in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames: Vec<WsFrame> = (0..5).map(|i| frame(&format!(
            r#"{{"identifier":"handshake","pool":"pool{i}.test","login":"{}"}}"#,
            oracle_address(&mut rng)
        ))).collect();
        let table = PrefixTable::default();
        let a = wallet::scan_frames(&frames, &table);
        frames.rotate_left(rotate);
        frames.reverse();
        prop_assert_eq!(a, wallet::scan_frames(&frames, &table));
    }
}

#[test]
fn oracle_built_addresses_validate() {
    let table = PrefixTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let text = oracle_address(&mut rng);
        assert_eq!(text.len(), 95);
        assert!(text.starts_with('4'));
        let a = WalletAddress::parse(&text, &table).unwrap();
        assert!(a.checksum_ok);
        assert_eq!(a.currency, Currency::XMR);
        assert_eq!(a.payload.len(), 69);
    }
}

#[test]
fn every_single_character_mutation_fails() {
    let table = PrefixTable::default();
    let alphabet: Vec<char> = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mutations = 0;
    for _ in 0..3 {
        let text = oracle_address(&mut rng);
        let chars: Vec<char> = text.chars().collect();
        for pos in 0..chars.len() {
            for _ in 0..4 {
                let mut c = alphabet[rng.gen_range(0..alphabet.len())];
                while c == chars[pos] {
                    c = alphabet[rng.gen_range(0..alphabet.len())];
                }
                let mut m = chars.clone();
                m[pos] = c;
                let m: String = m.into_iter().collect();
                let valid = WalletAddress::parse(&m, &table).is_ok_and(|a| a.checksum_ok);
                assert!(!valid, "mutation at {pos} still valid: {m}");
                mutations += 1;
            }
        }
    }
    assert!(mutations >= 1000, "{mutations}");
}

fn frame(text: &str) -> WsFrame {
    WsFrame {
        endpoint: "wss://proxy.example.test/ws".into(),
        direction: Direction::Sent,
        payload: WsPayload::Text(text.into()),
        at_ms: 10.0,
    }
}

#[test]
fn proxy_handshake_yields_wallet_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let login = oracle_address(&mut rng);
    let text = format!(
        r#"{{"identifier":"handshake","pool":"supportxmr.com","login":"{login}","password":"","userid":"","version":7}}"#
    );
    let r = wallet::scan_frames(&[frame(&text)], &PrefixTable::default());
    assert_eq!(r.wallets.len(), 1);
    assert_eq!(r.wallets[0].text, login);
    assert!(r.pools.contains(&"supportxmr.com".to_string()));
}

#[test]
fn three_valid_and_two_corrupted() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut frames = Vec::new();
    for _ in 0..3 {
        frames.push(frame(&format!(r#"{{"login":"{}"}}"#, oracle_address(&mut rng))));
    }
    for _ in 0..2 {
        let good = oracle_address(&mut rng);
        // swap two distinct characters in the middle
        let mut chars: Vec<char> = good.chars().collect();
        let i = (40..60).find(|&i| chars[i] != chars[i + 1]).unwrap();
        chars.swap(i, i + 1);
        let bad: String = chars.into_iter().collect();
        frames.push(frame(&format!("login {bad} end")));
    }
    frames.push(WsFrame {
        payload: WsPayload::Binary { binary: vec![0x34; 95] },
        ..frame("")
    });
    let r = wallet::scan_frames(&frames, &PrefixTable::default());
    assert_eq!(r.wallets.len(), 3);
}

#[test]
fn unknown_prefix_is_classified_not_rejected() {
    let mut body = vec![0x7fu8];
    body.extend([0u8; 64]);
    let text = base58_monero::encode_check(&body).unwrap();
    let a = WalletAddress::parse(&text, &PrefixTable::default()).unwrap();
    assert_eq!(a.currency, Currency::Unknown);
    assert!(a.checksum_ok);
}
