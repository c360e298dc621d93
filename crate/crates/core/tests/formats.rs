//! UEB1 and UPC1 roundtrip fuzzing and malformed-input corpora.

use std::path::Path;

use pivotalign::bank::{decode_bank, encode_bank, read_bank, write_bank, EmbeddingBank, Meta, HEADER_LEN};
use pivotalign::projector::{decode_head, encode_head, load_head, save_head};
use pivotalign::{HeadShape, Mode, ProjectionHead, Rng};

/// Any finite f32, with extra weight on awkward values.
fn awkward_f32(rng: &mut Rng) -> f32 {
    match rng.below(10) {
        0 => [0.0, -0.0, f32::MIN_POSITIVE, -f32::MIN_POSITIVE, f32::MAX, f32::MIN, 1e-45][rng.below(7)],
        1 => f32::from_bits(rng.below(0x007F_FFFF) as u32 + 1),
        _ => loop {
            let v = f32::from_bits(rng.next_u64() as u32);
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn random_bank(rng: &mut Rng) -> EmbeddingBank {
    let dim = 2 + rng.below(40);
    let rows = 1 + rng.below(30);
    let data: Vec<f32> = (0..dim * rows).map(|_| awkward_f32(rng)).collect();
    let mut meta = Meta::new();
    meta.insert("space".into(), ["clip", "multilingual", "x\"y ü"][rng.below(3)].into());
    if rng.below(2) == 0 {
        meta.insert("language".into(), "fi".into());
    }
    EmbeddingBank::new(dim, data, meta).unwrap()
}

#[test]
fn ueb1_roundtrip_fuzz_1000() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(0x5545_4231);
    for i in 0..1000 {
        let bank = random_bank(&mut rng);
        let path = dir.path().join(format!("b{}.ueb", i % 7));
        write_bank(&bank, &path).unwrap();
        let disk = std::fs::read(&path).unwrap();
        assert_eq!(disk, encode_bank(&bank), "iteration {i}");
        let back = read_bank(&path).unwrap();
        assert_eq!(encode_bank(&back), disk, "iteration {i}");
        assert_eq!(back.meta(), bank.meta());
        assert!(back.data().iter().zip(bank.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

fn random_head(rng: &mut Rng) -> ProjectionHead {
    let shape = HeadShape::new(1 + rng.below(12), 1 + rng.below(16), 1 + rng.below(10));
    let mut h = ProjectionHead::init(shape, rng).unwrap();
    for s in h.params_mut() {
        s.iter_mut().for_each(|v| *v = f64::from(awkward_f32(rng)));
    }
    h.bn_running_mean.mapv_inplace(|_| f64::from(awkward_f32(rng)));
    h.bn_running_var.mapv_inplace(|_| f64::from(awkward_f32(rng).abs()));
    h.mode = if rng.below(2) == 0 { Mode::Training } else { Mode::Inference };
    h.role = [None, Some("clip".to_string()), Some("multilingual".to_string())][rng.below(3)].clone();
    h
}

#[test]
fn upc1_roundtrip_fuzz_1000() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(0x5550_4331);
    for i in 0..1000 {
        let head = random_head(&mut rng);
        let path = dir.path().join(format!("h{}.upc", i % 5));
        save_head(&head, &path).unwrap();
        let disk = std::fs::read(&path).unwrap();
        assert_eq!(disk, encode_head(&head), "iteration {i}");
        let back = load_head(&path).unwrap();
        assert_eq!(encode_head(&back), disk, "iteration {i}");
        // field-level equality, -0.0 included
        for (a, b) in back.clone().params_mut().iter().zip(head.clone().params_mut().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.mode, head.mode);
        assert_eq!(back.role, head.role);
    }
}

fn bank_errors(bytes: &[u8]) -> String {
    match decode_bank(bytes, Meta::from([("space".to_string(), "clip".to_string())]), Path::new("x.ueb")) {
        Ok(_) => panic!("malformed bank accepted: {} bytes", bytes.len()),
        Err(e) => e.to_string(),
    }
}

fn valid_bank_bytes() -> Vec<u8> {
    let b = EmbeddingBank::from_rows(&[[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]], "clip").unwrap();
    encode_bank(&b)
}

#[test]
fn ueb1_malformed_corpus_always_errors() {
    let good = valid_bank_bytes();
    for cut in 0..good.len() {
        let msg = bank_errors(&good[..cut]);
        if cut < HEADER_LEN {
            assert!(msg.contains("not a UEB1 file"), "{cut}: {msg}");
        } else {
            assert!(msg.contains("corrupt bank"), "{cut}: {msg}");
        }
    }
    let mut extra = good.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(bank_errors(&extra).contains("corrupt bank"));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(bank_errors(&magic).contains("not a UEB1 file"));
    for v in [0u8, 2, 255] {
        let mut ver = good.clone();
        ver[4] = v;
        assert!(bank_errors(&ver).contains("unsupported version"));
    }
    let mut dtype = good.clone();
    dtype[5] = 1;
    assert!(bank_errors(&dtype).contains("corrupt bank"));
    for pos in [6, 7, 20, 27] {
        let mut r = good.clone();
        r[pos] = 1;
        assert!(bank_errors(&r).contains("corrupt bank"));
    }
    let mut rows10 = good.clone();
    rows10[12..20].copy_from_slice(&10u64.to_le_bytes());
    assert!(bank_errors(&rows10).contains("corrupt bank"));
    let mut huge = good.clone();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(bank_errors(&huge).contains("corrupt bank"));
    let mut nan = good.clone();
    nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(bank_errors(&nan).contains("corrupt bank"));
    let mut dim1 = good;
    dim1[8..12].copy_from_slice(&1u32.to_le_bytes());
    dim1[12..20].copy_from_slice(&6u64.to_le_bytes());
    assert!(bank_errors(&dim1).contains("corrupt bank"));
}

#[test]
fn ueb1_random_mutations_never_panic() {
    let good = valid_bank_bytes();
    let mut rng = Rng::new(99);
    for _ in 0..5000 {
        let mut b = good.clone();
        for _ in 0..1 + rng.below(4) {
            let i = rng.below(b.len());
            b[i] = rng.next_u64() as u8;
        }
        b.truncate(rng.below(b.len() + 1));
        let _ = decode_bank(&b, Meta::from([("space".to_string(), "clip".to_string())]), Path::new("m"));
    }
}

#[test]
fn upc1_malformed_corpus_always_errors() {
    let mut rng = Rng::new(5);
    let good = encode_head(&ProjectionHead::init(HeadShape::new(3, 4, 2), &mut rng).unwrap());
    let fail = |b: &[u8]| decode_head(b, Path::new("h.upc")).unwrap_err().to_string();
    for cut in 0..good.len() {
        let _ = fail(&good[..cut]);
    }
    let mut magic = good.clone();
    magic[3] = b'2';
    assert!(fail(&magic).contains("not a UPC1"));

    let hlen = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&good[8..8 + hlen]).unwrap().to_string();
    let rebuild = |h: &str| {
        let mut out = good[..4].to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(&good[8 + hlen..]);
        out
    };
    assert!(fail(&rebuild(&header.replace("\"version\":1", "\"version\":2"))).contains("unsupported version"));
    assert!(fail(&rebuild(&header.replace("\"in_dim\":3", "\"in_dim\":4"))).contains("corrupt checkpoint"));
    assert!(fail(&rebuild(&header.replace("\"w1\"", "\"w0\""))).contains("field list"));
    assert!(fail(&rebuild(&header[..header.len() - 1])).contains("corrupt checkpoint header"));
    let mut long = good.clone();
    long[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(fail(&long).contains("truncated header"));

    for _ in 0..5000 {
        let mut b = good.clone();
        let i = rng.below(b.len());
        b[i] = rng.next_u64() as u8;
        b.truncate(rng.below(b.len() + 1));
        let _ = decode_head(&b, Path::new("m"));
    }
}
