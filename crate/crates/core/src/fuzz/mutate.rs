//! Mutation stages: walking bit/byte flips, arithmetic, interesting-value
//! substitution, then seeded havoc and splice. The deterministic stages are
//! pure functions of the input; havoc and splice are pure functions of
//! (input, rng state), so whole campaigns replay bit-for-bit.

/// xorshift64* behind a splitmix seed scramble; small, fast, and the whole
/// reason campaigns replay exactly.
#[derive(Clone, Debug)]
pub struct MutRng(u64);

impl MutRng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        MutRng((z ^ (z >> 31)) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn byte(&mut self) -> u8 {
        (self.next_u64() >> 56) as u8
    }
}

pub const ARITH_MAX: i32 = 35;

pub const INTERESTING_8: [i8; 9] = [-128, -1, 0, 1, 16, 32, 64, 100, 127];
pub const INTERESTING_16: [i16; 10] =
    [-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767];
pub const INTERESTING_32: [i32; 8] = [
    i32::MIN,
    -100_663_046,
    -32769,
    32768,
    65535,
    65536,
    100_663_045,
    i32::MAX,
];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stage {
    BitFlip1,
    BitFlip2,
    BitFlip4,
    ByteFlip1,
    ByteFlip2,
    ByteFlip4,
    Arith8,
    Arith16,
    Arith32,
    Interest8,
    Interest16,
    Interest32,
}

pub const DETERMINISTIC_STAGES: [Stage; 12] = [
    Stage::BitFlip1,
    Stage::BitFlip2,
    Stage::BitFlip4,
    Stage::ByteFlip1,
    Stage::ByteFlip2,
    Stage::ByteFlip4,
    Stage::Arith8,
    Stage::Arith16,
    Stage::Arith32,
    Stage::Interest8,
    Stage::Interest16,
    Stage::Interest32,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BitFlip1 => "bitflip1",
            Stage::BitFlip2 => "bitflip2",
            Stage::BitFlip4 => "bitflip4",
            Stage::ByteFlip1 => "byteflip1",
            Stage::ByteFlip2 => "byteflip2",
            Stage::ByteFlip4 => "byteflip4",
            Stage::Arith8 => "arith8",
            Stage::Arith16 => "arith16",
            Stage::Arith32 => "arith32",
            Stage::Interest8 => "interest8",
            Stage::Interest16 => "interest16",
            Stage::Interest32 => "interest32",
        }
    }
}

fn flip_bit(buf: &mut [u8], bit: usize) {
    buf[bit >> 3] ^= 0x80 >> (bit & 7);
}

/// All candidates of one deterministic stage, in the fixed walk order
/// (most-significant bit of byte 0 first).
pub fn enumerate(stage: Stage, data: &[u8]) -> Vec<Vec<u8>> {
    let n = data.len();
    let bits = n * 8;
    let mut out = Vec::new();
    match stage {
        Stage::BitFlip1 | Stage::BitFlip2 | Stage::BitFlip4 => {
            let w = match stage {
                Stage::BitFlip1 => 1,
                Stage::BitFlip2 => 2,
                _ => 4,
            };
            for b in 0..bits.saturating_sub(w - 1) {
                let mut v = data.to_vec();
                for k in 0..w {
                    flip_bit(&mut v, b + k);
                }
                out.push(v);
            }
        }
        Stage::ByteFlip1 | Stage::ByteFlip2 | Stage::ByteFlip4 => {
            let w = match stage {
                Stage::ByteFlip1 => 1,
                Stage::ByteFlip2 => 2,
                _ => 4,
            };
            for i in 0..n.saturating_sub(w - 1) {
                let mut v = data.to_vec();
                for k in 0..w {
                    v[i + k] ^= 0xFF;
                }
                out.push(v);
            }
        }
        Stage::Arith8 => {
            for i in 0..n {
                for j in 1..=ARITH_MAX as u8 {
                    let mut v = data.to_vec();
                    v[i] = v[i].wrapping_add(j);
                    out.push(v);
                    let mut v = data.to_vec();
                    v[i] = v[i].wrapping_sub(j);
                    out.push(v);
                }
            }
        }
        Stage::Arith16 => {
            for i in 0..n.saturating_sub(1) {
                for j in 1..=ARITH_MAX as u16 {
                    for le in [true, false] {
                        for add in [true, false] {
                            let mut v = data.to_vec();
                            let w = if le {
                                u16::from_le_bytes([v[i], v[i + 1]])
                            } else {
                                u16::from_be_bytes([v[i], v[i + 1]])
                            };
                            let w = if add { w.wrapping_add(j) } else { w.wrapping_sub(j) };
                            let b = if le { w.to_le_bytes() } else { w.to_be_bytes() };
                            v[i] = b[0];
                            v[i + 1] = b[1];
                            out.push(v);
                        }
                    }
                }
            }
        }
        Stage::Arith32 => {
            for i in 0..n.saturating_sub(3) {
                for j in 1..=ARITH_MAX as u32 {
                    for le in [true, false] {
                        for add in [true, false] {
                            let mut v = data.to_vec();
                            let raw: [u8; 4] = v[i..i + 4].try_into().unwrap();
                            let w = if le { u32::from_le_bytes(raw) } else { u32::from_be_bytes(raw) };
                            let w = if add { w.wrapping_add(j) } else { w.wrapping_sub(j) };
                            let b = if le { w.to_le_bytes() } else { w.to_be_bytes() };
                            v[i..i + 4].copy_from_slice(&b);
                            out.push(v);
                        }
                    }
                }
            }
        }
        Stage::Interest8 => {
            for i in 0..n {
                for &k in &INTERESTING_8 {
                    let mut v = data.to_vec();
                    v[i] = k as u8;
                    out.push(v);
                }
            }
        }
        Stage::Interest16 => {
            for i in 0..n.saturating_sub(1) {
                for &k in &INTERESTING_16 {
                    for le in [true, false] {
                        let mut v = data.to_vec();
                        let b = if le { (k as u16).to_le_bytes() } else { (k as u16).to_be_bytes() };
                        v[i] = b[0];
                        v[i + 1] = b[1];
                        out.push(v);
                    }
                }
            }
        }
        Stage::Interest32 => {
            for i in 0..n.saturating_sub(3) {
                for &k in &INTERESTING_32 {
                    for le in [true, false] {
                        let mut v = data.to_vec();
                        let b = if le { (k as u32).to_le_bytes() } else { (k as u32).to_be_bytes() };
                        v[i..i + 4].copy_from_slice(&b);
                        out.push(v);
                    }
                }
            }
        }
    }
    out
}

pub const HAVOC_MAX_LEN: usize = 4096;

/// One havoc child: a random stack of small edits.
pub fn havoc(data: &[u8], rng: &mut MutRng) -> Vec<u8> {
    let mut v = data.to_vec();
    let iters = 1 << (1 + rng.below(6));
    for _ in 0..iters {
        if v.is_empty() {
            v.push(rng.byte());
            continue;
        }
        match rng.below(11) {
            0 => {
                let bit = rng.below(v.len() * 8);
                flip_bit(&mut v, bit);
            }
            1 => {
                let i = rng.below(v.len());
                v[i] = INTERESTING_8[rng.below(INTERESTING_8.len())] as u8;
            }
            2 if v.len() >= 2 => {
                let i = rng.below(v.len() - 1);
                let k = INTERESTING_16[rng.below(INTERESTING_16.len())] as u16;
                v[i..i + 2].copy_from_slice(&k.to_le_bytes());
            }
            3 if v.len() >= 4 => {
                let i = rng.below(v.len() - 3);
                let k = INTERESTING_32[rng.below(INTERESTING_32.len())] as u32;
                v[i..i + 4].copy_from_slice(&k.to_le_bytes());
            }
            4 => {
                let i = rng.below(v.len());
                let d = 1 + rng.below(ARITH_MAX as usize) as u8;
                v[i] = v[i].wrapping_add(d);
            }
            5 => {
                let i = rng.below(v.len());
                let d = 1 + rng.below(ARITH_MAX as usize) as u8;
                v[i] = v[i].wrapping_sub(d);
            }
            6 => {
                let i = rng.below(v.len());
                v[i] ^= rng.byte() | 1;
            }
            7 => {
                let i = rng.below(v.len());
                v[i] = rng.byte();
            }
            8 if v.len() > 1 => {
                // delete a block
                let from = rng.below(v.len());
                let len = 1 + rng.below((v.len() - from).min(16));
                v.drain(from..from + len);
            }
            9 if v.len() < HAVOC_MAX_LEN => {
                // insert a copied or constant block
                let at = rng.below(v.len() + 1);
                let len = 1 + rng.below(16);
                let block: Vec<u8> = if rng.below(4) == 0 || v.is_empty() {
                    let b = rng.byte();
                    vec![b; len]
                } else {
                    let from = rng.below(v.len());
                    let l = len.min(v.len() - from);
                    v[from..from + l].to_vec()
                };
                for (k, b) in block.iter().enumerate() {
                    v.insert(at + k, *b);
                }
            }
            _ => {
                // overwrite with a copied block
                if v.len() >= 2 {
                    let from = rng.below(v.len());
                    let to = rng.below(v.len());
                    let len = 1 + rng.below((v.len() - from.max(to)).min(16));
                    let block: Vec<u8> = v[from..from + len].to_vec();
                    v[to..to + len].copy_from_slice(&block);
                }
            }
        }
    }
    v.truncate(HAVOC_MAX_LEN);
    v
}

/// Splice two inputs at a random point, then run one havoc pass over the
/// result.
pub fn splice(a: &[u8], b: &[u8], rng: &mut MutRng) -> Vec<u8> {
    if a.len() < 2 || b.len() < 2 {
        return havoc(a, rng);
    }
    let cut_a = 1 + rng.below(a.len() - 1);
    let cut_b = rng.below(b.len());
    let mut v = a[..cut_a].to_vec();
    v.extend_from_slice(&b[cut_b..]);
    v.truncate(HAVOC_MAX_LEN);
    havoc(&v, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_bitflip_is_msb_of_byte_zero() {
        let out = enumerate(Stage::BitFlip1, &[0x00]);
        assert_eq!(out[0], vec![0x80]);
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn byteflip_children() {
        let out = enumerate(Stage::ByteFlip1, b"AB");
        assert_eq!(out, vec![vec![0xBE, 0x42], vec![0x41, 0xBD]]);
    }

    #[test]
    fn arith8_covers_off_by_small() {
        let out = enumerate(Stage::Arith8, &[0x61]);
        assert!(out.contains(&vec![0x61 + 22])); // 'a' + 22 = 'w'
        assert!(out.contains(&vec![0x61 - 14])); // 'a' - 14 = 'S'
        assert_eq!(out.len(), 70);
    }

    #[test]
    fn deterministic_streams() {
        let data = b"hello world".to_vec();
        for stage in DETERMINISTIC_STAGES {
            assert_eq!(enumerate(stage, &data), enumerate(stage, &data));
        }
        let mut r1 = MutRng::new(42);
        let mut r2 = MutRng::new(42);
        for _ in 0..50 {
            assert_eq!(havoc(&data, &mut r1), havoc(&data, &mut r2));
        }
    }

    #[test]
    fn havoc_respects_length_cap() {
        let mut rng = MutRng::new(1);
        let data = vec![0u8; 64];
        for _ in 0..200 {
            assert!(havoc(&data, &mut rng).len() <= HAVOC_MAX_LEN);
        }
    }

    #[test]
    fn splice_mixes_both_parents() {
        let mut rng = MutRng::new(3);
        let a = vec![0xAA; 32];
        let b = vec![0xBB; 32];
        let mut seen_b = false;
        for _ in 0..20 {
            let s = splice(&a, &b, &mut rng);
            if s.contains(&0xBB) {
                seen_b = true;
            }
        }
        assert!(seen_b);
    }
}
