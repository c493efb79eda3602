//! Reference semantics for the edge bitmap: the math the injected payload
//! implements and the fuzzer consumes.
//!
//! Update rule per executed block: `bitmap[(id ^ prev) & mask] += 1;
//! prev = id >> 1`. The reference saturates counters at 255 while the
//! payload wraps; equality between the two is only meaningful below 255.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMap {
    pub bitmap: Vec<u8>,
    /// Per-point hit bitset in plan order, when linear coverage is on.
    pub linear: Option<Vec<u8>>,
    pub map_size_log2: u32,
}

impl CoverageMap {
    pub fn new(map_size_log2: u32) -> CoverageMap {
        CoverageMap { bitmap: vec![0; 1 << map_size_log2], linear: None, map_size_log2 }
    }

    pub fn with_linear(map_size_log2: u32, points: usize) -> CoverageMap {
        let mut m = Self::new(map_size_log2);
        m.linear = Some(vec![0; points.div_ceil(8)]);
        m
    }

    pub fn mask(&self) -> u32 {
        (self.bitmap.len() - 1) as u32
    }

    pub fn record_linear(&mut self, point_index: usize) {
        if let Some(bits) = &mut self.linear {
            bits[point_index / 8] |= 1 << (point_index % 8);
        }
    }

    pub fn linear_hit(&self, point_index: usize) -> bool {
        self.linear
            .as_ref()
            .map(|b| b[point_index / 8] & (1 << (point_index % 8)) != 0)
            .unwrap_or(false)
    }
}

/// Replay one thread's block-id sequence through the update rule.
pub fn simulate_path(ids: &[u32], map_size_log2: u32) -> CoverageMap {
    let mut map = CoverageMap::new(map_size_log2);
    accumulate_path(&mut map, ids);
    map
}

/// Replay a sequence into an existing map with a fresh previous-location,
/// the way a second thread with its own TLS slot would.
pub fn accumulate_path(map: &mut CoverageMap, ids: &[u32]) {
    let mask = map.mask();
    let mut prev = 0u32;
    for &id in ids {
        let idx = ((id ^ prev) & mask) as usize;
        map.bitmap[idx] = map.bitmap[idx].saturating_add(1);
        prev = id >> 1;
    }
}

/// AFL-style count bucketing. Note the table is not idempotent (a raw
/// count of 3 buckets to 4, and a raw count of 4 buckets to 8); it is
/// applied exactly once per run before virgin-map folding.
pub fn classify_counts(bitmap: &[u8]) -> Vec<u8> {
    bitmap.iter().map(|&b| classify_byte(b)).collect()
}

fn classify_byte(b: u8) -> u8 {
    match b {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NewCoverage {
    None,
    /// Known edges, new hit-count buckets.
    NewHit,
    /// A never-before-seen edge.
    NewEdge,
}

/// Fold a classified bitmap into the virgin map, reporting what was new.
pub fn has_new_bits(classified: &[u8], virgin: &mut [u8]) -> NewCoverage {
    assert_eq!(classified.len(), virgin.len());
    let mut out = NewCoverage::None;
    for (c, v) in classified.iter().zip(virgin.iter_mut()) {
        if *c != 0 && *c & *v != 0 {
            if *v == 0xFF {
                out = NewCoverage::NewEdge;
            } else if out == NewCoverage::None {
                out = NewCoverage::NewHit;
            }
            *v &= !*c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_path_zero_map() {
        let m = simulate_path(&[], 10);
        assert!(m.bitmap.iter().all(|&b| b == 0));
    }

    #[test]
    fn two_block_path() {
        let m = simulate_path(&[1, 2], 10);
        assert_eq!(m.bitmap[1], 1); // 1 ^ 0
        assert_eq!(m.bitmap[2], 1); // 2 ^ (1 >> 1)
        assert_eq!(m.bitmap.iter().map(|&b| b as u32).sum::<u32>(), 2);
    }

    #[test]
    fn self_loop_path() {
        let m = simulate_path(&[5, 5, 5], 10);
        assert_eq!(m.bitmap[5], 1); // 5 ^ 0
        assert_eq!(m.bitmap[7], 2); // 5 ^ 2, twice
    }

    #[test]
    fn order_sensitivity() {
        let a = simulate_path(&[1, 2], 10);
        let b = simulate_path(&[2, 1], 10);
        assert_ne!(a.bitmap, b.bitmap);
    }

    #[test]
    fn saturates_at_255() {
        let ids = vec![0u32; 1000];
        let m = simulate_path(&ids, 10);
        assert_eq!(m.bitmap[0], 255);
    }

    #[test]
    fn classify_table() {
        assert_eq!(classify_byte(0), 0);
        assert_eq!(classify_byte(1), 1);
        assert_eq!(classify_byte(2), 2);
        assert_eq!(classify_byte(3), 4);
        assert_eq!(classify_byte(4), 8);
        assert_eq!(classify_byte(7), 8);
        assert_eq!(classify_byte(8), 16);
        assert_eq!(classify_byte(15), 16);
        assert_eq!(classify_byte(16), 32);
        assert_eq!(classify_byte(31), 32);
        assert_eq!(classify_byte(32), 64);
        assert_eq!(classify_byte(127), 64);
        assert_eq!(classify_byte(128), 128);
        assert_eq!(classify_byte(200), 128);
    }

    #[test]
    fn classify_buckets_are_monotone_and_bounded() {
        let all: Vec<u8> = (0..=255).collect();
        let once = classify_counts(&all);
        for w in once.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(once.iter().all(|b| matches!(b, 0 | 1 | 2 | 4 | 8 | 16 | 32 | 64 | 128)));
    }

    #[test]
    fn new_bits_transitions() {
        let mut virgin = vec![0xFFu8; 8];
        let mut classified = vec![0u8; 8];
        assert_eq!(has_new_bits(&classified, &mut virgin), NewCoverage::None);
        assert!(virgin.iter().all(|&v| v == 0xFF));

        classified[5] = 1;
        assert_eq!(has_new_bits(&classified, &mut virgin), NewCoverage::NewEdge);
        assert_eq!(virgin[5], 0xFE);

        // same map again: nothing new
        assert_eq!(has_new_bits(&classified, &mut virgin), NewCoverage::None);

        // same edge, hotter bucket
        classified[5] = 2;
        assert_eq!(has_new_bits(&classified, &mut virgin), NewCoverage::NewHit);
    }

    #[test]
    fn linear_bits() {
        let mut m = CoverageMap::with_linear(10, 100);
        m.record_linear(0);
        m.record_linear(99);
        assert!(m.linear_hit(0) && m.linear_hit(99) && !m.linear_hit(50));
        assert_eq!(m.linear.as_ref().unwrap().len(), 13);
    }
}
