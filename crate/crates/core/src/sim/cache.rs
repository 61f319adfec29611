//! Set-associative write-back cache with true LRU replacement.

use crate::config::CacheGeom;

#[derive(Debug, Clone, Copy, Default)]
struct Way {
    tag: u64,
    valid: bool,
    dirty: bool,
    /// 0 = most recently used. Ranks within a set are a permutation.
    rank: u16,
}

/// A line pushed out by a fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub line: u64,
    pub dirty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss { evicted: Option<Evicted> },
}

/// Indexed by line address (physical address / line size).
#[derive(Debug, Clone)]
pub struct Cache {
    sets: u64,
    ways: usize,
    lines: Vec<Way>,
}

impl Cache {
    pub fn new(geom: &CacheGeom) -> Self {
        Self::with_shape(u64::from(geom.sets), geom.ways as usize)
    }

    pub fn with_shape(sets: u64, ways: usize) -> Self {
        assert!(sets > 0 && ways > 0 && ways <= usize::from(u16::MAX));
        let mut lines = vec![Way::default(); sets as usize * ways];
        for set in lines.chunks_mut(ways) {
            for (i, w) in set.iter_mut().enumerate() {
                w.rank = i as u16;
            }
        }
        Cache { sets, ways, lines }
    }

    pub fn sets(&self) -> u64 {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    #[inline]
    fn locate(&self, line: u64) -> (usize, u64) {
        ((line % self.sets) as usize * self.ways, line / self.sets)
    }

    #[inline]
    fn find(&self, base: usize, tag: u64) -> Option<usize> {
        self.lines[base..base + self.ways]
            .iter()
            .position(|w| w.valid && w.tag == tag)
    }

    pub fn contains(&self, line: u64) -> bool {
        let (base, tag) = self.locate(line);
        self.find(base, tag).is_some()
    }

    #[inline]
    fn touch(&mut self, base: usize, way: usize) {
        let set = &mut self.lines[base..base + self.ways];
        let r = set[way].rank;
        for w in set.iter_mut() {
            if w.rank < r {
                w.rank += 1;
            }
        }
        set[way].rank = 0;
    }

    /// Looks up `line`, allocating it on a miss (write-allocate). A write
    /// leaves the line dirty.
    pub fn access(&mut self, line: u64, write: bool) -> Lookup {
        let (base, tag) = self.locate(line);
        if let Some(way) = self.find(base, tag) {
            self.lines[base + way].dirty |= write;
            self.touch(base, way);
            return Lookup::Hit;
        }
        let set = &self.lines[base..base + self.ways];
        let way = set.iter().position(|w| !w.valid).unwrap_or_else(|| {
            set.iter()
                .enumerate()
                .max_by_key(|(_, w)| w.rank)
                .map(|(i, _)| i)
                .expect("non-empty set")
        });
        let old = self.lines[base + way];
        let evicted = old.valid.then(|| Evicted {
            line: old.tag * self.sets + (line % self.sets),
            dirty: old.dirty,
        });
        let w = &mut self.lines[base + way];
        w.tag = tag;
        w.valid = true;
        w.dirty = write;
        self.touch(base, way);
        Lookup::Miss { evicted }
    }

    /// Marks a resident line dirty without changing its recency. Returns
    /// false when the line is not resident.
    pub fn mark_dirty(&mut self, line: u64) -> bool {
        let (base, tag) = self.locate(line);
        match self.find(base, tag) {
            Some(way) => {
                self.lines[base + way].dirty = true;
                true
            }
            None => false,
        }
    }

    /// Drops `line` without writing it back. Returns whether it was resident.
    pub fn invalidate(&mut self, line: u64) -> bool {
        let (base, tag) = self.locate(line);
        match self.find(base, tag) {
            Some(way) => {
                let w = &mut self.lines[base + way];
                w.valid = false;
                w.dirty = false;
                true
            }
            None => false,
        }
    }

    pub fn valid_lines(&self) -> usize {
        self.lines.iter().filter(|w| w.valid).count()
    }

    /// Structural check: every set's ranks form a permutation of
    /// `0..ways` and no tag is resident twice.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = vec![false; self.ways];
        for (s, set) in self.lines.chunks(self.ways).enumerate() {
            seen.iter_mut().for_each(|b| *b = false);
            for w in set {
                let r = usize::from(w.rank);
                if r >= self.ways || seen[r] {
                    return Err(format!("set {s}: LRU ranks are not a permutation"));
                }
                seen[r] = true;
            }
            for (i, a) in set.iter().enumerate() {
                if a.valid && set[i + 1..].iter().any(|b| b.valid && b.tag == a.tag) {
                    return Err(format!("set {s}: tag {:#x} resident twice", a.tag));
                }
            }
        }
        Ok(())
    }
}
