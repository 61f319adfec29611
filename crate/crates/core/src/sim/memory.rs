//! Page coloring and physical frame allocation.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("empty color mask cannot back guest memory")]
    EmptyMask,
    #[error("out of simulated physical memory for color {color}")]
    OutOfMemory { color: u32 },
}

/// Page color of a physical address: page number modulo the color count.
pub fn color_of(address: u64, page_bytes: u64, colors: u32) -> u32 {
    ((address / page_bytes) % u64::from(colors.max(1))) as u32
}

/// Hands out physical frames by color. Frames are never freed, so a frame
/// belongs to at most one guest.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    colors: u32,
    total_frames: u64,
    used: Vec<bool>,
    /// Lowest frame of each color that might still be free.
    cursor: Vec<u64>,
}

impl FrameAllocator {
    pub fn new(total_frames: u64, colors: u32) -> Self {
        let colors = colors.max(1);
        FrameAllocator {
            colors,
            total_frames,
            used: vec![false; total_frames as usize],
            cursor: (0..u64::from(colors)).collect(),
        }
    }

    fn take(&mut self, color: u32) -> Result<u64, MemError> {
        let stride = u64::from(self.colors);
        let mut f = self.cursor[color as usize];
        while f < self.total_frames && self.used[f as usize] {
            f += stride;
        }
        if f >= self.total_frames {
            return Err(MemError::OutOfMemory { color });
        }
        self.used[f as usize] = true;
        self.cursor[color as usize] = f + stride;
        Ok(f)
    }

    /// Allocates `pages` frames. Logical page `i` gets the lowest free frame
    /// of the `i mod k`-th color in `mask` (colors in ascending order).
    pub fn allocate(&mut self, pages: u64, mask: u64) -> Result<Vec<u64>, MemError> {
        let colors: Vec<u32> = (0..self.colors.min(64)).filter(|&c| mask >> c & 1 == 1).collect();
        if colors.is_empty() {
            return Err(MemError::EmptyMask);
        }
        (0..pages)
            .map(|i| self.take(colors[(i % colors.len() as u64) as usize]))
            .collect()
    }
}

/// Frames backing `size_bytes` of guest memory restricted to `mask`.
pub fn allocate_guest_memory(
    alloc: &mut FrameAllocator,
    size_bytes: u64,
    page_bytes: u64,
    mask: u64,
) -> Result<Vec<u64>, MemError> {
    alloc.allocate(size_bytes.div_ceil(page_bytes), mask)
}

/// Guest-physical to host-physical translation over allocated frames.
#[derive(Debug, Clone)]
pub struct GuestMemory {
    frames: Vec<u64>,
    page_bytes: u64,
}

impl GuestMemory {
    pub fn new(frames: Vec<u64>, page_bytes: u64) -> Self {
        GuestMemory { frames, page_bytes }
    }

    #[inline]
    pub fn translate(&self, addr: u64) -> u64 {
        let page = (addr / self.page_bytes) as usize;
        self.frames[page] * self.page_bytes + addr % self.page_bytes
    }

    pub fn frames(&self) -> &[u64] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [u64] {
        &mut self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_by_page_number() {
        assert_eq!(color_of(0, 4096, 8), 0);
        assert_eq!(color_of(0, 65536, 8), 0);
        assert_eq!(color_of(5 * 4096, 4096, 8), 5);
        assert_eq!(color_of(9 * 4096, 4096, 8), 1);
        assert_eq!(color_of(9 * 4096 + 4095, 4096, 8), 1);
    }

    #[test]
    fn single_color_allocation() {
        let mut a = FrameAllocator::new(1024, 8);
        assert_eq!(a.allocate(4, 0b0000_0001).unwrap(), vec![0, 8, 16, 24]);
    }

    #[test]
    fn full_mask_is_dense() {
        let mut a = FrameAllocator::new(1024, 8);
        assert_eq!(a.allocate(2, 0xFF).unwrap(), vec![0, 1]);
    }

    #[test]
    fn empty_mask_rejected() {
        let mut a = FrameAllocator::new(1024, 8);
        assert_eq!(a.allocate(1, 0), Err(MemError::EmptyMask));
    }

    #[test]
    fn guests_never_share_frames() {
        let mut a = FrameAllocator::new(64, 8);
        let v = a.allocate(4, 0b11).unwrap();
        assert_eq!(v, vec![0, 1, 8, 9]);
        let e = a.allocate(8, 0xFF).unwrap();
        assert_eq!(e, vec![16, 17, 2, 3, 4, 5, 6, 7]);
        assert!(v.iter().all(|f| !e.contains(f)));
    }

    #[test]
    fn runs_out() {
        let mut a = FrameAllocator::new(16, 8);
        assert!(a.allocate(2, 1).is_ok());
        assert_eq!(a.allocate(1, 1), Err(MemError::OutOfMemory { color: 0 }));
    }
}
