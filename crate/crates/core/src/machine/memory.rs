use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagePermissions {
    pub readable: bool,
    pub writable: bool,
    pub executable: bool,
}

impl PagePermissions {
    pub const RX: PagePermissions = PagePermissions {
        readable: true,
        writable: false,
        executable: true,
    };
    pub const RW: PagePermissions = PagePermissions {
        readable: true,
        writable: true,
        executable: false,
    };
    pub const R: PagePermissions = PagePermissions {
        readable: true,
        writable: false,
        executable: false,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Page {
    perms: PagePermissions,
    bytes: Box<[u8]>,
}

/// Sparse byte-addressed memory made of 4 KiB pages. Unmapped pages are
/// neither readable nor writable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    pages: BTreeMap<u32, Page>,
}

pub fn page_of(addr: u32) -> u32 {
    addr / PAGE_SIZE
}

pub fn page_floor(addr: u32) -> u32 {
    addr & !(PAGE_SIZE - 1)
}

pub fn page_ceil(addr: u32) -> u32 {
    page_floor(addr.saturating_add(PAGE_SIZE - 1))
}

impl Memory {
    /// Maps `[start, end)` (page-aligned) with the given permissions.
    pub fn map(&mut self, start: u32, end: u32, perms: PagePermissions) {
        for page in page_of(start)..page_of(end) {
            self.pages.insert(
                page,
                Page {
                    perms,
                    bytes: vec![0u8; PAGE_SIZE as usize].into_boxed_slice(),
                },
            );
        }
    }

    pub fn permissions(&self, addr: u32) -> Option<PagePermissions> {
        self.pages.get(&page_of(addr)).map(|p| p.perms)
    }

    pub fn mapped_pages(&self) -> impl Iterator<Item = (u32, PagePermissions)> + '_ {
        self.pages.iter().map(|(n, p)| (n * PAGE_SIZE, p.perms))
    }

    pub fn read_u8(&self, addr: u32) -> Option<u8> {
        let page = self.pages.get(&page_of(addr))?;
        Some(page.bytes[(addr % PAGE_SIZE) as usize])
    }

    pub fn read(&self, addr: u32, width: u32) -> Option<u32> {
        let mut v = 0u32;
        for i in 0..width {
            v |= (self.read_u8(addr.wrapping_add(i))? as u32) << (8 * i);
        }
        Some(v)
    }

    /// Writes without any permission check. Callers enforce protection.
    pub fn write_unchecked(&mut self, addr: u32, width: u32, value: u32) -> bool {
        for i in 0..width {
            let a = addr.wrapping_add(i);
            match self.pages.get_mut(&page_of(a)) {
                Some(page) => page.bytes[(a % PAGE_SIZE) as usize] = (value >> (8 * i)) as u8,
                None => return false,
            }
        }
        true
    }

    pub fn write_bytes_unchecked(&mut self, addr: u32, bytes: &[u8]) -> bool {
        bytes
            .iter()
            .enumerate()
            .all(|(i, b)| self.write_unchecked(addr.wrapping_add(i as u32), 1, *b as u32))
    }

    pub fn page_bytes(&self, page_addr: u32) -> Option<&[u8]> {
        self.pages.get(&page_of(page_addr)).map(|p| &p.bytes[..])
    }

    /// FNV-1a over the contents of the selected pages, in address order.
    pub fn checksum_where(&self, mut select: impl FnMut(u32, PagePermissions) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (n, page) in &self.pages {
            if !select(n * PAGE_SIZE, page.perms) {
                continue;
            }
            for b in n.to_le_bytes().iter().chain(page.bytes.iter()) {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_, _| true)
    }
}
