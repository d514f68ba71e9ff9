//! Host-memory stand-in for device (GPU) memory.
//!
//! A [`DeviceBuffer`] is what the application registers with the engine and
//! what transports write into directly. Storage is a slice of `AtomicU64`
//! words so a "NIC" thread writing a range while an application thread reads
//! another (or the same) range is well defined. Visibility of a completed
//! write is established by whatever event announced it (completion queue
//! push, flag store), exactly as with real RDMA.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

const WORD: usize = 8;

pub struct DeviceBuffer {
    words: Box<[AtomicU64]>,
    len: usize,
}

impl DeviceBuffer {
    /// Allocates a zeroed buffer of `len` bytes.
    pub fn new(len: usize) -> Arc<Self> {
        let n = len.div_ceil(WORD).max(1);
        let words = (0..n).map(|_| AtomicU64::new(0)).collect::<Vec<_>>();
        Arc::new(Self { words: words.into_boxed_slice(), len })
    }

    pub fn from_bytes(bytes: &[u8]) -> Arc<Self> {
        let buf = Self::new(bytes.len());
        buf.write(0, bytes);
        buf
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stable address of the first byte; used as the registration base.
    pub fn addr(&self) -> u64 {
        self.words.as_ptr() as u64
    }

    fn check(&self, offset: usize, len: usize) {
        assert!(offset.checked_add(len).is_some_and(|end| end <= self.len), "range {offset}+{len} outside buffer of {} bytes", self.len);
    }

    pub fn write(&self, offset: usize, src: &[u8]) {
        self.check(offset, src.len());
        let mut pos = offset;
        let mut rest = src;
        let head = pos % WORD;
        if head != 0 && !rest.is_empty() {
            let n = (WORD - head).min(rest.len());
            self.store_partial(pos / WORD, head, &rest[..n]);
            pos += n;
            rest = &rest[n..];
        }
        let mut word = pos / WORD;
        let mut chunks = rest.chunks_exact(WORD);
        for chunk in &mut chunks {
            let v = u64::from_le_bytes(chunk.try_into().unwrap());
            self.words[word].store(v, Ordering::Relaxed);
            word += 1;
        }
        let tail = chunks.remainder();
        if !tail.is_empty() {
            self.store_partial(word, 0, tail);
        }
    }

    fn store_partial(&self, word: usize, shift: usize, bytes: &[u8]) {
        let mut val = 0u64;
        let mut mask = 0u64;
        for (i, b) in bytes.iter().enumerate() {
            let sh = (shift + i) * 8;
            val |= (*b as u64) << sh;
            mask |= 0xffu64 << sh;
        }
        // Other bytes of the word may be written concurrently by a different
        // transfer; only replace ours.
        let _ = self.words[word].fetch_update(Ordering::Relaxed, Ordering::Relaxed, |old| Some((old & !mask) | val));
    }

    pub fn read(&self, offset: usize, dst: &mut [u8]) {
        self.check(offset, dst.len());
        let mut pos = offset;
        let mut out = &mut dst[..];
        let head = pos % WORD;
        if head != 0 && !out.is_empty() {
            let n = (WORD - head).min(out.len());
            let w = self.words[pos / WORD].load(Ordering::Relaxed).to_le_bytes();
            out[..n].copy_from_slice(&w[head..head + n]);
            pos += n;
            out = &mut out[n..];
        }
        let mut word = pos / WORD;
        let mut chunks = out.chunks_exact_mut(WORD);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.words[word].load(Ordering::Relaxed).to_le_bytes());
            word += 1;
        }
        let tail = chunks.into_remainder();
        if !tail.is_empty() {
            let w = self.words[word].load(Ordering::Relaxed).to_le_bytes();
            let n = tail.len();
            tail.copy_from_slice(&w[..n]);
        }
    }

    pub fn read_vec(&self, offset: usize, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.read(offset, &mut v);
        v
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.read_vec(0, self.len)
    }

    pub fn fill(&self, byte: u8) {
        let v = u64::from_ne_bytes([byte; WORD]);
        for w in self.words.iter() {
            w.store(v, Ordering::Relaxed);
        }
    }

    /// Copies `len` bytes from `self[src_off..]` into `dst[dst_off..]`.
    pub fn copy_to(&self, src_off: usize, dst: &DeviceBuffer, dst_off: usize, len: usize) {
        let mut tmp = vec![0u8; len.min(1 << 16)];
        let mut done = 0;
        while done < len {
            let n = (len - done).min(tmp.len());
            self.read(src_off + done, &mut tmp[..n]);
            dst.write(dst_off + done, &tmp[..n]);
            done += n;
        }
    }

    pub fn read_u32(&self, offset: usize) -> u32 {
        let mut b = [0u8; 4];
        self.read(offset, &mut b);
        u32::from_le_bytes(b)
    }

    pub fn write_u32(&self, offset: usize, v: u32) {
        self.write(offset, &v.to_le_bytes());
    }
}

impl fmt::Debug for DeviceBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceBuffer").field("addr", &format_args!("{:#x}", self.addr())).field("len", &self.len).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_length_buffer() {
        let b = DeviceBuffer::new(0);
        assert!(b.is_empty());
        assert!(b.to_vec().is_empty());
        b.write(0, &[]);
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_write_panics() {
        DeviceBuffer::new(10).write(8, &[0; 3]);
    }

    proptest! {
        #[test]
        fn unaligned_writes_match_a_plain_vec(
            len in 1usize..200,
            ops in proptest::collection::vec((0usize..200, proptest::collection::vec(any::<u8>(), 0..40)), 1..20),
        ) {
            let buf = DeviceBuffer::new(len);
            let mut model = vec![0u8; len];
            for (off, data) in ops {
                let off = off % len;
                let n = data.len().min(len - off);
                buf.write(off, &data[..n]);
                model[off..off + n].copy_from_slice(&data[..n]);
            }
            prop_assert_eq!(buf.to_vec(), model.clone());
            let a = len / 3;
            prop_assert_eq!(buf.read_vec(a, len - a), model[a..].to_vec());
        }
    }
}
