//! Control messages exchanged between decoders and prefillers.

use crate::types::{MrDesc, NetAddr, Pages};
use crate::wire::{Reader, Wire, WireError, Writer};

/// Where the prefiller copies the request context (last hidden states,
/// logits) once the final chunk is done.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextTarget {
    pub desc: MrDesc,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillRequest {
    pub id: u64,
    pub tokens: u32,
    /// Chunked prefill: destination pages are split evenly and in order
    /// across this many chunks.
    pub chunks: u32,
    pub imm: u32,
    /// Transfers the decoder expects in total for `imm`, over all the
    /// prefillers serving this request.
    pub expected: u32,
    /// Bytes copied per page. Smaller than a page when the prefiller only
    /// holds a slice of the heads.
    pub page_len: u64,
    pub layer_stride: u64,
    /// Destination pages in layer 0; `offset` selects the head slice.
    pub pages: Pages,
    pub kv: MrDesc,
    pub context: Option<ContextTarget>,
    /// Decoder address for confirmations and heartbeats.
    pub reply: NetAddr,
}

impl PrefillRequest {
    /// Transfers one prefiller issues for this request.
    pub fn transfers(&self, layers: u32) -> u32 {
        layers * self.chunks + u32::from(self.context.is_some())
    }

    /// Positions (into `pages.indices`) of the pages belonging to `chunk`.
    pub fn chunk_range(&self, chunk: u32) -> std::ops::Range<usize> {
        let n = self.pages.indices.len();
        let c = self.chunks.max(1) as usize;
        let chunk = chunk as usize;
        chunk * n / c..(chunk + 1) * n / c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvMsg {
    Request(PrefillRequest),
    Cancel { id: u64 },
    CancelConfirm { id: u64 },
    Heartbeat { seq: u64 },
}

const REQUEST: u8 = 1;
const CANCEL: u8 = 2;
const CONFIRM: u8 = 3;
const HEARTBEAT: u8 = 4;

impl Wire for ContextTarget {
    fn encode_into(&self, w: &mut Writer) {
        w.put(&self.desc).u64(self.offset).u64(self.len);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self { desc: r.get()?, offset: r.u64()?, len: r.u64()? })
    }
}

impl Wire for PrefillRequest {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.id)
            .u32(self.tokens)
            .u32(self.chunks)
            .u32(self.imm)
            .u32(self.expected)
            .u64(self.page_len)
            .u64(self.layer_stride)
            .put(&self.pages)
            .put(&self.kv);
        match &self.context {
            Some(c) => w.u8(1).put(c),
            None => w.u8(0),
        };
        w.put(&self.reply);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let id = r.u64()?;
        let tokens = r.u32()?;
        let chunks = r.u32()?;
        let imm = r.u32()?;
        let expected = r.u32()?;
        let page_len = r.u64()?;
        let layer_stride = r.u64()?;
        let pages = r.get()?;
        let kv = r.get()?;
        let context = match r.u8()? {
            0 => None,
            1 => Some(r.get()?),
            _ => return Err(WireError::Invalid("context flag")),
        };
        let reply = r.get()?;
        if chunks == 0 {
            return Err(WireError::Invalid("zero chunks"));
        }
        Ok(Self { id, tokens, chunks, imm, expected, page_len, layer_stride, pages, kv, context, reply })
    }
}

impl Wire for KvMsg {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            KvMsg::Request(r) => w.u8(REQUEST).put(r),
            KvMsg::Cancel { id } => w.u8(CANCEL).u64(*id),
            KvMsg::CancelConfirm { id } => w.u8(CONFIRM).u64(*id),
            KvMsg::Heartbeat { seq } => w.u8(HEARTBEAT).u64(*seq),
        };
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            REQUEST => KvMsg::Request(r.get()?),
            CANCEL => KvMsg::Cancel { id: r.u64()? },
            CONFIRM => KvMsg::CancelConfirm { id: r.u64()? },
            HEARTBEAT => KvMsg::Heartbeat { seq: r.u64()? },
            _ => return Err(WireError::Invalid("kv message tag")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PrefillRequest {
        PrefillRequest {
            id: 0x0102_0304_0506_0708,
            tokens: 300,
            chunks: 4,
            imm: 0x1_0007,
            expected: 33,
            page_len: 4096,
            layer_stride: 1 << 20,
            pages: Pages { indices: vec![9, 3, 4], stride: 8192, offset: 4096 },
            kv: MrDesc { base: 0x1000, len: 8 << 20, rkeys: vec![(NetAddr::sim(1, 0), 77)] },
            context: Some(ContextTarget {
                desc: MrDesc { base: 0x9000, len: 512, rkeys: vec![(NetAddr::sim(1, 0), 78)] },
                offset: 0,
                len: 512,
            }),
            reply: NetAddr::sim(1, 0),
        }
    }

    #[test]
    fn messages_round_trip() {
        for m in [
            KvMsg::Request(sample()),
            KvMsg::Request(PrefillRequest { context: None, ..sample() }),
            KvMsg::Cancel { id: 5 },
            KvMsg::CancelConfirm { id: u64::MAX },
            KvMsg::Heartbeat { seq: 1 },
        ] {
            assert_eq!(KvMsg::decode(&m.encode()).unwrap(), m);
        }
    }

    #[test]
    fn cancel_layout_is_tag_then_id() {
        let b = KvMsg::Cancel { id: 0x0807_0605_0403_0201 }.encode();
        assert_eq!(b, [2, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn truncated_request_is_rejected() {
        let b = KvMsg::Request(sample()).encode();
        for n in 0..b.len() {
            assert!(KvMsg::decode(&b[..n]).is_err(), "prefix {n} accepted");
        }
    }

    #[test]
    fn transfer_counts() {
        let one_chunk = PrefillRequest { chunks: 1, ..sample() };
        assert_eq!(one_chunk.transfers(2), 3);
        assert_eq!(one_chunk.transfers(0), 1);
        assert_eq!(PrefillRequest { context: None, ..sample() }.transfers(8), 32);
    }

    #[test]
    fn chunks_cover_pages_in_order() {
        let r = PrefillRequest { pages: Pages { indices: (0..10).collect(), stride: 1, offset: 0 }, chunks: 4, ..sample() };
        let ranges: Vec<_> = (0..4).map(|c| r.chunk_range(c)).collect();
        assert_eq!(ranges, vec![0..2, 2..5, 5..7, 7..10]);
    }
}
