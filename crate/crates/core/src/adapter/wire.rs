//! Binary framing for the remote SUT protocol.
//!
//! Every frame is `u32 length | u8 type | body`, little-endian, where
//! `length` counts the type byte and the body.
//!
//! | type | frame  | body |
//! |------|--------|------|
//! | 0x01 | HELLO  | `u16 version, u16 sources, u64 epoch_unix_nanos` |
//! | 0x02 | PULL   | `u16 source, u32 max` |
//! | 0x03 | EVENTS | `u16 source, u32 n, n * event` |
//! | 0x04 | OUTPUT | `u8 query, payload, u64 max_event_time, u64 max_ingest_time` |
//! | 0x05 | EOS    | `u16 source` |
//! | 0x06 | BYE    | empty |
//!
//! An event is `u8 stream, u64 user_id, u64 gem_pack_id, u64 price_cents,
//! u64 event_time, u64 seq` (41 bytes). An aggregation payload is
//! `u64 gem_pack_id, u64 sum_cents, u64 count, i64 window_start`, a join
//! payload `u64 user_id, u64 gem_pack_id, u64 price_cents, i64 window_start`. Times are nanoseconds
//! since the experiment epoch.
//!
//! The SUT pulls: it sends PULL for a source and the driver answers with
//! EVENTS (possibly empty) or, once that queue is closed and drained, EOS.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::adapter::{OutputPayload, OutputRecord};
use crate::clock::Timestamp;
use crate::model::{Event, Price, Stream};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME_LEN: u32 = 64 << 20;
pub const EVENT_LEN: usize = 41;

const HELLO: u8 = 0x01;
const PULL: u8 = 0x02;
const EVENTS: u8 = 0x03;
const OUTPUT: u8 = 0x04;
const EOS: u8 = 0x05;
const BYE: u8 = 0x06;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("frame body truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame body")]
    Trailing(usize),
    #[error("invalid {what} code {code}")]
    BadCode { what: &'static str, code: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello { version: u16, sources: u16, epoch_unix_nanos: u64 },
    Pull { source: u16, max: u32 },
    Events { source: u16, events: Vec<Event> },
    Output(OutputRecord),
    Eos { source: u16 },
    Bye,
}

pub fn encode(frame: &Frame, out: &mut Vec<u8>) {
    let at = out.len();
    out.extend_from_slice(&[0; 4]);
    match frame {
        Frame::Hello { version, sources, epoch_unix_nanos } => {
            out.push(HELLO);
            out.extend_from_slice(&version.to_le_bytes());
            out.extend_from_slice(&sources.to_le_bytes());
            out.extend_from_slice(&epoch_unix_nanos.to_le_bytes());
        }
        Frame::Pull { source, max } => {
            out.push(PULL);
            out.extend_from_slice(&source.to_le_bytes());
            out.extend_from_slice(&max.to_le_bytes());
        }
        Frame::Events { source, events } => {
            out.push(EVENTS);
            out.extend_from_slice(&source.to_le_bytes());
            out.extend_from_slice(&(events.len() as u32).to_le_bytes());
            for e in events {
                out.push(e.stream.code());
                for v in [e.user_id, e.gem_pack_id, e.price.cents(), e.event_time.as_nanos(), e.seq] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Frame::Output(r) => {
            out.push(OUTPUT);
            match r.payload {
                OutputPayload::Agg { gem_pack_id, sum_price, count, window_start } => {
                    out.push(0);
                    out.extend_from_slice(&gem_pack_id.to_le_bytes());
                    out.extend_from_slice(&sum_price.cents().to_le_bytes());
                    out.extend_from_slice(&count.to_le_bytes());
                    out.extend_from_slice(&window_start.to_le_bytes());
                }
                OutputPayload::Join { user_id, gem_pack_id, price, window_start } => {
                    out.push(1);
                    out.extend_from_slice(&user_id.to_le_bytes());
                    out.extend_from_slice(&gem_pack_id.to_le_bytes());
                    out.extend_from_slice(&price.cents().to_le_bytes());
                    out.extend_from_slice(&window_start.to_le_bytes());
                }
            }
            out.extend_from_slice(&r.max_event_time.as_nanos().to_le_bytes());
            out.extend_from_slice(&r.max_ingest_time.as_nanos().to_le_bytes());
        }
        Frame::Eos { source } => {
            out.push(EOS);
            out.extend_from_slice(&source.to_le_bytes());
        }
        Frame::Bye => out.push(BYE),
    }
    let len = (out.len() - at - 4) as u32;
    out[at..at + 4].copy_from_slice(&len.to_le_bytes());
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let mut buf = Vec::new();
    encode(frame, &mut buf);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. A clean close between frames is [`WireError::Eof`].
pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Eof),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    decode(&body)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        if self.0.len() < N {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        self.take().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        self.take().map(u64::from_le_bytes)
    }

    fn i64(&mut self) -> Result<i64, WireError> {
        self.take().map(i64::from_le_bytes)
    }
}

/// Decodes a frame body (type byte onwards).
pub fn decode(body: &[u8]) -> Result<Frame, WireError> {
    let mut c = Cursor(body);
    let frame = match c.u8()? {
        HELLO => Frame::Hello { version: c.u16()?, sources: c.u16()?, epoch_unix_nanos: c.u64()? },
        PULL => Frame::Pull { source: c.u16()?, max: c.u32()? },
        EVENTS => {
            let source = c.u16()?;
            let n = c.u32()? as usize;
            if c.0.len() < n.saturating_mul(EVENT_LEN) {
                return Err(WireError::Truncated);
            }
            let mut events = Vec::with_capacity(n);
            for _ in 0..n {
                let code = c.u8()?;
                let stream = Stream::from_code(code).ok_or(WireError::BadCode { what: "stream", code })?;
                events.push(Event {
                    stream,
                    user_id: c.u64()?,
                    gem_pack_id: c.u64()?,
                    price: Price::from_cents(c.u64()?),
                    event_time: Timestamp::from_nanos(c.u64()?),
                    ingest_time: None,
                    seq: c.u64()?,
                });
            }
            Frame::Events { source, events }
        }
        OUTPUT => {
            let payload = match c.u8()? {
                0 => OutputPayload::Agg {
                    gem_pack_id: c.u64()?,
                    sum_price: Price::from_cents(c.u64()?),
                    count: c.u64()?,
                    window_start: c.i64()?,
                },
                1 => OutputPayload::Join {
                    user_id: c.u64()?,
                    gem_pack_id: c.u64()?,
                    price: Price::from_cents(c.u64()?),
                    window_start: c.i64()?,
                },
                code => return Err(WireError::BadCode { what: "query", code }),
            };
            Frame::Output(OutputRecord {
                payload,
                max_event_time: Timestamp::from_nanos(c.u64()?),
                max_ingest_time: Timestamp::from_nanos(c.u64()?),
                emission_time: None,
            })
        }
        EOS => Frame::Eos { source: c.u16()? },
        BYE => Frame::Bye,
        other => return Err(WireError::UnknownType(other)),
    };
    if !c.0.is_empty() {
        return Err(WireError::Trailing(c.0.len()));
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(frame: &Frame) -> Frame {
        let mut buf = Vec::new();
        encode(frame, &mut buf);
        read_frame(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn event_frame_layout() {
        let e = Event::purchase(7, 9, Price::from_cents(4200), Timestamp::from_secs(1), 3);
        let mut buf = Vec::new();
        encode(&Frame::Events { source: 1, events: vec![e] }, &mut buf);
        assert_eq!(buf.len(), 4 + 1 + 2 + 4 + EVENT_LEN);
        assert_eq!(&buf[..5], &[(1 + 2 + 4 + EVENT_LEN) as u8, 0, 0, 0, EVENTS]);
    }

    #[test]
    fn clean_close_and_garbage() {
        assert!(matches!(read_frame(&mut [].as_slice()), Err(WireError::Eof)));
        assert!(matches!(read_frame(&mut [1, 0, 0, 0, 0x7f].as_slice()), Err(WireError::UnknownType(0x7f))));
        assert!(matches!(read_frame(&mut [9, 0, 0, 0, PULL].as_slice()), Err(WireError::Truncated)));
        assert!(matches!(read_frame(&mut [0xff, 0xff, 0xff, 0xff].as_slice()), Err(WireError::TooLarge(_))));
        assert!(matches!(decode(&[BYE, 0]), Err(WireError::Trailing(1))));
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (any::<bool>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(
            |(ad, user_id, gem_pack_id, price, t, seq)| Event {
                stream: if ad { Stream::Ads } else { Stream::Purchases },
                user_id,
                gem_pack_id,
                price: Price::from_cents(price),
                event_time: Timestamp::from_nanos(t),
                ingest_time: None,
                seq,
            },
        )
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            (any::<u16>(), any::<u16>(), any::<u64>())
                .prop_map(|(version, sources, epoch_unix_nanos)| Frame::Hello { version, sources, epoch_unix_nanos }),
            (any::<u16>(), any::<u32>()).prop_map(|(source, max)| Frame::Pull { source, max }),
            (any::<u16>(), proptest::collection::vec(arb_event(), 0..20))
                .prop_map(|(source, events)| Frame::Events { source, events }),
            (any::<u64>(), any::<u64>(), any::<i64>(), any::<u64>(), any::<u64>()).prop_map(|(g, s, w, me, mi)| {
                Frame::Output(OutputRecord {
                    payload: OutputPayload::Agg { gem_pack_id: g, sum_price: Price::from_cents(s), count: g ^ s, window_start: w },
                    max_event_time: Timestamp::from_nanos(me),
                    max_ingest_time: Timestamp::from_nanos(mi),
                    emission_time: None,
                })
            }),
            (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<i64>()).prop_map(|(u, g, p, t, w)| {
                Frame::Output(OutputRecord {
                    payload: OutputPayload::Join { user_id: u, gem_pack_id: g, price: Price::from_cents(p), window_start: w },
                    max_event_time: Timestamp::from_nanos(t),
                    max_ingest_time: Timestamp::from_nanos(t ^ 1),
                    emission_time: None,
                })
            }),
            any::<u16>().prop_map(|source| Frame::Eos { source }),
            Just(Frame::Bye),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip(frame in arb_frame()) {
            prop_assert_eq!(round_trip(&frame), frame);
        }

        #[test]
        fn streams_of_frames_round_trip(frames in proptest::collection::vec(arb_frame(), 1..8)) {
            let mut buf = Vec::new();
            for f in &frames {
                encode(f, &mut buf);
            }
            let mut r = buf.as_slice();
            for f in &frames {
                prop_assert_eq!(&read_frame(&mut r).unwrap(), f);
            }
            prop_assert!(matches!(read_frame(&mut r), Err(WireError::Eof)));
        }
    }
}
